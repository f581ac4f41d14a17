#pragma once

// Binary model checkpoint. Layout: magic + version, encoder config, relation
// names in id order, then named tensors as little-endian float32 with explicit
// dims. Writing and re-reading a model reproduces every byte of every tensor.

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mxe/encoder.hpp"
#include "mxe/util.hpp"

namespace mxe {

constexpr char kCheckpointMagic[4] = {'M', 'X', 'C', 'K'};
constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  EncoderParams<float> params;
  RelationPriorTable<float> priors;
  std::vector<std::string> relation_names;

  RelationKind relation(const std::string& name) const {
    for (uint32_t i = 0; i < relation_names.size(); ++i)
      if (relation_names[i] == name) return {i, name};
    std::string avail;
    for (const auto& r : relation_names) avail += (avail.empty() ? "" : ", ") + r;
    throw std::invalid_argument("unknown relation '" + name + "' (available: " + avail + ")");
  }
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 24) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  static_assert(sizeof(float) == 4);
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, uint32_t(s.size()));
  out.append(s);
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    check_io(pos + n <= buf.size(), "checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = uint32_t(uint8_t(buf[pos])) | uint32_t(uint8_t(buf[pos + 1])) << 8 |
                 uint32_t(uint8_t(buf[pos + 2])) << 16 | uint32_t(uint8_t(buf[pos + 3])) << 24;
    pos += 4;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline std::string serialize_checkpoint(const EncoderParams<float>& params,
                                        const RelationPriorTable<float>& priors,
                                        const std::vector<std::string>& relation_names) {
  using detail::put_f32;
  using detail::put_str;
  using detail::put_u32;
  const EncoderConfig& c = params.config;
  check_arg(priors.tied == c.tied_priors, "checkpoint: prior table does not match config");
  check_arg(priors.n_relations == relation_names.size(),
            "checkpoint: relation name count does not match prior table");

  std::string out;
  out.append(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, uint32_t(c.layers));
  put_u32(out, uint32_t(c.hidden));
  put_u32(out, uint32_t(c.heads));
  put_u32(out, uint32_t(c.ffn));
  put_u32(out, uint32_t(c.max_positions));
  put_u32(out, uint32_t(c.prior_tokens));
  put_u32(out, uint32_t(c.max_len));
  put_f32(out, c.dropout);
  put_u32(out, uint32_t(c.prior_init));
  put_u32(out, c.tied_priors ? 1 : 0);
  put_u32(out, uint32_t(params.vocab_rows));
  put_u32(out, uint32_t(relation_names.size()));
  for (const auto& name : relation_names) put_str(out, name);

  auto& mut_params = const_cast<EncoderParams<float>&>(params);
  auto& mut_groups = const_cast<std::vector<Mat<float>>&>(priors.groups);
  auto refs = collect_tensors(mut_params, &mut_groups);
  put_u32(out, uint32_t(refs.size()));
  for (const auto& r : refs) {
    put_str(out, r.name);
    put_u32(out, uint32_t(r.dims.size()));
    for (uint32_t dim : r.dims) put_u32(out, dim);
    for (size_t i = 0; i < r.size; ++i) put_f32(out, r.data[i]);
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  detail::ByteReader in{bytes};
  in.need(4);
  check_io(std::memcmp(bytes.data(), kCheckpointMagic, 4) == 0,
           "not a model checkpoint (bad magic)");
  in.pos = 4;
  uint32_t version = in.u32();
  check_io(version == kCheckpointVersion,
           "unsupported checkpoint version " + std::to_string(version));

  EncoderConfig c;
  c.layers = int(in.u32());
  c.hidden = int(in.u32());
  c.heads = int(in.u32());
  c.ffn = int(in.u32());
  c.max_positions = int(in.u32());
  c.prior_tokens = int(in.u32());
  c.max_len = int(in.u32());
  c.dropout = in.f32();
  uint32_t init_raw = in.u32();
  check_io(init_raw <= uint32_t(PriorInit::word), "checkpoint: bad prior init tag");
  c.prior_init = PriorInit(init_raw);
  c.tied_priors = in.u32() != 0;
  c.validate();
  uint32_t vocab_rows = in.u32();
  check_io(vocab_rows >= 3, "checkpoint: vocabulary too small");

  Checkpoint ck;
  uint32_t n_rel = in.u32();
  check_io(n_rel >= 1, "checkpoint: no relations");
  for (uint32_t i = 0; i < n_rel; ++i) ck.relation_names.push_back(in.str());

  // allocate the exact parameter shapes, then fill tensors by name
  ck.params.config = c;
  ck.params.vocab_rows = int(vocab_rows);
  ck.params.tok_emb.resize(vocab_rows, c.hidden);
  ck.params.pos_emb.resize(c.max_positions, c.hidden);
  ck.params.layers.resize(size_t(c.layers));
  for (auto& l : ck.params.layers) {
    l.wq.resize(c.hidden, c.hidden); l.bq.resize(c.hidden);
    l.wk.resize(c.hidden, c.hidden); l.bk.resize(c.hidden);
    l.wv.resize(c.hidden, c.hidden); l.bv.resize(c.hidden);
    l.wo.resize(c.hidden, c.hidden); l.bo.resize(c.hidden);
    l.w1.resize(c.hidden, c.ffn); l.b1.resize(c.ffn);
    l.w2.resize(c.ffn, c.hidden); l.b2.resize(c.hidden);
    l.ln1_g.resize(c.hidden); l.ln1_b.resize(c.hidden);
    l.ln2_g.resize(c.hidden); l.ln2_b.resize(c.hidden);
  }
  ck.params.lnf_g.resize(c.hidden);
  ck.params.lnf_b.resize(c.hidden);
  ck.priors.tied = c.tied_priors;
  ck.priors.n_relations = n_rel;
  ck.priors.init_mode = c.prior_init;
  size_t n_groups = c.tied_priors ? 1 : n_rel;
  for (size_t g = 0; g < n_groups; ++g)
    ck.priors.groups.emplace_back(c.prior_tokens, c.hidden);

  auto refs = collect_tensors(ck.params, &ck.priors.groups);
  std::map<std::string, size_t> by_name;
  for (size_t i = 0; i < refs.size(); ++i) by_name[refs[i].name] = i;

  uint32_t n_tensors = in.u32();
  check_io(n_tensors == refs.size(), "checkpoint: tensor count mismatch");
  std::vector<bool> seen(refs.size(), false);
  for (uint32_t t = 0; t < n_tensors; ++t) {
    std::string name = in.str();
    auto it = by_name.find(name);
    check_io(it != by_name.end(), "checkpoint: unknown tensor '" + name + "'");
    check_io(!seen[it->second], "checkpoint: duplicate tensor '" + name + "'");
    seen[it->second] = true;
    auto& ref = refs[it->second];
    uint32_t rank = in.u32();
    check_io(rank == ref.dims.size(), "checkpoint: rank mismatch for '" + name + "'");
    for (uint32_t k = 0; k < rank; ++k)
      check_io(in.u32() == ref.dims[k], "checkpoint: shape mismatch for '" + name + "'");
    for (size_t i = 0; i < ref.size; ++i) ref.data[i] = in.f32();
  }
  check_io(in.pos == bytes.size(), "checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const EncoderParams<float>& params,
                            const RelationPriorTable<float>& priors,
                            const std::vector<std::string>& relation_names) {
  std::string bytes = serialize_checkpoint(params, priors, relation_names);
  std::ofstream f(path, std::ios::binary);
  check_io(bool(f), "cannot open '" + path + "' for writing");
  f.write(bytes.data(), std::streamsize(bytes.size()));
  check_io(bool(f), "write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check_io(bool(f), "cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace mxe
