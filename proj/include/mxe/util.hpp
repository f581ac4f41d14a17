#pragma once

// Shared plumbing: deterministic RNG, seed derivation, error checks, file and
// number-format helpers. Everything downstream assumes these are bit-stable
// across runs and platforms, so random draws avoid std::*_distribution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mxe {

inline void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline void check_io(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed plus stream tags.
inline uint64_t mix_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
  return splitmix64(splitmix64(base ^ 0x6d9f0c8e3ab1f24dULL) ^ splitmix64(a) ^ (splitmix64(b) << 1));
}

// mt19937_64 core with hand-rolled uniform/normal so the draw sequence is a
// pure function of the seed, independent of standard-library internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n), rejection sampled so every value is equally likely
  uint64_t below(uint64_t n) {
    check_arg(n > 0, "Rng::below: n must be positive");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // standard normal via Box-Muller (two draws per value, cosine branch only)
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // partial Fisher-Yates: permutes the first `count` entries of `items`
  template <class T>
  void shuffle_prefix(std::vector<T>& items, size_t count) {
    check_arg(count <= items.size(), "Rng::shuffle_prefix: count exceeds size");
    for (size_t i = 0; i < count; ++i) {
      size_t j = i + size_t(below(items.size() - i));
      std::swap(items[i], items[j]);
    }
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    if (!items.empty()) shuffle_prefix(items, items.size() - 1);
  }

 private:
  std::mt19937_64 gen_;
};

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == delim) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check_io(in.good(), "cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline uint64_t parse_u64(const std::string& s, const std::string& what) {
  check_arg(!s.empty() && s.find_first_not_of("0123456789") == std::string::npos,
            what + ": not an unsigned integer: '" + s + "'");
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw std::invalid_argument(what + ": integer out of range: '" + s + "'");
  }
}

inline double parse_f64(const std::string& s, const std::string& what) {
  try {
    size_t used = 0;
    double v = std::stod(s, &used);
    check_arg(used == s.size() && std::isfinite(v), what + ": not a finite real: '" + s + "'");
    return v;
  } catch (const std::invalid_argument&) {
    throw std::invalid_argument(what + ": not a finite real: '" + s + "'");
  } catch (const std::out_of_range&) {
    throw std::invalid_argument(what + ": real out of range: '" + s + "'");
  }
}

// fixed 6 fractional digits, used by every tabular text format
inline std::string format_fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// 9 significant digits, round-trips float32 exactly
inline std::string format_sig9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace mxe
