#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lj {

// ---------------------------------------------------------------------------
// Errors. Each kind maps to a process exit code (usage=1, config=2, runtime=3).
// ---------------------------------------------------------------------------

enum class ErrorKind { usage = 1, config = 2, runtime = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(ErrorKind::usage, msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(ErrorKind::config, msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(ErrorKind::runtime, msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(ErrorKind::runtime, msg) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& msg) : Error(ErrorKind::runtime, msg) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& msg) : Error(ErrorKind::runtime, msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(ErrorKind::runtime, msg) {}
};

// ---------------------------------------------------------------------------
// Seeded RNG. All sampling goes through this wrapper so that corpora, weight
// initialization and batch orders are bit-reproducible for a given seed.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller (cosine branch only; keeps the stream
  // independent of libstdc++'s unspecified distribution algorithms)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // uniform integer in [lo, hi] inclusive
  std::int64_t randint(std::int64_t lo, std::int64_t hi) {
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t v = eng_();
    while (v >= limit) v = eng_();
    return lo + static_cast<std::int64_t>(v % span);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(randint(0, i))]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

// FNV-1a over bytes; used for seed derivation and parameter-group checksums.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic sub-seed for a named stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  return mix64(base ^ fnv1a64(tag));
}

// ---------------------------------------------------------------------------
// Tensor-buffer accounting, used by the efficiency benchmark to report a
// peak-memory high-water mark.
// ---------------------------------------------------------------------------

struct MemStats {
  static std::atomic<std::int64_t>& current_bytes() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static std::atomic<std::int64_t>& peak_bytes() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static void add(std::int64_t bytes) {
    std::int64_t cur = current_bytes().fetch_add(bytes) + bytes;
    std::int64_t peak = peak_bytes().load();
    while (cur > peak && !peak_bytes().compare_exchange_weak(peak, cur)) {
    }
  }
  static void sub(std::int64_t bytes) { current_bytes().fetch_sub(bytes); }
  static void reset_peak() { peak_bytes().store(current_bytes().load()); }
};

}  // namespace lj
