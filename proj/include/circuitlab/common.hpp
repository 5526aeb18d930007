#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, hashing, parallel_for.
//
// Determinism contract for the whole library: every public entry point is a
// pure function of (inputs, config, seed). Randomness flows only through Rng,
// which hand-rolls its distributions on top of mt19937_64 so that results do
// not depend on the standard library's unspecified distribution algorithms.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>
#include <random>

namespace circuitlab {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kCheckpointFormatVersion = "circuitlab-ckpt-v1";
inline constexpr const char* kDatasetFormatVersion = "circuitlab-data-v1";
inline constexpr const char* kCircuitFormatVersion = "circuitlab-circuit-v1";
inline constexpr const char* kArtifactFormatVersion = "circuitlab-featurizer-v1";

// ===== errors ===============================================================
//
// ValidationError: malformed config/file/argument (CLI exit code 2).
// NumericError: non-finite values, divergent training (CLI exit code 3).
// GuardrailError: a result-quality gate failed, e.g. the control-task
//   guardrail on featurizer training (CLI exit code 4).

struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct GuardrailError : std::runtime_error {
  explicit GuardrailError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

// ===== deterministic rng ====================================================

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits; independent of std distributions.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; second value cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Avoid log(0).
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Uniform integer in [0, n). Rejection-free modulo is fine at desk scale;
  // bias over a 64-bit range is negligible but we reject to keep it exact.
  uint64_t below(uint64_t n) {
    if (n == 0) throw ValidationError("Rng::below: n must be positive");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  int below_int(int n) { return static_cast<int>(below(static_cast<uint64_t>(n))); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates with our own index draws.
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  template <typename T>
  const T& pick(const std::vector<T>& v) {
    require(!v.empty(), "Rng::pick: empty pool");
    return v[below(v.size())];
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ===== hashing / fingerprints ==============================================

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 1469598103934665603ull) {
  return fnv1a64(s.data(), s.size(), h);
}

inline uint64_t fnv1a64(const std::vector<double>& v, uint64_t h = 1469598103934665603ull) {
  return fnv1a64(v.data(), v.size() * sizeof(double), h);
}

inline uint64_t fnv1a64(const std::vector<int>& v, uint64_t h = 1469598103934665603ull) {
  return fnv1a64(v.data(), v.size() * sizeof(int), h);
}

inline std::string hex64(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

// ===== parallel_for =========================================================
//
// Deterministic data-parallel map: the body writes only to its own index i;
// any reduction over results must happen afterwards, sequentially, in index
// order. With jobs <= 1 runs inline. Exceptions from workers are rethrown
// (first by index order, so failures are reproducible regardless of timing).

inline void parallel_for(size_t n, int jobs, const std::function<void(size_t)>& body) {
  if (n == 0) return;
  if (jobs <= 1 || n == 1) {
    for (size_t i = 0; i < n; ++i) body(i);
    return;
  }
  size_t workers = std::min<size_t>(static_cast<size_t>(jobs), n);
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::atomic<size_t> next{0};
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          body(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
  }
}

// ===== misc helpers =========================================================

inline bool is_finite(double x) { return std::isfinite(x); }

inline std::string join_path(const std::string& a, const std::string& b) {
  if (a.empty()) return b;
  if (a.back() == '/') return a + b;
  return a + "/" + b;
}

template <typename T>
std::string str(const T& v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace circuitlab
