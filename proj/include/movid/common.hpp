#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace movid {

// ---------------------------------------------------------------------------
// Error types
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error { using Error::Error; };
struct NonPositiveDepth : Error { using Error::Error; };
struct DegenerateBatch : Error { using Error::Error; };
struct NonNormalizedInput : Error { using Error::Error; };
struct EmptyPrototypes : Error { using Error::Error; };
struct InsufficientViews : Error { using Error::Error; };
struct DegenerateConfiguration : Error { using Error::Error; };
struct TooShort : Error { using Error::Error; };
struct NaNLoss : Error { using Error::Error; };
struct ConfigParseError : Error { using Error::Error; };
struct CheckpointShapeMismatch : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct InvalidArg : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// 3-vector
// ---------------------------------------------------------------------------

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

// ---------------------------------------------------------------------------
// Counter-based splittable RNG.
// Stateless: every draw is keyed on structural indices, so parallel or
// out-of-order generation produces identical streams.
// ---------------------------------------------------------------------------

class CounterRng {
 public:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static uint64_t key(uint64_t seed, uint64_t a = 0, uint64_t b = 0,
                      uint64_t c = 0, uint64_t d = 0) {
    uint64_t k = mix(seed);
    k = mix(k ^ (a + 0x100000001b3ull));
    k = mix(k ^ (b + 0x100000001b3ull));
    k = mix(k ^ (c + 0x100000001b3ull));
    k = mix(k ^ (d + 0x100000001b3ull));
    return k;
  }

  // Uniform in [0, 1).
  static double uniform(uint64_t k) {
    return static_cast<double>(mix(k) >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller on two decorrelated sub-keys.
  static double gaussian(uint64_t k) {
    const double u1 = uniform(mix(k ^ 0x5851f42d4c957f2dull));
    const double u2 = uniform(mix(k ^ 0x14057b7ef767814full));
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return r * std::cos(2.0 * M_PI * u2);
  }
};

// ---------------------------------------------------------------------------
// Content hashing (FNV-1a 64) for run manifests
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Decimal with 17 significant digits; round-trips binary64 exactly.
inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Worker count: MOVID_THREADS caps the pool, default all available cores.
// ---------------------------------------------------------------------------

inline int worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (const char* env = std::getenv("MOVID_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1 && v < static_cast<long>(hw)) return static_cast<int>(v);
    if (v >= static_cast<long>(hw)) return static_cast<int>(hw);
  }
  return static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n). Results must be written to index-addressed
// storage; the reduction order is the caller's responsibility.
template <typename Fn>
void parallel_for(int n, Fn&& fn, int workers = -1) {
  if (workers <= 0) workers = worker_count();
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::atomic<int> next{0};
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace movid
