#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <thread>
#include <vector>

namespace posesynth {

constexpr double kPi = 3.14159265358979323846;

inline double deg_to_rad(double deg) { return deg * kPi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / kPi; }

// splitmix64; used both as a standalone mixer and to derive child seeds.
inline uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Deterministic random stream. Gaussian draws use Box-Muller with no
// cached state, so a stream's output is a pure function of the seed and
// the call sequence.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix64(seed ^ 0xA5A5A5A5DEADBEEFull)) {}

  uint64_t raw() {
    state_ = state_ * 6364136223846793005ull + 1442695040888963407ull;
    uint64_t x = state_;
    x ^= x >> 33;
    x *= 0xFF51AFD7ED558CCDull;
    x ^= x >> 33;
    x *= 0xC4CEB9FE1A85EC53ull;
    x ^= x >> 33;
    return x;
  }

  // [0, 1)
  double uniform() { return double(raw() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive range
  int uniform_int(int lo, int hi) {
    return lo + int(raw() % uint64_t(hi - lo + 1));
  }

  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double normal(double sigma) { return sigma == 0.0 ? 0.0 : sigma * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = raw() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

  // Child seed for an independent stream, e.g. derive(seed, {epoch, query}).
  static uint64_t derive(uint64_t seed, std::initializer_list<uint64_t> path) {
    uint64_t h = mix64(seed);
    for (uint64_t v : path) h = mix64(h ^ (v + 0x9E3779B97F4A7C15ull));
    return h;
  }

 private:
  uint64_t state_;
};

// Lower-median convention: even counts take the lower of the two middles.
inline double median_lower(std::vector<double> v) {
  if (v.empty()) return 0.0;
  size_t idx = (v.size() - 1) / 2;
  std::nth_element(v.begin(), v.begin() + idx, v.end());
  return v[idx];
}

// Static-partition parallel loop. threads <= 1 runs inline; results must be
// written by index so the output is identical for any thread count.
template <typename Fn>
void parallel_for(size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  size_t t = std::min<size_t>(size_t(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(t);
  for (size_t w = 0; w < t; ++w) {
    size_t lo = n * w / t, hi = n * (w + 1) / t;
    pool.emplace_back([lo, hi, &fn] {
      for (size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

// Log levels selected via the POSESYNTH_LOG env var: error, warn, info, debug.
enum class LogLevel { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

LogLevel log_level();
void log_message(LogLevel level, const std::string& msg);

inline void log_info(const std::string& msg) { log_message(LogLevel::kInfo, msg); }
inline void log_warn(const std::string& msg) { log_message(LogLevel::kWarn, msg); }
inline void log_debug(const std::string& msg) { log_message(LogLevel::kDebug, msg); }

}  // namespace posesynth
