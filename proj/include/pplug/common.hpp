#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pplug {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Deterministic RNG used everywhere. Gaussian sampling is hand-rolled
// (Box-Muller without caching) so streams are identical across standard
// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform() {
    // 53-bit mantissa uniform in [0, 1).
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n == 0");
    // Rejection sampling for an unbiased draw.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = gen_();
    while (v >= limit) v = gen_();
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (!is) throw std::runtime_error("Rng::deserialize: bad state string");
  }

 private:
  std::mt19937_64 gen_;
};

// splitmix64, used for stable content-independent hashing of small integers.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a over raw bytes; parameter digests hash the float32 wire encoding
// so in-memory and checkpointed parameters agree.
class Fnv1a {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update_f32(const double* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      float f = static_cast<float>(data[i]);
      update(&f, sizeof(f));
    }
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

// tanh-approximation GELU, shared by the transformer FFN and the projector.
inline double gelu(double u) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  double s = c * (u + a * u * u * u);
  return 0.5 * u * (1.0 + std::tanh(s));
}

inline double gelu_grad(double u) {
  constexpr double c = 0.7978845608028654;
  constexpr double a = 0.044715;
  double s = c * (u + a * u * u * u);
  double t = std::tanh(s);
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * c * (1.0 + 3.0 * a * u * u);
}

inline double round_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

inline void round_f32_inplace(Matrix& m) {
  double* p = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) p[i] = round_f32(p[i]);
}

inline void round_f32_inplace(Vector& v) {
  double* p = v.data();
  for (Eigen::Index i = 0; i < v.size(); ++i) p[i] = round_f32(p[i]);
}

}  // namespace pplug
