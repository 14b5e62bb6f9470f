#pragma once

#include <cstdint>
#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Dense>

namespace bodysplat {

using Scalar = double;
using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

// Error taxonomy, mirrored by CLI exit codes: schema/input -> 2,
// config mismatch -> 3, numeric failure -> 4.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct schema_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct config_mismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major (y, x, c) grid. Used for latent feature maps and images.
struct Grid3 {
  int h = 0, w = 0, c = 0;
  std::vector<Scalar> data;

  Grid3() = default;
  Grid3(int h_, int w_, int c_, Scalar fill = 0.0)
      : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, fill) {}

  Scalar& at(int y, int x, int ch) {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  Scalar at(int y, int x, int ch) const {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  size_t size() const { return data.size(); }
  bool same_shape(const Grid3& o) const { return h == o.h && w == o.w && c == o.c; }
};

using Image = Grid3;  // images are h x w x 3 in [0,1]

// Deterministic RNG. mt19937_64 has a pinned sequence; the float mappings
// below avoid std::*_distribution, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return state_(); }

  // uniform in [0,1)
  Scalar uniform() {
    return static_cast<Scalar>(state_() >> 11) * 0x1.0p-53;
  }
  Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller (stateless pairs, deterministic)
  Scalar normal() {
    Scalar u1 = uniform();
    Scalar u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  int uniform_int(int lo, int hi_inclusive) {
    const uint64_t span = static_cast<uint64_t>(hi_inclusive - lo) + 1;
    return lo + static_cast<int>(state_() % span);
  }

 private:
  std::mt19937_64 state_;
};

inline bool all_finite(const Scalar* p, size_t n) {
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

inline Scalar sigmoid(Scalar x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace bodysplat
