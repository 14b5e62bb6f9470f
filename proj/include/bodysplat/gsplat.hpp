#pragma once

#include "bodysplat/geometry.hpp"

namespace bodysplat {

// One Gaussian primitive carries 14 attributes: position 3, rotation
// quaternion 4 (w,x,y,z), scale 3, rgb color 3, opacity 1.
struct GaussianSet {
  MatX positions;  // N x 3
  MatX rotations;  // N x 4, unit quaternions
  MatX scales;     // N x 3, in [s_min, s_max]
  MatX colors;     // N x 3, in [0,1]
  VecX opacities;  // N, in [0,1]

  int size() const { return static_cast<int>(positions.rows()); }
  void validate(Scalar s_min, Scalar s_max) const;
};

inline constexpr Scalar kDefaultScaleMin = 1e-4;
inline constexpr Scalar kDefaultScaleMax = 0.5;

// World-space covariance R(q) diag(s^2) R(q)^T. Throws on a zero quaternion.
Mat3 covariance_from(const Vec4& quat, const Vec3& scale);

// Compositing contract shared by the tiled renderer and the oracle:
//  - splats with camera depth <= 1e-6 are culled;
//  - alpha = opacity * exp(-d2/2) with d2 the screen Mahalanobis distance,
//    truncated to 0 when d2 > 9 (3-sigma ellipse) or alpha < 1/255;
//  - front-to-back order by (depth, index); once transmittance drops below
//    1e-4 the remaining splats contribute nothing;
//  - the 2D covariance gets a 0.3 px^2 diagonal low-pass dilation.
struct RenderSettings {
  Vec3 background = Vec3::Zero();
  int tile_size = 16;
};

inline constexpr Scalar kAlphaMin = 1.0 / 255.0;
inline constexpr Scalar kMaxMahalanobisSq = 9.0;
inline constexpr Scalar kTransmittanceMin = 1e-4;
inline constexpr Scalar kLowPassDilation = 0.3;

struct RenderOutput {
  Image color;                // h x w x 3
  std::vector<Scalar> alpha;  // h x w, = 1 - final transmittance
};

// Tile-binned front-to-back rasterization.
RenderOutput render(const GaussianSet& g, const CameraView& cam,
                    const RenderSettings& settings = {});

// Same contract, computed as a naive per-pixel loop over every Gaussian in
// depth order: no tiling, no per-splat screen bounds. Verification route.
RenderOutput render_oracle(const GaussianSet& g, const CameraView& cam,
                           const RenderSettings& settings = {});

struct GaussianGrads {
  MatX positions, rotations, scales, colors;
  VecX opacities;

  explicit GaussianGrads(int n)
      : positions(MatX::Zero(n, 3)),
        rotations(MatX::Zero(n, 4)),
        scales(MatX::Zero(n, 3)),
        colors(MatX::Zero(n, 3)),
        opacities(VecX::Zero(n)) {}
};

// Analytic reverse-mode gradients of loss = <upstream_color, color image> +
// <upstream_alpha, alpha image> w.r.t. every Gaussian attribute. Quaternion
// gradients live in the tangent space of the unit sphere.
// upstream_alpha may be null.
GaussianGrads render_backward(const GaussianSet& g, const CameraView& cam,
                              const Image& upstream_color,
                              const std::vector<Scalar>* upstream_alpha = nullptr,
                              const RenderSettings& settings = {});

// Binary little-endian point-cloud export with exactly the 14 de-facto
// property columns (x y z f_dc_0..2 opacity scale_0..2 rot_0..3); opacity is
// stored as a logit, scales as logs, colors as SH DC coefficients.
void export_splats(const std::string& path, const GaussianSet& g);
GaussianSet import_splats(const std::string& path);

}  // namespace bodysplat
