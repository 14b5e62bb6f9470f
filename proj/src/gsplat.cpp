#include "bodysplat/gsplat.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace bodysplat {

void GaussianSet::validate(Scalar s_min, Scalar s_max) const {
  const int n = size();
  if (rotations.rows() != n || scales.rows() != n || colors.rows() != n ||
      opacities.size() != n)
    throw schema_error("gaussian set: attribute row counts disagree");
  if (positions.cols() != 3 || rotations.cols() != 4 || scales.cols() != 3 ||
      colors.cols() != 3)
    throw schema_error("gaussian set: attribute widths must be 3/4/3/3/1");
  if (!all_finite(positions.data(), positions.size()) ||
      !all_finite(rotations.data(), rotations.size()) ||
      !all_finite(scales.data(), scales.size()) ||
      !all_finite(colors.data(), colors.size()) ||
      !all_finite(opacities.data(), opacities.size()))
    throw numeric_error("gaussian set: non-finite attribute");
  for (int i = 0; i < n; ++i) {
    if (rotations.row(i).norm() < 1e-12)
      throw schema_error("gaussian set: zero quaternion at " + std::to_string(i));
    for (int k = 0; k < 3; ++k) {
      if (scales(i, k) < s_min - 1e-12 || scales(i, k) > s_max + 1e-12)
        throw schema_error("gaussian set: scale out of [s_min, s_max] at " +
                           std::to_string(i));
      if (colors(i, k) < -1e-12 || colors(i, k) > 1 + 1e-12)
        throw schema_error("gaussian set: color out of [0,1] at " + std::to_string(i));
    }
    if (opacities[i] < -1e-12 || opacities[i] > 1 + 1e-12)
      throw schema_error("gaussian set: opacity out of [0,1] at " + std::to_string(i));
  }
}

Mat3 quat_to_rotmat(const Vec4& q) {
  const Scalar w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

Mat3 covariance_from(const Vec4& quat, const Vec3& scale) {
  const Scalar n = quat.norm();
  if (n < 1e-12) throw schema_error("covariance_from: zero quaternion");
  const Mat3 R = quat_to_rotmat(quat / n);
  return R * scale.array().square().matrix().asDiagonal() * R.transpose();
}

namespace {

// Screen-space footprint of one splat. The conic is the inverse of the
// dilated 2D covariance.
struct SplatProj {
  int index = -1;
  Vec2 mean = Vec2::Zero();
  Scalar depth = 0;
  Scalar cA = 0, cB = 0, cC = 0;  // conic [[A,B],[B,C]]
  Scalar radius = 0;              // 3-sigma screen bound
  bool valid = false;
};

SplatProj project_splat(const GaussianSet& g, int i, const CameraView& cam) {
  SplatProj sp;
  sp.index = i;
  const Vec3 p_cam = cam.R * g.positions.row(i).transpose() + cam.t;
  sp.depth = p_cam.z();
  if (!(p_cam.z() > 1e-6)) return sp;

  const Scalar fx = cam.K(0, 0), fy = cam.K(1, 1);
  const Scalar iz = 1.0 / p_cam.z();
  sp.mean.x() = fx * p_cam.x() * iz + cam.K(0, 2);
  sp.mean.y() = fy * p_cam.y() * iz + cam.K(1, 2);

  const Mat3 Sigma =
      covariance_from(g.rotations.row(i).transpose(), g.scales.row(i).transpose());
  const Mat3 Sigma_cam = cam.R * Sigma * cam.R.transpose();

  Eigen::Matrix<Scalar, 2, 3> J;
  J << fx * iz, 0, -fx * p_cam.x() * iz * iz, 0, fy * iz, -fy * p_cam.y() * iz * iz;
  Mat2 cov2d = J * Sigma_cam * J.transpose();
  cov2d(0, 0) += kLowPassDilation;
  cov2d(1, 1) += kLowPassDilation;

  const Scalar det = cov2d(0, 0) * cov2d(1, 1) - cov2d(0, 1) * cov2d(0, 1);
  if (!(det > 0) || !std::isfinite(det)) return sp;
  const Scalar inv_det = 1.0 / det;
  sp.cA = cov2d(1, 1) * inv_det;
  sp.cB = -cov2d(0, 1) * inv_det;
  sp.cC = cov2d(0, 0) * inv_det;

  const Scalar mid = 0.5 * (cov2d(0, 0) + cov2d(1, 1));
  const Scalar lam_max =
      mid + std::sqrt(std::max(Scalar(0), mid * mid - det));
  sp.radius = 3.0 * std::sqrt(lam_max);
  sp.valid = true;
  return sp;
}

std::vector<SplatProj> project_all_sorted(const GaussianSet& g, const CameraView& cam) {
  std::vector<SplatProj> splats;
  splats.reserve(g.size());
  for (int i = 0; i < g.size(); ++i) {
    SplatProj sp = project_splat(g, i, cam);
    if (sp.valid) splats.push_back(sp);
  }
  std::sort(splats.begin(), splats.end(), [](const SplatProj& a, const SplatProj& b) {
    return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
  });
  return splats;
}

// Contractual per-pixel contribution; returns 0 outside the 3-sigma ellipse
// or below the 1/255 floor.
inline Scalar contract_alpha(const SplatProj& sp, Scalar opacity, Scalar px, Scalar py,
                             Scalar* d2_out = nullptr) {
  const Scalar dx = px - sp.mean.x();
  const Scalar dy = py - sp.mean.y();
  const Scalar d2 = sp.cA * dx * dx + 2.0 * sp.cB * dx * dy + sp.cC * dy * dy;
  if (d2_out) *d2_out = d2;
  if (!(d2 <= kMaxMahalanobisSq)) return 0;
  const Scalar a = opacity * std::exp(-0.5 * d2);
  return a < kAlphaMin ? Scalar(0) : a;
}

struct TileGrid {
  int tiles_x = 0, tiles_y = 0, tile = 16;
  std::vector<std::vector<int>> bins;  // indices into the sorted splat array
};

TileGrid bin_splats(const std::vector<SplatProj>& splats, int w, int h, int tile) {
  TileGrid tg;
  tg.tile = tile;
  tg.tiles_x = (w + tile - 1) / tile;
  tg.tiles_y = (h + tile - 1) / tile;
  tg.bins.resize(static_cast<size_t>(tg.tiles_x) * tg.tiles_y);
  for (size_t s = 0; s < splats.size(); ++s) {
    const SplatProj& sp = splats[s];
    const int x0 = std::max(0, static_cast<int>(std::floor(sp.mean.x() - sp.radius)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(sp.mean.x() + sp.radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(sp.mean.y() - sp.radius)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(sp.mean.y() + sp.radius)));
    if (x0 > x1 || y0 > y1) continue;
    for (int ty = y0 / tile; ty <= y1 / tile; ++ty)
      for (int tx = x0 / tile; tx <= x1 / tile; ++tx)
        tg.bins[static_cast<size_t>(ty) * tg.tiles_x + tx].push_back(static_cast<int>(s));
  }
  return tg;
}

}  // namespace

RenderOutput render(const GaussianSet& g, const CameraView& cam,
                    const RenderSettings& settings) {
  const int h = cam.height, w = cam.width;
  RenderOutput out;
  out.color = Image(h, w, 3);
  out.alpha.assign(static_cast<size_t>(h) * w, 0.0);

  const std::vector<SplatProj> splats = project_all_sorted(g, cam);
  const TileGrid tg = bin_splats(splats, w, h, settings.tile_size);

  for (int ty = 0; ty < tg.tiles_y; ++ty) {
    for (int tx = 0; tx < tg.tiles_x; ++tx) {
      const std::vector<int>& bin = tg.bins[static_cast<size_t>(ty) * tg.tiles_x + tx];
      const int y_end = std::min(h, (ty + 1) * tg.tile);
      const int x_end = std::min(w, (tx + 1) * tg.tile);
      for (int y = ty * tg.tile; y < y_end; ++y) {
        for (int x = tx * tg.tile; x < x_end; ++x) {
          Scalar T = 1.0;
          Vec3 c = Vec3::Zero();
          for (int s : bin) {
            if (T < kTransmittanceMin) break;
            const SplatProj& sp = splats[s];
            const Scalar a = contract_alpha(sp, g.opacities[sp.index], x, y);
            if (a == 0) continue;
            c += g.colors.row(sp.index).transpose() * (a * T);
            T *= (1.0 - a);
          }
          for (int k = 0; k < 3; ++k)
            out.color.at(y, x, k) = c[k] + settings.background[k] * T;
          out.alpha[static_cast<size_t>(y) * w + x] = 1.0 - T;
        }
      }
    }
  }
  return out;
}

RenderOutput render_oracle(const GaussianSet& g, const CameraView& cam,
                           const RenderSettings& settings) {
  const int h = cam.height, w = cam.width;
  RenderOutput out;
  out.color = Image(h, w, 3);
  out.alpha.assign(static_cast<size_t>(h) * w, 0.0);

  // Independent projection pass: same contract, written out plainly.
  struct OracleSplat {
    int index;
    Scalar mx, my, depth, A, B, C;
  };
  std::vector<OracleSplat> splats;
  for (int i = 0; i < g.size(); ++i) {
    const Vec3 p_cam = cam.R * g.positions.row(i).transpose() + cam.t;
    if (!(p_cam.z() > 1e-6)) continue;
    const Scalar fx = cam.K(0, 0), fy = cam.K(1, 1);
    const Scalar iz = 1.0 / p_cam.z();
    const Scalar mx = fx * p_cam.x() * iz + cam.K(0, 2);
    const Scalar my = fy * p_cam.y() * iz + cam.K(1, 2);
    const Mat3 Sigma =
        covariance_from(g.rotations.row(i).transpose(), g.scales.row(i).transpose());
    const Mat3 Sigma_cam = cam.R * Sigma * cam.R.transpose();
    Eigen::Matrix<Scalar, 2, 3> J;
    J << fx * iz, 0, -fx * p_cam.x() * iz * iz, 0, fy * iz, -fy * p_cam.y() * iz * iz;
    Mat2 cov2d = J * Sigma_cam * J.transpose();
    cov2d(0, 0) += kLowPassDilation;
    cov2d(1, 1) += kLowPassDilation;
    const Scalar det = cov2d(0, 0) * cov2d(1, 1) - cov2d(0, 1) * cov2d(0, 1);
    if (!(det > 0) || !std::isfinite(det)) continue;
    const Scalar inv_det = 1.0 / det;
    splats.push_back({i, mx, my, p_cam.z(), cov2d(1, 1) * inv_det, -cov2d(0, 1) * inv_det,
                      cov2d(0, 0) * inv_det});
  }
  std::sort(splats.begin(), splats.end(), [](const OracleSplat& a, const OracleSplat& b) {
    return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
  });

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Scalar T = 1.0;
      Vec3 c = Vec3::Zero();
      for (const OracleSplat& sp : splats) {
        if (T < kTransmittanceMin) continue;  // saturated: later splats contribute nothing
        const Scalar dx = x - sp.mx, dy = y - sp.my;
        const Scalar d2 = sp.A * dx * dx + 2.0 * sp.B * dx * dy + sp.C * dy * dy;
        if (!(d2 <= kMaxMahalanobisSq)) continue;
        const Scalar a = g.opacities[sp.index] * std::exp(-0.5 * d2);
        if (a < kAlphaMin) continue;
        c += g.colors.row(sp.index).transpose() * (a * T);
        T *= (1.0 - a);
      }
      for (int k = 0; k < 3; ++k) out.color.at(y, x, k) = c[k] + settings.background[k] * T;
      out.alpha[static_cast<size_t>(y) * w + x] = 1.0 - T;
    }
  }
  return out;
}

GaussianGrads render_backward(const GaussianSet& g, const CameraView& cam,
                              const Image& upstream_color,
                              const std::vector<Scalar>* upstream_alpha,
                              const RenderSettings& settings) {
  const int h = cam.height, w = cam.width;
  if (upstream_color.h != h || upstream_color.w != w || upstream_color.c != 3)
    throw schema_error("render_backward: upstream_color must be h x w x 3");
  if (upstream_alpha && static_cast<int>(upstream_alpha->size()) != h * w)
    throw schema_error("render_backward: upstream_alpha must be h x w");

  GaussianGrads grads(g.size());
  const std::vector<SplatProj> splats = project_all_sorted(g, cam);
  const TileGrid tg = bin_splats(splats, w, h, settings.tile_size);

  // Screen-space accumulators per (valid, sorted) splat.
  const int ns = static_cast<int>(splats.size());
  MatX d_mean = MatX::Zero(ns, 2);
  MatX d_conic = MatX::Zero(ns, 3);  // dA, dB(full-matrix off-diagonal), dC
  VecX d_opacity = VecX::Zero(ns);
  MatX d_color = MatX::Zero(ns, 3);

  struct Contribution {
    int s;         // index into splats
    Scalar alpha;  // contractual alpha
    Scalar d2;
    Scalar T;      // transmittance before this splat
  };
  std::vector<Contribution> contribs;
  contribs.reserve(256);

  for (int ty = 0; ty < tg.tiles_y; ++ty) {
    for (int tx = 0; tx < tg.tiles_x; ++tx) {
      const std::vector<int>& bin = tg.bins[static_cast<size_t>(ty) * tg.tiles_x + tx];
      const int y_end = std::min(h, (ty + 1) * tg.tile);
      const int x_end = std::min(w, (tx + 1) * tg.tile);
      for (int y = ty * tg.tile; y < y_end; ++y) {
        for (int x = tx * tg.tile; x < x_end; ++x) {
          contribs.clear();
          Scalar T = 1.0;
          for (int s : bin) {
            if (T < kTransmittanceMin) break;
            Scalar d2;
            const Scalar a = contract_alpha(splats[s], g.opacities[splats[s].index], x, y, &d2);
            if (a == 0) continue;
            contribs.push_back({s, a, d2, T});
            T *= (1.0 - a);
          }
          if (contribs.empty()) continue;

          const Vec3 up_c(upstream_color.at(y, x, 0), upstream_color.at(y, x, 1),
                          upstream_color.at(y, x, 2));
          const Scalar up_a =
              upstream_alpha ? (*upstream_alpha)[static_cast<size_t>(y) * w + x] : 0.0;

          // Reverse sweep. Q carries the suffix color (relative transmittance),
          // P the suffix survival product; both start at the background.
          Vec3 Q = settings.background;
          Scalar P = 1.0;
          for (int i = static_cast<int>(contribs.size()) - 1; i >= 0; --i) {
            const Contribution& cb = contribs[i];
            const SplatProj& sp = splats[cb.s];
            const int gi = sp.index;
            const Vec3 color = g.colors.row(gi).transpose();

            const Scalar d_alpha =
                cb.T * (up_c.dot(color - Q) + up_a * P);
            d_color.row(cb.s) += (up_c * (cb.alpha * cb.T)).transpose();

            Q = color * cb.alpha + (1.0 - cb.alpha) * Q;
            P *= (1.0 - cb.alpha);

            // alpha = opacity * exp(-d2/2)
            const Scalar G = std::exp(-0.5 * cb.d2);
            d_opacity[cb.s] += d_alpha * G;
            const Scalar d_d2 = -0.5 * d_alpha * cb.alpha;
            const Scalar dx = x - sp.mean.x();
            const Scalar dy = y - sp.mean.y();
            d_conic(cb.s, 0) += d_d2 * dx * dx;
            d_conic(cb.s, 1) += d_d2 * dx * dy;
            d_conic(cb.s, 2) += d_d2 * dy * dy;
            const Scalar d_dx = d_d2 * (2.0 * sp.cA * dx + 2.0 * sp.cB * dy);
            const Scalar d_dy = d_d2 * (2.0 * sp.cB * dx + 2.0 * sp.cC * dy);
            d_mean(cb.s, 0) -= d_dx;
            d_mean(cb.s, 1) -= d_dy;
          }
        }
      }
    }
  }

  // Chain screen-space gradients back to the 14 attributes, once per splat.
  const Scalar fx = cam.K(0, 0), fy = cam.K(1, 1);
  for (int s = 0; s < ns; ++s) {
    const int i = splats[s].index;
    grads.colors.row(i) += d_color.row(s);
    grads.opacities[i] += d_opacity[s];

    const bool has_geom = d_mean.row(s).squaredNorm() != 0 || d_conic.row(s).squaredNorm() != 0;
    if (!has_geom) continue;

    const Vec3 p_cam = cam.R * g.positions.row(i).transpose() + cam.t;
    const Scalar iz = 1.0 / p_cam.z();

    const Vec4 q_raw = g.rotations.row(i).transpose();
    const Scalar qn = q_raw.norm();
    const Vec4 q = q_raw / qn;
    const Mat3 R = quat_to_rotmat(q);
    const Vec3 sc = g.scales.row(i).transpose();
    const Mat3 Sigma = R * sc.array().square().matrix().asDiagonal() * R.transpose();
    const Mat3 Sigma_cam = cam.R * Sigma * cam.R.transpose();
    Eigen::Matrix<Scalar, 2, 3> J;
    J << fx * iz, 0, -fx * p_cam.x() * iz * iz, 0, fy * iz, -fy * p_cam.y() * iz * iz;

    // conic = inv(cov2d): d cov2d = -conic * d conic * conic
    Mat2 conic;
    conic << splats[s].cA, splats[s].cB, splats[s].cB, splats[s].cC;
    Mat2 d_conic_m;
    d_conic_m << d_conic(s, 0), d_conic(s, 1), d_conic(s, 1), d_conic(s, 2);
    const Mat2 d_cov2d = -conic * d_conic_m * conic;

    const Mat3 d_Sigma_cam = J.transpose() * d_cov2d * J;
    const Eigen::Matrix<Scalar, 2, 3> d_J = 2.0 * d_cov2d * J * Sigma_cam;
    const Mat3 d_Sigma = cam.R.transpose() * d_Sigma_cam * cam.R;

    // p_cam gradient: through the projected mean and through J.
    Vec3 d_p_cam = Vec3::Zero();
    d_p_cam.x() += d_mean(s, 0) * fx * iz;
    d_p_cam.y() += d_mean(s, 1) * fy * iz;
    d_p_cam.z() += d_mean(s, 0) * (-fx * p_cam.x() * iz * iz) +
                   d_mean(s, 1) * (-fy * p_cam.y() * iz * iz);
    d_p_cam.x() += d_J(0, 2) * (-fx * iz * iz);
    d_p_cam.y() += d_J(1, 2) * (-fy * iz * iz);
    d_p_cam.z() += d_J(0, 0) * (-fx * iz * iz) + d_J(0, 2) * (2.0 * fx * p_cam.x() * iz * iz * iz) +
                   d_J(1, 1) * (-fy * iz * iz) + d_J(1, 2) * (2.0 * fy * p_cam.y() * iz * iz * iz);

    grads.positions.row(i) += (cam.R.transpose() * d_p_cam).transpose();

    // Sigma = R diag(s^2) R^T
    const Mat3 D = sc.array().square().matrix().asDiagonal();
    const Mat3 d_R = 2.0 * d_Sigma * R * D;
    const Mat3 RtSR = R.transpose() * d_Sigma * R;
    for (int k = 0; k < 3; ++k) grads.scales(i, k) += 2.0 * sc[k] * RtSR(k, k);

    // dR/dq for a unit quaternion (w,x,y,z)
    const Scalar qw = q[0], qx = q[1], qy = q[2], qz = q[3];
    Mat3 dRdq[4];
    dRdq[0] << 0, -qz, qy, qz, 0, -qx, -qy, qx, 0;
    dRdq[1] << 0, qy, qz, qy, -2 * qx, -qw, qz, qw, -2 * qx;
    dRdq[2] << -2 * qy, qx, qw, qx, 0, qz, -qw, qz, -2 * qy;
    dRdq[3] << -2 * qz, -qw, qx, qw, -2 * qz, qy, qx, qy, 0;
    Vec4 d_q_unit;
    for (int k = 0; k < 4; ++k)
      d_q_unit[k] = 2.0 * (d_R.array() * dRdq[k].array()).sum();

    // Through normalization: the raw-quaternion gradient is tangent to q.
    const Vec4 d_q_raw = (d_q_unit - q * q.dot(d_q_unit)) / qn;
    grads.rotations.row(i) += d_q_raw.transpose();
  }
  return grads;
}

namespace {

constexpr Scalar kShC0 = 0.28209479177387814;

const char* const kPlyProps[14] = {"x",       "y",       "z",       "f_dc_0", "f_dc_1",
                                   "f_dc_2",  "opacity", "scale_0", "scale_1", "scale_2",
                                   "rot_0",   "rot_1",   "rot_2",   "rot_3"};

}  // namespace

void export_splats(const std::string& path, const GaussianSet& g) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open splat file for writing: " + path);
  f << "ply\nformat binary_little_endian 1.0\nelement vertex " << g.size() << "\n";
  for (const char* p : kPlyProps) f << "property float " << p << "\n";
  f << "end_header\n";
  auto put = [&](Scalar v) {
    const float x = static_cast<float>(v);
    f.write(reinterpret_cast<const char*>(&x), 4);
  };
  for (int i = 0; i < g.size(); ++i) {
    for (int k = 0; k < 3; ++k) put(g.positions(i, k));
    for (int k = 0; k < 3; ++k) put((g.colors(i, k) - 0.5) / kShC0);
    const Scalar op = g.opacities[i];
    put(std::log(op / (1.0 - op)));  // +-inf at the saturated ends round-trips
    for (int k = 0; k < 3; ++k) put(std::log(g.scales(i, k)));
    for (int k = 0; k < 4; ++k) put(g.rotations(i, k));
  }
  if (!f) throw io_error("failed writing splat file: " + path);
}

GaussianSet import_splats(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open splat file: " + path);
  std::string line;
  std::getline(f, line);
  if (line != "ply") throw schema_error("splat file: not a ply file");
  std::getline(f, line);
  if (line != "format binary_little_endian 1.0")
    throw schema_error("splat file: expected binary little-endian 1.0");
  std::getline(f, line);
  long long n = -1;
  if (std::sscanf(line.c_str(), "element vertex %lld", &n) != 1 || n < 0)
    throw schema_error("splat file: missing vertex element");
  for (int p = 0; p < 14; ++p) {
    std::getline(f, line);
    if (line != std::string("property float ") + kPlyProps[p])
      throw schema_error("splat file: property " + std::to_string(p) +
                         " must be 'property float " + kPlyProps[p] + "'");
  }
  std::getline(f, line);
  if (line != "end_header") throw schema_error("splat file: missing end_header");

  GaussianSet g;
  g.positions.resize(n, 3);
  g.rotations.resize(n, 4);
  g.scales.resize(n, 3);
  g.colors.resize(n, 3);
  g.opacities.resize(n);
  auto get = [&]() {
    float v;
    f.read(reinterpret_cast<char*>(&v), 4);
    return static_cast<Scalar>(v);
  };
  for (long long i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) g.positions(i, k) = get();
    for (int k = 0; k < 3; ++k) g.colors(i, k) = get() * kShC0 + 0.5;
    g.opacities[i] = sigmoid(get());
    for (int k = 0; k < 3; ++k) g.scales(i, k) = std::exp(get());
    for (int k = 0; k < 4; ++k) g.rotations(i, k) = get();
    if (!f) throw schema_error("splat file: truncated at record " + std::to_string(i));
  }
  return g;
}

}  // namespace bodysplat
