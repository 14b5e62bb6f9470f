#include "support/oracles.hpp"

#include <cmath>
#include <limits>

namespace bodysplat::oracle {

RaycastRender raycast_mesh(const MatX& vertices, const Eigen::MatrixXi& faces,
                           const std::vector<uint8_t>& vertex_labels, const MatX& vertex_colors,
                           const CameraView& cam, const Vec3& background) {
  const int h = cam.height, w = cam.width;
  RaycastRender out;
  out.color = Image(h, w, 3);
  out.mask.assign(static_cast<size_t>(h) * w, 0.0);
  out.labels.assign(static_cast<size_t>(h) * w, 0);
  out.depth.assign(static_cast<size_t>(h) * w, std::numeric_limits<Scalar>::infinity());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < 3; ++k) out.color.at(y, x, k) = background[k];

  std::vector<Scalar> cam_z(vertices.rows());
  for (Eigen::Index i = 0; i < vertices.rows(); ++i)
    cam_z[i] = (cam.R * vertices.row(i).transpose() + cam.t).z();

  const Vec3 origin = cam.center();
  const Mat3 Rt = cam.R.transpose();

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // unnormalized so the ray parameter equals camera-space depth
      const Vec3 dir = Rt * Vec3((x - cam.K(0, 2)) / cam.K(0, 0),
                                 (y - cam.K(1, 2)) / cam.K(1, 1), 1.0);
      const size_t idx = static_cast<size_t>(y) * w + x;
      for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        const int ia = faces(f, 0), ib = faces(f, 1), ic = faces(f, 2);
        if (cam_z[ia] <= 1e-6 || cam_z[ib] <= 1e-6 || cam_z[ic] <= 1e-6) continue;
        const Vec3 a = vertices.row(ia).transpose();
        const Vec3 e1 = vertices.row(ib).transpose() - a;
        const Vec3 e2 = vertices.row(ic).transpose() - a;
        const Vec3 p = dir.cross(e2);
        const Scalar det = e1.dot(p);
        if (det == 0.0) continue;
        const Scalar inv = 1.0 / det;
        const Vec3 s = origin - a;
        const Scalar u = s.dot(p) * inv;
        if (u < 0.0 || u > 1.0) continue;
        const Vec3 q = s.cross(e1);
        const Scalar v = dir.dot(q) * inv;
        if (v < 0.0 || u + v > 1.0) continue;
        const Scalar t_hit = e2.dot(q) * inv;
        if (t_hit <= 1e-6) continue;
        if (t_hit < out.depth[idx]) {
          out.depth[idx] = t_hit;
          out.mask[idx] = 1.0;
          out.labels[idx] =
              triangle_label(vertex_labels[ia], vertex_labels[ib], vertex_labels[ic]);
          for (int k = 0; k < 3; ++k)
            out.color.at(y, x, k) = (1.0 - u - v) * vertex_colors(ia, k) +
                                    u * vertex_colors(ib, k) + v * vertex_colors(ic, k);
        }
      }
    }
  }
  return out;
}

Scalar bilinear_reference(const Grid3& grid, Scalar u, Scalar v, int ch) {
  u = std::min(std::max(u, Scalar(0)), Scalar(grid.w - 1));
  v = std::min(std::max(v, Scalar(0)), Scalar(grid.h - 1));
  const int x0 = std::min(grid.w - 1, static_cast<int>(std::floor(u)));
  const int y0 = std::min(grid.h - 1, static_cast<int>(std::floor(v)));
  const int x1 = std::min(grid.w - 1, x0 + 1);
  const int y1 = std::min(grid.h - 1, y0 + 1);
  const Scalar fx = u - x0, fy = v - y0;
  return grid.at(y0, x0, ch) * (1 - fx) * (1 - fy) + grid.at(y0, x1, ch) * fx * (1 - fy) +
         grid.at(y1, x0, ch) * (1 - fx) * fy + grid.at(y1, x1, ch) * fx * fy;
}

RenderOutput splat_render_reference(const GaussianSet& g, const CameraView& cam,
                                    const Vec3& background) {
  struct Footprint {
    int index;
    Scalar depth, mx, my;
    Scalar i00, i01, i11;  // inverse of the dilated screen covariance
  };
  const Scalar fx = cam.K(0, 0), fy = cam.K(1, 1), cx = cam.K(0, 2), cy = cam.K(1, 2);

  std::vector<Footprint> fps;
  for (int i = 0; i < g.size(); ++i) {
    const Vec3 pc = cam.R * g.positions.row(i).transpose() + cam.t;
    if (!(pc.z() > 1e-6)) continue;

    const Scalar qn = g.rotations.row(i).norm();
    const Scalar qw = g.rotations(i, 0) / qn, qx = g.rotations(i, 1) / qn,
                 qy = g.rotations(i, 2) / qn, qz = g.rotations(i, 3) / qn;
    Mat3 rot;
    rot(0, 0) = 1 - 2 * (qy * qy + qz * qz);
    rot(0, 1) = 2 * (qx * qy - qw * qz);
    rot(0, 2) = 2 * (qx * qz + qw * qy);
    rot(1, 0) = 2 * (qx * qy + qw * qz);
    rot(1, 1) = 1 - 2 * (qx * qx + qz * qz);
    rot(1, 2) = 2 * (qy * qz - qw * qx);
    rot(2, 0) = 2 * (qx * qz - qw * qy);
    rot(2, 1) = 2 * (qy * qz + qw * qx);
    rot(2, 2) = 1 - 2 * (qx * qx + qy * qy);

    // Sigma = sum_k s_k^2 (r_k r_k^T) over the splat frame axes.
    Mat3 Sigma = Mat3::Zero();
    for (int k = 0; k < 3; ++k) {
      const Scalar s2 = g.scales(i, k) * g.scales(i, k);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) Sigma(r, c) += s2 * rot(r, k) * rot(c, k);
    }

    const Scalar iz = 1.0 / pc.z();
    // Rows of the composed 2x3 map (perspective Jacobian times cam rotation).
    Vec3 ju = (fx * iz) * cam.R.row(0).transpose() -
              (fx * pc.x() * iz * iz) * cam.R.row(2).transpose();
    Vec3 jv = (fy * iz) * cam.R.row(1).transpose() -
              (fy * pc.y() * iz * iz) * cam.R.row(2).transpose();
    const Scalar c00 = ju.dot(Sigma * ju) + 0.3;
    const Scalar c01 = ju.dot(Sigma * jv);
    const Scalar c11 = jv.dot(Sigma * jv) + 0.3;
    const Scalar det = c00 * c11 - c01 * c01;
    if (!(det > 0) || !std::isfinite(det)) continue;

    Footprint fp;
    fp.index = i;
    fp.depth = pc.z();
    fp.mx = fx * pc.x() * iz + cx;
    fp.my = fy * pc.y() * iz + cy;
    fp.i00 = c11 / det;
    fp.i01 = -c01 / det;
    fp.i11 = c00 / det;
    fps.push_back(fp);
  }
  std::sort(fps.begin(), fps.end(), [](const Footprint& a, const Footprint& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.index < b.index;
  });

  RenderOutput out;
  out.color = Image(cam.height, cam.width, 3);
  out.alpha.assign(static_cast<size_t>(cam.height) * cam.width, 0.0);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      Scalar T = 1.0, r = 0, gg = 0, b = 0;
      for (const Footprint& fp : fps) {
        if (T < 1e-4) break;
        const Scalar dx = x - fp.mx, dy = y - fp.my;
        const Scalar d2 = fp.i00 * dx * dx + 2.0 * fp.i01 * dx * dy + fp.i11 * dy * dy;
        if (!(d2 <= 9.0)) continue;
        const Scalar a = g.opacities[fp.index] * std::exp(-0.5 * d2);
        if (a < 1.0 / 255.0) continue;
        r += g.colors(fp.index, 0) * a * T;
        gg += g.colors(fp.index, 1) * a * T;
        b += g.colors(fp.index, 2) * a * T;
        T *= 1.0 - a;
      }
      out.color.at(y, x, 0) = r + background[0] * T;
      out.color.at(y, x, 1) = gg + background[1] * T;
      out.color.at(y, x, 2) = b + background[2] * T;
      out.alpha[static_cast<size_t>(y) * cam.width + x] = 1.0 - T;
    }
  }
  return out;
}

Scalar adamw_reference(Scalar param, Scalar grad, Scalar* m, Scalar* v, int t,
                       const OptimConfig& cfg, Scalar lr, bool decays) {
  *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * grad;
  *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * grad * grad;
  const Scalar mhat = *m / (1.0 - std::pow(cfg.beta1, t));
  const Scalar vhat = *v / (1.0 - std::pow(cfg.beta2, t));
  if (decays) param -= lr * cfg.weight_decay * param;
  return param - lr * mhat / (std::sqrt(vhat) + cfg.eps);
}

bool fd_close(Scalar analytic, Scalar fd) {
  return std::abs(analytic - fd) <= 1e-6 + 1e-3 * std::max(std::abs(analytic), std::abs(fd));
}

}  // namespace bodysplat::oracle
