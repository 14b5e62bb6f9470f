#include "bodysplat/geometry.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace bodysplat {

CameraView CameraView::resized(int new_width, int new_height) const {
  if (new_width < 1 || new_height < 1) throw schema_error("resized: bad target resolution");
  const Scalar sx = static_cast<Scalar>(new_width) / width;
  const Scalar sy = static_cast<Scalar>(new_height) / height;
  CameraView out = *this;
  out.K(0, 0) = K(0, 0) * sx;
  out.K(1, 1) = K(1, 1) * sy;
  out.K(0, 2) = (K(0, 2) + 0.5) * sx - 0.5;
  out.K(1, 2) = (K(1, 2) + 0.5) * sy - 0.5;
  out.width = new_width;
  out.height = new_height;
  return out;
}

ProjectedPoint project_point(const CameraView& cam, const Vec3& p) {
  ProjectedPoint out;
  const Vec3 pc = cam.R * p + cam.t;
  out.depth = pc.z();
  if (pc.z() > 1e-6) {
    out.uv.x() = cam.K(0, 0) * pc.x() / pc.z() + cam.K(0, 2);
    out.uv.y() = cam.K(1, 1) * pc.y() / pc.z() + cam.K(1, 2);
    out.valid = out.uv.x() >= 0.0 && out.uv.x() < cam.width &&
                out.uv.y() >= 0.0 && out.uv.y() < cam.height;
  }
  return out;
}

std::vector<ProjectedPoint> project_points(const CameraView& cam, const MatX& points) {
  if (points.cols() != 3) throw schema_error("project_points: points must be N x 3");
  std::vector<ProjectedPoint> out(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    out[i] = project_point(cam, points.row(i).transpose());
  return out;
}

Vec3 unproject_pixel(const CameraView& cam, const Vec2& uv, Scalar depth) {
  Vec3 pc((uv.x() - cam.K(0, 2)) / cam.K(0, 0) * depth,
          (uv.y() - cam.K(1, 2)) / cam.K(1, 1) * depth, depth);
  return cam.R.transpose() * (pc - cam.t);
}

Grid3 plucker_raymap(const CameraView& cam) {
  Grid3 rm(cam.height, cam.width, 6);
  const Vec3 origin = cam.center();
  const Mat3 Rt = cam.R.transpose();
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      Vec3 dir_cam((x - cam.K(0, 2)) / cam.K(0, 0), (y - cam.K(1, 2)) / cam.K(1, 1), 1.0);
      Vec3 d = (Rt * dir_cam).normalized();
      Vec3 m = origin.cross(d);
      for (int k = 0; k < 3; ++k) {
        rm.at(y, x, k) = d[k];
        rm.at(y, x, 3 + k) = m[k];
      }
    }
  }
  return rm;
}

void bilinear_sample(const Grid3& grid, Scalar u, Scalar v, Scalar* out) {
  const Scalar uc = std::min(std::max(u, Scalar(0)), Scalar(grid.w - 1));
  const Scalar vc = std::min(std::max(v, Scalar(0)), Scalar(grid.h - 1));
  const int x0 = std::min(static_cast<int>(std::floor(uc)), grid.w - 1);
  const int y0 = std::min(static_cast<int>(std::floor(vc)), grid.h - 1);
  const int x1 = std::min(x0 + 1, grid.w - 1);
  const int y1 = std::min(y0 + 1, grid.h - 1);
  const Scalar fx = uc - x0;
  const Scalar fy = vc - y0;
  for (int ch = 0; ch < grid.c; ++ch) {
    const Scalar top = grid.at(y0, x0, ch) * (1 - fx) + grid.at(y0, x1, ch) * fx;
    const Scalar bot = grid.at(y1, x0, ch) * (1 - fx) + grid.at(y1, x1, ch) * fx;
    out[ch] = top * (1 - fy) + bot * fy;
  }
}

std::vector<Scalar> bilinear_sample(const Grid3& grid, Scalar u, Scalar v) {
  std::vector<Scalar> out(grid.c);
  bilinear_sample(grid, u, v, out.data());
  return out;
}

uint8_t triangle_label(uint8_t a, uint8_t b, uint8_t c) {
  if (a == b || a == c) return a;
  if (b == c) return b;
  return std::min(a, std::min(b, c));
}

namespace {

struct RasterSinks {
  PartMaskSet* parts = nullptr;
  Image* color = nullptr;
  std::vector<Scalar>* mask = nullptr;
  const MatX* vertex_colors = nullptr;
  Vec3 background = Vec3::Zero();
};

void rasterize_core(const MatX& vertices, const Eigen::MatrixXi& faces,
                    const std::vector<uint8_t>& vertex_labels, const CameraView& cam,
                    RasterSinks sinks) {
  if (vertices.cols() != 3) throw schema_error("rasterize: vertices must be V x 3");
  if (faces.cols() != 3) throw schema_error("rasterize: faces must be F x 3");
  if (static_cast<Eigen::Index>(vertex_labels.size()) != vertices.rows())
    throw schema_error("rasterize: one label per vertex required");

  const int h = cam.height, w = cam.width;
  PartMaskSet& parts = *sinks.parts;
  parts.h = h;
  parts.w = w;
  parts.labels.assign(static_cast<size_t>(h) * w, 0);
  parts.depth.assign(static_cast<size_t>(h) * w, std::numeric_limits<Scalar>::infinity());
  if (sinks.color) {
    *sinks.color = Image(h, w, 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int k = 0; k < 3; ++k) sinks.color->at(y, x, k) = sinks.background[k];
  }
  if (sinks.mask) sinks.mask->assign(static_cast<size_t>(h) * w, 0.0);

  const Eigen::Index V = vertices.rows();
  std::vector<Vec2> uv(V);
  std::vector<Scalar> z(V);
  for (Eigen::Index i = 0; i < V; ++i) {
    const ProjectedPoint pp = project_point(cam, vertices.row(i).transpose());
    uv[i] = pp.uv;
    z[i] = pp.depth;
  }

  for (Eigen::Index f = 0; f < faces.rows(); ++f) {
    const int ia = faces(f, 0), ib = faces(f, 1), ic = faces(f, 2);
    if (z[ia] <= 1e-6 || z[ib] <= 1e-6 || z[ic] <= 1e-6) continue;
    const Vec2 a = uv[ia], b = uv[ib], c = uv[ic];
    const Scalar area = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
    if (area == 0.0) continue;

    const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({a.x(), b.x(), c.x()}))));
    const int x1 = std::min(w - 1, static_cast<int>(std::floor(std::max({a.x(), b.x(), c.x()}))));
    const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({a.y(), b.y(), c.y()}))));
    const int y1 = std::min(h - 1, static_cast<int>(std::floor(std::max({a.y(), b.y(), c.y()}))));
    if (x0 > x1 || y0 > y1) continue;

    const uint8_t lab = triangle_label(vertex_labels[ia], vertex_labels[ib], vertex_labels[ic]);
    const Scalar iza = 1.0 / z[ia], izb = 1.0 / z[ib], izc = 1.0 / z[ic];

    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const Scalar px = x, py = y;
        const Scalar w0 = (c.x() - b.x()) * (py - b.y()) - (c.y() - b.y()) * (px - b.x());
        const Scalar w1 = (a.x() - c.x()) * (py - c.y()) - (a.y() - c.y()) * (px - c.x());
        const Scalar w2 = (b.x() - a.x()) * (py - a.y()) - (b.y() - a.y()) * (px - a.x());
        const bool inside = (w0 >= 0 && w1 >= 0 && w2 >= 0) || (w0 <= 0 && w1 <= 0 && w2 <= 0);
        if (!inside) continue;
        const Scalar la = w0 / area, lb = w1 / area, lc = w2 / area;
        const Scalar inv_z = la * iza + lb * izb + lc * izc;
        const Scalar depth = 1.0 / inv_z;
        const size_t idx = static_cast<size_t>(y) * w + x;
        if (depth < parts.depth[idx]) {
          parts.depth[idx] = depth;
          parts.labels[idx] = lab;
          if (sinks.mask) (*sinks.mask)[idx] = 1.0;
          if (sinks.color) {
            for (int k = 0; k < 3; ++k) {
              const Scalar num = la * iza * (*sinks.vertex_colors)(ia, k) +
                                 lb * izb * (*sinks.vertex_colors)(ib, k) +
                                 lc * izc * (*sinks.vertex_colors)(ic, k);
              sinks.color->at(y, x, k) = num * depth;
            }
          }
        }
      }
    }
  }
}

}  // namespace

PartMaskSet rasterize_part_masks(const MatX& vertices, const Eigen::MatrixXi& faces,
                                 const std::vector<uint8_t>& vertex_labels,
                                 const CameraView& cam) {
  PartMaskSet parts;
  RasterSinks sinks;
  sinks.parts = &parts;
  rasterize_core(vertices, faces, vertex_labels, cam, sinks);
  return parts;
}

MeshRender rasterize_mesh(const MatX& vertices, const Eigen::MatrixXi& faces,
                          const std::vector<uint8_t>& vertex_labels, const MatX& vertex_colors,
                          const CameraView& cam, const Vec3& background) {
  if (vertex_colors.rows() != vertices.rows() || vertex_colors.cols() != 3)
    throw schema_error("rasterize_mesh: vertex_colors must be V x 3");
  MeshRender out;
  RasterSinks sinks;
  sinks.parts = &out.parts;
  sinks.color = &out.color;
  sinks.mask = &out.mask;
  sinks.vertex_colors = &vertex_colors;
  sinks.background = background;
  rasterize_core(vertices, faces, vertex_labels, cam, sinks);
  return out;
}

std::vector<CameraView> make_orbit_cameras(int count, Scalar elevation_deg, Scalar radius,
                                           const Vec3& target, int width, int height,
                                           Scalar focal_px) {
  if (count < 1) throw schema_error("make_orbit_cameras: count must be >= 1");
  if (radius <= 0) throw schema_error("make_orbit_cameras: radius must be positive");
  if (std::abs(std::cos(elevation_deg * M_PI / 180.0)) < 1e-9)
    throw schema_error("make_orbit_cameras: degenerate elevation (looking along up axis)");

  std::vector<CameraView> cams;
  cams.reserve(count);
  for (int k = 0; k < count; ++k) {
    const Scalar az_deg = 360.0 * k / count;
    const Scalar a = az_deg * M_PI / 180.0;
    const Scalar e = elevation_deg * M_PI / 180.0;
    const Vec3 offset(std::sin(a) * std::cos(e), std::sin(e), -std::cos(a) * std::cos(e));
    const Vec3 pos = target + radius * offset;
    const Vec3 forward = (target - pos).normalized();
    const Vec3 up(0, 1, 0);
    const Vec3 xc = forward.cross(up).normalized();
    const Vec3 yc = forward.cross(xc);

    CameraView cam;
    cam.R.row(0) = xc.transpose();
    cam.R.row(1) = yc.transpose();
    cam.R.row(2) = forward.transpose();
    cam.t = -cam.R * pos;
    cam.K = Mat3::Identity();
    cam.K(0, 0) = cam.K(1, 1) = focal_px;
    cam.K(0, 2) = (width - 1) * 0.5;
    cam.K(1, 2) = (height - 1) * 0.5;
    cam.width = width;
    cam.height = height;
    cam.elevation_deg = elevation_deg;
    cam.azimuth_deg = az_deg;
    cams.push_back(cam);
  }
  return cams;
}

static constexpr const char* kManifestHeader = "bodysplat-cameras v1";

void save_camera_manifest(const std::string& path, const std::vector<CameraView>& cams) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open camera manifest for writing: " + path);
  f << kManifestHeader << "\n" << cams.size() << "\n";
  char buf[32];
  auto put = [&](Scalar v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    f << buf << ' ';
  };
  for (const CameraView& c : cams) {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) put(c.K(i, j));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) put(c.R(i, j));
    for (int i = 0; i < 3; ++i) put(c.t[i]);
    f << c.width << ' ' << c.height << ' ';
    put(c.elevation_deg);
    put(c.azimuth_deg);
    f << "\n";
  }
  if (!f) throw io_error("failed writing camera manifest: " + path);
}

std::vector<CameraView> load_camera_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open camera manifest: " + path);
  std::string header;
  std::getline(f, header);
  if (header != kManifestHeader)
    throw schema_error("camera manifest: unrecognized header '" + header + "'");
  size_t n = 0;
  f >> n;
  std::vector<CameraView> cams(n);
  for (size_t v = 0; v < n; ++v) {
    CameraView& c = cams[v];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) f >> c.K(i, j);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) f >> c.R(i, j);
    for (int i = 0; i < 3; ++i) f >> c.t[i];
    f >> c.width >> c.height >> c.elevation_deg >> c.azimuth_deg;
    if (!f) throw schema_error("camera manifest: truncated record " + std::to_string(v));
    if (c.width < 1 || c.height < 1)
      throw schema_error("camera manifest: bad viewport in record " + std::to_string(v));
    if (c.K(0, 0) <= 0 || c.K(1, 1) <= 0)
      throw schema_error("camera manifest: non-positive focal in record " + std::to_string(v));
    const Scalar ortho = (c.R * c.R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (ortho > 1e-6)
      throw schema_error("camera manifest: R not orthonormal in record " + std::to_string(v));
  }
  return cams;
}

}  // namespace bodysplat
