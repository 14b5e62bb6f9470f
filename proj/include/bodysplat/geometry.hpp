#pragma once

#include <optional>

#include "bodysplat/core.hpp"

namespace bodysplat {

// Pinhole camera. R maps world -> camera (x right, y down, z forward),
// t is the world origin expressed in camera coordinates.
// Pixel centers sit at integer coordinates; the valid image box is
// [0,width) x [0,height).
struct CameraView {
  Mat3 K = Mat3::Identity();
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  int width = 0;
  int height = 0;
  Scalar elevation_deg = 0.0;
  Scalar azimuth_deg = 0.0;

  Vec3 center() const { return -R.transpose() * t; }

  // Same field of view at a new resolution (continuous coords rescale as
  // u' = (u+0.5)*sx - 0.5, so an 8x downsample samples 8x8 block centers).
  CameraView resized(int new_width, int new_height) const;
};

struct ProjectedPoint {
  Vec2 uv = Vec2::Zero();
  Scalar depth = 0.0;
  bool valid = false;
};

// Perspective projection of world points. valid requires depth > 1e-6 and
// the pixel inside [0,width) x [0,height); uv/depth are reported either way.
ProjectedPoint project_point(const CameraView& cam, const Vec3& p);
std::vector<ProjectedPoint> project_points(const CameraView& cam, const MatX& points);

// Inverse of project_point at a known camera depth.
Vec3 unproject_pixel(const CameraView& cam, const Vec2& uv, Scalar depth);

// Per-pixel Plucker rays (unit direction d, moment o x d), 6 channels.
Grid3 plucker_raymap(const CameraView& cam);

// Bilinear sample of a (h,w,c) grid at continuous (u,v) in grid coordinates
// (cell centers at integers). Coordinates clamp to the border.
void bilinear_sample(const Grid3& grid, Scalar u, Scalar v, Scalar* out);
std::vector<Scalar> bilinear_sample(const Grid3& grid, Scalar u, Scalar v);

struct PartMaskSet {
  int h = 0, w = 0;
  std::vector<uint8_t> labels;  // 0 background, 1..24 part ids
  std::vector<Scalar> depth;    // camera-space z, +inf where uncovered

  uint8_t label(int y, int x) const { return labels[static_cast<size_t>(y) * w + x]; }
  Scalar z(int y, int x) const { return depth[static_cast<size_t>(y) * w + x]; }
};

// Majority vote of the three vertex labels; ties pick the lowest id.
uint8_t triangle_label(uint8_t a, uint8_t b, uint8_t c);

// Z-buffered triangle rasterization of per-vertex labels at the camera's
// resolution. No back-face culling; zero-area (projected) triangles are
// skipped; triangles with any vertex at depth <= 1e-6 are skipped, so the
// whole mesh is expected in front of the camera.
PartMaskSet rasterize_part_masks(const MatX& vertices,
                                 const Eigen::MatrixXi& faces,
                                 const std::vector<uint8_t>& vertex_labels,
                                 const CameraView& cam);

// Flat-shaded (unlit, barycentric-interpolated vertex color) mesh render used
// by the trainer's synthetic ground truth. Shares the coverage/depth rules of
// rasterize_part_masks.
struct MeshRender {
  Image color;                 // h x w x 3
  std::vector<Scalar> mask;    // 1 where covered
  PartMaskSet parts;
};
MeshRender rasterize_mesh(const MatX& vertices,
                          const Eigen::MatrixXi& faces,
                          const std::vector<uint8_t>& vertex_labels,
                          const MatX& vertex_colors,
                          const CameraView& cam,
                          const Vec3& background = Vec3::Zero());

// Orbit ring around `target`: azimuth_k = 360*k/count degrees, shared
// elevation, camera at distance `radius`, azimuth 0 on the target's -z axis
// looking +z, world up +y.
std::vector<CameraView> make_orbit_cameras(int count,
                                           Scalar elevation_deg,
                                           Scalar radius,
                                           const Vec3& target,
                                           int width,
                                           int height,
                                           Scalar focal_px);

// Plain-text camera manifest (versioned header; one record per view:
// K row-major 9, R row-major 9, t 3, width, height, elevation, azimuth).
void save_camera_manifest(const std::string& path, const std::vector<CameraView>& cams);
std::vector<CameraView> load_camera_manifest(const std::string& path);

}  // namespace bodysplat
