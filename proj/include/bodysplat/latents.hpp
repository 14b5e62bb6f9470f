#pragma once

#include "bodysplat/geometry.hpp"

namespace bodysplat {

inline constexpr int kEncoderStride = 8;
inline constexpr int kLatentChannels = 4;

// One latent feature grid together with the image-resolution camera it was
// observed from.
struct LatentGrid {
  Scalar elevation_deg = 0;
  Scalar azimuth_deg = 0;
  CameraView camera;  // image resolution = kEncoderStride * latent resolution
  Grid3 features;     // latent_h x latent_w x channels
};

// N grids on the orbit schedule; grid 0 is the input view F0 (azimuth 0),
// grids 1..N-1 come from the (external) novel-view synthesizer. (center,
// radius) normalize the scene: the body fits the sphere, cameras orbit it.
struct ViewBundle {
  std::vector<LatentGrid> views;
  Vec3 center = Vec3::Zero();
  Scalar radius = 1.0;

  int latent_h() const { return views.empty() ? 0 : views[0].features.h; }
  int latent_w() const { return views.empty() ? 0 : views[0].features.w; }
  int channels() const { return views.empty() ? 0 : views[0].features.c; }
  const LatentGrid& input_view() const { return views.at(0); }

  void validate() const;
};

// Block-mean encoder standing in for a learned VAE: per 8x8 block the
// channels are (mean R, mean G, mean B, mean luminance-gradient magnitude).
// Image dims must be divisible by the stride.
Grid3 toy_encode(const Image& image, int stride = kEncoderStride);

// Orbit pose schedule for the synthesized views: azimuth_k = 360*k/count at a
// shared elevation; entry 0 (azimuth 0) is the input view's pose.
struct ViewPose {
  Scalar elevation_deg;
  Scalar azimuth_deg;
};
std::vector<ViewPose> view_pose_schedule(int count, Scalar elevation_deg = 0);

// Triangle-wave classifier-free guidance scale over azimuth: 1.0 at the
// input view, peaking at 2.5 on the back view, symmetric around 180.
Scalar triangular_cfg(Scalar azimuth_deg, Scalar front_scale = 1.0, Scalar back_scale = 2.5);

// Binary container: header (magic, version, view count, latent h/w/c, scene
// center+radius), then per view elevation, azimuth, camera block (K, R, t,
// width, height) and f32 row-major features.
void save_view_bundle(const std::string& path, const ViewBundle& bundle);
ViewBundle load_view_bundle(const std::string& path);

}  // namespace bodysplat
