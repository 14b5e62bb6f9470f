#include "bodysplat/latents.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace bodysplat {

void ViewBundle::validate() const {
  if (views.empty()) throw schema_error("view bundle: no views");
  if (!(radius > 0) || !std::isfinite(radius)) throw schema_error("view bundle: bad radius");
  if (!center.allFinite()) throw schema_error("view bundle: non-finite center");
  const int h = views[0].features.h, w = views[0].features.w, c = views[0].features.c;
  if (h < 1 || w < 1 || c < 1) throw schema_error("view bundle: empty feature grid");
  for (size_t i = 0; i < views.size(); ++i) {
    const LatentGrid& v = views[i];
    if (v.features.h != h || v.features.w != w || v.features.c != c)
      throw schema_error("view bundle: inconsistent grid shapes");
    if (!all_finite(v.features.data.data(), v.features.data.size()))
      throw schema_error("view bundle: non-finite features");
    if (!std::isfinite(v.azimuth_deg) || v.azimuth_deg < 0 || v.azimuth_deg >= 360)
      throw schema_error("view bundle: azimuth out of [0,360)");
    if (v.camera.width != w * kEncoderStride || v.camera.height != h * kEncoderStride)
      throw schema_error("view bundle: camera viewport does not match encoder stride");
  }
  if (views[0].azimuth_deg != 0)
    throw schema_error("view bundle: view 0 must be the input view (azimuth 0)");
}

Grid3 toy_encode(const Image& image, int stride) {
  if (stride < 1) throw schema_error("toy_encode: stride must be positive");
  if (image.c != 3) throw schema_error("toy_encode: expected 3-channel image");
  if (image.h % stride != 0 || image.w % stride != 0)
    throw schema_error("toy_encode: image dims not divisible by stride");
  const int lh = image.h / stride, lw = image.w / stride;

  // Forward-difference luminance gradient magnitude, zero on the last
  // row/column so a vertical step edge lights up exactly one pixel column.
  std::vector<Scalar> lum(static_cast<size_t>(image.h) * image.w);
  for (int y = 0; y < image.h; ++y)
    for (int x = 0; x < image.w; ++x)
      lum[static_cast<size_t>(y) * image.w + x] =
          0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) + 0.114 * image.at(y, x, 2);
  auto lum_at = [&](int y, int x) { return lum[static_cast<size_t>(y) * image.w + x]; };

  Grid3 out(lh, lw, kLatentChannels);
  const Scalar inv_n = 1.0 / (static_cast<Scalar>(stride) * stride);
  for (int by = 0; by < lh; ++by)
    for (int bx = 0; bx < lw; ++bx) {
      Scalar sum[3] = {0, 0, 0};
      Scalar grad_sum = 0;
      for (int dy = 0; dy < stride; ++dy)
        for (int dx = 0; dx < stride; ++dx) {
          const int y = by * stride + dy, x = bx * stride + dx;
          for (int ch = 0; ch < 3; ++ch) sum[ch] += image.at(y, x, ch);
          const Scalar gx = (x + 1 < image.w) ? lum_at(y, x + 1) - lum_at(y, x) : 0.0;
          const Scalar gy = (y + 1 < image.h) ? lum_at(y + 1, x) - lum_at(y, x) : 0.0;
          grad_sum += std::sqrt(gx * gx + gy * gy);
        }
      for (int ch = 0; ch < 3; ++ch) out.at(by, bx, ch) = sum[ch] * inv_n;
      out.at(by, bx, 3) = grad_sum * inv_n;
    }
  return out;
}

std::vector<ViewPose> view_pose_schedule(int count, Scalar elevation_deg) {
  if (count < 1) throw schema_error("view_pose_schedule: count must be positive");
  std::vector<ViewPose> poses(count);
  for (int k = 0; k < count; ++k)
    poses[k] = ViewPose{elevation_deg, 360.0 * k / count};
  return poses;
}

Scalar triangular_cfg(Scalar azimuth_deg, Scalar front_scale, Scalar back_scale) {
  Scalar a = std::fmod(azimuth_deg, 360.0);
  if (a < 0) a += 360.0;
  return front_scale + (back_scale - front_scale) * (1.0 - std::abs(180.0 - a) / 180.0);
}

namespace {

constexpr char kMagic[4] = {'B', 'S', 'L', 'B'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& s, const T& v) {
  s.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_pod(std::istream& s, T* v) {
  s.read(reinterpret_cast<char*>(v), sizeof(T));
}

void write_camera_block(std::ostream& s, const CameraView& cam) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) write_pod(s, static_cast<float>(cam.K(i, j)));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) write_pod(s, static_cast<float>(cam.R(i, j)));
  for (int i = 0; i < 3; ++i) write_pod(s, static_cast<float>(cam.t[i]));
  write_pod(s, static_cast<uint32_t>(cam.width));
  write_pod(s, static_cast<uint32_t>(cam.height));
}

CameraView read_camera_block(std::istream& s) {
  CameraView cam;
  float v;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      read_pod(s, &v);
      cam.K(i, j) = v;
    }
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      read_pod(s, &v);
      cam.R(i, j) = v;
    }
  for (int i = 0; i < 3; ++i) {
    read_pod(s, &v);
    cam.t[i] = v;
  }
  uint32_t w, h;
  read_pod(s, &w);
  read_pod(s, &h);
  cam.width = static_cast<int>(w);
  cam.height = static_cast<int>(h);
  return cam;
}

}  // namespace

void save_view_bundle(const std::string& path, const ViewBundle& bundle) {
  bundle.validate();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open view bundle for writing: " + path);
  f.write(kMagic, 4);
  write_pod(f, kVersion);
  write_pod(f, static_cast<uint32_t>(bundle.views.size()));
  write_pod(f, static_cast<uint32_t>(bundle.latent_h()));
  write_pod(f, static_cast<uint32_t>(bundle.latent_w()));
  write_pod(f, static_cast<uint32_t>(bundle.channels()));
  for (int i = 0; i < 3; ++i) write_pod(f, static_cast<float>(bundle.center[i]));
  write_pod(f, static_cast<float>(bundle.radius));
  for (const LatentGrid& v : bundle.views) {
    write_pod(f, static_cast<float>(v.elevation_deg));
    write_pod(f, static_cast<float>(v.azimuth_deg));
    write_camera_block(f, v.camera);
    for (Scalar x : v.features.data) write_pod(f, static_cast<float>(x));
  }
  if (!f) throw io_error("failed writing view bundle: " + path);
}

ViewBundle load_view_bundle(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open view bundle: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw schema_error("view bundle: bad magic in " + path);
  uint32_t version, n, h, w, c;
  read_pod(f, &version);
  if (version != kVersion) throw schema_error("view bundle: unsupported version");
  read_pod(f, &n);
  read_pod(f, &h);
  read_pod(f, &w);
  read_pod(f, &c);
  if (!f || n == 0 || n > 4096 || h == 0 || w == 0 || c == 0 || h > 4096 || w > 4096 || c > 4096)
    throw schema_error("view bundle: implausible header counts");

  ViewBundle bundle;
  float v;
  for (int i = 0; i < 3; ++i) {
    read_pod(f, &v);
    bundle.center[i] = v;
  }
  read_pod(f, &v);
  bundle.radius = v;
  bundle.views.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    LatentGrid& g = bundle.views[i];
    read_pod(f, &v);
    g.elevation_deg = v;
    read_pod(f, &v);
    g.azimuth_deg = v;
    g.camera = read_camera_block(f);
    g.features = Grid3(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
    for (Scalar& x : g.features.data) {
      float fv;
      read_pod(f, &fv);
      x = fv;
    }
  }
  if (!f) throw schema_error("view bundle: truncated file " + path);
  bundle.validate();
  return bundle;
}

}  // namespace bodysplat
