#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "bodysplat/transformer.hpp"
#include "support/oracles.hpp"

using namespace bodysplat;

namespace {

// Bundle with cameras on the orbit schedule and random features. Image
// resolution is pinned to the encoder stride so validate() accepts it.
ViewBundle random_bundle(const ModelConfig& cfg, Rng& rng, Scalar elevation = 10.0) {
  ViewBundle b;
  b.center = Vec3(0.03, -0.05, 0.1);
  b.radius = 1.4;
  const int iw = cfg.latent_w * kEncoderStride, ih = cfg.latent_h * kEncoderStride;
  const auto cams = make_orbit_cameras(cfg.n_views, elevation, 2.2 * b.radius, b.center, iw, ih,
                                       0.9 * iw);
  const auto poses = view_pose_schedule(cfg.n_views, elevation);
  b.views.resize(cfg.n_views);
  for (int v = 0; v < cfg.n_views; ++v) {
    b.views[v].elevation_deg = poses[v].elevation_deg;
    b.views[v].azimuth_deg = poses[v].azimuth_deg;
    b.views[v].camera = cams[v];
    b.views[v].features = Grid3(cfg.latent_h, cfg.latent_w, cfg.channels);
    for (Scalar& x : b.views[v].features.data) x = rng.uniform(-1.0, 1.0);
  }
  return b;
}

MatX random_points_near(const Vec3& center, Scalar radius, int n, Rng& rng) {
  MatX pts(n, 3);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) pts(i, k) = center[k] + rng.uniform(-0.6, 0.6) * radius;
  return pts;
}

// Row-broadcast affine map, the same contract as the model's linear layers
// but written directly in Eigen for the tests.
MatX affine(const MatX& x, const MatX& w, const MatX& b) {
  MatX y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

struct TinyAttn {
  MatX wq, bq, wk, bk, wv, bv, wo, bo;
  CrossAttnParams params() const { return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}; }
};

TinyAttn random_attn(int d, Rng& rng) {
  TinyAttn a;
  auto fill = [&](MatX& m, int r, int c) {
    m.resize(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-0.5, 0.5);
  };
  fill(a.wq, d, d);
  fill(a.bq, 1, d);
  fill(a.wk, d, d);
  fill(a.bk, 1, d);
  fill(a.wv, d, d);
  fill(a.bv, 1, d);
  fill(a.wo, d, d);
  fill(a.bo, 1, d);
  return a;
}

std::string tmp_path(const std::string& name) {
  return "/tmp/bodysplat_ttr_" + name;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  ModelConfig bad = cfg;
  bad.d = 30;  // not divisible by 8 heads
  CHECK_THROWS_AS(bad.validate(), schema_error);
  bad = cfg;
  bad.latent_h = 63;  // not divisible by patch
  CHECK_THROWS_AS(bad.validate(), schema_error);
  bad = cfg;
  bad.k_win = 0;
  CHECK_THROWS_AS(bad.validate(), schema_error);
  bad = cfg;
  bad.scale_max = bad.scale_min;
  CHECK_THROWS_AS(bad.validate(), schema_error);
  bad = cfg;
  bad.n_inter = -1;
  CHECK_THROWS_AS(bad.validate(), schema_error);

  CHECK(cfg.head_dim() * cfg.heads == cfg.d);
  CHECK(cfg.tokens_per_view() == (cfg.latent_h / cfg.patch) * (cfg.latent_w / cfg.patch));
  CHECK(cfg.cells_per_view() == cfg.latent_h * cfg.latent_w);
  CHECK(cfg.patch_dim() == (cfg.channels + 6) * cfg.patch * cfg.patch);
}

TEST_CASE("window bounds clamp to the token grid") {
  for (int cells_y : {1, 2, 3, 5, 8})
    for (int cells_x : {1, 2, 4, 7})
      for (int k : {1, 2, 3, 9}) {
        WindowIndex idx;
        idx.cells_y = cells_y;
        idx.cells_x = cells_x;
        idx.k_win = k;
        idx.buckets.assign(static_cast<size_t>(cells_y) * cells_x, {});
        for (int qy = 0; qy < cells_y; ++qy)
          for (int qx = 0; qx < cells_x; ++qx) {
            int y0, x0, ny, nx;
            idx.window_bounds(qy, qx, &y0, &x0, &ny, &nx);
            // Independent route: a k-wide window centered on the query
            // (rounded up on the high side), shifted back inside the grid.
            const int eny = std::min(k, cells_y), enx = std::min(k, cells_x);
            int ey0 = qy - (k - 1) / 2;
            ey0 = std::max(0, std::min(ey0, cells_y - eny));
            int ex0 = qx - (k - 1) / 2;
            ex0 = std::max(0, std::min(ex0, cells_x - enx));
            CHECK(y0 == ey0);
            CHECK(x0 == ex0);
            CHECK(ny == eny);
            CHECK(nx == enx);
            // The window always contains the query cell.
            CHECK(y0 <= qy);
            CHECK(qy < y0 + ny);
            CHECK(x0 <= qx);
            CHECK(qx < x0 + nx);
          }
      }
}

TEST_CASE("window index buckets points by projected token cell") {
  Rng rng(411);
  const int latent_h = 6, latent_w = 8, patch = 2, k_win = 2;
  const Vec3 center(0.0, 0.1, -0.05);
  const Scalar radius = 1.0;
  const CameraView cam = make_orbit_cameras(1, 12.0, 2.5 * radius, center,
                                            latent_w * kEncoderStride,
                                            latent_h * kEncoderStride,
                                            0.9 * latent_w * kEncoderStride)[0];
  // Mix of points near the body (mostly visible) and far outliers (behind or
  // outside the frame).
  MatX pts(40, 3);
  for (int i = 0; i < 30; ++i)
    for (int k = 0; k < 3; ++k) pts(i, k) = center[k] + rng.uniform(-0.8, 0.8) * radius;
  for (int i = 30; i < 40; ++i)
    for (int k = 0; k < 3; ++k) pts(i, k) = center[k] + rng.uniform(-30.0, 30.0);

  const WindowIndex idx = build_window_index(pts, cam, patch, k_win, latent_h, latent_w);
  CHECK(idx.cells_y == latent_h / patch);
  CHECK(idx.cells_x == latent_w / patch);
  CHECK(idx.k_win == k_win);
  CHECK(idx.num_points == 40);
  CHECK(static_cast<int>(idx.buckets.size()) == idx.cells_y * idx.cells_x);

  // Independent route: project each point and derive its bucket by hand.
  std::vector<int> expected_bucket(40, -1);
  for (int i = 0; i < 40; ++i) {
    const ProjectedPoint pp = project_point(cam, pts.row(i).transpose());
    if (!pp.valid) continue;
    const int cx = static_cast<int>(pp.uv.x() / kEncoderStride) / patch;
    const int cy = static_cast<int>(pp.uv.y() / kEncoderStride) / patch;
    expected_bucket[i] = cy * idx.cells_x + cx;
  }
  std::vector<int> actual_bucket(40, -1);
  for (size_t cell = 0; cell < idx.buckets.size(); ++cell)
    for (int id : idx.buckets[cell]) {
      CHECK(actual_bucket[id] == -1);  // each point lands in at most one bucket
      actual_bucket[id] = static_cast<int>(cell);
    }
  for (int i = 0; i < 40; ++i) CHECK(actual_bucket[i] == expected_bucket[i]);

  int dropped = 0;
  for (int i = 0; i < 40; ++i)
    if (expected_bucket[i] < 0) ++dropped;
  CHECK(dropped > 0);  // the far outliers exercised the invalid path
  CHECK(dropped < 40);
}

TEST_CASE("gather admits exactly the window contents in row-major bucket order") {
  Rng rng(917);
  WindowIndex idx;
  idx.cells_y = 3;
  idx.cells_x = 4;
  idx.k_win = 2;
  idx.num_points = 25;
  idx.buckets.assign(12, {});
  for (int i = 0; i < idx.num_points; ++i) {
    const int cell = rng.uniform_int(0, 11);
    idx.buckets[cell].push_back(i);
  }

  const std::vector<uint8_t> mask = window_mask_dense(idx);
  REQUIRE(static_cast<int>(mask.size()) == 12 * idx.num_points);

  for (int qy = 0; qy < idx.cells_y; ++qy)
    for (int qx = 0; qx < idx.cells_x; ++qx) {
      const int q = qy * idx.cells_x + qx;
      const std::vector<int> keys = idx.gather(q);

      // Expected: window cells in row-major order, bucket contents verbatim.
      int y0, x0, ny, nx;
      idx.window_bounds(qy, qx, &y0, &x0, &ny, &nx);
      std::vector<int> expect;
      for (int wy = y0; wy < y0 + ny; ++wy)
        for (int wx = x0; wx < x0 + nx; ++wx)
          for (int id : idx.buckets[wy * idx.cells_x + wx]) expect.push_back(id);
      CHECK(keys == expect);

      // Dense mask agrees in both directions.
      std::set<int> admitted(keys.begin(), keys.end());
      for (int j = 0; j < idx.num_points; ++j)
        CHECK(static_cast<bool>(mask[static_cast<size_t>(q) * idx.num_points + j]) ==
              (admitted.count(j) > 0));
    }
}

TEST_CASE("windowed kernel matches dense masked attention") {
  Rng rng(5501);
  for (int inst = 0; inst < 12; ++inst) {
    const int heads = std::vector<int>{1, 2, 4}[rng.uniform_int(0, 2)];
    const int d = heads * std::vector<int>{4, 8}[rng.uniform_int(0, 1)];
    WindowIndex idx;
    idx.cells_y = rng.uniform_int(1, 4);
    idx.cells_x = rng.uniform_int(1, 4);
    idx.k_win = rng.uniform_int(1, 3);
    const int L = idx.cells_y * idx.cells_x;
    idx.num_points = rng.uniform_int(0, 30);
    idx.buckets.assign(static_cast<size_t>(L), {});
    for (int i = 0; i < idx.num_points; ++i) {
      // Leave some points unbucketed, as invalid projections would be.
      if (rng.uniform(0.0, 1.0) < 0.2) continue;
      idx.buckets[rng.uniform_int(0, L - 1)].push_back(i);
    }

    const TinyAttn attn = random_attn(d, rng);
    MatX x_ln(L, d), h(std::max(idx.num_points, 0), d);
    for (Eigen::Index i = 0; i < x_ln.size(); ++i) x_ln.data()[i] = rng.uniform(-1.0, 1.0);
    for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = rng.uniform(-1.0, 1.0);

    const MatX k_full = affine(h, attn.wk, attn.bk);
    const MatX v_full = affine(h, attn.wv, attn.bv);

    AttnStats stats;
    const MatX y_kernel =
        cross_attention_windowed(x_ln, k_full, v_full, idx, attn.params(), heads, &stats, nullptr);
    const MatX y_ref =
        cross_attention_reference(x_ln, h, window_mask_dense(idx), attn.params(), heads);

    REQUIRE(y_kernel.rows() == L);
    REQUIRE(y_ref.rows() == L);
    const double max_diff = (y_kernel - y_ref).cwiseAbs().maxCoeff();
    CHECK(max_diff <= 1e-10);

    // Counters: one query bump per row, heads * admitted keys score pairs.
    long long expect_scores = 0;
    for (int q = 0; q < L; ++q) {
      const auto keys = idx.gather(q);
      expect_scores += static_cast<long long>(heads) * static_cast<long long>(keys.size());
      if (keys.empty()) {
        CHECK(y_kernel.row(q).cwiseAbs().maxCoeff() == 0.0);
        CHECK(y_ref.row(q).cwiseAbs().maxCoeff() == 0.0);
      }
    }
    CHECK(stats.queries == L);
    CHECK(stats.score_evals == expect_scores);
  }
}

TEST_CASE("dense reference rejects a mask of the wrong size") {
  Rng rng(88);
  const int d = 8, heads = 2;
  WindowIndex idx;
  idx.cells_y = idx.cells_x = 2;
  idx.k_win = 1;
  idx.num_points = 3;
  idx.buckets.assign(4, {});
  idx.buckets[0] = {0, 1};
  idx.buckets[3] = {2};
  const TinyAttn attn = random_attn(d, rng);
  MatX x_ln = MatX::Random(4, d), h = MatX::Random(3, d);
  std::vector<uint8_t> mask(4 * 3 + 1, 1);
  CHECK_THROWS_AS(cross_attention_reference(x_ln, h, mask, attn.params(), heads), schema_error);
}

TEST_CASE("score counter hits the fully populated window bound") {
  // One human point per token cell, every window fully populated: the score
  // count per head per block must equal tokens * k_win^2 exactly.
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.n_intra = 1;
  cfg.n_inter = 2;
  cfg.k_win = 2;
  cfg.channels = 4;
  cfg.latent_h = 8;
  cfg.latent_w = 8;
  cfg.n_views = 1;
  Rng rng(2024);
  ReconModel model = ReconModel::create(cfg, 7);
  model.perturb(rng, 0.02);

  ViewBundle bundle = random_bundle(cfg, rng, 0.0);
  const CameraView& cam = bundle.views[0].camera;

  const int cells_y = cfg.tokens_y(), cells_x = cfg.tokens_x();
  const int span = cfg.patch * kEncoderStride;  // image pixels per token cell
  MatX pts(cells_y * cells_x, 3);
  for (int ty = 0; ty < cells_y; ++ty)
    for (int tx = 0; tx < cells_x; ++tx) {
      const Vec2 uv(tx * span + span / 2.0, ty * span + span / 2.0);
      pts.row(ty * cells_x + tx) = unproject_pixel(cam, uv, 2.2 * bundle.radius).transpose();
    }
  // Confirm the fabricated layout: exactly one point in every bucket.
  const WindowIndex idx =
      build_window_index(pts, cam, cfg.patch, cfg.k_win, cfg.latent_h, cfg.latent_w);
  for (const auto& bucket : idx.buckets) REQUIRE(bucket.size() == 1);

  AttnStats stats;
  const GaussianSet gs = model.forward(bundle, &pts, nullptr, &stats);
  const long long L = cfg.tokens_per_view();
  CHECK(stats.queries == static_cast<long long>(cfg.n_inter) * cfg.n_views * L);
  CHECK(stats.score_evals == static_cast<long long>(cfg.n_inter) * cfg.n_views * cfg.heads * L *
                                 cfg.k_win * cfg.k_win);
  // Per head per block per view: exactly tokens * k_win^2.
  CHECK(stats.score_evals / (cfg.n_inter * cfg.n_views * cfg.heads) == L * cfg.k_win * cfg.k_win);
  CHECK(gs.positions.rows() == cfg.n_views * cfg.cells_per_view());
}

TEST_CASE("decoded attributes respect their activation ranges") {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.n_intra = 1;
  cfg.n_inter = 1;
  cfg.channels = 4;
  cfg.latent_h = 4;
  cfg.latent_w = 4;
  cfg.n_views = 2;
  cfg.scale_min = 1e-4;
  cfg.scale_max = 0.3;
  Rng rng(31337);
  ReconModel model = ReconModel::create(cfg, 99);
  model.perturb(rng, 0.4);  // push activations away from their midpoints

  ViewBundle bundle = random_bundle(cfg, rng);
  const MatX pts = random_points_near(bundle.center, bundle.radius, 12, rng);
  const GaussianSet gs = model.forward(bundle, &pts, nullptr, nullptr);

  const Scalar near = 0.5 * bundle.radius, far = 3.5 * bundle.radius;
  const int cells = cfg.cells_per_view();
  REQUIRE(gs.positions.rows() == cfg.n_views * cells);
  for (int v = 0; v < cfg.n_views; ++v) {
    const CameraView cam_lat = bundle.views[v].camera.resized(cfg.latent_w, cfg.latent_h);
    const Vec3 origin = cam_lat.center();
    const Grid3 rays = plucker_raymap(cam_lat);
    for (int y = 0; y < cfg.latent_h; ++y)
      for (int x = 0; x < cfg.latent_w; ++x) {
        const int idx = v * cells + y * cfg.latent_w + x;
        const Vec3 offset = gs.positions.row(idx).transpose() - origin;
        const Scalar t = offset.norm();
        CHECK(t >= near - 1e-9);
        CHECK(t <= far + 1e-9);
        // The Gaussian sits on its own cell ray.
        const Vec3 dir(rays.at(y, x, 0), rays.at(y, x, 1), rays.at(y, x, 2));
        CHECK(offset.cross(dir).norm() <= 1e-9 * t);
        CHECK(offset.dot(dir) > 0);
      }
  }
  int interior = 0;
  for (Eigen::Index i = 0; i < gs.positions.rows(); ++i) {
    CHECK(std::abs(gs.rotations.row(i).norm() - 1.0) <= 1e-12);
    for (int k = 0; k < 3; ++k) {
      CHECK(gs.scales(i, k) >= cfg.scale_min);
      CHECK(gs.scales(i, k) <= cfg.scale_max);
      // Sigmoid outputs; the hard perturbation may saturate some at double
      // precision, but never push past the bounds.
      CHECK(gs.colors(i, k) >= 0.0);
      CHECK(gs.colors(i, k) <= 1.0);
      if (gs.colors(i, k) > 0.0 && gs.colors(i, k) < 1.0) ++interior;
    }
    CHECK(gs.opacities[i] >= 0.0);
    CHECK(gs.opacities[i] <= 1.0);
  }
  CHECK(interior > 0);
  CHECK_NOTHROW(gs.validate(cfg.scale_min, cfg.scale_max));
}

TEST_CASE("initialization: silent residual branches, unit layer norm scales") {
  ModelConfig cfg;
  cfg.d = 32;
  cfg.heads = 4;
  cfg.patch = 2;
  cfg.n_intra = 2;
  cfg.n_inter = 1;
  cfg.latent_h = 8;
  cfg.latent_w = 8;
  cfg.n_views = 2;
  const ReconModel model = ReconModel::create(cfg, 123);
  const ParamStore& P = model.params;

  REQUIRE(P.names.size() == P.values.size());
  CHECK(P.names[0] == "embed.weight");
  CHECK(P.names[1] == "embed.bias");
  CHECK(P.names.back() == "head.bias");

  int seen_random = 0;
  for (size_t i = 0; i < P.size(); ++i) {
    const std::string& name = P.names[i];
    const MatX& w = P.values[i];
    const size_t dot = name.rfind('.');
    const std::string sfx = name.substr(dot + 1);
    if (sfx == "gamma") {
      CHECK((w.array() == 1.0).all());
      CHECK(P.decay[i] == 0);
    } else if (sfx == "beta") {
      CHECK((w.array() == 0.0).all());
      CHECK(P.decay[i] == 0);
    } else if (sfx[0] == 'b' || sfx == "wo" || sfx == "w2" || name == "head.weight") {
      CHECK((w.array() == 0.0).all());
      CHECK(P.decay[i] == 1);
    } else {
      // Truncated normal, stddev 0.02 clipped at two sigma.
      CHECK(w.cwiseAbs().maxCoeff() <= 0.04);
      CHECK(w.cwiseAbs().maxCoeff() > 0.0);
      CHECK(P.decay[i] == 1);
      ++seen_random;
    }
  }
  CHECK(seen_random > 0);

  // Same seed, same parameters; different seed, different parameters.
  const ReconModel again = ReconModel::create(cfg, 123);
  const ReconModel other = ReconModel::create(cfg, 124);
  bool identical = true, differs = false;
  for (size_t i = 0; i < P.size(); ++i) {
    if (P.values[i] != again.params.values[i]) identical = false;
    if (P.values[i] != other.params.values[i]) differs = true;
  }
  CHECK(identical);
  CHECK(differs);
}

TEST_CASE("geometry-free ablation skips the cross-attention stack") {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.n_intra = 1;
  cfg.n_inter = 2;
  cfg.latent_h = 4;
  cfg.latent_w = 4;
  cfg.n_views = 2;
  Rng rng(808);
  ReconModel model = ReconModel::create(cfg, 55);
  model.perturb(rng, 0.05);

  ViewBundle bundle = random_bundle(cfg, rng);
  const MatX pts = random_points_near(bundle.center, bundle.radius, 10, rng);

  AttnStats stats_off;
  Tape tape;
  const GaussianSet off = model.forward(bundle, nullptr, &tape, &stats_off);
  CHECK(stats_off.queries == 0);
  CHECK(stats_off.score_evals == 0);

  AttnStats stats_on;
  const GaussianSet on = model.forward(bundle, &pts, nullptr, &stats_on);
  CHECK(stats_on.queries > 0);
  // The two paths genuinely diverge once the cross blocks run.
  CHECK((on.positions - off.positions).cwiseAbs().maxCoeff() > 0.0);

  // Backward through the ablation leaves every human-branch tensor untouched.
  GaussianGrads d_gauss(static_cast<int>(off.positions.rows()));
  for (Eigen::Index i = 0; i < d_gauss.positions.size(); ++i)
    d_gauss.positions.data()[i] = rng.uniform(-1.0, 1.0);
  for (Eigen::Index i = 0; i < d_gauss.colors.size(); ++i)
    d_gauss.colors.data()[i] = rng.uniform(-1.0, 1.0);
  model.zero_grads();
  std::vector<Grid3> latent_grads;
  model.backward(tape, d_gauss, &latent_grads);

  bool trunk_has_grad = false;
  for (size_t i = 0; i < model.params.size(); ++i) {
    const std::string& name = model.params.names[i];
    const double g = model.params.grads[i].cwiseAbs().maxCoeff();
    if (name.rfind("inter", 0) == 0 || name.rfind("tok", 0) == 0)
      CHECK(g == 0.0);
    else if (g > 0.0)
      trunk_has_grad = true;
  }
  CHECK(trunk_has_grad);
  REQUIRE(latent_grads.size() == static_cast<size_t>(cfg.n_views));
  CHECK(latent_grads[0].h == cfg.latent_h);
  CHECK(latent_grads[0].w == cfg.latent_w);
  CHECK(latent_grads[0].c == cfg.channels);
}

TEST_CASE("forward rejects bundles that disagree with the config") {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.n_intra = 1;
  cfg.n_inter = 1;
  cfg.latent_h = 4;
  cfg.latent_w = 4;
  cfg.n_views = 2;
  Rng rng(606);
  const ReconModel model = ReconModel::create(cfg, 3);

  ViewBundle good = random_bundle(cfg, rng);
  CHECK_NOTHROW(model.forward(good, nullptr, nullptr, nullptr));

  ModelConfig wide = cfg;
  wide.latent_w = 8;
  ViewBundle wrong_w = random_bundle(wide, rng);
  CHECK_THROWS_AS(model.forward(wrong_w, nullptr, nullptr, nullptr), config_mismatch);

  ModelConfig more = cfg;
  more.n_views = 3;
  ViewBundle wrong_n = random_bundle(more, rng);
  CHECK_THROWS_AS(model.forward(wrong_n, nullptr, nullptr, nullptr), config_mismatch);

  MatX bad_pts(5, 2);
  bad_pts.setZero();
  CHECK_THROWS_AS(model.forward(good, &bad_pts, nullptr, nullptr), schema_error);
}

TEST_CASE("checkpoint round trip preserves config and weights") {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.n_intra = 1;
  cfg.n_inter = 1;
  cfg.k_win = 3;
  cfg.latent_h = 4;
  cfg.latent_w = 8;
  cfg.n_views = 2;
  cfg.scale_min = 2e-4;
  cfg.scale_max = 0.25;
  Rng rng(424242);
  ReconModel model = ReconModel::create(cfg, 11);
  model.perturb(rng, 0.1);

  const std::string path = tmp_path("ckpt.bsck");
  model.save(path);
  const ReconModel loaded = ReconModel::load(path);
  CHECK(loaded.cfg == cfg);
  REQUIRE(loaded.params.size() == model.params.size());

  // Storage is f32, so one round trip quantizes; the second is exact.
  double worst = 0;
  for (size_t i = 0; i < model.params.size(); ++i) {
    CHECK(loaded.params.names[i] == model.params.names[i]);
    worst = std::max(worst,
                     (loaded.params.values[i] - model.params.values[i]).cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-6);
  CHECK(worst > 0.0);

  const std::string path2 = tmp_path("ckpt2.bsck");
  loaded.save(path2);
  const std::string bytes2 = slurp(path2);
  const ReconModel reloaded = ReconModel::load(path2);
  for (size_t i = 0; i < loaded.params.size(); ++i)
    CHECK(reloaded.params.values[i] == loaded.params.values[i]);

  // Saving the quantized model again produces byte-identical output.
  const std::string path3 = tmp_path("ckpt3.bsck");
  reloaded.save(path3);
  CHECK(slurp(path3) == bytes2);

  // Same weights, same prediction.
  ViewBundle bundle = random_bundle(cfg, rng);
  const MatX pts = random_points_near(bundle.center, bundle.radius, 8, rng);
  const GaussianSet a = loaded.forward(bundle, &pts, nullptr, nullptr);
  const GaussianSet b = reloaded.forward(bundle, &pts, nullptr, nullptr);
  CHECK(a.positions == b.positions);
  CHECK(a.colors == b.colors);

  // Corrupt the magic and the loader refuses.
  std::string broken = bytes2;
  broken[0] = 'X';
  const std::string bad_path = tmp_path("ckpt_bad.bsck");
  {
    std::ofstream f(bad_path, std::ios::binary);
    f.write(broken.data(), static_cast<std::streamsize>(broken.size()));
  }
  CHECK_THROWS_AS(ReconModel::load(bad_path), schema_error);
  // Truncation is caught too.
  const std::string trunc_path = tmp_path("ckpt_trunc.bsck");
  {
    std::ofstream f(trunc_path, std::ios::binary);
    f.write(bytes2.data(), static_cast<std::streamsize>(bytes2.size() / 2));
  }
  CHECK_THROWS(ReconModel::load(trunc_path));
  for (const auto& p : {path, path2, path3, bad_path, trunc_path}) std::remove(p.c_str());
}

TEST_CASE("analytic gradients match finite differences across every tensor") {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.patch = 1;
  cfg.n_intra = 1;
  cfg.n_inter = 1;
  cfg.k_win = 2;
  cfg.channels = 2;
  cfg.latent_h = 4;
  cfg.latent_w = 4;
  cfg.n_views = 2;
  Rng rng(160803);
  ReconModel model = ReconModel::create(cfg, 17);
  model.perturb(rng, 0.05);  // wake the zero-initialized projections

  ViewBundle bundle = random_bundle(cfg, rng);
  MatX pts = random_points_near(bundle.center, bundle.radius, 6, rng);

  // Fixed random linear functional over every decoded attribute, so the
  // objective routes gradients through all five activation families.
  const int n = cfg.n_views * cfg.cells_per_view();
  GaussianGrads w(n);
  auto fill = [&](MatX& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  };
  fill(w.positions);
  fill(w.rotations);
  fill(w.scales);
  fill(w.colors);
  for (Eigen::Index i = 0; i < w.opacities.size(); ++i) w.opacities[i] = rng.uniform(-1.0, 1.0);

  auto objective = [&]() {
    const GaussianSet gs = model.forward(bundle, &pts, nullptr, nullptr);
    return (gs.positions.array() * w.positions.array()).sum() +
           (gs.rotations.array() * w.rotations.array()).sum() +
           (gs.scales.array() * w.scales.array()).sum() +
           (gs.colors.array() * w.colors.array()).sum() +
           (gs.opacities.array() * w.opacities.array()).sum();
  };

  Tape tape;
  AttnStats stats;
  model.forward(bundle, &pts, &tape, &stats);
  model.zero_grads();
  std::vector<Grid3> latent_grads;
  model.backward(tape, w, &latent_grads);

  const Scalar h = 1e-5;
  int checked = 0;
  for (size_t ti = 0; ti < model.params.size(); ++ti) {
    MatX& tensor = model.params.values[ti];
    const MatX& grad = model.params.grads[ti];
    for (int probe = 0; probe < 2; ++probe) {
      const Eigen::Index flat = rng.uniform_int(0, static_cast<int>(tensor.size()) - 1);
      const Scalar keep = tensor.data()[flat];
      tensor.data()[flat] = keep + h;
      const Scalar f_plus = objective();
      tensor.data()[flat] = keep - h;
      const Scalar f_minus = objective();
      tensor.data()[flat] = keep;
      const Scalar fd = (f_plus - f_minus) / (2 * h);
      const bool ok = oracle::fd_close(grad.data()[flat], fd);
      if (!ok)
        MESSAGE("tensor " << model.params.names[ti] << " flat " << flat << " analytic "
                          << grad.data()[flat] << " fd " << fd);
      CHECK(ok);
      ++checked;
    }
  }
  CHECK(checked == 2 * static_cast<int>(model.params.size()));

  // Gradients w.r.t. the latent features, same recipe.
  REQUIRE(latent_grads.size() == static_cast<size_t>(cfg.n_views));
  for (int probe = 0; probe < 8; ++probe) {
    const int v = rng.uniform_int(0, cfg.n_views - 1);
    const int flat = rng.uniform_int(0, static_cast<int>(bundle.views[v].features.data.size()) - 1);
    Scalar& cell = bundle.views[v].features.data[flat];
    const Scalar keep = cell;
    cell = keep + h;
    const Scalar f_plus = objective();
    cell = keep - h;
    const Scalar f_minus = objective();
    cell = keep;
    const Scalar fd = (f_plus - f_minus) / (2 * h);
    CHECK(oracle::fd_close(latent_grads[v].data[flat], fd));
  }

  // Human-point gradients flow: nudging a vertex that feeds the window index
  // is a structural change, but the sampled features are differentiable, so
  // the tok-branch tensors must carry gradient.
  bool tok_grad = false;
  for (size_t i = 0; i < model.params.size(); ++i)
    if (model.params.names[i].rfind("tok", 0) == 0 &&
        model.params.grads[i].cwiseAbs().maxCoeff() > 0)
      tok_grad = true;
  CHECK(tok_grad);
}

TEST_CASE("forward is deterministic for a fixed model and bundle") {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.n_intra = 1;
  cfg.n_inter = 1;
  cfg.latent_h = 4;
  cfg.latent_w = 4;
  cfg.n_views = 2;
  Rng rng(9001);
  ReconModel model = ReconModel::create(cfg, 5);
  model.perturb(rng, 0.05);
  ViewBundle bundle = random_bundle(cfg, rng);
  const MatX pts = random_points_near(bundle.center, bundle.radius, 9, rng);

  const GaussianSet a = model.forward(bundle, &pts, nullptr, nullptr);
  const GaussianSet b = model.forward(bundle, &pts, nullptr, nullptr);
  CHECK(a.positions == b.positions);
  CHECK(a.rotations == b.rotations);
  CHECK(a.scales == b.scales);
  CHECK(a.colors == b.colors);
  CHECK(a.opacities == b.opacities);
}
