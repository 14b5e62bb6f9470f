#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "bodysplat/configfile.hpp"
#include "bodysplat/imageio.hpp"
#include "bodysplat/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bodysplat;

namespace {

std::string view_filename(int index, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "view_%03d%s", index, suffix);
  return buf;
}

TrainConfig resolve_config(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
  TrainConfig cfg;
  if (!config_path.empty()) apply_config_file(&cfg, config_path);
  for (const std::string& kv : overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw schema_error("--set expects key=value, got '" + kv + "'");
    set_config_key(&cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void load_body_params(const std::string& path, int expected_joints, VecX* beta, MatX* theta) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open body params: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw schema_error("body params: invalid JSON in " + path + ": " + e.what());
  }
  if (!j.contains("beta") || !j.contains("theta"))
    throw schema_error("body params: need 'beta' and 'theta' in " + path);
  const auto& jb = j["beta"];
  if (!jb.is_array() || static_cast<int>(jb.size()) != kNumShapeDims)
    throw schema_error("body params: beta must have " + std::to_string(kNumShapeDims) + " entries");
  beta->resize(kNumShapeDims);
  for (int i = 0; i < kNumShapeDims; ++i) (*beta)[i] = jb[i].get<double>();
  const auto& jt = j["theta"];
  if (!jt.is_array() || static_cast<int>(jt.size()) != expected_joints)
    throw schema_error("body params: theta must have one row per joint");
  theta->resize(expected_joints, 3);
  for (int r = 0; r < expected_joints; ++r) {
    if (!jt[r].is_array() || jt[r].size() != 3)
      throw schema_error("body params: theta rows must have 3 entries");
    for (int k = 0; k < 3; ++k) (*theta)(r, k) = jt[r][k].get<double>();
  }
}

ReconModel resolve_model(const std::string& checkpoint, const std::string& config_path,
                         const TrainConfig& cfg) {
  if (!checkpoint.empty()) {
    ReconModel m = ReconModel::load(checkpoint);
    if (!config_path.empty() && !(m.cfg == cfg.model))
      throw config_mismatch("checkpoint model config disagrees with --config");
    return m;
  }
  return ReconModel::create(cfg.model, cfg.model_seed);
}

// Bundle for one real input image: view 0 carries the encoded image, the
// remaining schedule views carry zero latents (stand-ins for an external
// novel-view synthesizer).
ViewBundle bundle_from_image(const Image& img, const TrainConfig& cfg, const Vec3& center,
                             Scalar radius) {
  const ModelConfig& mc = cfg.model;
  if (img.h != mc.latent_h * kEncoderStride || img.w != mc.latent_w * kEncoderStride)
    throw config_mismatch("input image must be " + std::to_string(mc.latent_w * kEncoderStride) +
                          "x" + std::to_string(mc.latent_h * kEncoderStride) +
                          " for this model config");
  ViewBundle bundle;
  bundle.center = center;
  bundle.radius = radius;
  const std::vector<ViewPose> schedule = view_pose_schedule(mc.n_views, cfg.scene.schedule_elevation);
  const std::vector<CameraView> cams = make_orbit_cameras(
      mc.n_views, cfg.scene.schedule_elevation, cfg.scene.orbit_scale * radius, center, img.w,
      img.h, cfg.scene.focal_scale * img.w);
  bundle.views.resize(mc.n_views);
  for (int k = 0; k < mc.n_views; ++k) {
    LatentGrid& g = bundle.views[k];
    g.elevation_deg = schedule[k].elevation_deg;
    g.azimuth_deg = schedule[k].azimuth_deg;
    g.camera = cams[k];
    g.features = (k == 0) ? toy_encode(img) : Grid3(mc.latent_h, mc.latent_w, kLatentChannels);
  }
  return bundle;
}

int cmd_make_fixtures(const std::string& out_dir) {
  fs::create_directories(out_dir);
  const BodyModel body = make_capsule_human();
  save_body_model(out_dir + "/body.bsbm", body);

  TrainConfig cfg;
  cfg.model.d = 64;
  cfg.model.heads = 4;
  cfg.model.n_intra = 2;
  cfg.model.n_inter = 1;
  cfg.model.latent_h = 16;
  cfg.model.latent_w = 16;
  cfg.model.scale_max = 0.1;
  cfg.optim.total_steps = 400;
  cfg.optim.warmup_steps = 40;
  cfg.optim.peak_lr = 2e-3;
  cfg.n_scenes = 1;
  write_config_file(out_dir + "/config.cfg", cfg);

  const SyntheticScene scene = generate_scene(body, cfg.scene_seed, cfg.scene, cfg.model);
  save_view_bundle(out_dir + "/bundle.bslb", scene.bundle);

  const MeshRender input = rasterize_mesh(scene.mesh.vertices, body.faces, body.labels,
                                          scene.vertex_colors, scene.bundle.views[0].camera,
                                          Vec3::Zero());
  write_png(out_dir + "/input.png", input.color);

  json params;
  params["beta"] = std::vector<double>(scene.beta.data(), scene.beta.data() + scene.beta.size());
  std::vector<std::vector<double>> theta_rows;
  for (int r = 0; r < scene.theta.rows(); ++r)
    theta_rows.push_back({scene.theta(r, 0), scene.theta(r, 1), scene.theta(r, 2)});
  params["theta"] = theta_rows;
  std::ofstream pf(out_dir + "/body_params.json");
  pf << params.dump(2) << "\n";
  if (!pf) throw io_error("failed writing body params");

  std::vector<CameraView> cams;
  for (const SupervisionView& sv : scene.supervision.levels[0].views) cams.push_back(sv.camera);
  save_camera_manifest(out_dir + "/cameras.bscam", cams);

  std::cout << "fixtures written to " << out_dir << "\n";
  return 0;
}

struct ReconstructArgs {
  std::string image, body_model, body_params, latents, checkpoint, config, out, render_views,
      cameras;
  std::vector<std::string> overrides;
  bool no_human_prior = false;
};

int cmd_reconstruct(const ReconstructArgs& a) {
  const TrainConfig cfg = resolve_config(a.config, a.overrides);
  const ReconModel model = resolve_model(a.checkpoint, a.config, cfg);

  const BodyModel body = load_body_model(a.body_model);
  VecX beta;
  MatX theta;
  load_body_params(a.body_params, body.num_joints(), &beta, &theta);
  const BodyMesh mesh = pose_body(body, beta, theta);

  ViewBundle bundle;
  if (!a.latents.empty()) {
    bundle = load_view_bundle(a.latents);
    if (bundle.latent_h() != model.cfg.latent_h || bundle.latent_w() != model.cfg.latent_w ||
        bundle.channels() != model.cfg.channels ||
        static_cast<int>(bundle.views.size()) != model.cfg.n_views)
      throw config_mismatch("latent bundle shape does not match the model config");
  } else {
    const Image img = read_image(a.image);
    Vec3 center;
    Scalar radius;
    compute_bounding_sphere(mesh.vertices, &center, &radius);
    bundle = bundle_from_image(img, cfg, center, radius);
  }

  const bool prior = !a.no_human_prior && cfg.use_human_prior;
  const GaussianSet gs = model.forward(bundle, prior ? &mesh.vertices : nullptr, nullptr, nullptr);
  export_splats(a.out, gs);
  std::cout << "wrote " << gs.size() << " splats to " << a.out << "\n";

  if (!a.render_views.empty()) {
    if (a.cameras.empty())
      throw schema_error("--render-views requires --cameras");
    fs::create_directories(a.render_views);
    const std::vector<CameraView> cams = load_camera_manifest(a.cameras);
    RenderSettings rs;
    for (size_t i = 0; i < cams.size(); ++i) {
      const RenderOutput ro = render(gs, cams[i], rs);
      write_png(a.render_views + "/" + view_filename(static_cast<int>(i), ".png"), ro.color);
    }
    std::cout << "rendered " << cams.size() << " views to " << a.render_views << "\n";
  }
  return 0;
}

struct RenderArgs {
  std::string splats, cameras, out_dir, background;
  bool raw = false;
};

int cmd_render(const RenderArgs& a) {
  const GaussianSet gs = import_splats(a.splats);
  const std::vector<CameraView> cams = load_camera_manifest(a.cameras);
  fs::create_directories(a.out_dir);
  RenderSettings rs;
  if (!a.background.empty()) {
    double r, g, b;
    if (std::sscanf(a.background.c_str(), "%lf,%lf,%lf", &r, &g, &b) != 3)
      throw schema_error("--background expects r,g,b");
    rs.background = Vec3(r, g, b);
  }
  for (size_t i = 0; i < cams.size(); ++i) {
    const RenderOutput ro = render(gs, cams[i], rs);
    const int idx = static_cast<int>(i);
    write_png(a.out_dir + "/" + view_filename(idx, ".png"), ro.color);
    if (a.raw) {
      write_pfm(a.out_dir + "/" + view_filename(idx, ".pfm"), ro.color);
      Grid3 alpha(ro.color.h, ro.color.w, 1);
      alpha.data = ro.alpha;
      write_pfm(a.out_dir + "/" + view_filename(idx, "_alpha.pfm"), alpha);
    }
  }
  std::cout << "rendered " << cams.size() << " views to " << a.out_dir << "\n";
  return 0;
}

struct TrainArgs {
  std::string body_model, out_dir, config;
  std::vector<std::string> overrides;
  bool no_human_prior = false;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = resolve_config(a.config, a.overrides);
  if (a.no_human_prior) cfg.use_human_prior = false;
  fs::create_directories(a.out_dir);

  const BodyModel body = load_body_model(a.body_model);
  std::vector<SyntheticScene> scenes;
  for (int i = 0; i < cfg.n_scenes; ++i)
    scenes.push_back(generate_scene(body, cfg.scene_seed + i, cfg.scene, cfg.model));

  ReconModel model = ReconModel::create(cfg.model, cfg.model_seed);
  const TrainResult tr = train(model, scenes, cfg, a.out_dir + "/metrics.jsonl");
  model.save(a.out_dir + "/model.bsck");

  const EvalReport ev = evaluate(model, scenes, cfg.use_human_prior);
  json j;
  j["steps"] = tr.steps;
  j["first_loss"] = tr.first_loss;
  j["final_loss"] = tr.final_loss;
  j["input_view_psnr"] = tr.input_view_psnr;
  j["holdout_mean_psnr"] = ev.mean_psnr;
  j["holdout_mean_ssim"] = ev.mean_ssim;
  for (const SceneEval& se : ev.scenes)
    j["scenes"].push_back({{"seed", se.seed}, {"psnr", se.psnr}, {"ssim", se.ssim}});
  std::ofstream rf(a.out_dir + "/eval.json");
  rf << j.dump(2) << "\n";
  if (!rf) throw io_error("failed writing eval report");
  std::cout << "final loss " << tr.final_loss << " (from " << tr.first_loss << "), input-view psnr "
            << tr.input_view_psnr << " dB\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, body_model, config, out;
  std::vector<std::string> overrides;
  bool no_human_prior = false;
};

int cmd_eval(const EvalArgs& a) {
  TrainConfig cfg = resolve_config(a.config, a.overrides);
  if (a.no_human_prior) cfg.use_human_prior = false;
  const ReconModel model = resolve_model(a.checkpoint, a.config, cfg);
  const BodyModel body = load_body_model(a.body_model);
  std::vector<SyntheticScene> scenes;
  for (int i = 0; i < cfg.n_scenes; ++i)
    scenes.push_back(generate_scene(body, cfg.scene_seed + i, cfg.scene, model.cfg));
  const EvalReport ev = evaluate(model, scenes, cfg.use_human_prior);
  json j;
  j["mean_psnr"] = ev.mean_psnr;
  j["mean_ssim"] = ev.mean_ssim;
  for (const SceneEval& se : ev.scenes)
    j["scenes"].push_back({{"seed", se.seed}, {"psnr", se.psnr}, {"ssim", se.ssim}});
  std::ofstream f(a.out);
  f << j.dump(2) << "\n";
  if (!f) throw io_error("failed writing eval report: " + a.out);
  std::cout << "mean psnr " << ev.mean_psnr << " dB, mean ssim " << ev.mean_ssim << "\n";
  return 0;
}

// Finite-difference verification of the analytic gradients, small enough to
// run in seconds. Exits 4 on disagreement.
struct GradCheckStats {
  Scalar worst_rel = 0;
  int checked = 0, failed = 0;

  void record(Scalar analytic, Scalar fd) {
    const Scalar tol = 1e-6 + 1e-3 * std::max(std::abs(analytic), std::abs(fd));
    const Scalar err = std::abs(analytic - fd);
    worst_rel = std::max(worst_rel, err / (1e-12 + std::max(std::abs(analytic), std::abs(fd))));
    ++checked;
    if (err > tol) ++failed;
  }
};

int cmd_gradcheck(uint64_t seed) {
  bool ok = true;

  {  // splat renderer
    Rng rng(seed);
    const int n = 6, w = 24, h = 18;
    GaussianSet gs;
    gs.positions.resize(n, 3);
    gs.rotations.resize(n, 4);
    gs.scales.resize(n, 3);
    gs.colors.resize(n, 3);
    gs.opacities.resize(n);
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) gs.positions(i, k) = rng.uniform(-0.4, 0.4);
      Vec4 q(1.0 + rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
             rng.uniform(-0.3, 0.3));
      gs.rotations.row(i) = (q / q.norm()).transpose();
      for (int k = 0; k < 3; ++k) gs.scales(i, k) = rng.uniform(0.05, 0.25);
      for (int k = 0; k < 3; ++k) gs.colors(i, k) = rng.uniform(0.2, 0.8);
      gs.opacities[i] = rng.uniform(0.3, 0.8);
    }
    const CameraView cam = make_orbit_cameras(1, 12.0, 2.5, Vec3::Zero(), w, h, 0.9 * w)[0];
    RenderSettings rs;
    Image up_color(h, w, 3);
    std::vector<Scalar> up_alpha(static_cast<size_t>(h) * w);
    for (Scalar& v : up_color.data) v = rng.uniform(-1.0, 1.0);
    for (Scalar& v : up_alpha) v = rng.uniform(-1.0, 1.0);
    auto objective = [&](const GaussianSet& g) {
      const RenderOutput ro = render(g, cam, rs);
      Scalar s = 0;
      for (size_t i = 0; i < ro.color.data.size(); ++i) s += up_color.data[i] * ro.color.data[i];
      for (size_t i = 0; i < ro.alpha.size(); ++i) s += up_alpha[i] * ro.alpha[i];
      return s;
    };
    const GaussianGrads gg = render_backward(gs, cam, up_color, &up_alpha, rs);
    GradCheckStats st;
    const Scalar fd_h = 1e-5;
    auto probe = [&](MatX& m, const MatX& dm, int r, int c) {
      const Scalar keep = m(r, c);
      m(r, c) = keep + fd_h;
      const Scalar hi = objective(gs);
      m(r, c) = keep - fd_h;
      const Scalar lo = objective(gs);
      m(r, c) = keep;
      st.record(dm(r, c), (hi - lo) / (2 * fd_h));
    };
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) probe(gs.positions, gg.positions, i, k);
      for (int k = 0; k < 4; ++k) probe(gs.rotations, gg.rotations, i, k);
      for (int k = 0; k < 3; ++k) probe(gs.scales, gg.scales, i, k);
      for (int k = 0; k < 3; ++k) probe(gs.colors, gg.colors, i, k);
      const Scalar keep = gs.opacities[i];
      gs.opacities[i] = keep + fd_h;
      const Scalar hi = objective(gs);
      gs.opacities[i] = keep - fd_h;
      const Scalar lo = objective(gs);
      gs.opacities[i] = keep;
      st.record(gg.opacities[i], (hi - lo) / (2 * fd_h));
    }
    std::cout << "renderer:    " << st.checked << " dofs, " << st.failed
              << " failures, worst rel err " << st.worst_rel << "\n";
    ok = ok && st.failed == 0;
  }

  {  // reconstruction model, through the Gaussian head
    ModelConfig mc;
    mc.d = 16;
    mc.heads = 2;
    mc.patch = 1;
    mc.n_intra = 1;
    mc.n_inter = 1;
    mc.k_win = 2;
    mc.latent_h = 4;
    mc.latent_w = 4;
    mc.n_views = 2;
    ReconModel model = ReconModel::create(mc, seed);
    Rng rng(seed + 1);
    model.perturb(rng, 0.05);

    ViewBundle bundle;
    bundle.center = Vec3::Zero();
    bundle.radius = 1.0;
    const std::vector<CameraView> cams = make_orbit_cameras(
        mc.n_views, 0.0, 2.0, Vec3::Zero(), mc.latent_w * kEncoderStride,
        mc.latent_h * kEncoderStride, 0.8 * mc.latent_w * kEncoderStride);
    const std::vector<ViewPose> poses = view_pose_schedule(mc.n_views, 0.0);
    bundle.views.resize(mc.n_views);
    for (int k = 0; k < mc.n_views; ++k) {
      bundle.views[k].camera = cams[k];
      bundle.views[k].elevation_deg = poses[k].elevation_deg;
      bundle.views[k].azimuth_deg = poses[k].azimuth_deg;
      bundle.views[k].features = Grid3(mc.latent_h, mc.latent_w, mc.channels);
      for (Scalar& v : bundle.views[k].features.data) v = rng.uniform(0.0, 1.0);
    }
    MatX pts(12, 3);
    for (int i = 0; i < pts.size(); ++i) pts(i) = rng.uniform(-0.6, 0.6);

    const int n_g = mc.n_views * mc.cells_per_view();
    GaussianGrads w(n_g);
    for (int i = 0; i < n_g; ++i) {
      for (int k = 0; k < 3; ++k) w.positions(i, k) = rng.uniform(-1.0, 1.0);
      for (int k = 0; k < 4; ++k) w.rotations(i, k) = rng.uniform(-1.0, 1.0);
      for (int k = 0; k < 3; ++k) w.scales(i, k) = rng.uniform(-1.0, 1.0);
      for (int k = 0; k < 3; ++k) w.colors(i, k) = rng.uniform(-1.0, 1.0);
      w.opacities[i] = rng.uniform(-1.0, 1.0);
    }
    auto objective = [&]() {
      const GaussianSet gs = model.forward(bundle, &pts, nullptr, nullptr);
      Scalar s = 0;
      s += (gs.positions.array() * w.positions.array()).sum();
      s += (gs.rotations.array() * w.rotations.array()).sum();
      s += (gs.scales.array() * w.scales.array()).sum();
      s += (gs.colors.array() * w.colors.array()).sum();
      s += (gs.opacities.array() * w.opacities.array()).sum();
      return s;
    };
    Tape tape;
    model.forward(bundle, &pts, &tape, nullptr);
    model.zero_grads();
    std::vector<Grid3> d_latents;
    model.backward(tape, w, &d_latents);

    GradCheckStats st;
    const Scalar fd_h = 1e-5;
    Rng pick(seed + 2);
    for (size_t t = 0; t < model.params.size(); ++t) {
      MatX& m = model.params.values[t];
      for (int probe = 0; probe < 2; ++probe) {
        const int r = static_cast<int>(pick.uniform_int(0, static_cast<int>(m.rows()) - 1));
        const int c = static_cast<int>(pick.uniform_int(0, static_cast<int>(m.cols()) - 1));
        const Scalar keep = m(r, c);
        m(r, c) = keep + fd_h;
        const Scalar hi = objective();
        m(r, c) = keep - fd_h;
        const Scalar lo = objective();
        m(r, c) = keep;
        st.record(model.params.grads[t](r, c), (hi - lo) / (2 * fd_h));
      }
    }
    for (int probe = 0; probe < 12; ++probe) {
      const int v = static_cast<int>(pick.uniform_int(0, mc.n_views - 1));
      Grid3& g = bundle.views[v].features;
      const int i = static_cast<int>(pick.uniform_int(0, static_cast<int>(g.data.size()) - 1));
      const Scalar keep = g.data[i];
      g.data[i] = keep + fd_h;
      const Scalar hi = objective();
      g.data[i] = keep - fd_h;
      const Scalar lo = objective();
      g.data[i] = keep;
      st.record(d_latents[v].data[i], (hi - lo) / (2 * fd_h));
    }
    std::cout << "transformer: " << st.checked << " dofs, " << st.failed
              << " failures, worst rel err " << st.worst_rel << "\n";
    ok = ok && st.failed == 0;
  }

  {  // objective gradients
    Rng rng(seed + 3);
    const int h = 16, w = 16;
    SupervisionSet sup;
    SupervisionLevel level;
    SupervisionView sv;
    sv.gt = Image(h, w, 3);
    for (Scalar& v : sv.gt.data) v = rng.uniform(0.0, 1.0);
    sv.fg_mask.resize(static_cast<size_t>(h) * w);
    sv.part_labels.resize(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < sv.fg_mask.size(); ++i) {
      sv.part_labels[i] = static_cast<uint8_t>(rng.uniform_int(0, kNumParts));
      sv.fg_mask[i] = sv.part_labels[i] ? 1.0 : 0.0;
    }
    sv.is_input_pose = true;
    level.views.push_back(sv);
    sup.levels.push_back(level);

    std::vector<std::vector<RenderOutput>> rendered(1);
    rendered[0].resize(1);
    rendered[0][0].color = Image(h, w, 3);
    rendered[0][0].alpha.resize(static_cast<size_t>(h) * w);
    for (Scalar& v : rendered[0][0].color.data) v = rng.uniform(0.0, 1.0);
    for (Scalar& v : rendered[0][0].alpha) v = rng.uniform(0.0, 1.0);

    LossWeights lw;
    lw.input_view_weight = 1.5;
    std::vector<std::vector<ViewGrad>> grads(1);
    grads[0].emplace_back(h, w);
    const LossReport base = total_loss(sup, rendered, lw, &grads);
    (void)base;

    GradCheckStats st;
    const Scalar fd_h = 1e-6;
    for (int probe = 0; probe < 24; ++probe) {
      const int i = static_cast<int>(
          rng.uniform_int(0, static_cast<int>(rendered[0][0].color.data.size()) - 1));
      const Scalar keep = rendered[0][0].color.data[i];
      rendered[0][0].color.data[i] = keep + fd_h;
      const Scalar hi = total_loss(sup, rendered, lw, nullptr).total;
      rendered[0][0].color.data[i] = keep - fd_h;
      const Scalar lo = total_loss(sup, rendered, lw, nullptr).total;
      rendered[0][0].color.data[i] = keep;
      st.record(grads[0][0].d_color.data[i], (hi - lo) / (2 * fd_h));
    }
    for (int probe = 0; probe < 12; ++probe) {
      const int i =
          static_cast<int>(rng.uniform_int(0, static_cast<int>(rendered[0][0].alpha.size()) - 1));
      const Scalar keep = rendered[0][0].alpha[i];
      rendered[0][0].alpha[i] = keep + fd_h;
      const Scalar hi = total_loss(sup, rendered, lw, nullptr).total;
      rendered[0][0].alpha[i] = keep - fd_h;
      const Scalar lo = total_loss(sup, rendered, lw, nullptr).total;
      rendered[0][0].alpha[i] = keep;
      st.record(grads[0][0].d_alpha[i], (hi - lo) / (2 * fd_h));
    }
    std::cout << "losses:      " << st.checked << " dofs, " << st.failed
              << " failures, worst rel err " << st.worst_rel << "\n";
    ok = ok && st.failed == 0;
  }

  if (!ok) throw numeric_error("gradient check failed");
  std::cout << "all gradient checks passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"single-image human reconstruction to 3D Gaussian splats"};
  app.require_subcommand(1);
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic,
               "single-threaded deterministic execution (always on; accepted for compatibility)");

  std::string fixtures_dir;
  CLI::App* fix = app.add_subcommand("make-fixtures", "write a body model, config and toy inputs");
  fix->add_option("--out-dir", fixtures_dir, "output directory")->required();

  ReconstructArgs rc;
  CLI::App* rec = app.add_subcommand("reconstruct", "predict splats from one image and a body fit");
  rec->add_option("--image", rc.image, "input RGB image (.png/.ppm)");
  rec->add_option("--body-model", rc.body_model, "body model file")->required();
  rec->add_option("--body-params", rc.body_params, "JSON with beta/theta")->required();
  rec->add_option("--latents", rc.latents, "multi-view latent bundle (else built from --image)");
  rec->add_option("--checkpoint", rc.checkpoint, "trained model checkpoint");
  rec->add_option("--config", rc.config, "config file");
  rec->add_option("--set", rc.overrides, "config override key=value (repeatable)");
  rec->add_option("--out", rc.out, "output splat .ply")->required();
  rec->add_option("--render-views", rc.render_views, "also render PNGs into this directory");
  rec->add_option("--cameras", rc.cameras, "camera manifest for --render-views");
  rec->add_flag("--no-human-prior", rc.no_human_prior, "disable the body-token attention path");

  RenderArgs ra;
  CLI::App* ren = app.add_subcommand("render", "render a splat file from manifest cameras");
  ren->add_option("--splats", ra.splats, "splat .ply")->required();
  ren->add_option("--cameras", ra.cameras, "camera manifest")->required();
  ren->add_option("--out-dir", ra.out_dir, "output directory")->required();
  ren->add_option("--background", ra.background, "background color r,g,b (default black)");
  ren->add_flag("--raw", ra.raw, "also write float PFM color and alpha");

  TrainArgs ta;
  CLI::App* tr = app.add_subcommand("train", "train on procedural synthetic humans");
  tr->add_option("--body-model", ta.body_model, "body model file")->required();
  tr->add_option("--out-dir", ta.out_dir, "output directory")->required();
  tr->add_option("--config", ta.config, "config file");
  tr->add_option("--set", ta.overrides, "config override key=value (repeatable)");
  tr->add_flag("--no-human-prior", ta.no_human_prior, "train the ablation without body tokens");

  EvalArgs ea;
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on synthetic scenes");
  ev->add_option("--checkpoint", ea.checkpoint, "trained model checkpoint")->required();
  ev->add_option("--body-model", ea.body_model, "body model file")->required();
  ev->add_option("--config", ea.config, "config file");
  ev->add_option("--set", ea.overrides, "config override key=value (repeatable)");
  ev->add_option("--out", ea.out, "output JSON report")->required();
  ev->add_flag("--no-human-prior", ea.no_human_prior, "evaluate without body tokens");

  uint64_t gc_seed = 20240817;
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference check of analytic gradients");
  gc->add_option("--seed", gc_seed, "probe seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (fix->parsed()) return cmd_make_fixtures(fixtures_dir);
    if (rec->parsed()) {
      if (rc.latents.empty() && rc.image.empty())
        throw schema_error("reconstruct needs --image or --latents");
      return cmd_reconstruct(rc);
    }
    if (ren->parsed()) return cmd_render(ra);
    if (tr->parsed()) return cmd_train(ta);
    if (ev->parsed()) return cmd_eval(ea);
    if (gc->parsed()) return cmd_gradcheck(gc_seed);
  } catch (const config_mismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const io_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const schema_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
