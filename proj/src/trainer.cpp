#include "bodysplat/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

namespace bodysplat {

Scalar cosine_warmup_lr(int step, Scalar peak_lr, int warmup_steps, int total_steps) {
  if (step < 1) return 0.0;
  if (warmup_steps > 0 && step <= warmup_steps)
    return peak_lr * static_cast<Scalar>(step) / static_cast<Scalar>(warmup_steps);
  const int denom = std::max(1, total_steps - warmup_steps);
  const Scalar t = std::min(1.0, static_cast<Scalar>(step - warmup_steps) / denom);
  return peak_lr * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

AdamW::AdamW(const ParamStore& params, const OptimConfig& cfg) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const MatX& w : params.values) {
    m_.push_back(MatX::Zero(w.rows(), w.cols()));
    v_.push_back(MatX::Zero(w.rows(), w.cols()));
  }
}

void AdamW::step(ParamStore& params, Scalar lr) {
  ++t_;
  const Scalar bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const Scalar bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (size_t i = 0; i < params.size(); ++i) {
    const MatX& g = params.grads[i];
    if (!g.allFinite()) throw numeric_error("non-finite gradient in " + params.names[i]);
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    MatX& w = params.values[i];
    if (params.decay[i]) w -= (lr * cfg_.weight_decay) * w;
    w.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
    if (!w.allFinite()) throw numeric_error("non-finite parameter after update: " + params.names[i]);
  }
}

Scalar clip_gradients(ParamStore& params, Scalar max_norm) {
  Scalar sq = 0;
  for (const MatX& g : params.grads) sq += g.squaredNorm();
  const Scalar norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const Scalar s = max_norm / norm;
    for (MatX& g : params.grads) g *= s;
  }
  return norm;
}

SyntheticScene generate_scene(const BodyModel& body, uint64_t seed, const SceneConfig& sc,
                              const ModelConfig& mc) {
  SyntheticScene scene;
  scene.seed = seed;
  Rng rng(seed);

  scene.beta.resize(kNumShapeDims);
  for (int i = 0; i < kNumShapeDims; ++i) scene.beta[i] = rng.uniform(-1.0, 1.0);
  scene.theta.resize(body.num_joints(), 3);
  for (int j = 0; j < body.num_joints(); ++j)
    for (int k = 0; k < 3; ++k) scene.theta(j, k) = rng.uniform(-sc.pose_amplitude, sc.pose_amplitude);
  scene.mesh = pose_body(body, scene.beta, scene.theta);

  scene.vertex_colors.resize(body.num_vertices(), 3);
  for (int v = 0; v < body.num_vertices(); ++v) {
    const int part = body.labels[v] - 1;
    for (int k = 0; k < 3; ++k) {
      const Scalar base = kPartPalette[part][k];
      scene.vertex_colors(v, k) =
          std::clamp(base + rng.uniform(-sc.color_noise, sc.color_noise), 0.02, 0.98);
    }
  }

  compute_bounding_sphere(scene.mesh.vertices, &scene.center, &scene.radius);

  // Bundle views: ground truth rendered on the pose schedule, then encoded.
  const int img_w = mc.latent_w * kEncoderStride, img_h = mc.latent_h * kEncoderStride;
  const std::vector<ViewPose> schedule = view_pose_schedule(mc.n_views, sc.schedule_elevation);
  std::vector<CameraView> bundle_cams =
      make_orbit_cameras(mc.n_views, sc.schedule_elevation, sc.orbit_scale * scene.radius,
                         scene.center, img_w, img_h, sc.focal_scale * img_w);
  scene.bundle.center = scene.center;
  scene.bundle.radius = scene.radius;
  scene.bundle.views.resize(mc.n_views);
  for (int k = 0; k < mc.n_views; ++k) {
    const MeshRender mr = rasterize_mesh(scene.mesh.vertices, body.faces, body.labels,
                                         scene.vertex_colors, bundle_cams[k], Vec3::Zero());
    LatentGrid& g = scene.bundle.views[k];
    g.elevation_deg = schedule[k].elevation_deg;
    g.azimuth_deg = schedule[k].azimuth_deg;
    g.camera = bundle_cams[k];
    g.features = toy_encode(mr.color);
  }

  // Ground truth is rasterized at supersample x resolution and box-filtered
  // down: colors and coverage average, the part label is the majority over
  // covered subsamples (ties to the lowest id, matching the rasterizer).
  auto supervise = [&](const CameraView& cam, bool input_pose) {
    SupervisionView sv;
    sv.camera = cam;
    sv.is_input_pose = input_pose;
    const int s = std::max(1, sc.supersample);
    if (s == 1) {
      MeshRender mr = rasterize_mesh(scene.mesh.vertices, body.faces, body.labels,
                                     scene.vertex_colors, cam, Vec3::Zero());
      sv.gt = std::move(mr.color);
      sv.fg_mask = std::move(mr.mask);
      sv.part_labels = std::move(mr.parts.labels);
      return sv;
    }
    const CameraView hi = cam.resized(cam.width * s, cam.height * s);
    const MeshRender mr = rasterize_mesh(scene.mesh.vertices, body.faces, body.labels,
                                         scene.vertex_colors, hi, Vec3::Zero());
    sv.gt = Image(cam.height, cam.width, 3);
    sv.fg_mask.assign(static_cast<size_t>(cam.height) * cam.width, 0.0);
    sv.part_labels.assign(sv.fg_mask.size(), 0);
    const Scalar inv = 1.0 / (s * s);
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        Scalar cov = 0;
        Vec3 col = Vec3::Zero();
        int votes[kNumParts + 1] = {};
        for (int dy = 0; dy < s; ++dy)
          for (int dx = 0; dx < s; ++dx) {
            const int yy = y * s + dy, xx = x * s + dx;
            for (int ch = 0; ch < 3; ++ch) col[ch] += mr.color.at(yy, xx, ch);
            const size_t idx = static_cast<size_t>(yy) * hi.width + xx;
            cov += mr.mask[idx];
            ++votes[mr.parts.labels[idx]];
          }
        for (int ch = 0; ch < 3; ++ch) sv.gt.at(y, x, ch) = col[ch] * inv;
        const size_t out = static_cast<size_t>(y) * cam.width + x;
        sv.fg_mask[out] = cov * inv;
        int best = 0, best_n = 0;
        for (int p = 1; p <= kNumParts; ++p)
          if (votes[p] > best_n) {
            best = p;
            best_n = votes[p];
          }
        sv.part_labels[out] = static_cast<uint8_t>(best);
      }
    return sv;
  };

  SupervisionLevel body_level;
  const std::vector<CameraView> body_cams =
      make_orbit_cameras(sc.body_views, sc.body_elevation, sc.orbit_scale * scene.radius,
                         scene.center, sc.render_w, sc.render_h, sc.focal_scale * sc.render_w);
  for (int k = 0; k < sc.body_views; ++k) {
    const bool input_pose = (k == 0) && (sc.body_elevation == sc.schedule_elevation);
    body_level.views.push_back(supervise(body_cams[k], input_pose));
  }
  scene.supervision.levels.push_back(std::move(body_level));

  if (sc.head_views > 0) {
    SupervisionLevel head_level;
    head_level.weight = sc.head_level_weight;
    const Vec3 head_target = scene.mesh.joints.row(15).transpose();  // head joint
    const std::vector<CameraView> head_cams = make_orbit_cameras(
        sc.head_views, 0.0, sc.head_orbit_scale * scene.radius, head_target, sc.render_w,
        sc.render_h, sc.head_focal_scale * sc.render_w);
    for (const CameraView& cam : head_cams) head_level.views.push_back(supervise(cam, false));
    scene.supervision.levels.push_back(std::move(head_level));
  }

  const std::vector<CameraView> holdout_cams =
      make_orbit_cameras(sc.holdout_views, sc.holdout_elevation, sc.orbit_scale * scene.radius,
                         scene.center, sc.render_w, sc.render_h, sc.focal_scale * sc.render_w);
  for (const CameraView& cam : holdout_cams) scene.holdout.push_back(supervise(cam, false));
  return scene;
}

std::vector<std::vector<RenderOutput>> render_supervision(const ReconModel& model,
                                                          const SyntheticScene& scene,
                                                          bool use_human_prior) {
  const GaussianSet gs =
      model.forward(scene.bundle, use_human_prior ? &scene.mesh.vertices : nullptr, nullptr,
                    nullptr);
  RenderSettings rs;
  std::vector<std::vector<RenderOutput>> out(scene.supervision.levels.size());
  for (size_t i = 0; i < scene.supervision.levels.size(); ++i)
    for (const SupervisionView& sv : scene.supervision.levels[i].views)
      out[i].push_back(render(gs, sv.camera, rs));
  return out;
}

LossReport train_step(ReconModel& model, const SyntheticScene& scene, const LossWeights& loss_w,
                      bool use_human_prior, AdamW& opt, Scalar lr, Scalar clip_norm,
                      Scalar* grad_norm_out) {
  model.zero_grads();
  Tape tape;
  const GaussianSet gs = model.forward(
      scene.bundle, use_human_prior ? &scene.mesh.vertices : nullptr, &tape, nullptr);

  RenderSettings rs;
  const SupervisionSet& sup = scene.supervision;
  std::vector<std::vector<RenderOutput>> rendered(sup.levels.size());
  std::vector<std::vector<ViewGrad>> grads(sup.levels.size());
  for (size_t i = 0; i < sup.levels.size(); ++i)
    for (const SupervisionView& sv : sup.levels[i].views) {
      rendered[i].push_back(render(gs, sv.camera, rs));
      grads[i].emplace_back(sv.gt.h, sv.gt.w);
    }

  const LossReport report = total_loss(sup, rendered, loss_w, &grads);
  if (!std::isfinite(report.total)) throw numeric_error("non-finite training loss");

  GaussianGrads gg(gs.size());
  for (size_t i = 0; i < sup.levels.size(); ++i)
    for (size_t v = 0; v < sup.levels[i].views.size(); ++v) {
      const GaussianGrads part = render_backward(gs, sup.levels[i].views[v].camera,
                                                 grads[i][v].d_color, &grads[i][v].d_alpha, rs);
      gg.positions += part.positions;
      gg.rotations += part.rotations;
      gg.scales += part.scales;
      gg.colors += part.colors;
      gg.opacities += part.opacities;
    }
  model.backward(tape, gg, nullptr);

  const Scalar norm = clip_gradients(model.params, clip_norm);
  if (grad_norm_out) *grad_norm_out = norm;
  opt.step(model.params, lr);
  return report;
}

TrainResult train(ReconModel& model, const std::vector<SyntheticScene>& scenes,
                  const TrainConfig& cfg, const std::string& log_path) {
  if (scenes.empty()) throw schema_error("train: no scenes");
  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path);
    if (!log) throw io_error("cannot open training log: " + log_path);
  }

  AdamW opt(model.params, cfg.optim);
  TrainResult result;
  result.steps = cfg.optim.total_steps;
  for (int step = 1; step <= cfg.optim.total_steps; ++step) {
    const SyntheticScene& scene = scenes[(step - 1) % scenes.size()];
    const Scalar lr =
        cosine_warmup_lr(step, cfg.optim.peak_lr, cfg.optim.warmup_steps, cfg.optim.total_steps);
    Scalar grad_norm = 0;
    const LossReport report = train_step(model, scene, cfg.loss, cfg.use_human_prior, opt, lr,
                                         cfg.optim.clip_norm, &grad_norm);
    if (step == 1) result.first_loss = report.total;
    result.final_loss = report.total;
    if (log.is_open() && (step % std::max(1, cfg.log_every) == 0 || step == 1 ||
                          step == cfg.optim.total_steps)) {
      nlohmann::json j;
      j["step"] = step;
      j["lr"] = lr;
      j["loss"] = report.total;
      j["hierarchical"] = report.hierarchical;
      j["reconstruction"] = report.reconstruction;
      j["grad_norm"] = grad_norm;
      log << j.dump() << "\n";
    }
  }

  // Input-pose PSNR on the first scene with the trained weights.
  const std::vector<std::vector<RenderOutput>> rendered =
      render_supervision(model, scenes[0], cfg.use_human_prior);
  for (size_t i = 0; i < scenes[0].supervision.levels.size(); ++i)
    for (size_t v = 0; v < scenes[0].supervision.levels[i].views.size(); ++v)
      if (scenes[0].supervision.levels[i].views[v].is_input_pose)
        result.input_view_psnr = psnr(rendered[i][v].color,
                                      scenes[0].supervision.levels[i].views[v].gt);
  return result;
}

EvalReport evaluate(const ReconModel& model, const std::vector<SyntheticScene>& scenes,
                    bool use_human_prior) {
  EvalReport report;
  RenderSettings rs;
  for (const SyntheticScene& scene : scenes) {
    const GaussianSet gs = model.forward(
        scene.bundle, use_human_prior ? &scene.mesh.vertices : nullptr, nullptr, nullptr);
    SceneEval se;
    se.seed = scene.seed;
    for (const SupervisionView& sv : scene.holdout) {
      const RenderOutput ro = render(gs, sv.camera, rs);
      se.psnr += psnr(ro.color, sv.gt);
      se.ssim += ssim(ro.color, sv.gt);
    }
    const Scalar n = static_cast<Scalar>(scene.holdout.size());
    se.psnr /= n;
    se.ssim /= n;
    report.scenes.push_back(se);
    report.mean_psnr += se.psnr;
    report.mean_ssim += se.ssim;
  }
  report.mean_psnr /= static_cast<Scalar>(scenes.size());
  report.mean_ssim /= static_cast<Scalar>(scenes.size());
  return report;
}

}  // namespace bodysplat
