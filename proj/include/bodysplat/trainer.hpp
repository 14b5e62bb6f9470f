#pragma once

#include "bodysplat/losses.hpp"
#include "bodysplat/transformer.hpp"

namespace bodysplat {

struct OptimConfig {
  Scalar peak_lr = 4e-4;
  int warmup_steps = 2000;
  int total_steps = 3000;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.95;
  Scalar eps = 1e-8;
  Scalar weight_decay = 0.05;
  Scalar clip_norm = 1.0;
};

// Linear warmup to the peak over warmup_steps, then a cosine decay to zero at
// total_steps. step is 1-based; lr(warmup_steps) == peak_lr exactly.
Scalar cosine_warmup_lr(int step, Scalar peak_lr, int warmup_steps, int total_steps);

// Decoupled weight decay; layer-norm parameters are registered decay-exempt.
// Throws numeric_error on a non-finite gradient, naming the tensor.
class AdamW {
 public:
  AdamW(const ParamStore& params, const OptimConfig& cfg);
  void step(ParamStore& params, Scalar lr);
  int steps_taken() const { return t_; }

 private:
  OptimConfig cfg_;
  std::vector<MatX> m_, v_;
  int t_ = 0;
};

// Scales all gradients so their joint L2 norm is at most max_norm; returns
// the pre-clip norm.
Scalar clip_gradients(ParamStore& params, Scalar max_norm);

struct SceneConfig {
  Scalar schedule_elevation = 0;   // bundle orbit
  Scalar orbit_scale = 2.0;        // camera distance in scene radii
  Scalar focal_scale = 0.8;        // focal length in image widths
  int render_h = 64, render_w = 64;
  int body_views = 8;              // level 1: full-body orbit
  Scalar body_elevation = 0;
  int head_views = 4;              // level 2: head close-ups
  Scalar head_orbit_scale = 0.8;
  Scalar head_focal_scale = 1.6;
  Scalar head_level_weight = 1.0;
  int holdout_views = 2;
  Scalar holdout_elevation = 15;
  Scalar pose_amplitude = 0.25;    // joint angle range (radians)
  Scalar color_noise = 0.08;
  int supersample = 2;             // AA factor for ground-truth renders
};

struct SyntheticScene {
  uint64_t seed = 0;
  VecX beta;
  MatX theta;
  MatX vertex_colors;
  BodyMesh mesh;
  Vec3 center = Vec3::Zero();
  Scalar radius = 1.0;
  ViewBundle bundle;
  SupervisionSet supervision;          // level 0: body orbit, level 1: head
  std::vector<SupervisionView> holdout;  // never trained on
};

// Deterministic procedural scene: random shape and mild pose, per-part colors
// with vertex noise, ground truth rendered from the capsule mesh, and a view
// bundle built by encoding the schedule views.
SyntheticScene generate_scene(const BodyModel& body, uint64_t seed, const SceneConfig& scene_cfg,
                              const ModelConfig& model_cfg);

struct TrainConfig {
  ModelConfig model;
  SceneConfig scene;
  LossWeights loss;
  OptimConfig optim;
  int n_scenes = 2;
  uint64_t model_seed = 1234;
  uint64_t scene_seed = 77;
  int log_every = 10;
  bool use_human_prior = true;
};

struct TrainResult {
  Scalar first_loss = 0;
  Scalar final_loss = 0;
  Scalar input_view_psnr = 0;  // input-pose supervision view of scene 0, after training
  int steps = 0;
};

// Renders every supervision view of the scene with the model's current
// weights. Returns [level][view] aligned with scene.supervision.
std::vector<std::vector<RenderOutput>> render_supervision(const ReconModel& model,
                                                          const SyntheticScene& scene,
                                                          bool use_human_prior);

// One optimization step on one scene: forward, render, loss, full backward,
// clip, AdamW. Returns the loss report; grad_norm_out gets the pre-clip norm.
LossReport train_step(ReconModel& model, const SyntheticScene& scene, const LossWeights& loss_w,
                      bool use_human_prior, AdamW& opt, Scalar lr, Scalar clip_norm,
                      Scalar* grad_norm_out);

// Round-robin over scenes for optim.total_steps steps, logging JSONL metric
// lines to log_path when non-empty.
TrainResult train(ReconModel& model, const std::vector<SyntheticScene>& scenes,
                  const TrainConfig& cfg, const std::string& log_path);

struct SceneEval {
  uint64_t seed = 0;
  Scalar psnr = 0, ssim = 0;
};
struct EvalReport {
  std::vector<SceneEval> scenes;
  Scalar mean_psnr = 0, mean_ssim = 0;
};

// Metrics on each scene's holdout cameras.
EvalReport evaluate(const ReconModel& model, const std::vector<SyntheticScene>& scenes,
                    bool use_human_prior);

}  // namespace bodysplat
