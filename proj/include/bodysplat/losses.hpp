#pragma once

#include "bodysplat/body_model.hpp"
#include "bodysplat/gsplat.hpp"

namespace bodysplat {

// Ground truth for one supervision camera. part_labels uses 0 for background
// and 1..24 for body parts; fg_mask is 1 on the body, 0 elsewhere.
struct SupervisionView {
  CameraView camera;
  Image gt;
  std::vector<Scalar> fg_mask;
  std::vector<uint8_t> part_labels;
  bool is_input_pose = false;
};

// One zoom level of the supervision hierarchy (body orbit, head close-ups,
// ...), with its level weight.
struct SupervisionLevel {
  std::vector<SupervisionView> views;
  Scalar weight = 1.0;
};

struct SupervisionSet {
  std::vector<SupervisionLevel> levels;
  int total_views() const;
};

struct LossWeights {
  Scalar lambda_p = 1.0;           // gradient-map proxy weight
  Scalar lambda_m = 1.0;           // foreground mask weight
  Scalar input_view_weight = 1.0;  // extra weight on the input-pose view
  std::array<Scalar, kNumParts> part_weights;

  LossWeights();  // part weights default to 1, with 2 on head/shoulder/arm parts
};

// Gradients of a scalar loss with respect to one rendered view.
struct ViewGrad {
  Image d_color;
  std::vector<Scalar> d_alpha;

  ViewGrad() = default;
  ViewGrad(int h, int w) : d_color(h, w, 3), d_alpha(static_cast<size_t>(h) * w, 0.0) {}
};

Scalar image_mse(const Image& a, const Image& b);

// Mean squared error restricted to pixels labeled `part` (normalized by
// 3 * pixel count); zero when the part is absent. Optionally accumulates
// weight * d/d(a) into d_a.
Scalar masked_image_mse(const Image& a, const Image& b, const std::vector<uint8_t>& labels,
                        uint8_t part, Scalar weight = 1.0, Image* d_a = nullptr);

// Edge-preservation proxy: L1 distance between forward-difference gradient
// maps at three dyadic scales plus an L2 term at the coarsest scale.
// Optionally accumulates weight * d/d(a) into d_a.
Scalar gradient_proxy(const Image& a, const Image& b, Scalar weight = 1.0, Image* d_a = nullptr);

// Part- and level-weighted objective over the supervision hierarchy. Each
// (level, part) cell averages over the level's views the part-masked MSE plus
// lambda_p times the proxy on the part-masked images; cells are weighted by
// level and part weights, parts are summed, and the total is normalized by
// the level count. rendered and grads are indexed [level][view]; grads
// accumulate.
Scalar hierarchical_loss(const SupervisionSet& sup,
                         const std::vector<std::vector<RenderOutput>>& rendered,
                         const LossWeights& w, std::vector<std::vector<ViewGrad>>* grads);

// Per-view sum of full-image MSE, weighted alpha-vs-mask MSE and the proxy,
// with the input-pose view reweighted.
Scalar reconstruction_loss(const SupervisionSet& sup,
                           const std::vector<std::vector<RenderOutput>>& rendered,
                           const LossWeights& w, std::vector<std::vector<ViewGrad>>* grads);

struct LossReport {
  Scalar total = 0, hierarchical = 0, reconstruction = 0;
};
LossReport total_loss(const SupervisionSet& sup,
                      const std::vector<std::vector<RenderOutput>>& rendered,
                      const LossWeights& w, std::vector<std::vector<ViewGrad>>* grads);

// 10*log10(1/mse) against a unit peak, capped at 100 dB.
Scalar psnr(const Image& a, const Image& b);

// Mean structural similarity, 11x11 Gaussian window (sigma 1.5), valid-region
// convolution, averaged over channels. Images must be at least 11x11.
Scalar ssim(const Image& a, const Image& b);

}  // namespace bodysplat
