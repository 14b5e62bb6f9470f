#include "bodysplat/losses.hpp"

#include <cmath>

namespace bodysplat {

int SupervisionSet::total_views() const {
  int n = 0;
  for (const SupervisionLevel& l : levels) n += static_cast<int>(l.views.size());
  return n;
}

LossWeights::LossWeights() {
  part_weights.fill(1.0);
  for (int j = 16; j <= 24; ++j) part_weights[j - 1] = 2.0;  // head, shoulders, arms, hands
}

Scalar image_mse(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw schema_error("image_mse: shape mismatch");
  Scalar acc = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const Scalar d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<Scalar>(a.data.size());
}

Scalar masked_image_mse(const Image& a, const Image& b, const std::vector<uint8_t>& labels,
                        uint8_t part, Scalar weight, Image* d_a) {
  if (!a.same_shape(b)) throw schema_error("masked_image_mse: shape mismatch");
  if (labels.size() != static_cast<size_t>(a.h) * a.w)
    throw schema_error("masked_image_mse: label size mismatch");
  long count = 0;
  for (uint8_t l : labels)
    if (l == part) ++count;
  if (count == 0) return 0.0;
  const Scalar norm = 1.0 / (3.0 * static_cast<Scalar>(count));
  Scalar acc = 0;
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x) {
      if (labels[static_cast<size_t>(y) * a.w + x] != part) continue;
      for (int c = 0; c < 3; ++c) {
        const Scalar d = a.at(y, x, c) - b.at(y, x, c);
        acc += d * d;
        if (d_a) d_a->at(y, x, c) += weight * 2.0 * d * norm;
      }
    }
  return acc * norm;
}

namespace {

Image downsample2(const Image& src) {
  const int h = std::max(1, src.h / 2), w = std::max(1, src.w / 2);
  Image out(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        if (src.h >= 2 && src.w >= 2) {
          out.at(y, x, c) = 0.25 * (src.at(2 * y, 2 * x, c) + src.at(2 * y, 2 * x + 1, c) +
                                    src.at(2 * y + 1, 2 * x, c) + src.at(2 * y + 1, 2 * x + 1, c));
        } else {
          out.at(y, x, c) = src.at(std::min(2 * y, src.h - 1), std::min(2 * x, src.w - 1), c);
        }
      }
  return out;
}

void upsample2_accumulate(const Image& d_small, Image* d_big) {
  const bool pooled = d_big->h >= 2 && d_big->w >= 2;
  for (int y = 0; y < d_small.h; ++y)
    for (int x = 0; x < d_small.w; ++x)
      for (int c = 0; c < 3; ++c) {
        if (pooled) {
          const Scalar g = 0.25 * d_small.at(y, x, c);
          d_big->at(2 * y, 2 * x, c) += g;
          d_big->at(2 * y, 2 * x + 1, c) += g;
          d_big->at(2 * y + 1, 2 * x, c) += g;
          d_big->at(2 * y + 1, 2 * x + 1, c) += g;
        } else {
          d_big->at(std::min(2 * y, d_big->h - 1), std::min(2 * x, d_big->w - 1), c) +=
              d_small.at(y, x, c);
        }
      }
}

Scalar sign_of(Scalar v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

// L1 distance between horizontal and vertical forward-difference maps of a
// and b at one scale; accumulates d/d(a) into d_a when given.
Scalar grad_map_l1(const Image& a, const Image& b, Image* d_a) {
  Scalar term = 0;
  const long nx = static_cast<long>(a.h) * std::max(0, a.w - 1) * 3;
  if (nx > 0) {
    const Scalar inv = 1.0 / static_cast<Scalar>(nx);
    for (int y = 0; y < a.h; ++y)
      for (int x = 0; x + 1 < a.w; ++x)
        for (int c = 0; c < 3; ++c) {
          const Scalar ga = a.at(y, x + 1, c) - a.at(y, x, c);
          const Scalar gb = b.at(y, x + 1, c) - b.at(y, x, c);
          term += std::abs(ga - gb) * inv;
          if (d_a) {
            const Scalar s = sign_of(ga - gb) * inv;
            d_a->at(y, x + 1, c) += s;
            d_a->at(y, x, c) -= s;
          }
        }
  }
  const long ny = static_cast<long>(std::max(0, a.h - 1)) * a.w * 3;
  if (ny > 0) {
    const Scalar inv = 1.0 / static_cast<Scalar>(ny);
    for (int y = 0; y + 1 < a.h; ++y)
      for (int x = 0; x < a.w; ++x)
        for (int c = 0; c < 3; ++c) {
          const Scalar ga = a.at(y + 1, x, c) - a.at(y, x, c);
          const Scalar gb = b.at(y + 1, x, c) - b.at(y, x, c);
          term += std::abs(ga - gb) * inv;
          if (d_a) {
            const Scalar s = sign_of(ga - gb) * inv;
            d_a->at(y + 1, x, c) += s;
            d_a->at(y, x, c) -= s;
          }
        }
  }
  return term;
}

}  // namespace

Scalar gradient_proxy(const Image& a, const Image& b, Scalar weight, Image* d_a) {
  if (!a.same_shape(b)) throw schema_error("gradient_proxy: shape mismatch");
  const Image a1 = downsample2(a), b1 = downsample2(b);
  const Image a2 = downsample2(a1), b2 = downsample2(b1);

  Image da0, da1, da2;
  if (d_a) {
    da0 = Image(a.h, a.w, 3);
    da1 = Image(a1.h, a1.w, 3);
    da2 = Image(a2.h, a2.w, 3);
  }
  Scalar loss = grad_map_l1(a, b, d_a ? &da0 : nullptr);
  loss += grad_map_l1(a1, b1, d_a ? &da1 : nullptr);
  loss += grad_map_l1(a2, b2, d_a ? &da2 : nullptr);

  const Scalar inv_coarse = 1.0 / static_cast<Scalar>(a2.data.size());
  for (size_t i = 0; i < a2.data.size(); ++i) {
    const Scalar d = a2.data[i] - b2.data[i];
    loss += d * d * inv_coarse;
    if (d_a) da2.data[i] += 2.0 * d * inv_coarse;
  }

  if (d_a) {
    upsample2_accumulate(da2, &da1);
    upsample2_accumulate(da1, &da0);
    for (size_t i = 0; i < da0.data.size(); ++i) d_a->data[i] += weight * da0.data[i];
  }
  return loss;
}

namespace {

void check_rendered(const SupervisionSet& sup,
                    const std::vector<std::vector<RenderOutput>>& rendered) {
  if (rendered.size() != sup.levels.size())
    throw schema_error("loss: rendered level count mismatch");
  for (size_t i = 0; i < sup.levels.size(); ++i) {
    if (rendered[i].size() != sup.levels[i].views.size())
      throw schema_error("loss: rendered view count mismatch");
    for (size_t v = 0; v < rendered[i].size(); ++v)
      if (!rendered[i][v].color.same_shape(sup.levels[i].views[v].gt))
        throw schema_error("loss: rendered image shape mismatch");
  }
}

Image apply_part_mask(const Image& img, const std::vector<uint8_t>& labels, uint8_t part) {
  Image out(img.h, img.w, 3);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      if (labels[static_cast<size_t>(y) * img.w + x] == part)
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, c);
  return out;
}

}  // namespace

Scalar hierarchical_loss(const SupervisionSet& sup,
                         const std::vector<std::vector<RenderOutput>>& rendered,
                         const LossWeights& w, std::vector<std::vector<ViewGrad>>* grads) {
  check_rendered(sup, rendered);
  const int n_levels = static_cast<int>(sup.levels.size());
  if (n_levels == 0) return 0.0;
  const Scalar norm = 1.0 / static_cast<Scalar>(n_levels);

  Scalar loss = 0;
  for (int i = 0; i < n_levels; ++i) {
    const SupervisionLevel& level = sup.levels[i];
    if (level.views.empty()) continue;
    const Scalar view_norm = 1.0 / static_cast<Scalar>(level.views.size());
    for (int part = 1; part <= kNumParts; ++part) {
      const Scalar cell_w = norm * level.weight * w.part_weights[part - 1];
      for (size_t v = 0; v < level.views.size(); ++v) {
        const SupervisionView& sv = level.views[v];
        const RenderOutput& ro = rendered[i][v];
        bool present = false;
        for (uint8_t l : sv.part_labels)
          if (l == part) {
            present = true;
            break;
          }
        if (!present) continue;
        Image* d_color = grads ? &(*grads)[i][v].d_color : nullptr;
        const Scalar mse_term = masked_image_mse(ro.color, sv.gt, sv.part_labels,
                                                 static_cast<uint8_t>(part),
                                                 cell_w * view_norm, d_color);
        const Image masked_r = apply_part_mask(ro.color, sv.part_labels, static_cast<uint8_t>(part));
        const Image masked_g = apply_part_mask(sv.gt, sv.part_labels, static_cast<uint8_t>(part));
        Scalar proxy_term;
        if (d_color) {
          Image d_masked(ro.color.h, ro.color.w, 3);
          proxy_term = gradient_proxy(masked_r, masked_g, 1.0, &d_masked);
          const Scalar scale = cell_w * view_norm * w.lambda_p;
          for (int y = 0; y < ro.color.h; ++y)
            for (int x = 0; x < ro.color.w; ++x)
              if (sv.part_labels[static_cast<size_t>(y) * ro.color.w + x] == part)
                for (int c = 0; c < 3; ++c) d_color->at(y, x, c) += scale * d_masked.at(y, x, c);
        } else {
          proxy_term = gradient_proxy(masked_r, masked_g);
        }
        loss += cell_w * view_norm * (mse_term + w.lambda_p * proxy_term);
      }
    }
  }
  return loss;
}

Scalar reconstruction_loss(const SupervisionSet& sup,
                           const std::vector<std::vector<RenderOutput>>& rendered,
                           const LossWeights& w, std::vector<std::vector<ViewGrad>>* grads) {
  check_rendered(sup, rendered);
  Scalar loss = 0;
  for (size_t i = 0; i < sup.levels.size(); ++i)
    for (size_t v = 0; v < sup.levels[i].views.size(); ++v) {
      const SupervisionView& sv = sup.levels[i].views[v];
      const RenderOutput& ro = rendered[i][v];
      const Scalar vw = sv.is_input_pose ? w.input_view_weight : 1.0;
      Image* d_color = grads ? &(*grads)[i][v].d_color : nullptr;

      const Scalar mse_term = image_mse(ro.color, sv.gt);
      if (d_color) {
        const Scalar s = vw * 2.0 / static_cast<Scalar>(ro.color.data.size());
        for (size_t k = 0; k < ro.color.data.size(); ++k)
          d_color->data[k] += s * (ro.color.data[k] - sv.gt.data[k]);
      }

      Scalar mask_term = 0;
      const size_t np = ro.alpha.size();
      if (sv.fg_mask.size() != np) throw schema_error("loss: mask size mismatch");
      for (size_t k = 0; k < np; ++k) {
        const Scalar d = ro.alpha[k] - sv.fg_mask[k];
        mask_term += d * d;
        if (grads)
          (*grads)[i][v].d_alpha[k] += vw * w.lambda_m * 2.0 * d / static_cast<Scalar>(np);
      }
      mask_term /= static_cast<Scalar>(np);

      const Scalar proxy_term = gradient_proxy(ro.color, sv.gt, vw * w.lambda_p, d_color);
      loss += vw * (mse_term + w.lambda_m * mask_term + w.lambda_p * proxy_term);
    }
  return loss;
}

LossReport total_loss(const SupervisionSet& sup,
                      const std::vector<std::vector<RenderOutput>>& rendered,
                      const LossWeights& w, std::vector<std::vector<ViewGrad>>* grads) {
  LossReport r;
  r.hierarchical = hierarchical_loss(sup, rendered, w, grads);
  r.reconstruction = reconstruction_loss(sup, rendered, w, grads);
  r.total = r.hierarchical + r.reconstruction;
  return r;
}

Scalar psnr(const Image& a, const Image& b) {
  const Scalar mse = image_mse(a, b);
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

Scalar ssim(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw schema_error("ssim: shape mismatch");
  constexpr int kWin = 11, kHalf = 5;
  constexpr Scalar kSigma = 1.5, kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  if (a.h < kWin || a.w < kWin) throw schema_error("ssim: image smaller than 11x11 window");

  Scalar wsum = 0;
  Scalar win[kWin][kWin];
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      const Scalar dy = i - kHalf, dx = j - kHalf;
      win[i][j] = std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma));
      wsum += win[i][j];
    }
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) win[i][j] /= wsum;

  Scalar acc = 0;
  long count = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = kHalf; y < a.h - kHalf; ++y)
      for (int x = kHalf; x < a.w - kHalf; ++x) {
        Scalar ma = 0, mb = 0, va = 0, vb = 0, vab = 0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            const Scalar pa = a.at(y + i - kHalf, x + j - kHalf, c);
            const Scalar pb = b.at(y + i - kHalf, x + j - kHalf, c);
            ma += win[i][j] * pa;
            mb += win[i][j] * pb;
            va += win[i][j] * pa * pa;
            vb += win[i][j] * pb * pb;
            vab += win[i][j] * pa * pb;
          }
        va -= ma * ma;
        vb -= mb * mb;
        vab -= ma * mb;
        acc += ((2 * ma * mb + kC1) * (2 * vab + kC2)) /
               ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
        ++count;
      }
  return acc / static_cast<Scalar>(count);
}

}  // namespace bodysplat
