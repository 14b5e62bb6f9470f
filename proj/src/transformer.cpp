#include "bodysplat/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace bodysplat {

void ModelConfig::validate() const {
  if (d < 1 || heads < 1 || d % heads != 0) throw schema_error("model config: d must be a positive multiple of heads");
  if (patch < 1) throw schema_error("model config: patch must be positive");
  if (latent_h < 1 || latent_w < 1 || latent_h % patch != 0 || latent_w % patch != 0)
    throw schema_error("model config: latent dims must be positive multiples of patch");
  if (n_intra < 1 || n_inter < 0) throw schema_error("model config: bad block counts");
  if (k_win < 1) throw schema_error("model config: k_win must be positive");
  if (channels < 1) throw schema_error("model config: channels must be positive");
  if (n_views < 1) throw schema_error("model config: n_views must be positive");
  if (!(scale_min > 0) || !(scale_max > scale_min))
    throw schema_error("model config: need 0 < scale_min < scale_max");
}

int ParamStore::add(const std::string& name, int rows, int cols, bool decays) {
  if (index.count(name)) throw schema_error("duplicate parameter name: " + name);
  const int id = static_cast<int>(values.size());
  names.push_back(name);
  values.emplace_back(MatX::Zero(rows, cols));
  grads.emplace_back(MatX::Zero(rows, cols));
  decay.push_back(decays ? 1 : 0);
  index[name] = id;
  return id;
}

int ParamStore::find(const std::string& name) const {
  auto it = index.find(name);
  if (it == index.end()) throw schema_error("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grads() {
  for (MatX& g : grads) g.setZero();
}

void WindowIndex::window_bounds(int qy, int qx, int* y0, int* x0, int* ny, int* nx) const {
  *ny = std::min(k_win, cells_y);
  *nx = std::min(k_win, cells_x);
  *y0 = std::clamp(qy - (k_win - 1) / 2, 0, cells_y - *ny);
  *x0 = std::clamp(qx - (k_win - 1) / 2, 0, cells_x - *nx);
}

std::vector<int> WindowIndex::gather(int query) const {
  const int qy = query / cells_x, qx = query % cells_x;
  int y0, x0, ny, nx;
  window_bounds(qy, qx, &y0, &x0, &ny, &nx);
  std::vector<int> out;
  for (int wy = y0; wy < y0 + ny; ++wy)
    for (int wx = x0; wx < x0 + nx; ++wx) {
      const std::vector<int>& b = buckets[wy * cells_x + wx];
      out.insert(out.end(), b.begin(), b.end());
    }
  return out;
}

WindowIndex build_window_index(const MatX& points_world, const CameraView& image_cam, int patch,
                               int k_win, int latent_h, int latent_w) {
  if (points_world.cols() != 3) throw schema_error("window index: points must be N x 3");
  if (latent_h % patch != 0 || latent_w % patch != 0)
    throw schema_error("window index: latent dims must be multiples of patch");
  WindowIndex idx;
  idx.cells_y = latent_h / patch;
  idx.cells_x = latent_w / patch;
  idx.k_win = k_win;
  idx.num_points = static_cast<int>(points_world.rows());
  idx.buckets.assign(static_cast<size_t>(idx.cells_y) * idx.cells_x, {});
  for (int i = 0; i < idx.num_points; ++i) {
    const ProjectedPoint pp = project_point(image_cam, points_world.row(i).transpose());
    if (!pp.valid) continue;
    const int lcx = static_cast<int>(pp.uv.x() / kEncoderStride);
    const int lcy = static_cast<int>(pp.uv.y() / kEncoderStride);
    const int tx = lcx / patch, ty = lcy / patch;
    if (tx < 0 || tx >= idx.cells_x || ty < 0 || ty >= idx.cells_y) continue;
    idx.buckets[static_cast<size_t>(ty) * idx.cells_x + tx].push_back(i);
  }
  return idx;
}

std::vector<uint8_t> window_mask_dense(const WindowIndex& index) {
  const int q_count = index.cells_y * index.cells_x;
  std::vector<uint8_t> mask(static_cast<size_t>(q_count) * index.num_points, 0);
  for (int q = 0; q < q_count; ++q)
    for (int j : index.gather(q)) mask[static_cast<size_t>(q) * index.num_points + j] = 1;
  return mask;
}

namespace {

constexpr Scalar kLnEps = 1e-5;

MatX linear(const MatX& x, const MatX& w, const MatX& b) {
  MatX y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

void linear_backward(const MatX& x, const MatX& w, const MatX& dy, MatX& dw, MatX& db, MatX* dx) {
  dw += x.transpose() * dy;
  db += dy.colwise().sum();
  if (dx) *dx += dy * w.transpose();
}

MatX layer_norm(const MatX& x, const MatX& gamma, const MatX& beta, LNCache* c) {
  const Eigen::Index n = x.rows(), d = x.cols();
  c->xhat.resize(n, d);
  c->inv_std.resize(n);
  MatX y(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Scalar mu = x.row(r).mean();
    const auto cent = (x.row(r).array() - mu);
    const Scalar var = cent.square().sum() / static_cast<Scalar>(d);
    const Scalar inv = 1.0 / std::sqrt(var + kLnEps);
    c->inv_std[r] = inv;
    c->xhat.row(r) = cent * inv;
    y.row(r) = c->xhat.row(r).array() * gamma.row(0).array() + beta.row(0).array();
  }
  return y;
}

MatX layer_norm_backward(const MatX& dy, const LNCache& c, const MatX& gamma, MatX& dgamma,
                         MatX& dbeta) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  dgamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbeta += dy.colwise().sum();
  MatX dx(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto g = dy.row(r).array() * gamma.row(0).array();
    const Scalar m1 = g.mean();
    const Scalar m2 = (g * c.xhat.row(r).array()).mean();
    dx.row(r) = (g - m1 - c.xhat.row(r).array() * m2) * c.inv_std[r];
  }
  return dx;
}

constexpr Scalar kInvSqrt2 = 0.70710678118654752;
constexpr Scalar kInvSqrt2Pi = 0.39894228040143268;

MatX gelu(const MatX& x) {
  return x.unaryExpr([](Scalar v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
}

MatX gelu_backward_mul(const MatX& x_pre, const MatX& dy) {
  MatX dx(x_pre.rows(), x_pre.cols());
  for (Eigen::Index i = 0; i < x_pre.size(); ++i) {
    const Scalar v = x_pre(i);
    const Scalar cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    const Scalar pdf = std::exp(-0.5 * v * v) * kInvSqrt2Pi;
    dx(i) = dy(i) * (cdf + v * pdf);
  }
  return dx;
}

void softmax_rows(MatX& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const Scalar m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp();
    s.row(r) /= s.row(r).sum();
  }
}

MatX ffn_forward(const ParamStore& P, const std::string& ln_pre, const std::string& ffn_pre,
                 const MatX& x, FfnCache* c) {
  c->x_ln = layer_norm(x, P.value(ln_pre + ".gamma"), P.value(ln_pre + ".beta"), &c->ln);
  c->h_pre = linear(c->x_ln, P.value(ffn_pre + ".w1"), P.value(ffn_pre + ".b1"));
  c->h_act = gelu(c->h_pre);
  return linear(c->h_act, P.value(ffn_pre + ".w2"), P.value(ffn_pre + ".b2"));
}

// Gradient of the FFN sub-layer with respect to its input, through the norm.
// The caller owns the residual term.
MatX ffn_backward(ParamStore& P, const std::string& ln_pre, const std::string& ffn_pre,
                  const MatX& d_y, const FfnCache& c) {
  MatX d_act = MatX::Zero(c.h_act.rows(), c.h_act.cols());
  linear_backward(c.h_act, P.value(ffn_pre + ".w2"), d_y, P.grad(ffn_pre + ".w2"),
                  P.grad(ffn_pre + ".b2"), &d_act);
  const MatX d_pre = gelu_backward_mul(c.h_pre, d_act);
  MatX d_xln = MatX::Zero(c.x_ln.rows(), c.x_ln.cols());
  linear_backward(c.x_ln, P.value(ffn_pre + ".w1"), d_pre, P.grad(ffn_pre + ".w1"),
                  P.grad(ffn_pre + ".b1"), &d_xln);
  return layer_norm_backward(d_xln, c.ln, P.value(ln_pre + ".gamma"), P.grad(ln_pre + ".gamma"),
                             P.grad(ln_pre + ".beta"));
}

MatX encoder_block_forward(const ParamStore& P, const std::string& pre, int heads, const MatX& x,
                           EncoderBlockCache* cache) {
  EncoderBlockCache local;
  EncoderBlockCache& c = cache ? *cache : local;
  const Eigen::Index L = x.rows(), d = x.cols();
  const int dh = static_cast<int>(d) / heads;
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));

  c.x_in = x;
  c.attn.x_ln = layer_norm(x, P.value(pre + ".ln1.gamma"), P.value(pre + ".ln1.beta"), &c.attn.ln);
  c.attn.q = linear(c.attn.x_ln, P.value(pre + ".attn.wq"), P.value(pre + ".attn.bq"));
  c.attn.k = linear(c.attn.x_ln, P.value(pre + ".attn.wk"), P.value(pre + ".attn.bk"));
  c.attn.v = linear(c.attn.x_ln, P.value(pre + ".attn.wv"), P.value(pre + ".attn.bv"));
  c.attn.concat.resize(L, d);
  c.attn.probs.assign(heads, MatX());
  for (int h = 0; h < heads; ++h) {
    MatX s = c.attn.q.middleCols(h * dh, dh) * c.attn.k.middleCols(h * dh, dh).transpose() * scale;
    softmax_rows(s);
    c.attn.concat.middleCols(h * dh, dh) = s * c.attn.v.middleCols(h * dh, dh);
    c.attn.probs[h] = std::move(s);
  }
  const MatX y = linear(c.attn.concat, P.value(pre + ".attn.wo"), P.value(pre + ".attn.bo"));
  c.x_mid = x + y;
  const MatX f = ffn_forward(P, pre + ".ln2", pre + ".ffn", c.x_mid, &c.ffn);
  return c.x_mid + f;
}

MatX encoder_block_backward(ParamStore& P, const std::string& pre, int heads, const MatX& d_out,
                            const EncoderBlockCache& c) {
  const Eigen::Index L = c.x_in.rows(), d = c.x_in.cols();
  const int dh = static_cast<int>(d) / heads;
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));

  MatX d_x_mid = d_out + ffn_backward(P, pre + ".ln2", pre + ".ffn", d_out, c.ffn);

  MatX d_concat = MatX::Zero(L, d);
  linear_backward(c.attn.concat, P.value(pre + ".attn.wo"), d_x_mid, P.grad(pre + ".attn.wo"),
                  P.grad(pre + ".attn.bo"), &d_concat);
  MatX dq = MatX::Zero(L, d), dk = MatX::Zero(L, d), dv = MatX::Zero(L, d);
  for (int h = 0; h < heads; ++h) {
    const auto Qh = c.attn.q.middleCols(h * dh, dh);
    const auto Kh = c.attn.k.middleCols(h * dh, dh);
    const auto Vh = c.attn.v.middleCols(h * dh, dh);
    const MatX& prob = c.attn.probs[h];
    const auto dOh = d_concat.middleCols(h * dh, dh);
    const MatX dP = dOh * Vh.transpose();
    MatX ds = prob.cwiseProduct(dP);
    const VecX row_sum = ds.rowwise().sum();
    ds -= (prob.array().colwise() * row_sum.array()).matrix();
    dq.middleCols(h * dh, dh) = ds * Kh * scale;
    dk.middleCols(h * dh, dh) = ds.transpose() * Qh * scale;
    dv.middleCols(h * dh, dh) = prob.transpose() * dOh;
  }
  MatX d_xln = MatX::Zero(L, d);
  linear_backward(c.attn.x_ln, P.value(pre + ".attn.wq"), dq, P.grad(pre + ".attn.wq"),
                  P.grad(pre + ".attn.bq"), &d_xln);
  linear_backward(c.attn.x_ln, P.value(pre + ".attn.wk"), dk, P.grad(pre + ".attn.wk"),
                  P.grad(pre + ".attn.bk"), &d_xln);
  linear_backward(c.attn.x_ln, P.value(pre + ".attn.wv"), dv, P.grad(pre + ".attn.wv"),
                  P.grad(pre + ".attn.bv"), &d_xln);
  return d_x_mid + layer_norm_backward(d_xln, c.attn.ln, P.value(pre + ".ln1.gamma"),
                                       P.grad(pre + ".ln1.gamma"), P.grad(pre + ".ln1.beta"));
}

}  // namespace

MatX cross_attention_windowed(const MatX& x_ln, const MatX& k_full, const MatX& v_full,
                              const WindowIndex& index, const CrossAttnParams& p, int heads,
                              AttnStats* stats, CrossAttnCache* cache) {
  const Eigen::Index L = x_ln.rows(), d = x_ln.cols();
  const int dh = static_cast<int>(d) / heads;
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  const MatX q = linear(x_ln, *p.wq, *p.bq);

  MatX concat = MatX::Zero(L, d);
  std::vector<uint8_t> empty(L, 0);
  if (cache) {
    cache->x_ln = x_ln;
    cache->q = q;
    cache->keys.assign(L, {});
    cache->probs.assign(L, VecX());
  }
  for (Eigen::Index i = 0; i < L; ++i) {
    std::vector<int> keys = index.gather(static_cast<int>(i));
    if (stats) {
      stats->queries++;
      stats->score_evals += static_cast<long long>(heads) * static_cast<long long>(keys.size());
    }
    if (keys.empty()) {
      empty[i] = 1;
      continue;
    }
    const int nk = static_cast<int>(keys.size());
    VecX pall(static_cast<Eigen::Index>(heads) * nk);
    for (int h = 0; h < heads; ++h) {
      VecX s(nk);
      for (int j = 0; j < nk; ++j)
        s[j] = q.row(i).segment(h * dh, dh).dot(k_full.row(keys[j]).segment(h * dh, dh)) * scale;
      const Scalar m = s.maxCoeff();
      s = (s.array() - m).exp();
      s /= s.sum();
      for (int j = 0; j < nk; ++j)
        concat.row(i).segment(h * dh, dh) += s[j] * v_full.row(keys[j]).segment(h * dh, dh);
      pall.segment(static_cast<Eigen::Index>(h) * nk, nk) = s;
    }
    if (cache) {
      cache->keys[i] = std::move(keys);
      cache->probs[i] = std::move(pall);
    }
  }
  MatX y = linear(concat, *p.wo, *p.bo);
  for (Eigen::Index i = 0; i < L; ++i)
    if (empty[i]) y.row(i).setZero();
  if (cache) cache->concat = std::move(concat);
  return y;
}

MatX cross_attention_reference(const MatX& x_ln, const MatX& h_tokens,
                               const std::vector<uint8_t>& mask, const CrossAttnParams& p,
                               int heads) {
  const Eigen::Index L = x_ln.rows(), d = x_ln.cols();
  const Eigen::Index V = h_tokens.rows();
  if (static_cast<Eigen::Index>(mask.size()) != L * V)
    throw schema_error("cross attention reference: mask size mismatch");
  const int dh = static_cast<int>(d) / heads;
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  const MatX q = linear(x_ln, *p.wq, *p.bq);
  const MatX k = linear(h_tokens, *p.wk, *p.bk);
  const MatX v = linear(h_tokens, *p.wv, *p.bv);
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();

  MatX concat = MatX::Zero(L, d);
  std::vector<uint8_t> empty(L, 1);
  for (Eigen::Index i = 0; i < L; ++i) {
    for (Eigen::Index j = 0; j < V; ++j)
      if (mask[static_cast<size_t>(i) * V + j]) {
        empty[i] = 0;
        break;
      }
    if (empty[i]) continue;
    for (int h = 0; h < heads; ++h) {
      VecX s(V);
      for (Eigen::Index j = 0; j < V; ++j)
        s[j] = mask[static_cast<size_t>(i) * V + j]
                   ? q.row(i).segment(h * dh, dh).dot(k.row(j).segment(h * dh, dh)) * scale
                   : neg_inf;
      const Scalar m = s.maxCoeff();
      VecX e(V);
      for (Eigen::Index j = 0; j < V; ++j) e[j] = std::isinf(s[j]) ? 0.0 : std::exp(s[j] - m);
      e /= e.sum();
      for (Eigen::Index j = 0; j < V; ++j)
        if (e[j] != 0.0) concat.row(i).segment(h * dh, dh) += e[j] * v.row(j).segment(h * dh, dh);
    }
  }
  MatX y = linear(concat, *p.wo, *p.bo);
  for (Eigen::Index i = 0; i < L; ++i)
    if (empty[i]) y.row(i).setZero();
  return y;
}

namespace {

CrossAttnParams cross_params(const ParamStore& P, const std::string& pre) {
  return CrossAttnParams{&P.value(pre + ".attn.wq"), &P.value(pre + ".attn.bq"),
                         &P.value(pre + ".attn.wk"), &P.value(pre + ".attn.bk"),
                         &P.value(pre + ".attn.wv"), &P.value(pre + ".attn.bv"),
                         &P.value(pre + ".attn.wo"), &P.value(pre + ".attn.bo")};
}

MatX inter_block_forward(const ParamStore& P, const std::string& pre, int heads, const MatX& x,
                         const MatX& k_full, const MatX& v_full, const WindowIndex& windex,
                         AttnStats* stats, InterBlockCache* cache) {
  InterBlockCache local;
  InterBlockCache& c = cache ? *cache : local;
  c.x_in = x;
  const MatX x_ln = layer_norm(x, P.value(pre + ".lnq.gamma"), P.value(pre + ".lnq.beta"),
                               &c.attn.ln);
  const MatX y = cross_attention_windowed(x_ln, k_full, v_full, windex, cross_params(P, pre),
                                          heads, stats, cache ? &c.attn : nullptr);
  if (!cache) c.attn.ln = LNCache();
  c.x_mid = x + y;
  const MatX f = ffn_forward(P, pre + ".ln2", pre + ".ffn", c.x_mid, &c.ffn);
  return c.x_mid + f;
}

// d_k_full / d_v_full accumulate the gradient on the shared human-token
// projections; the caller folds them back once per block after all views.
MatX inter_block_backward(ParamStore& P, const std::string& pre, int heads, const MatX& d_out,
                          const InterBlockCache& c, const MatX& k_full, const MatX& v_full,
                          MatX& d_k_full, MatX& d_v_full) {
  const Eigen::Index L = c.x_in.rows(), d = c.x_in.cols();
  const int dh = static_cast<int>(d) / heads;
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(dh));

  MatX d_x_mid = d_out + ffn_backward(P, pre + ".ln2", pre + ".ffn", d_out, c.ffn);

  MatX d_y = d_x_mid;
  for (Eigen::Index i = 0; i < L; ++i)
    if (c.attn.keys[i].empty()) d_y.row(i).setZero();
  MatX d_concat = MatX::Zero(L, d);
  linear_backward(c.attn.concat, P.value(pre + ".attn.wo"), d_y, P.grad(pre + ".attn.wo"),
                  P.grad(pre + ".attn.bo"), &d_concat);

  MatX dq = MatX::Zero(L, d);
  for (Eigen::Index i = 0; i < L; ++i) {
    const std::vector<int>& keys = c.attn.keys[i];
    if (keys.empty()) continue;
    const int nk = static_cast<int>(keys.size());
    for (int h = 0; h < heads; ++h) {
      const auto dOh = d_concat.row(i).segment(h * dh, dh);
      const auto prob = c.attn.probs[i].segment(static_cast<Eigen::Index>(h) * nk, nk);
      VecX dp(nk);
      for (int j = 0; j < nk; ++j) {
        dp[j] = dOh.dot(v_full.row(keys[j]).segment(h * dh, dh));
        d_v_full.row(keys[j]).segment(h * dh, dh) += prob[j] * dOh;
      }
      const Scalar sum_pd = prob.dot(dp);
      for (int j = 0; j < nk; ++j) {
        const Scalar ds = prob[j] * (dp[j] - sum_pd);
        dq.row(i).segment(h * dh, dh) += ds * k_full.row(keys[j]).segment(h * dh, dh) * scale;
        d_k_full.row(keys[j]).segment(h * dh, dh) += ds * c.attn.q.row(i).segment(h * dh, dh) * scale;
      }
    }
  }
  MatX d_xln = MatX::Zero(L, d);
  linear_backward(c.attn.x_ln, P.value(pre + ".attn.wq"), dq, P.grad(pre + ".attn.wq"),
                  P.grad(pre + ".attn.bq"), &d_xln);
  return d_x_mid + layer_norm_backward(d_xln, c.attn.ln, P.value(pre + ".lnq.gamma"),
                                       P.grad(pre + ".lnq.gamma"), P.grad(pre + ".lnq.beta"));
}

std::string suffix_of(const std::string& name) {
  const size_t dot = name.rfind('.');
  return dot == std::string::npos ? name : name.substr(dot + 1);
}

Scalar trunc_normal(Rng& rng, Scalar stddev) {
  Scalar v;
  do {
    v = rng.normal();
  } while (std::abs(v) > 2.0);
  return v * stddev;
}

}  // namespace

ReconModel ReconModel::create(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ReconModel m;
  m.cfg = cfg;
  ParamStore& P = m.params;
  const int d = cfg.d, hidden = 4 * cfg.d;

  auto add_block = [&](const std::string& pre, bool cross) {
    if (cross) {
      P.add(pre + ".lnq.gamma", 1, d, false);
      P.add(pre + ".lnq.beta", 1, d, false);
    } else {
      P.add(pre + ".ln1.gamma", 1, d, false);
      P.add(pre + ".ln1.beta", 1, d, false);
    }
    P.add(pre + ".attn.wq", d, d, true);
    P.add(pre + ".attn.bq", 1, d, true);
    P.add(pre + ".attn.wk", d, d, true);
    P.add(pre + ".attn.bk", 1, d, true);
    P.add(pre + ".attn.wv", d, d, true);
    P.add(pre + ".attn.bv", 1, d, true);
    P.add(pre + ".attn.wo", d, d, true);
    P.add(pre + ".attn.bo", 1, d, true);
    P.add(pre + ".ln2.gamma", 1, d, false);
    P.add(pre + ".ln2.beta", 1, d, false);
    P.add(pre + ".ffn.w1", d, hidden, true);
    P.add(pre + ".ffn.b1", 1, hidden, true);
    P.add(pre + ".ffn.w2", hidden, d, true);
    P.add(pre + ".ffn.b2", 1, d, true);
  };

  P.add("embed.weight", cfg.patch_dim(), d, true);
  P.add("embed.bias", 1, d, true);
  for (int b = 0; b < cfg.n_intra; ++b) add_block("intra" + std::to_string(b), false);
  P.add("tok.embed.weight", 3 + cfg.channels, d, true);
  P.add("tok.embed.bias", 1, d, true);
  for (int b = 0; b < cfg.n_intra; ++b) add_block("tok" + std::to_string(b), false);
  for (int b = 0; b < cfg.n_inter; ++b) add_block("inter" + std::to_string(b), true);
  P.add("head.weight", d, cfg.patch * cfg.patch * kRawChannels, true);
  P.add("head.bias", 1, cfg.patch * cfg.patch * kRawChannels, true);

  // Residual branches start silent: attention/FFN output projections and the
  // decode head are zeroed, so the initial stream is the embedding itself.
  Rng rng(seed);
  for (size_t i = 0; i < P.size(); ++i) {
    const std::string sfx = suffix_of(P.names[i]);
    MatX& w = P.values[i];
    if (sfx == "gamma") {
      w.setOnes();
    } else if (sfx == "beta" || sfx[0] == 'b' || P.names[i] == "head.weight" || sfx == "wo" ||
               sfx == "w2") {
      w.setZero();
    } else {
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index cidx = 0; cidx < w.cols(); ++cidx) w(r, cidx) = trunc_normal(rng, 0.02);
    }
  }
  return m;
}

void ReconModel::perturb(Rng& rng, Scalar stddev) {
  for (MatX& w : params.values)
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) += rng.normal() * stddev;
}

GaussianSet ReconModel::forward(const ViewBundle& bundle, const MatX* human_points, Tape* tape,
                                AttnStats* stats) const {
  cfg.validate();
  bundle.validate();
  if (bundle.latent_h() != cfg.latent_h || bundle.latent_w() != cfg.latent_w ||
      bundle.channels() != cfg.channels ||
      static_cast<int>(bundle.views.size()) != cfg.n_views)
    throw config_mismatch("view bundle shape does not match model config");
  if (human_points && human_points->cols() != 3)
    throw schema_error("forward: human points must be V x 3");

  const ParamStore& P = params;
  const int lh = cfg.latent_h, lw = cfg.latent_w, ch = cfg.channels;
  const int p = cfg.patch, cells = cfg.cells_per_view();
  const int tokens = cfg.tokens_per_view();
  const Scalar near = 0.5 * bundle.radius, far = 3.5 * bundle.radius;
  const bool human = human_points && human_points->rows() > 0;
  if (tape) {
    tape->views.clear();
    tape->inter_shared.clear();
    tape->human = HumanTape();
    tape->near = near;
    tape->far = far;
  }

  // Human tokens: normalized position plus features sampled where the vertex
  // lands in the input view's latent grid.
  MatX h_final;
  std::vector<InterShared> shared_local;
  std::vector<InterShared>& shared = tape ? tape->inter_shared : shared_local;
  if (human) {
    const MatX& pts = *human_points;
    const int V = static_cast<int>(pts.rows());
    const CameraView& cam0 = bundle.views[0].camera;
    const Grid3& f0 = bundle.views[0].features;
    HumanTape ht;
    ht.active = true;
    ht.feats_in.resize(V, 3 + ch);
    ht.corner_idx.assign(V, {0, 0, 0, 0});
    ht.corner_w.assign(V, {0, 0, 0, 0});
    ht.sample_valid.assign(V, 0);
    for (int i = 0; i < V; ++i) {
      const Vec3 pos = pts.row(i).transpose();
      ht.feats_in.block(i, 0, 1, 3) = ((pos - bundle.center) / bundle.radius).transpose();
      const ProjectedPoint pp = project_point(cam0, pos);
      if (pp.depth <= 1e-6) {
        ht.feats_in.block(i, 3, 1, ch).setZero();
        continue;
      }
      const Scalar lu = (pp.uv.x() - (kEncoderStride - 1) * 0.5) / kEncoderStride;
      const Scalar lv = (pp.uv.y() - (kEncoderStride - 1) * 0.5) / kEncoderStride;
      const Scalar uc = std::min(std::max(lu, Scalar(0)), Scalar(lw - 1));
      const Scalar vc = std::min(std::max(lv, Scalar(0)), Scalar(lh - 1));
      const int x0 = std::min(static_cast<int>(std::floor(uc)), lw - 1);
      const int y0 = std::min(static_cast<int>(std::floor(vc)), lh - 1);
      const int x1 = std::min(x0 + 1, lw - 1);
      const int y1 = std::min(y0 + 1, lh - 1);
      const Scalar fx = uc - x0, fy = vc - y0;
      ht.corner_idx[i] = {y0 * lw + x0, y0 * lw + x1, y1 * lw + x0, y1 * lw + x1};
      ht.corner_w[i] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      ht.sample_valid[i] = 1;
      for (int k = 0; k < ch; ++k) {
        Scalar acc = 0;
        for (int t = 0; t < 4; ++t) {
          const int cy = ht.corner_idx[i][t] / lw, cx = ht.corner_idx[i][t] % lw;
          acc += ht.corner_w[i][t] * f0.at(cy, cx, k);
        }
        ht.feats_in(i, 3 + k) = acc;
      }
    }
    ht.h0 = linear(ht.feats_in, P.value("tok.embed.weight"), P.value("tok.embed.bias"));
    MatX h = ht.h0;
    if (tape) ht.blocks.resize(cfg.n_intra);
    for (int b = 0; b < cfg.n_intra; ++b)
      h = encoder_block_forward(P, "tok" + std::to_string(b), cfg.heads, h,
                                tape ? &ht.blocks[b] : nullptr);
    ht.h_final = h;
    h_final = h;
    shared.resize(cfg.n_inter);
    for (int b = 0; b < cfg.n_inter; ++b) {
      const std::string pre = "inter" + std::to_string(b);
      shared[b].k = linear(h_final, P.value(pre + ".attn.wk"), P.value(pre + ".attn.bk"));
      shared[b].v = linear(h_final, P.value(pre + ".attn.wv"), P.value(pre + ".attn.bv"));
    }
    if (tape)
      tape->human = std::move(ht);
  }

  GaussianSet gs;
  const int n_total = cfg.n_views * cells;
  gs.positions.resize(n_total, 3);
  gs.rotations.resize(n_total, 4);
  gs.scales.resize(n_total, 3);
  gs.colors.resize(n_total, 3);
  gs.opacities.resize(n_total);

  for (int v = 0; v < cfg.n_views; ++v) {
    const CameraView& cam_img = bundle.views[v].camera;
    const CameraView cam_lat = cam_img.resized(lw, lh);
    const Grid3 raymap = plucker_raymap(cam_lat);
    const Grid3& feats = bundle.views[v].features;

    ViewTape vt;
    vt.origin = cam_lat.center();
    vt.patch_in.resize(tokens, cfg.patch_dim());
    for (int ty = 0; ty < cfg.tokens_y(); ++ty)
      for (int tx = 0; tx < cfg.tokens_x(); ++tx) {
        const int row = ty * cfg.tokens_x() + tx;
        int col = 0;
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx) {
            const int y = ty * p + dy, x = tx * p + dx;
            for (int k = 0; k < ch; ++k) vt.patch_in(row, col++) = feats.at(y, x, k);
            for (int k = 0; k < 6; ++k) vt.patch_in(row, col++) = raymap.at(y, x, k);
          }
      }
    vt.x0 = linear(vt.patch_in, P.value("embed.weight"), P.value("embed.bias"));

    MatX x = vt.x0;
    if (tape) vt.intra.resize(cfg.n_intra);
    for (int b = 0; b < cfg.n_intra; ++b)
      x = encoder_block_forward(P, "intra" + std::to_string(b), cfg.heads, x,
                                tape ? &vt.intra[b] : nullptr);

    if (human) {
      vt.windex = build_window_index(*human_points, cam_img, p, cfg.k_win, lh, lw);
      if (tape) vt.inter.resize(cfg.n_inter);
      for (int b = 0; b < cfg.n_inter; ++b)
        x = inter_block_forward(P, "inter" + std::to_string(b), cfg.heads, x, shared[b].k,
                                shared[b].v, vt.windex, stats, tape ? &vt.inter[b] : nullptr);
    }
    vt.x_final = x;

    const MatX raw = linear(x, P.value("head.weight"), P.value("head.bias"));
    vt.cell_raw.resize(cells, kRawChannels);
    vt.dirs.resize(cells, 3);
    for (int ty = 0; ty < cfg.tokens_y(); ++ty)
      for (int tx = 0; tx < cfg.tokens_x(); ++tx)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx) {
            const int y = ty * p + dy, x2 = tx * p + dx;
            vt.cell_raw.row(y * lw + x2) =
                raw.row(ty * cfg.tokens_x() + tx).segment((dy * p + dx) * kRawChannels, kRawChannels);
          }
    for (int y = 0; y < lh; ++y)
      for (int x2 = 0; x2 < lw; ++x2)
        for (int k = 0; k < 3; ++k) vt.dirs(y * lw + x2, k) = raymap.at(y, x2, k);

    for (int cell = 0; cell < cells; ++cell) {
      const int idx = v * cells + cell;
      const auto r = vt.cell_raw.row(cell);
      const Scalar t = near + sigmoid(r[0]) * (far - near);
      gs.positions.row(idx) = (vt.origin + t * vt.dirs.row(cell).transpose()).transpose();
      Vec4 qr(1.0 + r[1], r[2], r[3], r[4]);
      const Scalar qn = qr.norm();
      if (qn < 1e-8) throw numeric_error("forward: degenerate quaternion offset");
      gs.rotations.row(idx) = (qr / qn).transpose();
      for (int k = 0; k < 3; ++k)
        gs.scales(idx, k) = cfg.scale_min + sigmoid(r[5 + k]) * (cfg.scale_max - cfg.scale_min);
      for (int k = 0; k < 3; ++k) gs.colors(idx, k) = sigmoid(r[8 + k]);
      gs.opacities[idx] = sigmoid(r[11]);
    }
    if (tape) tape->views.push_back(std::move(vt));
  }
  return gs;
}

void ReconModel::backward(const Tape& tape, const GaussianGrads& d_gauss,
                          std::vector<Grid3>* latent_grads) {
  ParamStore& P = params;
  const int lh = cfg.latent_h, lw = cfg.latent_w, ch = cfg.channels;
  const int p = cfg.patch, cells = cfg.cells_per_view();
  const Scalar near = tape.near, far = tape.far;
  if (static_cast<int>(tape.views.size()) != cfg.n_views)
    throw schema_error("backward: tape does not match config");
  if (d_gauss.positions.rows() != static_cast<Eigen::Index>(cfg.n_views) * cells)
    throw schema_error("backward: gradient count mismatch");

  if (latent_grads) latent_grads->assign(cfg.n_views, Grid3(lh, lw, ch));

  const bool human = tape.human.active;
  const int V = human ? static_cast<int>(tape.human.h_final.rows()) : 0;
  std::vector<MatX> d_k(cfg.n_inter), d_v(cfg.n_inter);
  if (human)
    for (int b = 0; b < cfg.n_inter; ++b) {
      d_k[b] = MatX::Zero(V, cfg.d);
      d_v[b] = MatX::Zero(V, cfg.d);
    }

  for (int v = 0; v < cfg.n_views; ++v) {
    const ViewTape& vt = tape.views[v];

    MatX d_cell_raw = MatX::Zero(cells, kRawChannels);
    for (int cell = 0; cell < cells; ++cell) {
      const int idx = v * cells + cell;
      const auto r = vt.cell_raw.row(cell);
      auto dr = d_cell_raw.row(cell);

      const Vec3 d_pos = d_gauss.positions.row(idx).transpose();
      const Scalar d_t = d_pos.dot(vt.dirs.row(cell).transpose());
      const Scalar s0 = sigmoid(r[0]);
      dr[0] = d_t * (far - near) * s0 * (1.0 - s0);

      Vec4 qr(1.0 + r[1], r[2], r[3], r[4]);
      const Scalar qn = qr.norm();
      const Vec4 q = qr / qn;
      const Vec4 dq_up = d_gauss.rotations.row(idx).transpose();
      const Vec4 d_qr = (dq_up - q * q.dot(dq_up)) / qn;
      for (int k = 0; k < 4; ++k) dr[1 + k] = d_qr[k];

      for (int k = 0; k < 3; ++k) {
        const Scalar s = sigmoid(r[5 + k]);
        dr[5 + k] = d_gauss.scales(idx, k) * (cfg.scale_max - cfg.scale_min) * s * (1.0 - s);
      }
      for (int k = 0; k < 3; ++k) {
        const Scalar s = sigmoid(r[8 + k]);
        dr[8 + k] = d_gauss.colors(idx, k) * s * (1.0 - s);
      }
      const Scalar so = sigmoid(r[11]);
      dr[11] = d_gauss.opacities[idx] * so * (1.0 - so);
    }

    MatX d_raw_tokens = MatX::Zero(cfg.tokens_per_view(), p * p * kRawChannels);
    for (int ty = 0; ty < cfg.tokens_y(); ++ty)
      for (int tx = 0; tx < cfg.tokens_x(); ++tx)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            d_raw_tokens.row(ty * cfg.tokens_x() + tx)
                .segment((dy * p + dx) * kRawChannels, kRawChannels) =
                d_cell_raw.row((ty * p + dy) * lw + tx * p + dx);

    MatX d_x = MatX::Zero(cfg.tokens_per_view(), cfg.d);
    linear_backward(vt.x_final, P.value("head.weight"), d_raw_tokens, P.grad("head.weight"),
                    P.grad("head.bias"), &d_x);

    if (human)
      for (int b = cfg.n_inter - 1; b >= 0; --b)
        d_x = inter_block_backward(P, "inter" + std::to_string(b), cfg.heads, d_x, vt.inter[b],
                                   tape.inter_shared[b].k, tape.inter_shared[b].v, d_k[b], d_v[b]);
    for (int b = cfg.n_intra - 1; b >= 0; --b)
      d_x = encoder_block_backward(P, "intra" + std::to_string(b), cfg.heads, d_x, vt.intra[b]);

    MatX d_patch = MatX::Zero(cfg.tokens_per_view(), cfg.patch_dim());
    linear_backward(vt.patch_in, P.value("embed.weight"), d_x, P.grad("embed.weight"),
                    P.grad("embed.bias"), &d_patch);
    if (latent_grads) {
      Grid3& lg = (*latent_grads)[v];
      for (int ty = 0; ty < cfg.tokens_y(); ++ty)
        for (int tx = 0; tx < cfg.tokens_x(); ++tx) {
          const int row = ty * cfg.tokens_x() + tx;
          int col = 0;
          for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx) {
              const int y = ty * p + dy, x = tx * p + dx;
              for (int k = 0; k < ch; ++k) lg.at(y, x, k) += d_patch(row, col++);
              col += 6;  // ray-map channels carry no trainable signal
            }
        }
    }
  }

  if (human) {
    const HumanTape& ht = tape.human;
    MatX d_h = MatX::Zero(V, cfg.d);
    for (int b = 0; b < cfg.n_inter; ++b) {
      const std::string pre = "inter" + std::to_string(b);
      linear_backward(ht.h_final, P.value(pre + ".attn.wk"), d_k[b], P.grad(pre + ".attn.wk"),
                      P.grad(pre + ".attn.bk"), &d_h);
      linear_backward(ht.h_final, P.value(pre + ".attn.wv"), d_v[b], P.grad(pre + ".attn.wv"),
                      P.grad(pre + ".attn.bv"), &d_h);
    }
    for (int b = cfg.n_intra - 1; b >= 0; --b)
      d_h = encoder_block_backward(P, "tok" + std::to_string(b), cfg.heads, d_h, ht.blocks[b]);
    MatX d_feats = MatX::Zero(V, 3 + ch);
    linear_backward(ht.feats_in, P.value("tok.embed.weight"), d_h, P.grad("tok.embed.weight"),
                    P.grad("tok.embed.bias"), &d_feats);
    if (latent_grads) {
      Grid3& lg0 = (*latent_grads)[0];
      for (int i = 0; i < V; ++i) {
        if (!ht.sample_valid[i]) continue;
        for (int k = 0; k < ch; ++k) {
          const Scalar g = d_feats(i, 3 + k);
          for (int t = 0; t < 4; ++t) {
            const int cy = ht.corner_idx[i][t] / lw, cx = ht.corner_idx[i][t] % lw;
            lg0.at(cy, cx, k) += ht.corner_w[i][t] * g;
          }
        }
      }
    }
  }
}

namespace {

constexpr char kCkptMagic[4] = {'B', 'S', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void write_pod(std::ostream& s, const T& v) {
  s.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_pod(std::istream& s, T* v) {
  s.read(reinterpret_cast<char*>(v), sizeof(T));
}

}  // namespace

void ReconModel::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open checkpoint for writing: " + path);
  f.write(kCkptMagic, 4);
  write_pod(f, kCkptVersion);
  const int32_t fields[10] = {cfg.d,      cfg.patch,    cfg.heads,    cfg.n_intra, cfg.n_inter,
                              cfg.k_win,  cfg.channels, cfg.latent_h, cfg.latent_w, cfg.n_views};
  for (int32_t v : fields) write_pod(f, v);
  write_pod(f, cfg.scale_min);
  write_pod(f, cfg.scale_max);
  write_pod(f, static_cast<uint32_t>(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names[i];
    write_pod(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    const MatX& w = params.values[i];
    write_pod(f, static_cast<uint32_t>(w.rows()));
    write_pod(f, static_cast<uint32_t>(w.cols()));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) write_pod(f, static_cast<float>(w(r, c)));
  }
  if (!f) throw io_error("failed writing checkpoint: " + path);
}

ReconModel ReconModel::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw schema_error("checkpoint: bad magic in " + path);
  uint32_t version;
  read_pod(f, &version);
  if (version != kCkptVersion) throw schema_error("checkpoint: unsupported version");
  int32_t fields[10];
  for (int32_t& v : fields) read_pod(f, &v);
  ModelConfig cfg;
  cfg.d = fields[0];
  cfg.patch = fields[1];
  cfg.heads = fields[2];
  cfg.n_intra = fields[3];
  cfg.n_inter = fields[4];
  cfg.k_win = fields[5];
  cfg.channels = fields[6];
  cfg.latent_h = fields[7];
  cfg.latent_w = fields[8];
  cfg.n_views = fields[9];
  read_pod(f, &cfg.scale_min);
  read_pod(f, &cfg.scale_max);
  if (!f) throw schema_error("checkpoint: truncated header");
  cfg.validate();

  ReconModel m = create(cfg, 0);
  uint32_t n_tensors;
  read_pod(f, &n_tensors);
  if (n_tensors != m.params.size()) throw schema_error("checkpoint: tensor count mismatch");
  for (uint32_t i = 0; i < n_tensors; ++i) {
    uint32_t name_len;
    read_pod(f, &name_len);
    if (!f || name_len > 256) throw schema_error("checkpoint: bad tensor name length");
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (name != m.params.names[i])
      throw schema_error("checkpoint: unexpected tensor " + name + ", wanted " + m.params.names[i]);
    uint32_t rows, cols;
    read_pod(f, &rows);
    read_pod(f, &cols);
    MatX& w = m.params.values[i];
    if (static_cast<Eigen::Index>(rows) != w.rows() || static_cast<Eigen::Index>(cols) != w.cols())
      throw schema_error("checkpoint: shape mismatch for " + name);
    for (uint32_t r = 0; r < rows; ++r)
      for (uint32_t c = 0; c < cols; ++c) {
        float v;
        read_pod(f, &v);
        w(r, c) = v;
      }
  }
  if (!f) throw schema_error("checkpoint: truncated file " + path);
  return m;
}

}  // namespace bodysplat
