#pragma once

#include <array>
#include <map>

#include "bodysplat/gsplat.hpp"
#include "bodysplat/latents.hpp"

namespace bodysplat {

// Raw decode channels per latent cell: depth, 4 quaternion offsets, 3 log-ish
// scales, 3 colors, opacity, and 2 unused slots reserved in the layout.
inline constexpr int kRawChannels = 14;

struct ModelConfig {
  int d = 256;        // token width
  int patch = 2;      // token covers patch x patch latent cells
  int heads = 8;
  int n_intra = 4;    // per-view self-attention blocks (also tokenizer depth)
  int n_inter = 2;    // windowed cross-attention blocks
  int k_win = 2;      // window size in token cells
  int channels = kLatentChannels;
  int latent_h = 64;
  int latent_w = 64;
  int n_views = 4;
  Scalar scale_min = kDefaultScaleMin;
  Scalar scale_max = kDefaultScaleMax;

  int head_dim() const { return d / heads; }
  int tokens_y() const { return latent_h / patch; }
  int tokens_x() const { return latent_w / patch; }
  int tokens_per_view() const { return tokens_y() * tokens_x(); }
  int cells_per_view() const { return latent_h * latent_w; }
  int patch_dim() const { return (channels + 6) * patch * patch; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Named parameter tensors in a stable registration order; gradients and the
// weight-decay flag ride along (layer norm scales/offsets are exempt).
struct ParamStore {
  std::vector<std::string> names;
  std::vector<MatX> values;
  std::vector<MatX> grads;
  std::vector<uint8_t> decay;
  std::map<std::string, int> index;

  int add(const std::string& name, int rows, int cols, bool decays);
  int find(const std::string& name) const;
  MatX& value(const std::string& name) { return values[find(name)]; }
  const MatX& value(const std::string& name) const { return values[find(name)]; }
  MatX& grad(const std::string& name) { return grads[find(name)]; }
  size_t size() const { return values.size(); }
  void zero_grads();
};

// Human-token admission structure for one view: vertices bucketed by the
// token cell their projection lands in. A query token attends to the
// vertices bucketed inside its k_win x k_win window (clamped at borders).
struct WindowIndex {
  int cells_y = 0, cells_x = 0, k_win = 1;
  int num_points = 0;
  std::vector<std::vector<int>> buckets;  // cells_y*cells_x lists of vertex ids

  void window_bounds(int qy, int qx, int* y0, int* x0, int* ny, int* nx) const;
  std::vector<int> gather(int query) const;  // admitted keys, window row-major
};

WindowIndex build_window_index(const MatX& points_world, const CameraView& image_cam,
                               int patch, int k_win, int latent_h, int latent_w);

// Dense admission mask (queries x points), for the reference attention path.
std::vector<uint8_t> window_mask_dense(const WindowIndex& index);

struct AttnStats {
  long long score_evals = 0;  // (query, admitted key) pairs, counted per head
  long long queries = 0;
};

struct LNCache {
  MatX xhat;
  VecX inv_std;
};
struct SelfAttnCache {
  LNCache ln;
  MatX x_ln, q, k, v, concat;
  std::vector<MatX> probs;  // per head, rows x rows
};
struct FfnCache {
  LNCache ln;
  MatX x_ln, h_pre, h_act;
};
struct EncoderBlockCache {
  MatX x_in, x_mid;
  SelfAttnCache attn;
  FfnCache ffn;
};
struct CrossAttnCache {
  LNCache ln;
  MatX x_ln, q, concat;
  std::vector<std::vector<int>> keys;  // per query, admitted key ids
  std::vector<VecX> probs;             // per query, heads*nk attention weights
};
struct InterBlockCache {
  MatX x_in, x_mid;
  CrossAttnCache attn;
  FfnCache ffn;
};

struct ViewTape {
  MatX patch_in;  // tokens x (c+6)p^2
  MatX x0;
  std::vector<EncoderBlockCache> intra;
  std::vector<InterBlockCache> inter;
  MatX x_final;
  MatX cell_raw;  // cells x kRawChannels
  MatX dirs;      // cells x 3, unit ray directions
  Vec3 origin = Vec3::Zero();
  WindowIndex windex;
};
struct HumanTape {
  bool active = false;
  MatX feats_in;  // V x (3+c)
  MatX h0;
  std::vector<EncoderBlockCache> blocks;
  MatX h_final;
  std::vector<std::array<int, 4>> corner_idx;  // bilinear taps into view-0 features
  std::vector<std::array<Scalar, 4>> corner_w;
  std::vector<uint8_t> sample_valid;
};
struct InterShared {
  MatX k, v;  // human-token projections, shared by every view in a block
};
struct Tape {
  std::vector<ViewTape> views;
  HumanTape human;
  std::vector<InterShared> inter_shared;
  Scalar near = 0, far = 0;
};

// Standalone windowed cross-attention (the production kernel) and its dense
// masked counterpart. Both zero the output rows of queries with no admitted
// keys. The kernel only ever scores admitted pairs; the reference scores all
// pairs and masks with -inf before the softmax.
struct CrossAttnParams {
  const MatX *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
};
MatX cross_attention_windowed(const MatX& x_ln, const MatX& k_full, const MatX& v_full,
                              const WindowIndex& index, const CrossAttnParams& p, int heads,
                              AttnStats* stats, CrossAttnCache* cache);
MatX cross_attention_reference(const MatX& x_ln, const MatX& h_tokens,
                               const std::vector<uint8_t>& mask, const CrossAttnParams& p,
                               int heads);

// One Gaussian per latent cell, all views concatenated: index =
// view * cells_per_view + cell_y * latent_w + cell_x.
class ReconModel {
 public:
  ModelConfig cfg;
  ParamStore params;

  static ReconModel create(const ModelConfig& cfg, uint64_t seed);

  // human_points: posed body vertices (V x 3, world space), or nullptr to run
  // the geometry-free ablation (cross-attention blocks are skipped).
  GaussianSet forward(const ViewBundle& bundle, const MatX* human_points, Tape* tape,
                      AttnStats* stats) const;

  // Accumulates parameter gradients; optionally also returns gradients with
  // respect to the bundle's latent feature grids (one per view).
  void backward(const Tape& tape, const GaussianGrads& d_gauss,
                std::vector<Grid3>* latent_grads);

  void zero_grads() { params.zero_grads(); }
  void perturb(Rng& rng, Scalar stddev);  // jitter every tensor (gradient checks)

  void save(const std::string& path) const;
  static ReconModel load(const std::string& path);
};

}  // namespace bodysplat
