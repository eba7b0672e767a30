#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "caveseg/ops.hpp"
#include "caveseg/rng.hpp"

namespace caveseg {

struct ModelConfig {
  int patch_size = 4;
  int embed_dim = 48;
  std::vector<int> depths = {2, 2, 2, 2};
  std::vector<int> num_heads = {3, 6, 12, 24};
  int window_size = 7;
  double mlp_ratio = 4.0;
  std::vector<int> ppm_scales = {1, 2, 3, 6};
  int fusion_channels = 128;
  int num_classes = 13;
  int input_h = 540;
  int input_w = 960;
  double norm_eps = 1e-5;

  // Reduced preset for fast tests; same topology.
  static ModelConfig tiny();

  void validate() const;
  int num_stages() const { return static_cast<int>(depths.size()); }
  int stage_channels(int stage) const { return embed_dim << stage; }
  // Inputs are padded to a multiple of this before entering the backbone.
  int pad_multiple() const { return patch_size << (num_stages() - 1); }
};

// Largest of {8, 4, 2, 1} dividing the channel count.
int norm_group_count(int channels);

struct LinearWeights {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined for bias-free layers
};

struct NormWeights {
  Tensor gamma;
  Tensor beta;
};

struct PatchEmbedWeights {
  LinearWeights proj;  // [patch*patch*3, embed_dim]
  NormWeights norm;    // embed_dim
};

struct AttentionWeights {
  LinearWeights qkv;   // [C, 3C]
  LinearWeights proj;  // [C, C]
};

struct BlockWeights {
  NormWeights norm1;
  AttentionWeights attn;
  NormWeights norm2;
  LinearWeights fc1;  // [C, C*mlp_ratio]
  LinearWeights fc2;  // [C*mlp_ratio, C]
};

struct MergeWeights {
  NormWeights norm;      // 4C
  LinearWeights reduce;  // [4C, 2C], bias-free
};

// Convolution followed by group normalization and ReLU.
struct ConvUnit {
  Tensor kernel;  // [Co, Ci, k, k], bias-free (the norm shift covers it)
  NormWeights norm;
  int stride = 1;
  int padding = 0;
};

Tensor linear(const Tensor& x, const LinearWeights& w);
Tensor conv_unit_forward(const ConvUnit& u, const Tensor& x, double eps);

// Layout bridges between [C,h,w] maps and [h*w, C] token matrices.
Tensor map_to_tokens(const Tensor& fm);
Tensor tokens_to_map(const Tensor& tokens, std::int64_t h, std::int64_t w);

// Zero-pads bottom/right to multiples of (mh, mw); identity when already
// divisible (same storage, no copy).
Tensor pad_to_multiple(const Tensor& image, int mh, int mw);

// [3,H,W] -> [embed_dim, H/p, W/p]: each pxpx3 patch projected by one learned
// matrix + bias, then layer-normalized.
Tensor patch_embed(const Tensor& image, const PatchEmbedWeights& w,
                   const ModelConfig& cfg);

// Token grid tiled into shift-rolled windows plus the additive mask that
// blocks pairs from non-adjacent pre-roll regions (and padding).
struct WindowSet {
  Tensor windows;  // [nw, ws*ws, C]
  Tensor mask;     // [nw, ws*ws, ws*ws], entries 0 or large negative
  std::int64_t h = 0, w = 0;
  std::int64_t window = 0, shift = 0;
  std::int64_t nwy = 0, nwx = 0;
  // Windows whose mask rows are not all-permissive.
  std::vector<bool> has_blocked;
};

WindowSet window_partition(const Tensor& fm, int window, int shift);
// Inverse: un-tile, drop padding, roll back. Bit-exact round trip.
Tensor window_reverse(const WindowSet& ws);

// Post-softmax attention weights captured for inspection, one [n, n] tensor
// per (window, head) in window-major order.
struct AttentionProbe {
  std::vector<Tensor> weights;
  std::int64_t heads = 0;
};

// Per window, per head: softmax(QK^T/sqrt(d_head) + mask) V, heads
// concatenated, output-projected. Shape-preserving.
Tensor windowed_attention(const WindowSet& ws, const AttentionWeights& w,
                          int num_heads, AttentionProbe* probe = nullptr);

// Pre-norm transformer block over a [h*w, C] token matrix: norm, windowed
// attention, residual, norm, gelu MLP, residual. `shifted` selects the
// half-window roll; the window clamps to min(h, w) and clamping disables the
// shift.
Tensor swin_block(const Tensor& tokens, std::int64_t h, std::int64_t w,
                  const BlockWeights& bw, int num_heads, int window,
                  bool shifted, double eps, AttentionProbe* probe = nullptr);

// [C,h,w] -> [2C, ceil(h/2), ceil(w/2)]: 2x2 neighborhoods concatenated
// (zero-padded on odd dims), layer-normalized, projected.
Tensor patch_merge(const Tensor& fm, const MergeWeights& w, double eps);

struct CaveSegWeights {
  PatchEmbedWeights embed;
  std::vector<std::vector<BlockWeights>> stages;
  std::vector<MergeWeights> merges;
  std::vector<ConvUnit> ppm_branches;  // 1x1 to fusion/4, one per scale
  ConvUnit ppm_fuse;                   // 3x3 over [stage3 | branches]
  std::vector<ConvUnit> laterals;      // 1x1 to fusion, stages 0..2
  std::vector<ConvUnit> td_smooth;     // 3x3 per refined top-down level
  std::vector<ConvUnit> bu_down;       // 3x3 stride-2 between bottom-up levels
  ConvUnit fuse;                       // 3x3, 8*fusion -> fusion
  Tensor classifier_w;                 // [num_classes, fusion, 1, 1]
  Tensor classifier_b;                 // [num_classes]
};

class CaveSegModel {
 public:
  explicit CaveSegModel(ModelConfig config, std::uint64_t seed = 0);

  const ModelConfig& config() const { return cfg_; }
  CaveSegWeights& weights() { return w_; }
  const CaveSegWeights& weights() const { return w_; }

  // Every learned tensor with its stable name, in checkpoint order.
  void visit_parameters(
      const std::function<void(const std::string&, Tensor&)>& fn);
  std::vector<std::pair<std::string, Tensor>> parameters();
  std::int64_t count_parameters();
  void zero_grad();

  // Post-block feature maps of all stages; image dims must already be
  // multiples of pad_multiple().
  std::vector<Tensor> backbone_forward(const Tensor& image) const;
  // Multi-scale pooled context over the deepest map -> [fusion, h3, w3].
  Tensor ppm_forward(const Tensor& stage3) const;
  // Top-down and bottom-up pyramids fused at the finest resolution.
  Tensor aggregate_features(const std::vector<Tensor>& stages,
                            const Tensor& ppm_out) const;
  // [3,H,W] -> [num_classes,H,W] logits, any H,W >= patch_size.
  Tensor forward(const Tensor& image) const;

 private:
  ModelConfig cfg_;
  CaveSegWeights w_;
};

}  // namespace caveseg
