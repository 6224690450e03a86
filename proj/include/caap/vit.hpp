#pragma once

// Deterministic pre-norm Vision Transformer with activation caching and
// token-pinned forward passes.
//
// Block indices in this header are 0-based: block b consumes resid[b] and
// produces resid[b + 1]. A token "pinned at block b" contributes the keys and
// values cached at block b of its source/target pass and is not advanced.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "caap/image.hpp"
#include "caap/tensor.hpp"

namespace caap {

struct ViTConfig {
  int layers = 6;
  int dim = 32;
  int heads = 4;
  int grid = 4;  // patches per side
  int patch_px = 4;
  int classes = 5;
  int channels = 3;
  float mlp_ratio = 2.0f;
  float ln_eps = 1e-5f;

  int num_patches() const { return grid * grid; }
  int tokens() const { return num_patches() + 1; }
  int head_dim() const { return dim / heads; }
  int mlp_hidden() const { return static_cast<int>(static_cast<float>(dim) * mlp_ratio + 0.5f); }
  int image_side() const { return grid * patch_px; }
  int patch_features() const { return patch_px * patch_px * channels; }

  void validate() const;
  bool operator==(const ViTConfig&) const = default;
};

struct BlockWeights {
  RowVectorF ln1_gamma, ln1_beta;
  MatrixF wq, wk, wv, wo;  // [d, d], applied as x * W
  RowVectorF bq, bk, bv, bo;
  RowVectorF ln2_gamma, ln2_beta;
  MatrixF mlp_in;  // [d, m]
  RowVectorF mlp_in_bias;
  MatrixF mlp_out;  // [m, d]
  RowVectorF mlp_out_bias;
};

/// The frozen classifier: configuration plus every weight.
struct ModelBundle {
  ViTConfig config;
  MatrixF patch_w;  // [patch_features, d]
  RowVectorF patch_b;
  MatrixF pos_embed;  // [N + 1, d]
  RowVectorF cls_embed;
  std::vector<BlockWeights> blocks;
  RowVectorF lnf_gamma, lnf_beta;
  MatrixF head_w;  // [d, K]
  RowVectorF head_b;

  /// Throws kShape when any tensor disagrees with `config`, kFormat on non-finite weights.
  void validate() const;

  /// FNV-1a over the config and every tensor in canonical order.
  std::uint64_t fingerprint() const;

  /// Canonical (name, tensor) list; the order is the container order.
  std::vector<std::pair<std::string, Tensor>> to_tensors() const;
  static ModelBundle from_tensors(const ViTConfig& config,
                                  const std::vector<std::pair<std::string, Tensor>>& tensors);
};

/// Per-block activations of one full forward pass.
struct ActivationCache {
  std::vector<MatrixF> resid;   // L + 1 entries, each [N + 1, d]; resid[L] is the final stream
  std::vector<MatrixF> keys;    // L entries, [N + 1, d]; head h owns columns [h*dh, (h+1)*dh)
  std::vector<MatrixF> values;  // same layout as keys
  VectorF logits;
  VectorF probs;
  std::uint64_t model_fingerprint = 0;

  int layers() const { return static_cast<int>(keys.size()); }
  bool operator==(const ActivationCache&) const = default;
};

struct ClassOutput {
  VectorF logits;
  VectorF probs;
};

enum class Pin : std::uint8_t { kDynamic, kSource, kTarget };

/// One token position in a pinned pass.
struct PinnedSlot {
  int token = 0;           // index into the caches (0 = CLS, 1..N = patches)
  std::vector<Pin> pins;   // one entry per block
  Pin origin = Pin::kTarget;  // cache a slot resumes from when it is dynamic at block 0
  bool readout = false;    // report the class distribution of this slot's final residual
};

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TokenPinPlan {
  std::vector<PinnedSlot> slots;
  BoolMatrix attn_mask;  // [slots, slots]; (r, c) true when slot r may attend to slot c

  void validate(const ViTConfig& config) const;

  /// N + 1 base slots following `pin` at every block, fully connected mask.
  static TokenPinPlan uniform(const ViTConfig& config, Pin pin);
};

enum class KvMode {
  kCached,     // pinned slots contribute cached keys/values and are not recomputed
  kRecompute,  // every slot is pushed through each block; outputs of pinned slots are discarded
};

/// Observer for attention weights: (block, slot, head, weights over allowed columns).
using AttentionObserver =
    std::function<void(int, int, int, std::span<const float>, std::span<const int>)>;

struct ExecOptions {
  int threads = 1;
  KvMode kv = KvMode::kCached;
  AttentionObserver observer;  // invoked only when threads == 1
};

/// Token embedding: row 0 = cls + pos[0], row i = patch_embed(patch i) + pos[i].
MatrixF embed(const ModelBundle& model, const Image& image);

ActivationCache forward_full(const ModelBundle& model, const Image& image,
                             const AttentionObserver& observer = {});

std::vector<ClassOutput> forward_pinned(const ModelBundle& model, const TokenPinPlan& plan,
                                        const ActivationCache& source,
                                        const ActivationCache& target,
                                        const ExecOptions& options = {});

// Building blocks shared with the attribution code.

struct Qkv {
  MatrixF q, k, v;
};

Qkv project_qkv(const ModelBundle& model, int block, const MatrixF& resid_rows);

/// Attention output projection, residual add and MLP for a set of rows.
MatrixF finish_block(const ModelBundle& model, int block, const MatrixF& resid_rows,
                     const MatrixF& attn_concat);

ClassOutput classify(const ModelBundle& model, const RowVectorF& final_resid);

/// Scaled dot product of one head's query against one key row.
float head_logit(const float* q, const float* k, int head_dim, float scale);

struct KvRef {
  const float* k;
  const float* v;
};

/// Multi-head attention for one query row over `cols`; writes the [d] concat
/// into `out`. `weights` receives heads * cols.size() softmax weights.
void attend_row(const float* q, std::span<const KvRef> cols, const ViTConfig& config, float* out,
                std::vector<float>& weights);

/// Default last intervened layer: ceil(2L/3).
int default_end_layer(int layers);

}  // namespace caap
