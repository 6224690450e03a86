#pragma once

// Layer-wise attention grouping statistics for object masks, and the
// cumulative layer sweep.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "caap/caap.hpp"
#include "caap/image.hpp"
#include "caap/vit.hpp"

namespace caap {

/// Means of patch-query attention, averaged over heads and over object query
/// patches. Columns are patch tokens only; the CLS column is excluded.
struct LayerGroupStats {
  int layer = 0;  // 1-based
  std::optional<double> intra;      // j in the query's own object
  std::optional<double> inter;      // j in another object (two or more masks)
  std::optional<double> obj_to_bg;  // j outside every object
  std::optional<double> gap;        // intra - mean over j outside the query's object
};

struct AttnGroupStats {
  std::vector<LayerGroupStats> layers;

  /// Header "layer,intra,inter,obj_bg,gap"; absent values are empty fields.
  std::string to_csv() const;
};

/// Patch-level object sets by majority pixel rule. Throws on overlapping
/// masks, empty objects or masks that do not match the model resolution.
std::vector<std::vector<int>> object_patches(const ViTConfig& config, std::span<const SegMask> masks);

/// Attention weights of one query token over all N+1 tokens, [heads][N+1],
/// recomputed from the cached residual stream and keys.
std::vector<std::vector<float>> attention_row(const ModelBundle& model, const ActivationCache& cache, int block,
                                              int query_token);

/// Group sums of one attention row; with the group sizes they rebuild the row.
struct RowDecomposition {
  double cls = 0.0;
  double own = 0.0;
  double other = 0.0;
  double background = 0.0;
  int own_size = 0;
  int other_size = 0;
  int background_size = 0;

  double total() const { return cls + own + other + background; }
};

RowDecomposition decompose_row(std::span<const float> weights, const std::vector<std::vector<int>>& objects,
                               int own_object);

AttnGroupStats attention_group_stats(const ModelBundle& model, const ActivationCache& cache,
                                     std::span<const SegMask> masks);

struct SweepRow {
  int cutoff = 0;
  double del_auc = 0.0;
  double ins_auc = 0.0;
  double ins_minus_del = 0.0;
};

struct SweepOptions {
  BlankSpec blank;
  float reference = 0.5f;
  int blur_kernel = 0;  // 0 selects 2 * patch_px + 1
  int threads = 1;
};

/// Parallel-mode attribution with range (1, cutoff) per cutoff, scored by
/// deletion and insertion AUC on x.
std::vector<SweepRow> layer_sweep(const ModelBundle& model, const Image& x, const Image& x0, int class_id,
                                  const SelectionOp& select, std::span<const int> cutoffs,
                                  const SweepOptions& options = {});

std::string sweep_to_csv(std::span<const SweepRow> rows);

}  // namespace caap
