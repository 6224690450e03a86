#pragma once

// Faithfulness, localization and compactness metrics for patch attribution maps.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "caap/caap.hpp"
#include "caap/image.hpp"
#include "caap/vit.hpp"

namespace caap {

struct PerturbationCurve {
  std::vector<double> fractions;  // 0, 1/N, ..., 1
  std::vector<double> scores;     // class probability at each step

  /// Trapezoid rule over the fraction axis.
  double auc() const;
  std::string to_csv() const;  // header "fraction,score"
};

/// Patch indices by descending score; equal scores keep ascending index order.
std::vector<int> rank_patches(std::span<const float> scores);

/// p(y | image) for a fixed class.
using ClassScorer = std::function<double(const Image&)>;

ClassScorer class_probability(const ModelBundle& model, int class_id);

/// Step t replaces the top-t ranked patches of x with `reference`.
PerturbationCurve deletion_curve(const ClassScorer& score, const Image& x, std::span<const float> map,
                                 int grid, float reference = 0.5f, int threads = 1);

/// Starts from x box-blurred (two passes of `blur_kernel`) and restores the
/// top-t ranked patches from x at step t.
PerturbationCurve insertion_curve(const ClassScorer& score, const Image& x, std::span<const float> map,
                                  int grid, int blur_kernel, int threads = 1);

inline int default_blur_kernel(int patch_px) { return 2 * patch_px + 1; }

/// Min-max scaling to [0,1]; a constant map becomes all 0.5.
std::vector<double> minmax_normalize(std::span<const float> map);

enum class Polarity { kForeground, kBackground };

/// Average precision of the nearest-upsampled, min-max normalized map against
/// the pixel mask: sum over descending distinct thresholds of
/// (R_k - R_{k-1}) * P_k. Background polarity scores 1 - A against the
/// inverted mask.
double aupr(std::span<const float> map, int grid, const SegMask& mask, Polarity positive);

/// 1 when the first (row-major) maximal pixel of the upsampled map is foreground.
int pointing_game(std::span<const float> map, int grid, const SegMask& mask);

/// Normalized entropy of the score distribution. Negative maps are shifted by
/// their minimum first; a map without mass counts as uniform (1.0).
double entropy_norm(std::span<const double> scores);

/// Gini index with 1-based ascending ranks. Negative maps are shifted by
/// their minimum first; throws when the map carries no mass.
double gini(std::span<const double> scores);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const float> a, std::span<const float> b);

struct MetricReport {
  std::optional<double> del_auc, ins_auc, ins_minus_del, aupr1, aupr0, pg_hit, entropy, gini;

  /// Sets ins_minus_del when both AUCs are present.
  void finalize();
  /// "key=value" lines in fixed key order; absent metrics are omitted.
  std::string to_text() const;
  std::vector<std::pair<std::string, double>> entries() const;
};

}  // namespace caap
