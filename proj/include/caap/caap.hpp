#pragma once

// Patch attribution by activation patching: every patch's contextualized
// tokens from the source image are inserted into the activations of a blank
// target image and the class probability of the patched pass is the score.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "caap/image.hpp"
#include "caap/vit.hpp"

namespace caap {

struct SelectionOp {
  enum class Kind { kNoPad, kBox, kManhattan };
  Kind kind = Kind::kBox;
  int radius = 1;

  static SelectionOp no_pad() { return {Kind::kNoPad, 0}; }
  static SelectionOp box(int r) { return {Kind::kBox, r}; }
  static SelectionOp manhattan(int r) { return {Kind::kManhattan, r}; }
  /// Accepts "nopad", "box<r>", "manhattan<r>".
  static SelectionOp parse(const std::string& text);
  std::string name() const;
  bool operator==(const SelectionOp&) const = default;
};

/// Patch indices (ascending, CLS offset not applied) intervened for `center`.
std::vector<int> build_selection(const SelectionOp& op, int center, int grid);

struct BlankSpec {
  enum class Kind { kBlack, kWhite, kMean, kNoisy, kBlurNoisy };
  Kind kind = Kind::kWhite;
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};  // per-channel fill for kMean
  std::uint64_t seed = 0;
  float sigma = 0.15f;
  int kernel = 5;  // odd box-blur width for kBlurNoisy

  static BlankSpec of(Kind kind) {
    BlankSpec s;
    s.kind = kind;
    return s;
  }
  /// Accepts "black", "white", "mean", "noisy", "blurnoisy".
  static Kind parse_kind(const std::string& text);
  std::string name() const;
  bool operator==(const BlankSpec&) const = default;
};

Image make_blank(const BlankSpec& spec, int width, int height, int channels);

/// Intervened layers, 1-based and inclusive.
struct LayerRange {
  int start = 1;
  int end = 1;

  /// (1, ceil(2L/3)).
  static LayerRange automatic(int layers) { return {1, default_end_layer(layers)}; }
  /// Accepts "auto" or "a..b".
  static LayerRange parse(const std::string& text, int layers);
  void validate(int layers) const;
  bool operator==(const LayerRange&) const = default;
};

enum class AttributionMode { kNaive, kParallel, kApprox, kInputInsert, kInputDelete };

std::string to_string(AttributionMode mode);
AttributionMode parse_mode(const std::string& text);

struct AttributionMap {
  int grid = 0;
  VectorF scores;  // row-major patch order
  int class_id = 0;
  AttributionMode mode = AttributionMode::kParallel;
  BlankSpec blank;
  SelectionOp select;
  LayerRange range;
  std::uint64_t model_fingerprint = 0;

  bool operator==(const AttributionMap& o) const {
    return grid == o.grid && scores == o.scores && class_id == o.class_id && mode == o.mode &&
           blank == o.blank && select == o.select && range == o.range &&
           model_fingerprint == o.model_fingerprint;
  }
};

/// Blank-context attention statistics of the CLS query, per block and head.
/// Exponents are stored relative to `shift` (the largest blank logit of the
/// head) so that e0[j] = exp(logit_j - shift) and z_total = sum_j e0[j].
/// For a selection S the blank remainder uses Z0(S^c) = z_total - sum_{j in S} e0[j]
/// and the prototype value (v_sum - sum_{j in S} v0[j]) / |S^c|.
struct BlankStats {
  struct Head {
    float shift = 0.0f;
    std::vector<float> e0;  // one per blank patch token
    float z_total = 0.0f;
    RowVectorF v_sum;       // sum of blank patch values, [head_dim]
    RowVectorF v_mean;      // v_sum / N
  };
  std::uint64_t model_fingerprint = 0;
  int first_block = 0;                   // 0-based; blocks before it carry no stats
  std::vector<std::vector<Head>> blocks;  // [layers][heads]
};

/// Options shared by the attribution modes.
struct PatchRequest {
  int class_id = 0;
  LayerRange range;
  SelectionOp select;
  BlankSpec blank;  // recorded in the output map
};

void check_request(const ModelBundle& model, const PatchRequest& request);

AttributionMap caap_naive(const ModelBundle& model, const ActivationCache& source,
                          const ActivationCache& blank, const PatchRequest& request, int threads = 1);

/// `patch_order` permutes the order in which per-patch CLS tokens are laid
/// out; the map is always returned in patch-index order.
AttributionMap caap_parallel(const ModelBundle& model, const ActivationCache& source,
                             const ActivationCache& blank, const PatchRequest& request, int threads = 1,
                             std::span<const int> patch_order = {});

BlankStats precompute_blank_stats(const ModelBundle& model, const ActivationCache& blank,
                                  const LayerRange& range);

AttributionMap caap_approx(const ModelBundle& model, const ActivationCache& source,
                           const ActivationCache& blank, const BlankStats& stats,
                           const PatchRequest& request, int threads = 1);

AttributionMap input_insertion_attr(const ModelBundle& model, const Image& x, const Image& x0,
                                    const PatchRequest& request, int threads = 1);
AttributionMap input_deletion_attr(const ModelBundle& model, const Image& x, const Image& x0,
                                   const PatchRequest& request, int threads = 1);

/// Image-level entry point: builds caches (and stats for approx) then runs `mode`.
AttributionMap attribute(const ModelBundle& model, const Image& x, const Image& x0, AttributionMode mode,
                         const PatchRequest& request, int threads = 1);

/// Token-pin plan used by the naive mode for one patch (exposed for tests).
TokenPinPlan naive_plan(const ViTConfig& config, const std::vector<int>& selection, const LayerRange& range);

}  // namespace caap
