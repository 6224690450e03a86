#include "caap/caap.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "caap/error.hpp"
#include "caap/parallel.hpp"

namespace caap {

void check_request(const ModelBundle& model, const PatchRequest& request) {
  const ViTConfig& c = model.config;
  if (request.class_id < 0 || request.class_id >= c.classes) {
    throw Error(ErrorKind::kConfig, "class " + std::to_string(request.class_id) + " outside 0.." +
                                        std::to_string(c.classes - 1));
  }
  request.range.validate(c.layers);
}

namespace {

void check_caches(const ModelBundle& model, const ActivationCache& source, const ActivationCache& blank) {
  const std::uint64_t fp = model.fingerprint();
  if (source.model_fingerprint != fp || blank.model_fingerprint != fp) {
    throw Error(ErrorKind::kConfig, "activation cache was produced by a different model");
  }
}

AttributionMap empty_map(const ModelBundle& model, const PatchRequest& request, AttributionMode mode) {
  AttributionMap map;
  map.grid = model.config.grid;
  map.scores = VectorF::Zero(model.config.num_patches());
  map.class_id = request.class_id;
  map.mode = mode;
  map.blank = request.blank;
  map.select = request.select;
  map.range = request.range;
  map.model_fingerprint = model.fingerprint();
  return map;
}

// 0-based first block in which the CLS / the selected tokens are advanced.
int cls_live_block(const LayerRange& r) { return r.start; }
int selected_live_block(const LayerRange& r) { return r.end; }

std::vector<Pin> cls_pins(int layers, const LayerRange& r) {
  std::vector<Pin> pins(static_cast<std::size_t>(layers), Pin::kTarget);
  for (int b = cls_live_block(r); b < layers; ++b) pins[static_cast<std::size_t>(b)] = Pin::kDynamic;
  return pins;
}

std::vector<Pin> selected_pins(int layers, const LayerRange& r) {
  std::vector<Pin> pins(static_cast<std::size_t>(layers), Pin::kSource);
  for (int b = selected_live_block(r); b < layers; ++b) pins[static_cast<std::size_t>(b)] = Pin::kDynamic;
  return pins;
}

}  // namespace

TokenPinPlan naive_plan(const ViTConfig& config, const std::vector<int>& selection, const LayerRange& range) {
  TokenPinPlan plan = TokenPinPlan::uniform(config, Pin::kTarget);
  plan.slots[0].pins = cls_pins(config.layers, range);
  plan.slots[0].readout = true;
  for (int j : selection) plan.slots[static_cast<std::size_t>(j) + 1].pins = selected_pins(config.layers, range);
  return plan;
}

AttributionMap caap_naive(const ModelBundle& model, const ActivationCache& source, const ActivationCache& blank,
                          const PatchRequest& request, int threads) {
  check_request(model, request);
  check_caches(model, source, blank);
  AttributionMap map = empty_map(model, request, AttributionMode::kNaive);
  const ViTConfig& c = model.config;
  parallel_for(c.num_patches(), threads, [&](int i) {
    const TokenPinPlan plan = naive_plan(c, build_selection(request.select, i, c.grid), request.range);
    ExecOptions exec;
    exec.kv = KvMode::kRecompute;
    const auto out = forward_pinned(model, plan, source, blank, exec);
    map.scores(i) = out.front().probs(request.class_id);
  });
  return map;
}

AttributionMap caap_parallel(const ModelBundle& model, const ActivationCache& source,
                             const ActivationCache& blank, const PatchRequest& request, int threads,
                             std::span<const int> patch_order) {
  check_request(model, request);
  check_caches(model, source, blank);
  const ViTConfig& c = model.config;
  const int n = c.num_patches();
  std::vector<int> order(static_cast<std::size_t>(n));
  if (patch_order.empty()) {
    std::iota(order.begin(), order.end(), 0);
  } else {
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    if (static_cast<int>(patch_order.size()) != n) throw Error(ErrorKind::kConfig, "patch order is not a permutation");
    for (std::size_t k = 0; k < patch_order.size(); ++k) {
      const int p = patch_order[k];
      if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)]) {
        throw Error(ErrorKind::kConfig, "patch order is not a permutation");
      }
      seen[static_cast<std::size_t>(p)] = true;
      order[k] = p;
    }
  }

  // Base slots: the blank context, never advanced. Then one group per patch:
  // a CLS copy plus live copies of the selected tokens.
  TokenPinPlan plan = TokenPinPlan::uniform(c, Pin::kTarget);
  plan.slots[0].readout = false;
  struct Group {
    int first_slot;
    int size;
    std::vector<int> selection;
  };
  std::vector<Group> groups;
  groups.reserve(static_cast<std::size_t>(n));
  for (int p : order) {
    Group g{static_cast<int>(plan.slots.size()), 0, build_selection(request.select, p, c.grid)};
    PinnedSlot cls;
    cls.token = 0;
    cls.pins = cls_pins(c.layers, request.range);
    cls.readout = true;
    plan.slots.push_back(cls);
    for (int j : g.selection) {
      PinnedSlot sel;
      sel.token = j + 1;
      sel.pins = selected_pins(c.layers, request.range);
      plan.slots.push_back(sel);
    }
    g.size = static_cast<int>(plan.slots.size()) - g.first_slot;
    groups.push_back(std::move(g));
  }
  const auto total = static_cast<Eigen::Index>(plan.slots.size());
  plan.attn_mask = BoolMatrix::Constant(total, total, false);
  plan.attn_mask.topLeftCorner(c.tokens(), c.tokens()).setConstant(true);
  for (const auto& g : groups) {
    std::vector<bool> in_selection(static_cast<std::size_t>(n), false);
    for (int j : g.selection) in_selection[static_cast<std::size_t>(j)] = true;
    for (int r = g.first_slot; r < g.first_slot + g.size; ++r) {
      for (int j = 0; j < n; ++j) {
        if (!in_selection[static_cast<std::size_t>(j)]) plan.attn_mask(r, j + 1) = true;
      }
      plan.attn_mask.block(r, g.first_slot, 1, g.size).setConstant(true);
    }
  }

  ExecOptions exec;
  exec.threads = threads;
  const auto outputs = forward_pinned(model, plan, source, blank, exec);
  AttributionMap map = empty_map(model, request, AttributionMode::kParallel);
  for (std::size_t k = 0; k < order.size(); ++k) map.scores(order[k]) = outputs[k].probs(request.class_id);
  return map;
}

BlankStats precompute_blank_stats(const ModelBundle& model, const ActivationCache& blank, const LayerRange& range) {
  const ViTConfig& c = model.config;
  range.validate(c.layers);
  if (blank.model_fingerprint != model.fingerprint()) {
    throw Error(ErrorKind::kConfig, "blank cache was produced by a different model");
  }
  const int dh = c.head_dim();
  const int n = c.num_patches();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  BlankStats stats;
  stats.model_fingerprint = blank.model_fingerprint;
  stats.first_block = cls_live_block(range);
  stats.blocks.resize(static_cast<std::size_t>(c.layers));
  for (int b = stats.first_block; b < c.layers; ++b) {
    const MatrixF cls_resid = blank.resid[static_cast<std::size_t>(b)].topRows(1);
    const Qkv cls = project_qkv(model, b, cls_resid);
    const MatrixF& keys = blank.keys[static_cast<std::size_t>(b)];
    const MatrixF& values = blank.values[static_cast<std::size_t>(b)];
    auto& heads = stats.blocks[static_cast<std::size_t>(b)];
    heads.resize(static_cast<std::size_t>(c.heads));
    for (int h = 0; h < c.heads; ++h) {
      auto& hs = heads[static_cast<std::size_t>(h)];
      const int off = h * dh;
      std::vector<float> logits(static_cast<std::size_t>(n));
      float shift = -INFINITY;
      for (int j = 0; j < n; ++j) {
        logits[static_cast<std::size_t>(j)] = head_logit(cls.q.row(0).data() + off, keys.row(j + 1).data() + off, dh, scale);
        shift = std::max(shift, logits[static_cast<std::size_t>(j)]);
      }
      hs.shift = shift;
      hs.e0.resize(static_cast<std::size_t>(n));
      hs.z_total = 0.0f;
      for (int j = 0; j < n; ++j) {
        hs.e0[static_cast<std::size_t>(j)] = std::exp(logits[static_cast<std::size_t>(j)] - shift);
        hs.z_total += hs.e0[static_cast<std::size_t>(j)];
      }
      hs.v_sum = RowVectorF::Zero(dh);
      for (int j = 0; j < n; ++j) hs.v_sum += values.row(j + 1).segment(off, dh);
      hs.v_mean = hs.v_sum / static_cast<float>(n);
    }
  }
  return stats;
}

namespace {

// Approximated CLS attention: exact terms for itself and the selected tokens,
// the blank remainder represented by Z0(S^c) times the mean blank value over S^c.
void approx_cls_attention(const float* q, const KvRef& self, std::span<const KvRef> selected,
                          std::span<const int> selection, const std::vector<BlankStats::Head>& heads,
                          const MatrixF& blank_values, int num_patches, const ViTConfig& c, float* out) {
  const int dh = c.head_dim();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const bool covers_all = static_cast<int>(selection.size()) == num_patches;
  std::vector<float> logits(selected.size());
  for (int h = 0; h < c.heads; ++h) {
    const int off = h * dh;
    const auto& hs = heads[static_cast<std::size_t>(h)];
    const float self_logit = head_logit(q + off, self.k + off, dh, scale);
    float m = std::max(hs.shift, self_logit);
    for (std::size_t j = 0; j < selected.size(); ++j) {
      logits[j] = head_logit(q + off, selected[j].k + off, dh, scale);
      m = std::max(m, logits[j]);
    }
    float z_rest = 0.0f;
    RowVectorF v_rest = RowVectorF::Zero(dh);
    if (!covers_all) {
      float sub = 0.0f;
      v_rest = hs.v_sum;
      for (int j : selection) {
        sub += hs.e0[static_cast<std::size_t>(j)];
        v_rest -= blank_values.row(j + 1).segment(off, dh);
      }
      z_rest = std::max(0.0f, hs.z_total - sub) * std::exp(hs.shift - m);
      v_rest /= static_cast<float>(num_patches - static_cast<int>(selection.size()));
    }
    float* o = out + off;
    const float w_self = std::exp(self_logit - m);
    float z = w_self;
    for (int t = 0; t < dh; ++t) o[t] = w_self * self.v[off + t];
    for (std::size_t j = 0; j < selected.size(); ++j) {
      const float w = std::exp(logits[j] - m);
      z += w;
      for (int t = 0; t < dh; ++t) o[t] += w * selected[j].v[off + t];
    }
    z += z_rest;
    for (int t = 0; t < dh; ++t) o[t] = (o[t] + z_rest * v_rest(t)) / z;
  }
}

}  // namespace

AttributionMap caap_approx(const ModelBundle& model, const ActivationCache& source, const ActivationCache& blank,
                           const BlankStats& stats, const PatchRequest& request, int threads) {
  check_request(model, request);
  check_caches(model, source, blank);
  const ViTConfig& c = model.config;
  if (stats.model_fingerprint != model.fingerprint()) {
    throw Error(ErrorKind::kConfig, "blank statistics were computed for a different model");
  }
  const int cls_block = cls_live_block(request.range);
  const int sel_block = selected_live_block(request.range);
  if (static_cast<int>(stats.blocks.size()) != c.layers || stats.first_block > cls_block) {
    throw Error(ErrorKind::kConfig, "blank statistics do not cover layer range " +
                                        std::to_string(request.range.start) + ".." +
                                        std::to_string(request.range.end));
  }
  const int n = c.num_patches();
  AttributionMap map = empty_map(model, request, AttributionMode::kApprox);

  parallel_for(n, threads, [&](int patch) {
    const std::vector<int> selection = build_selection(request.select, patch, c.grid);
    const int ns = static_cast<int>(selection.size());
    std::vector<bool> in_selection(static_cast<std::size_t>(n), false);
    for (int j : selection) in_selection[static_cast<std::size_t>(j)] = true;

    // Row 0: CLS; rows 1..ns: selected tokens once they are live.
    MatrixF state(1 + ns, c.dim);
    state.row(0) = blank.resid[static_cast<std::size_t>(cls_block)].row(0);
    std::vector<KvRef> sel_kv(static_cast<std::size_t>(ns));
    std::vector<KvRef> cols;
    std::vector<float> weights;
    for (int b = cls_block; b < c.layers; ++b) {
      const bool selected_live = b >= sel_block;
      if (b == sel_block) {
        for (int k = 0; k < ns; ++k) {
          state.row(1 + k) = source.resid[static_cast<std::size_t>(b)].row(selection[static_cast<std::size_t>(k)] + 1);
        }
      }
      const int rows = selected_live ? 1 + ns : 1;
      const MatrixF x = state.topRows(rows);
      const Qkv qkv = project_qkv(model, b, x);
      for (int k = 0; k < ns; ++k) {
        const int t = selection[static_cast<std::size_t>(k)] + 1;
        sel_kv[static_cast<std::size_t>(k)] =
            selected_live ? KvRef{qkv.k.row(1 + k).data(), qkv.v.row(1 + k).data()}
                          : KvRef{source.keys[static_cast<std::size_t>(b)].row(t).data(),
                                  source.values[static_cast<std::size_t>(b)].row(t).data()};
      }
      MatrixF attn(rows, c.dim);
      const KvRef self{qkv.k.row(0).data(), qkv.v.row(0).data()};
      approx_cls_attention(qkv.q.row(0).data(), self, sel_kv, selection, stats.blocks[static_cast<std::size_t>(b)],
                           blank.values[static_cast<std::size_t>(b)], n, c, attn.row(0).data());
      if (selected_live) {
        // Selected tokens attend exactly: CLS, selected (live) and blank tokens, in token order.
        cols.clear();
        cols.push_back(self);
        int k = 0;
        for (int j = 0; j < n; ++j) {
          if (in_selection[static_cast<std::size_t>(j)]) {
            cols.push_back(sel_kv[static_cast<std::size_t>(k++)]);
          } else {
            cols.push_back(KvRef{blank.keys[static_cast<std::size_t>(b)].row(j + 1).data(),
                                 blank.values[static_cast<std::size_t>(b)].row(j + 1).data()});
          }
        }
        for (int r = 1; r < rows; ++r) attend_row(qkv.q.row(r).data(), cols, c, attn.row(r).data(), weights);
      }
      state.topRows(rows) = finish_block(model, b, x, attn);
    }
    map.scores(patch) = classify(model, state.row(0)).probs(request.class_id);
  });
  return map;
}

namespace {

void check_pair(const ModelBundle& model, const Image& x, const Image& x0) {
  const int side = model.config.image_side();
  if (!x.same_shape(x0) || x.height != side || x.width != side || x.channels != model.config.channels) {
    throw Error(ErrorKind::kShape, "source and blank images must both be " + std::to_string(side) + "x" +
                                       std::to_string(side) + "x" + std::to_string(model.config.channels));
  }
}

}  // namespace

AttributionMap input_insertion_attr(const ModelBundle& model, const Image& x, const Image& x0,
                                    const PatchRequest& request, int threads) {
  check_request(model, request);
  check_pair(model, x, x0);
  const ViTConfig& c = model.config;
  AttributionMap map = empty_map(model, request, AttributionMode::kInputInsert);
  parallel_for(c.num_patches(), threads, [&](int i) {
    Image composite = x0;
    for (int j : build_selection(request.select, i, c.grid)) copy_patch(x, composite, j, c.patch_px);
    map.scores(i) = forward_full(model, composite).probs(request.class_id);
  });
  return map;
}

AttributionMap input_deletion_attr(const ModelBundle& model, const Image& x, const Image& x0,
                                   const PatchRequest& request, int threads) {
  check_request(model, request);
  check_pair(model, x, x0);
  const ViTConfig& c = model.config;
  const float full = forward_full(model, x).probs(request.class_id);
  AttributionMap map = empty_map(model, request, AttributionMode::kInputDelete);
  parallel_for(c.num_patches(), threads, [&](int i) {
    Image removed = x;
    for (int j : build_selection(request.select, i, c.grid)) copy_patch(x0, removed, j, c.patch_px);
    map.scores(i) = full - forward_full(model, removed).probs(request.class_id);
  });
  return map;
}

AttributionMap attribute(const ModelBundle& model, const Image& x, const Image& x0, AttributionMode mode,
                         const PatchRequest& request, int threads) {
  switch (mode) {
    case AttributionMode::kInputInsert: return input_insertion_attr(model, x, x0, request, threads);
    case AttributionMode::kInputDelete: return input_deletion_attr(model, x, x0, request, threads);
    default: break;
  }
  check_pair(model, x, x0);
  const ActivationCache source = forward_full(model, x);
  const ActivationCache blank = forward_full(model, x0);
  switch (mode) {
    case AttributionMode::kNaive: return caap_naive(model, source, blank, request, threads);
    case AttributionMode::kParallel: return caap_parallel(model, source, blank, request, threads);
    case AttributionMode::kApprox:
      return caap_approx(model, source, blank, precompute_blank_stats(model, blank, request.range), request,
                         threads);
    default: break;
  }
  throw Error(ErrorKind::kConfig, "unsupported attribution mode");
}

}  // namespace caap
