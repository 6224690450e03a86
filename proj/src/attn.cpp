#include "caap/attn.hpp"

#include <cstdio>

#include "caap/error.hpp"
#include "caap/metrics.hpp"

namespace caap {

namespace {

std::string field(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

}  // namespace

std::string AttnGroupStats::to_csv() const {
  std::string out = "layer,intra,inter,obj_bg,gap\n";
  for (const auto& s : layers) {
    out += std::to_string(s.layer) + "," + field(s.intra) + "," + field(s.inter) + "," + field(s.obj_to_bg) + "," +
           field(s.gap) + "\n";
  }
  return out;
}

std::vector<std::vector<int>> object_patches(const ViTConfig& config, std::span<const SegMask> masks) {
  if (masks.empty()) throw Error(ErrorKind::kConfig, "attention stats need at least one mask");
  const int side = config.image_side();
  std::vector<int> owner(static_cast<std::size_t>(config.num_patches()), -1);
  std::vector<std::vector<int>> objects;
  for (std::size_t k = 0; k < masks.size(); ++k) {
    const SegMask& m = masks[k];
    if (m.height != side || m.width != side) {
      throw Error(ErrorKind::kShape, "mask " + std::to_string(k) + " is " + std::to_string(m.height) + "x" +
                                         std::to_string(m.width) + ", model expects " + std::to_string(side) +
                                         "x" + std::to_string(side));
    }
    const std::vector<std::uint8_t> major = m.patch_majority(config.patch_px);
    std::vector<int> patches;
    for (int p = 0; p < config.num_patches(); ++p) {
      if (!major[static_cast<std::size_t>(p)]) continue;
      auto& o = owner[static_cast<std::size_t>(p)];
      if (o >= 0) {
        throw Error(ErrorKind::kConfig, "masks " + std::to_string(o) + " and " + std::to_string(k) +
                                            " overlap at patch " + std::to_string(p));
      }
      o = static_cast<int>(k);
      patches.push_back(p);
    }
    if (patches.empty()) throw Error(ErrorKind::kConfig, "mask " + std::to_string(k) + " covers no patch");
    objects.push_back(std::move(patches));
  }
  return objects;
}

std::vector<std::vector<float>> attention_row(const ModelBundle& model, const ActivationCache& cache, int block,
                                              int query_token) {
  const ViTConfig& c = model.config;
  if (block < 0 || block >= c.layers || query_token < 0 || query_token >= c.tokens()) {
    throw Error(ErrorKind::kRange, "attention row (block " + std::to_string(block) + ", token " +
                                       std::to_string(query_token) + ") out of range");
  }
  const MatrixF row = cache.resid[static_cast<std::size_t>(block)].row(query_token);
  const Qkv qkv = project_qkv(model, block, row);
  const MatrixF& keys = cache.keys[static_cast<std::size_t>(block)];
  const MatrixF& values = cache.values[static_cast<std::size_t>(block)];
  std::vector<KvRef> cols(static_cast<std::size_t>(c.tokens()));
  for (int j = 0; j < c.tokens(); ++j) cols[static_cast<std::size_t>(j)] = {&keys(j, 0), &values(j, 0)};
  std::vector<float> out(static_cast<std::size_t>(c.dim));
  std::vector<float> weights;
  attend_row(qkv.q.data(), cols, c, out.data(), weights);
  std::vector<std::vector<float>> per_head(static_cast<std::size_t>(c.heads));
  const auto n = static_cast<std::size_t>(c.tokens());
  for (std::size_t h = 0; h < per_head.size(); ++h) {
    per_head[h].assign(weights.begin() + static_cast<std::ptrdiff_t>(h * n),
                       weights.begin() + static_cast<std::ptrdiff_t>((h + 1) * n));
  }
  return per_head;
}

RowDecomposition decompose_row(std::span<const float> weights, const std::vector<std::vector<int>>& objects,
                               int own_object) {
  const int patches = static_cast<int>(weights.size()) - 1;
  std::vector<int> owner(static_cast<std::size_t>(patches), -1);
  for (std::size_t k = 0; k < objects.size(); ++k) {
    for (int p : objects[k]) owner[static_cast<std::size_t>(p)] = static_cast<int>(k);
  }
  RowDecomposition d;
  d.cls = weights[0];
  for (int p = 0; p < patches; ++p) {
    const double w = weights[static_cast<std::size_t>(p) + 1];
    const int o = owner[static_cast<std::size_t>(p)];
    if (o == own_object) {
      d.own += w;
      ++d.own_size;
    } else if (o >= 0) {
      d.other += w;
      ++d.other_size;
    } else {
      d.background += w;
      ++d.background_size;
    }
  }
  return d;
}

AttnGroupStats attention_group_stats(const ModelBundle& model, const ActivationCache& cache,
                                     std::span<const SegMask> masks) {
  const ViTConfig& c = model.config;
  if (cache.model_fingerprint != model.fingerprint()) {
    throw Error(ErrorKind::kConfig, "activation cache was produced by a different model");
  }
  const auto objects = object_patches(c, masks);
  AttnGroupStats stats;
  for (int b = 0; b < c.layers; ++b) {
    double intra = 0.0, inter = 0.0, bg = 0.0, outside = 0.0;
    long rows = 0;
    bool has_inter = false, has_bg = false, has_outside = false;
    for (std::size_t k = 0; k < objects.size(); ++k) {
      for (int p : objects[k]) {
        const auto heads = attention_row(model, cache, b, p + 1);
        for (const auto& w : heads) {
          const RowDecomposition d = decompose_row(w, objects, static_cast<int>(k));
          intra += d.own / d.own_size;
          if (d.other_size > 0) {
            inter += d.other / d.other_size;
            has_inter = true;
          }
          if (d.background_size > 0) {
            bg += d.background / d.background_size;
            has_bg = true;
          }
          const int out_size = d.other_size + d.background_size;
          if (out_size > 0) {
            outside += (d.other + d.background) / out_size;
            has_outside = true;
          }
          ++rows;
        }
      }
    }
    LayerGroupStats s;
    s.layer = b + 1;
    const double r = static_cast<double>(rows);
    s.intra = intra / r;
    if (has_inter && objects.size() >= 2) s.inter = inter / r;
    if (has_bg) s.obj_to_bg = bg / r;
    if (has_outside) s.gap = *s.intra - outside / r;
    stats.layers.push_back(s);
  }
  return stats;
}

std::vector<SweepRow> layer_sweep(const ModelBundle& model, const Image& x, const Image& x0, int class_id,
                                  const SelectionOp& select, std::span<const int> cutoffs,
                                  const SweepOptions& options) {
  const ViTConfig& c = model.config;
  if (cutoffs.empty()) throw Error(ErrorKind::kConfig, "layer sweep needs at least one cutoff");
  for (int cut : cutoffs) LayerRange{1, cut}.validate(c.layers);
  const ActivationCache source = forward_full(model, x);
  const ActivationCache blank = forward_full(model, x0);
  const ClassScorer score = class_probability(model, class_id);
  const int kernel = options.blur_kernel > 0 ? options.blur_kernel : default_blur_kernel(c.patch_px);
  std::vector<SweepRow> rows;
  for (int cut : cutoffs) {
    PatchRequest req;
    req.class_id = class_id;
    req.range = {1, cut};
    req.select = select;
    req.blank = options.blank;
    const AttributionMap map = caap_parallel(model, source, blank, req, options.threads);
    const std::span<const float> s(map.scores.data(), static_cast<std::size_t>(map.scores.size()));
    SweepRow row;
    row.cutoff = cut;
    row.del_auc = deletion_curve(score, x, s, c.grid, options.reference, options.threads).auc();
    row.ins_auc = insertion_curve(score, x, s, c.grid, kernel, options.threads).auc();
    row.ins_minus_del = row.ins_auc - row.del_auc;
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_to_csv(std::span<const SweepRow> rows) {
  std::string out = "cutoff,del_auc,ins_auc,ins_minus_del\n";
  for (const auto& r : rows) {
    out += std::to_string(r.cutoff) + "," + field(r.del_auc) + "," + field(r.ins_auc) + "," +
           field(r.ins_minus_del) + "\n";
  }
  return out;
}

}  // namespace caap
