#include <cmath>
#include <string>

#include "caap/error.hpp"
#include "caap/parallel.hpp"
#include "caap/vit.hpp"

namespace caap {

MatrixF embed(const ModelBundle& model, const Image& image) {
  const ViTConfig& c = model.config;
  const int side = c.image_side();
  if (image.height != side || image.width != side || image.channels != c.channels) {
    throw Error(ErrorKind::kShape, "image is " + std::to_string(image.height) + "x" +
                                       std::to_string(image.width) + "x" + std::to_string(image.channels) +
                                       ", model expects " + std::to_string(side) + "x" +
                                       std::to_string(side) + "x" + std::to_string(c.channels));
  }
  const int p = c.patch_px;
  MatrixF patches(c.num_patches(), c.patch_features());
  for (int i = 0; i < c.num_patches(); ++i) {
    const int y0 = (i / c.grid) * p;
    const int x0 = (i % c.grid) * p;
    int f = 0;
    for (int y = 0; y < p; ++y) {
      for (int x = 0; x < p; ++x) {
        for (int ch = 0; ch < c.channels; ++ch) patches(i, f++) = image.at(y0 + y, x0 + x, ch);
      }
    }
  }
  const MatrixF projected = linear(patches, model.patch_w, model.patch_b);
  MatrixF tokens(c.tokens(), c.dim);
  tokens.row(0) = model.cls_embed + model.pos_embed.row(0);
  for (int i = 0; i < c.num_patches(); ++i) tokens.row(i + 1) = projected.row(i) + model.pos_embed.row(i + 1);
  return tokens;
}

Qkv project_qkv(const ModelBundle& model, int block, const MatrixF& resid_rows) {
  const auto& b = model.blocks[static_cast<std::size_t>(block)];
  const MatrixF x = layernorm(resid_rows, b.ln1_gamma, b.ln1_beta, model.config.ln_eps);
  return Qkv{linear(x, b.wq, b.bq), linear(x, b.wk, b.bk), linear(x, b.wv, b.bv)};
}

MatrixF finish_block(const ModelBundle& model, int block, const MatrixF& resid_rows,
                     const MatrixF& attn_concat) {
  const auto& b = model.blocks[static_cast<std::size_t>(block)];
  const float eps = model.config.ln_eps;
  MatrixF h = resid_rows + linear(attn_concat, b.wo, b.bo);
  const MatrixF mid = gelu(linear(layernorm(h, b.ln2_gamma, b.ln2_beta, eps), b.mlp_in, b.mlp_in_bias));
  h += linear(mid, b.mlp_out, b.mlp_out_bias);
  return h;
}

ClassOutput classify(const ModelBundle& model, const RowVectorF& final_resid) {
  const MatrixF x = layernorm(final_resid, model.lnf_gamma, model.lnf_beta, model.config.ln_eps);
  const MatrixF logits = linear(x, model.head_w, model.head_b);
  const MatrixF probs = softmax_rows(logits);
  return ClassOutput{logits.row(0).transpose(), probs.row(0).transpose()};
}

float head_logit(const float* q, const float* k, int head_dim, float scale) {
  float s = 0.0f;
  for (int t = 0; t < head_dim; ++t) s += q[t] * k[t];
  return s * scale;
}

void attend_row(const float* q, std::span<const KvRef> cols, const ViTConfig& config, float* out,
                std::vector<float>& weights) {
  const int dh = config.head_dim();
  const int n = static_cast<int>(cols.size());
  if (n == 0) throw Error(ErrorKind::kConfig, "attention row has no allowed columns");
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  weights.resize(static_cast<std::size_t>(config.heads) * n);
  for (int h = 0; h < config.heads; ++h) {
    const int off = h * dh;
    float* w = weights.data() + static_cast<std::size_t>(h) * n;
    float m = -INFINITY;
    for (int j = 0; j < n; ++j) {
      w[j] = head_logit(q + off, cols[static_cast<std::size_t>(j)].k + off, dh, scale);
      m = std::max(m, w[j]);
    }
    float z = 0.0f;
    for (int j = 0; j < n; ++j) {
      w[j] = std::exp(w[j] - m);
      z += w[j];
    }
    for (int j = 0; j < n; ++j) w[j] /= z;
    float* o = out + off;
    for (int t = 0; t < dh; ++t) o[t] = 0.0f;
    for (int j = 0; j < n; ++j) {
      const float* v = cols[static_cast<std::size_t>(j)].v + off;
      for (int t = 0; t < dh; ++t) o[t] += w[j] * v[t];
    }
  }
}

ActivationCache forward_full(const ModelBundle& model, const Image& image,
                             const AttentionObserver& observer) {
  const ViTConfig& c = model.config;
  const int n = c.tokens();
  ActivationCache cache;
  cache.model_fingerprint = model.fingerprint();
  cache.resid.reserve(static_cast<std::size_t>(c.layers) + 1);
  cache.resid.push_back(embed(model, image));
  std::vector<KvRef> cols(static_cast<std::size_t>(n));
  std::vector<int> col_ids(static_cast<std::size_t>(n));
  std::vector<float> weights;
  for (int b = 0; b < c.layers; ++b) {
    const MatrixF& x = cache.resid.back();
    Qkv qkv = project_qkv(model, b, x);
    for (int j = 0; j < n; ++j) {
      cols[static_cast<std::size_t>(j)] = KvRef{qkv.k.row(j).data(), qkv.v.row(j).data()};
      col_ids[static_cast<std::size_t>(j)] = j;
    }
    MatrixF attn(n, c.dim);
    for (int i = 0; i < n; ++i) {
      attend_row(qkv.q.row(i).data(), cols, c, attn.row(i).data(), weights);
      if (observer) {
        for (int h = 0; h < c.heads; ++h) {
          observer(b, i, h, std::span<const float>(weights.data() + static_cast<std::size_t>(h) * n, n),
                   col_ids);
        }
      }
    }
    MatrixF next = finish_block(model, b, x, attn);
    cache.keys.push_back(std::move(qkv.k));
    cache.values.push_back(std::move(qkv.v));
    cache.resid.push_back(std::move(next));
  }
  ClassOutput out = classify(model, cache.resid.back().row(0));
  cache.logits = std::move(out.logits);
  cache.probs = std::move(out.probs);
  return cache;
}

TokenPinPlan TokenPinPlan::uniform(const ViTConfig& config, Pin pin) {
  TokenPinPlan plan;
  plan.slots.resize(static_cast<std::size_t>(config.tokens()));
  for (int t = 0; t < config.tokens(); ++t) {
    auto& s = plan.slots[static_cast<std::size_t>(t)];
    s.token = t;
    s.pins.assign(static_cast<std::size_t>(config.layers), pin);
    s.readout = (t == 0);
  }
  plan.attn_mask = BoolMatrix::Constant(config.tokens(), config.tokens(), true);
  return plan;
}

void TokenPinPlan::validate(const ViTConfig& config) const {
  const auto n = static_cast<Eigen::Index>(slots.size());
  if (attn_mask.rows() != n || attn_mask.cols() != n) {
    throw Error(ErrorKind::kConfig, "pin plan: mask is " + std::to_string(attn_mask.rows()) + "x" +
                                        std::to_string(attn_mask.cols()) + " for " + std::to_string(n) +
                                        " slots");
  }
  for (Eigen::Index s = 0; s < n; ++s) {
    const auto& slot = slots[static_cast<std::size_t>(s)];
    if (slot.token < 0 || slot.token >= config.tokens()) {
      throw Error(ErrorKind::kRange, "pin plan: slot " + std::to_string(s) + " references token " +
                                         std::to_string(slot.token));
    }
    if (static_cast<int>(slot.pins.size()) != config.layers) {
      throw Error(ErrorKind::kConfig, "pin plan: slot " + std::to_string(s) + " has " +
                                          std::to_string(slot.pins.size()) + " block pins, expected " +
                                          std::to_string(config.layers));
    }
    if (slot.origin == Pin::kDynamic) {
      throw Error(ErrorKind::kConfig, "pin plan: slot origin must be a cache");
    }
  }
}

namespace {

const ActivationCache& cache_for(Pin pin, const ActivationCache& source, const ActivationCache& target) {
  return pin == Pin::kSource ? source : target;
}

}  // namespace

std::vector<ClassOutput> forward_pinned(const ModelBundle& model, const TokenPinPlan& plan,
                                        const ActivationCache& source, const ActivationCache& target,
                                        const ExecOptions& options) {
  const ViTConfig& c = model.config;
  plan.validate(c);
  if (source.layers() != c.layers || target.layers() != c.layers ||
      source.resid.front().rows() != c.tokens() || target.resid.front().rows() != c.tokens()) {
    throw Error(ErrorKind::kShape, "pin plan: caches do not match the model configuration");
  }
  const int num_slots = static_cast<int>(plan.slots.size());
  const bool recompute = options.kv == KvMode::kRecompute;

  std::vector<std::vector<int>> allowed(static_cast<std::size_t>(num_slots));
  for (int r = 0; r < num_slots; ++r) {
    for (int col = 0; col < num_slots; ++col) {
      if (plan.attn_mask(r, col)) allowed[static_cast<std::size_t>(r)].push_back(col);
    }
  }

  // Residual state of slots that are currently live.
  MatrixF state = MatrixF::Zero(num_slots, c.dim);
  std::vector<bool> live(static_cast<std::size_t>(num_slots), false);

  for (int b = 0; b < c.layers; ++b) {
    std::vector<int> computed;  // slots advanced through this block
    for (int s = 0; s < num_slots; ++s) {
      const auto& slot = plan.slots[static_cast<std::size_t>(s)];
      const Pin pin = slot.pins[static_cast<std::size_t>(b)];
      if (pin == Pin::kDynamic) {
        if (!live[static_cast<std::size_t>(s)]) {
          const Pin from = b == 0 ? slot.origin : slot.pins[static_cast<std::size_t>(b - 1)];
          state.row(s) = cache_for(from, source, target).resid[static_cast<std::size_t>(b)].row(slot.token);
          live[static_cast<std::size_t>(s)] = true;
        }
        computed.push_back(s);
      } else {
        live[static_cast<std::size_t>(s)] = false;
        if (recompute) computed.push_back(s);
      }
    }
    if (computed.empty()) continue;
    // Skip blocks with no live slot at all; nothing downstream can observe them.
    bool any_live = false;
    for (int s : computed) any_live = any_live || live[static_cast<std::size_t>(s)];
    if (!any_live) continue;

    const int rows = static_cast<int>(computed.size());
    MatrixF x(rows, c.dim);
    for (int r = 0; r < rows; ++r) {
      const int s = computed[static_cast<std::size_t>(r)];
      const auto& slot = plan.slots[static_cast<std::size_t>(s)];
      if (live[static_cast<std::size_t>(s)]) {
        x.row(r) = state.row(s);
      } else {
        const Pin pin = slot.pins[static_cast<std::size_t>(b)];
        x.row(r) = cache_for(pin, source, target).resid[static_cast<std::size_t>(b)].row(slot.token);
      }
    }

    Qkv qkv{MatrixF(rows, c.dim), MatrixF(rows, c.dim), MatrixF(rows, c.dim)};
    parallel_chunks(rows, options.threads, [&](int begin, int end) {
      Qkv part = project_qkv(model, b, x.middleRows(begin, end - begin));
      qkv.q.middleRows(begin, end - begin) = part.q;
      qkv.k.middleRows(begin, end - begin) = part.k;
      qkv.v.middleRows(begin, end - begin) = part.v;
    });

    std::vector<int> row_of(static_cast<std::size_t>(num_slots), -1);
    for (int r = 0; r < rows; ++r) row_of[static_cast<std::size_t>(computed[static_cast<std::size_t>(r)])] = r;
    std::vector<KvRef> kv(static_cast<std::size_t>(num_slots));
    for (int s = 0; s < num_slots; ++s) {
      const int r = row_of[static_cast<std::size_t>(s)];
      if (r >= 0) {
        kv[static_cast<std::size_t>(s)] = KvRef{qkv.k.row(r).data(), qkv.v.row(r).data()};
      } else {
        const auto& slot = plan.slots[static_cast<std::size_t>(s)];
        const auto& cache = cache_for(slot.pins[static_cast<std::size_t>(b)], source, target);
        kv[static_cast<std::size_t>(s)] =
            KvRef{cache.keys[static_cast<std::size_t>(b)].row(slot.token).data(),
                  cache.values[static_cast<std::size_t>(b)].row(slot.token).data()};
      }
    }

    MatrixF attn(rows, c.dim);
    const bool observe = options.observer && options.threads <= 1;
    parallel_chunks(rows, options.threads, [&](int begin, int end) {
      std::vector<KvRef> cols;
      std::vector<float> weights;
      for (int r = begin; r < end; ++r) {
        const int s = computed[static_cast<std::size_t>(r)];
        const auto& ids = allowed[static_cast<std::size_t>(s)];
        cols.clear();
        for (int col : ids) cols.push_back(kv[static_cast<std::size_t>(col)]);
        attend_row(qkv.q.row(r).data(), cols, c, attn.row(r).data(), weights);
        if (observe && live[static_cast<std::size_t>(s)]) {
          const auto n = ids.size();
          for (int h = 0; h < c.heads; ++h) {
            options.observer(b, s, h, std::span<const float>(weights.data() + h * n, n), ids);
          }
        }
      }
    });

    MatrixF next(rows, c.dim);
    parallel_chunks(rows, options.threads, [&](int begin, int end) {
      next.middleRows(begin, end - begin) =
          finish_block(model, b, x.middleRows(begin, end - begin), attn.middleRows(begin, end - begin));
    });
    for (int r = 0; r < rows; ++r) {
      const int s = computed[static_cast<std::size_t>(r)];
      if (live[static_cast<std::size_t>(s)]) state.row(s) = next.row(r);
    }
  }

  std::vector<ClassOutput> outputs;
  for (int s = 0; s < num_slots; ++s) {
    const auto& slot = plan.slots[static_cast<std::size_t>(s)];
    if (!slot.readout) continue;
    if (live[static_cast<std::size_t>(s)]) {
      outputs.push_back(classify(model, state.row(s)));
    } else {
      const Pin last = slot.pins.back();
      outputs.push_back(classify(model, cache_for(last, source, target).resid.back().row(slot.token)));
    }
  }
  return outputs;
}

}  // namespace caap
