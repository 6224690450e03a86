#include <cmath>
#include <map>
#include <string>

#include "caap/error.hpp"
#include "caap/hash.hpp"
#include "caap/vit.hpp"

namespace caap {

void ViTConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kConfig, "invalid ViT config: " + m); };
  if (layers < 2) fail("layers must be >= 2");
  if (dim <= 0 || heads <= 0 || dim % heads != 0) fail("dim must be a positive multiple of heads");
  if (grid < 2) fail("grid must be >= 2");
  if (patch_px <= 0) fail("patch_px must be positive");
  if (classes < 2) fail("classes must be >= 2");
  if (channels != 1 && channels != 3) fail("channels must be 1 or 3");
  if (!(mlp_ratio > 0.0f) || mlp_hidden() <= 0) fail("mlp_ratio must be positive");
  if (!(ln_eps > 0.0f)) fail("ln_eps must be positive");
}

int default_end_layer(int layers) { return (2 * layers + 2) / 3; }

namespace {

template <typename M>
void expect_shape(const M& m, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw Error(ErrorKind::kShape, name + " has shape [" + std::to_string(m.rows()) + "x" +
                                       std::to_string(m.cols()) + "], expected [" +
                                       std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  if (!m.allFinite()) throw Error(ErrorKind::kFormat, name + " contains non-finite values");
}

std::string block_prefix(int l) { return "blocks." + std::to_string(l) + "."; }

Tensor to_tensor(const MatrixF& m) {
  return Tensor({m.rows(), m.cols()}, std::vector<float>(m.data(), m.data() + m.size()));
}

Tensor to_tensor(const RowVectorF& v) {
  return Tensor({v.size()}, std::vector<float>(v.data(), v.data() + v.size()));
}

}  // namespace

void ModelBundle::validate() const {
  config.validate();
  const int d = config.dim;
  const int m = config.mlp_hidden();
  expect_shape(patch_w, config.patch_features(), d, "patch_embed.weight");
  expect_shape(patch_b, 1, d, "patch_embed.bias");
  expect_shape(pos_embed, config.tokens(), d, "pos_embed");
  expect_shape(cls_embed, 1, d, "cls_embed");
  if (static_cast<int>(blocks.size()) != config.layers) {
    throw Error(ErrorKind::kShape, "model has " + std::to_string(blocks.size()) + " blocks, config says " +
                                       std::to_string(config.layers));
  }
  for (int l = 0; l < config.layers; ++l) {
    const auto& b = blocks[static_cast<std::size_t>(l)];
    const std::string p = block_prefix(l);
    expect_shape(b.ln1_gamma, 1, d, p + "ln1.gamma");
    expect_shape(b.ln1_beta, 1, d, p + "ln1.beta");
    expect_shape(b.wq, d, d, p + "attn.wq");
    expect_shape(b.wk, d, d, p + "attn.wk");
    expect_shape(b.wv, d, d, p + "attn.wv");
    expect_shape(b.wo, d, d, p + "attn.wo");
    expect_shape(b.bq, 1, d, p + "attn.bq");
    expect_shape(b.bk, 1, d, p + "attn.bk");
    expect_shape(b.bv, 1, d, p + "attn.bv");
    expect_shape(b.bo, 1, d, p + "attn.bo");
    expect_shape(b.ln2_gamma, 1, d, p + "ln2.gamma");
    expect_shape(b.ln2_beta, 1, d, p + "ln2.beta");
    expect_shape(b.mlp_in, d, m, p + "mlp.w_in");
    expect_shape(b.mlp_in_bias, 1, m, p + "mlp.b_in");
    expect_shape(b.mlp_out, m, d, p + "mlp.w_out");
    expect_shape(b.mlp_out_bias, 1, d, p + "mlp.b_out");
  }
  expect_shape(lnf_gamma, 1, d, "ln_f.gamma");
  expect_shape(lnf_beta, 1, d, "ln_f.beta");
  expect_shape(head_w, d, config.classes, "head.weight");
  expect_shape(head_b, 1, config.classes, "head.bias");
}

std::vector<std::pair<std::string, Tensor>> ModelBundle::to_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("cls_embed", to_tensor(cls_embed));
  out.emplace_back("pos_embed", to_tensor(pos_embed));
  out.emplace_back("patch_embed.weight", to_tensor(patch_w));
  out.emplace_back("patch_embed.bias", to_tensor(patch_b));
  for (int l = 0; l < config.layers; ++l) {
    const auto& b = blocks[static_cast<std::size_t>(l)];
    const std::string p = block_prefix(l);
    out.emplace_back(p + "ln1.gamma", to_tensor(b.ln1_gamma));
    out.emplace_back(p + "ln1.beta", to_tensor(b.ln1_beta));
    out.emplace_back(p + "attn.wq", to_tensor(b.wq));
    out.emplace_back(p + "attn.bq", to_tensor(b.bq));
    out.emplace_back(p + "attn.wk", to_tensor(b.wk));
    out.emplace_back(p + "attn.bk", to_tensor(b.bk));
    out.emplace_back(p + "attn.wv", to_tensor(b.wv));
    out.emplace_back(p + "attn.bv", to_tensor(b.bv));
    out.emplace_back(p + "attn.wo", to_tensor(b.wo));
    out.emplace_back(p + "attn.bo", to_tensor(b.bo));
    out.emplace_back(p + "ln2.gamma", to_tensor(b.ln2_gamma));
    out.emplace_back(p + "ln2.beta", to_tensor(b.ln2_beta));
    out.emplace_back(p + "mlp.w_in", to_tensor(b.mlp_in));
    out.emplace_back(p + "mlp.b_in", to_tensor(b.mlp_in_bias));
    out.emplace_back(p + "mlp.w_out", to_tensor(b.mlp_out));
    out.emplace_back(p + "mlp.b_out", to_tensor(b.mlp_out_bias));
  }
  out.emplace_back("ln_f.gamma", to_tensor(lnf_gamma));
  out.emplace_back("ln_f.beta", to_tensor(lnf_beta));
  out.emplace_back("head.weight", to_tensor(head_w));
  out.emplace_back("head.bias", to_tensor(head_b));
  return out;
}

namespace {

class TensorLookup {
 public:
  explicit TensorLookup(const std::vector<std::pair<std::string, Tensor>>& tensors) {
    for (const auto& [name, t] : tensors) {
      if (!by_name_.emplace(name, &t).second) {
        throw Error(ErrorKind::kFormat, "duplicate tensor name '" + name + "'");
      }
    }
  }

  MatrixF matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
    const Tensor& t = get(name);
    if (t.shape.size() != 2 || t.shape[0] != rows || t.shape[1] != cols) {
      throw Error(ErrorKind::kShape, name + " has shape " + t.shape_string() + ", expected [" +
                                         std::to_string(rows) + "x" + std::to_string(cols) + "]");
    }
    return Eigen::Map<const MatrixF>(t.data.data(), rows, cols);
  }

  RowVectorF vector(const std::string& name, Eigen::Index n) const {
    const Tensor& t = get(name);
    if (t.shape.size() != 1 || t.shape[0] != n) {
      throw Error(ErrorKind::kShape, name + " has shape " + t.shape_string() + ", expected [" +
                                         std::to_string(n) + "]");
    }
    return Eigen::Map<const RowVectorF>(t.data.data(), n);
  }

 private:
  const Tensor& get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw Error(ErrorKind::kFormat, "missing tensor '" + name + "'");
    return *it->second;
  }

  std::map<std::string, const Tensor*> by_name_;
};

}  // namespace

ModelBundle ModelBundle::from_tensors(const ViTConfig& config,
                                      const std::vector<std::pair<std::string, Tensor>>& tensors) {
  config.validate();
  const TensorLookup lookup(tensors);
  const int d = config.dim;
  const int m = config.mlp_hidden();
  ModelBundle model;
  model.config = config;
  model.cls_embed = lookup.vector("cls_embed", d);
  model.pos_embed = lookup.matrix("pos_embed", config.tokens(), d);
  model.patch_w = lookup.matrix("patch_embed.weight", config.patch_features(), d);
  model.patch_b = lookup.vector("patch_embed.bias", d);
  model.blocks.resize(static_cast<std::size_t>(config.layers));
  for (int l = 0; l < config.layers; ++l) {
    auto& b = model.blocks[static_cast<std::size_t>(l)];
    const std::string p = block_prefix(l);
    b.ln1_gamma = lookup.vector(p + "ln1.gamma", d);
    b.ln1_beta = lookup.vector(p + "ln1.beta", d);
    b.wq = lookup.matrix(p + "attn.wq", d, d);
    b.bq = lookup.vector(p + "attn.bq", d);
    b.wk = lookup.matrix(p + "attn.wk", d, d);
    b.bk = lookup.vector(p + "attn.bk", d);
    b.wv = lookup.matrix(p + "attn.wv", d, d);
    b.bv = lookup.vector(p + "attn.bv", d);
    b.wo = lookup.matrix(p + "attn.wo", d, d);
    b.bo = lookup.vector(p + "attn.bo", d);
    b.ln2_gamma = lookup.vector(p + "ln2.gamma", d);
    b.ln2_beta = lookup.vector(p + "ln2.beta", d);
    b.mlp_in = lookup.matrix(p + "mlp.w_in", d, m);
    b.mlp_in_bias = lookup.vector(p + "mlp.b_in", m);
    b.mlp_out = lookup.matrix(p + "mlp.w_out", m, d);
    b.mlp_out_bias = lookup.vector(p + "mlp.b_out", d);
  }
  model.lnf_gamma = lookup.vector("ln_f.gamma", d);
  model.lnf_beta = lookup.vector("ln_f.beta", d);
  model.head_w = lookup.matrix("head.weight", d, config.classes);
  model.head_b = lookup.vector("head.bias", config.classes);
  model.validate();
  return model;
}

std::uint64_t ModelBundle::fingerprint() const {
  Fnv1a64 h;
  h.update("vit-config");
  for (int v : {config.layers, config.dim, config.heads, config.grid, config.patch_px, config.classes,
                config.channels}) {
    h.update_le(static_cast<std::int32_t>(v));
  }
  h.update_le(config.mlp_ratio);
  h.update_le(config.ln_eps);
  for (const auto& [name, t] : to_tensors()) {
    h.update(name);
    for (auto e : t.shape) h.update_le(static_cast<std::int64_t>(e));
    for (float f : t.data) h.update_le(f);
  }
  return h.digest();
}

}  // namespace caap
