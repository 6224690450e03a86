#include "caap/toy.hpp"

#include <cmath>
#include <string>

#include "caap/error.hpp"
#include "caap/random.hpp"

namespace caap {

namespace {

void fill_normal(MatrixF& m, Eigen::Index rows, Eigen::Index cols, float stddev, Xorshift64Star& rng) {
  m.resize(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<float>(stddev * rng.normal());
  }
}

void fill_normal(RowVectorF& v, Eigen::Index n, float stddev, Xorshift64Star& rng) {
  v.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) v(j) = static_cast<float>(stddev * rng.normal());
}

}  // namespace

ModelBundle gen_model(const ToySpec& spec) {
  const ViTConfig& c = spec.config;
  c.validate();
  const int d = c.dim;
  const int m = c.mlp_hidden();
  const float stddev = spec.weight_scale / std::sqrt(static_cast<float>(d));
  Xorshift64Star rng(spec.seed);

  ModelBundle model;
  model.config = c;
  fill_normal(model.cls_embed, d, stddev, rng);
  fill_normal(model.head_w, d, c.classes, stddev, rng);
  fill_normal(model.patch_w, c.patch_features(), d, stddev, rng);
  fill_normal(model.pos_embed, c.tokens(), d, stddev, rng);
  model.patch_b = RowVectorF::Zero(d);
  model.lnf_gamma = RowVectorF::Ones(d);
  model.lnf_beta = RowVectorF::Zero(d);
  model.head_b = RowVectorF::Zero(c.classes);

  model.blocks.resize(static_cast<std::size_t>(c.layers));
  for (auto& b : model.blocks) {
    fill_normal(b.wk, d, d, stddev, rng);
    fill_normal(b.wo, d, d, stddev, rng);
    fill_normal(b.wq, d, d, stddev, rng);
    fill_normal(b.wv, d, d, stddev, rng);
    fill_normal(b.mlp_in, d, m, stddev, rng);
    fill_normal(b.mlp_out, m, d, stddev, rng);
    b.bq = b.bk = b.bv = b.bo = RowVectorF::Zero(d);
    b.mlp_in_bias = RowVectorF::Zero(m);
    b.mlp_out_bias = RowVectorF::Zero(d);
    b.ln1_gamma = b.ln2_gamma = RowVectorF::Ones(d);
    b.ln1_beta = b.ln2_beta = RowVectorF::Zero(d);
  }
  model.validate();
  return model;
}

std::pair<Image, Image> gen_planted_pair(const ToySpec& spec, int signal_patch) {
  const ViTConfig& c = spec.config;
  c.validate();
  if (signal_patch < 0 || signal_patch >= c.num_patches()) {
    throw Error(ErrorKind::kRange, "signal patch " + std::to_string(signal_patch) + " outside grid");
  }
  const int side = c.image_side();
  Image blank(side, side, c.channels, 1.0f);
  Image x = blank;
  Xorshift64Star rng(spec.seed ^ 0x5EEDF00DULL);
  const int y0 = (signal_patch / c.grid) * c.patch_px;
  const int x0 = (signal_patch % c.grid) * c.patch_px;
  for (int y = 0; y < c.patch_px; ++y) {
    for (int xx = 0; xx < c.patch_px; ++xx) {
      for (int ch = 0; ch < c.channels; ++ch) x.at(y0 + y, x0 + xx, ch) = rng.uniform() < 0.5 ? 0.0f : 1.0f;
    }
  }
  x.at(y0, x0, 0) = 0.0f;  // the texture always differs from the white blank
  return {std::move(x), std::move(blank)};
}

}  // namespace caap
