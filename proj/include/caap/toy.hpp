#pragma once

#include <cstdint>
#include <utility>

#include "caap/image.hpp"
#include "caap/vit.hpp"

namespace caap {

struct ToySpec {
  std::uint64_t seed = 7;
  ViTConfig config;  // defaults: L=6, d=32, h=4, g=4, patch 4px, K=5, mlp_ratio 2
  float weight_scale = 1.0f;
};

/// Seeded random ViT. Weights ~ N(0, (weight_scale / sqrt(d))^2), biases 0,
/// layer-norm gamma 1 / beta 0. Draw order: the non-block tensors in name
/// order (cls_embed, head.weight, patch_embed.weight, pos_embed), then each
/// block in turn with attn.wk, attn.wo, attn.wq, attn.wv, mlp.w_in, mlp.w_out;
/// every tensor is filled row-major.
ModelBundle gen_model(const ToySpec& spec);

/// (x, x0): x0 is an all-white image and x equals x0 except inside patch
/// `signal_patch`, which holds a seeded binary texture.
std::pair<Image, Image> gen_planted_pair(const ToySpec& spec, int signal_patch);

}  // namespace caap
