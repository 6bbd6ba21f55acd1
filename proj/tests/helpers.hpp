#pragma once

#include <random>

#include "tslab/dataset.hpp"
#include "tslab/forward.hpp"
#include "tslab/model.hpp"

namespace tslab::testing {

// 16x16 images, 4x4 patches (N = 16), four blocks: small enough for
// exhaustive checks, deep enough for every mechanism's start block.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.depth = 4;
  c.embed_dim = 16;
  c.heads = 2;
  c.image_size = 16;
  c.patch_size = 4;
  c.channels = 3;
  c.num_classes = 3;
  c.mlp_ratio = 2;
  return c;
}

inline MechanismSettings tiny_mechanism(Mechanism kind) {
  MechanismSettings m;
  m.kind = kind;
  m.ats_start_block = 2;
  m.adavit_start_block = 2;
  m.avit_start_block = 2;
  return m;
}

inline Tensor<float> random_image(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> img({static_cast<std::size_t>(c.channels), static_cast<std::size_t>(c.image_size),
                     static_cast<std::size_t>(c.image_size)});
  for (auto& v : img.data) v = u(rng);
  return img;
}

inline std::vector<LabeledImage> random_images(const ModelConfig& c, int count, std::uint64_t seed) {
  std::vector<LabeledImage> out;
  for (int i = 0; i < count; ++i) {
    out.push_back({i, i % c.num_classes, 0, random_image(c, seed * 1000 + static_cast<std::uint64_t>(i))});
  }
  return out;
}

// Larger-than-default init so attention and halting are far from uniform.
inline ModelWeights spread_weights(const ModelConfig& c, std::uint64_t seed, float factor = 10.0f) {
  auto w = init_weights(c, seed);
  for (auto& [name, t] : w.params) {
    if (name.find("policy") != std::string::npos || name.find("halting") != std::string::npos) continue;
    if (name.size() >= 6 && name.compare(name.size() - 6, 6, "weight") == 0) {
      for (auto& v : t.data) v *= factor;
    }
  }
  return w;
}

template <typename T>
ForwardResult<T> run(ad::Tape<T>& tape, const ModelWeights& w, const Tensor<float>& image,
                     const MechanismSettings& m, ForwardOptions opt = {}) {
  auto bound = bind_weights<T>(tape, w, false);
  return model_forward(bound, tape.constant(image.template cast<T>()), m, opt);
}

}  // namespace tslab::testing
