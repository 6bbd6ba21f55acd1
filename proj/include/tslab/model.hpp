#pragma once

// Pre-norm vision transformer with per-block masking hooks.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tslab/autodiff.hpp"
#include "tslab/tensor.hpp"

namespace tslab {

struct ModelConfig {
  int depth = 6;
  int embed_dim = 64;
  int heads = 4;
  int image_size = 64;
  int patch_size = 8;
  int channels = 3;
  int num_classes = 10;
  int mlp_ratio = 4;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int seq_len() const { return num_patches() + 1; }
  int head_dim() const { return embed_dim / heads; }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int hidden_dim() const { return embed_dim * mlp_ratio; }
  std::size_t image_numel() const {
    return static_cast<std::size_t>(channels) * image_size * image_size;
  }

  // Throws std::invalid_argument listing every violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Named float parameters. Every checkpoint carries the backbone plus the
// halting (`halting.*`) and decision-network (`blocks.{b}.policy.*`) extras,
// so one file format serves every mechanism.
struct ModelWeights {
  ModelConfig config;
  std::map<std::string, Tensor<float>> params;

  const Tensor<float>& at(const std::string& name) const;
  Tensor<float>& at(const std::string& name);
  std::size_t parameter_count() const;
};

// Truncated-normal (std 0.02, cut at 2 std) initialisation. LayerNorm scales
// start at 1, biases at 0, halting shift at `halting_beta`, decision networks
// biased towards "keep" by `policy_keep_bias`.
ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed,
                          float halting_beta = -3.0f, float policy_keep_bias = 3.0f);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Little-endian: "TSCKPT01", u32 version, 8 x i32 config, u32 count, then per
// tensor: u32 name length, name bytes, u32 rank, u32 dims..., f32 data.
void save_checkpoint(const std::string& path, const ModelWeights& weights);
ModelWeights load_checkpoint(const std::string& path);

// ---- weights bound onto a tape --------------------------------------------

template <typename T>
struct BlockParams {
  ad::Var<T> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  ad::Var<T> ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  ad::Var<T> policy_patch_w, policy_patch_b, policy_head_w, policy_head_b;
  ad::Var<T> policy_block_w, policy_block_b;
};

template <typename T>
struct BoundWeights {
  ModelConfig config;
  ad::Var<T> patch_w, patch_b, cls_token, pos_embed;
  std::vector<BlockParams<T>> blocks;
  ad::Var<T> norm_g, norm_b, head_w, head_b;
  ad::Var<T> halting_gamma, halting_beta;
  // Same order as ModelWeights::params.
  std::vector<std::pair<std::string, ad::Var<T>>> named;
};

// Places every parameter on the tape as a leaf. Bind once per tape and
// truncate back to the mark between passes to reuse the leaves.
template <typename T>
BoundWeights<T> bind_weights(ad::Tape<T>& tape, const ModelWeights& weights, bool requires_grad);

// Copies leaf values back into `weights` (after optimisation).
template <typename T>
void unbind_weights(const BoundWeights<T>& bound, ModelWeights& weights);

// ---- block computation -----------------------------------------------------

// Flat image index feeding each (patch, channel*p*p) slot. `gather_elements`
// with this map turns a C x H x W image into an N x (C*p*p) patch matrix.
std::vector<std::int64_t> patch_index_map(const ModelConfig& config);

// image: C*H*W values in [0,1] (any shape with that many elements). Pixels
// are standardised per channel with the ImageNet mean and std (cycled for
// more than three channels) before the patch projection. Returns the
// (N+1) x d token matrix with the class token in row 0.
template <typename T>
ad::Var<T> patchify_embed(const BoundWeights<T>& w, const ad::Var<T>& image);

// Per-block masks. Undefined Vars mean "everything on". Masks may carry
// gradients (straight-through gates during training).
template <typename T>
struct BlockMasks {
  ad::Var<T> key_weights;              // 1 x rows, 0/1
  ad::Var<T> query_mask;               // rows x 1, 0/1: rows updated by the block
  std::vector<ad::Var<T>> head_gates;  // H scalars
  ad::Var<T> msa_gate;                 // 1 x 1
  ad::Var<T> ffn_gate;                 // 1 x 1
};

template <typename T>
struct AttentionOutput {
  ad::Var<T> normed;                // LN1(Z)
  std::vector<ad::Var<T>> attn;     // per head: rows x rows
  std::vector<ad::Var<T>> values;   // per head: rows x head_dim
};

// Softmax(QK^T/sqrt(d_h)) per head over the keys allowed by `key_weights`.
template <typename T>
AttentionOutput<T> attention_forward(const BoundWeights<T>& w, int block, const ad::Var<T>& z,
                                     const ad::Var<T>& key_weights);

// Completes the block from precomputed attention: head mixing, projection,
// residual, FFN, residual, with all gates applied. A gate that is a constant
// zero skips its branch. When `record` is given, the mixed head outputs and the
// post-GELU hidden layer are appended to it.
template <typename T>
ad::Var<T> finish_block(const BoundWeights<T>& w, int block, const ad::Var<T>& z,
                        const AttentionOutput<T>& attn, const BlockMasks<T>& masks,
                        std::vector<ad::Var<T>>* record = nullptr);

// attention_forward + finish_block.
template <typename T>
ad::Var<T> block_forward(const BoundWeights<T>& w, int block, const ad::Var<T>& z,
                         const BlockMasks<T>& masks, std::vector<ad::Var<T>>* record = nullptr);

// Final LayerNorm of the class-token row followed by the classifier.
template <typename T>
ad::Var<T> classify(const BoundWeights<T>& w, const ad::Var<T>& z);

}  // namespace tslab
