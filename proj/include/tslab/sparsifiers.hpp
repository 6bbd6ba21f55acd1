#pragma once

// Token sparsification mechanisms: adaptive token sampling (ATS), learned
// per-block gating (AdaViT) and cumulative halting (A-ViT).

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tslab/model.hpp"

namespace tslab {

enum class Mechanism { none, ats, adavit, avit };

std::string_view mechanism_name(Mechanism m);
// Accepts "none", "ats", "adavit", "avit".
Mechanism parse_mechanism(std::string_view name);

struct MechanismSettings {
  Mechanism kind = Mechanism::none;
  // 1-based index of the first block each mechanism acts on.
  int ats_start_block = 4;
  int adavit_start_block = 2;
  int avit_start_block = 2;
  double avit_tau = 0.01;
  double gumbel_temperature = 1.0;

  void validate(const ModelConfig& config) const;
};

// ---- ATS -------------------------------------------------------------------

// Significance of the non-class tokens at rows `token_rows`:
//   S_j = sum_h S_hj / H,  S_hj = A_h[0, j] * |V_hj| / sum_i A_h[0, i] * |V_hi|.
// A head whose denominator vanishes contributes a uniform row and sets
// `*fallback`. Result is 1 x |token_rows|.
template <typename T>
ad::Var<T> ats_significance(const std::vector<ad::Var<T>>& attn,
                            const std::vector<ad::Var<T>>& values,
                            std::span<const int> token_rows, bool* fallback = nullptr);

struct InverseCdfSample {
  std::vector<int> indices;  // unique, ascending positions into S
  int requested = 0;         // R
  int unique = 0;            // R'
};

// Evaluates psi(r) = min{n : CDF_n >= r} at r_k = (2k - 1) / (2R), k = 1..R,
// and collapses duplicates. Throws std::invalid_argument when S is not a
// simplex (negative entry or sum off by more than 1e-4) or R < 1.
InverseCdfSample ats_inverse_cdf_sample(std::span<const double> scores, int samples);

// ---- AdaViT ----------------------------------------------------------------

template <typename T>
struct PolicyDecision {
  // Column vectors of keep decisions (forward value 0/1) and the matching
  // keep probabilities softmax(logits)[:, keep].
  ad::Var<T> patch_keep, patch_prob;  // N x 1
  ad::Var<T> head_keep, head_prob;    // H x 1
  ad::Var<T> block_keep, block_prob;  // 2 x 1: (MSA, FFN)
};

// Decision networks of block `block` (0-based) applied to the block input z:
// patch logits from every patch row, head and block logits from the class
// row. With `noise_rng` null the Gumbel noise is zero (argmax decisions).
template <typename T>
PolicyDecision<T> adavit_decide(const BoundWeights<T>& w, int block, const ad::Var<T>& z,
                                T temperature, std::mt19937_64* noise_rng = nullptr);

// ---- A-ViT -----------------------------------------------------------------

// h_j = sigmoid(gamma * z[j, 0] + beta) for the patch rows of z: N x 1.
template <typename T>
ad::Var<T> halting_scores(const BoundWeights<T>& w, const ad::Var<T>& z);

struct HaltingState {
  double tau = 0.01;
  std::vector<double> cumulative;  // per patch token
  std::vector<int> halt_block;     // 1-based block of halting, 0 = never, -1 = removed before block 1

  HaltingState() = default;
  HaltingState(int tokens, double tau);

  bool halted(int j) const { return halt_block[j] != 0; }
  // Active in (1-based) block l: not halted in an earlier block.
  bool active_in(int j, int block) const { return halt_block[j] == 0 || halt_block[j] >= block; }
  // Adds h to every still-active token; tokens reaching 1 - tau halt at `block`.
  void accumulate(std::span<const double> h, int block);
  // Forces token j to stop after `block` (defense removal).
  void force_halt(int j, int block) {
    const int b = block < 1 ? -1 : block;
    if (halt_block[j] == 0 || halt_block[j] > b) halt_block[j] = b;
  }
};

// halting_scores + accumulate, returning the scores.
template <typename T>
ad::Var<T> avit_halting_step(const BoundWeights<T>& w, const ad::Var<T>& z, int block,
                             HaltingState& state);

// ---- trace -----------------------------------------------------------------

struct BlockTrace {
  int active_tokens = 0;  // rows processed by the block, class token included
  int active_heads = 0;
  bool msa_on = true;
  bool ffn_on = true;
};

struct SparsifierTrace {
  Mechanism mechanism = Mechanism::none;
  int num_tokens = 0;  // N + 1
  int heads = 0;
  std::vector<BlockTrace> blocks;
  std::vector<int> token_depth;  // per patch token: number of blocks it was active in
  std::vector<int> halt_block;   // A-ViT only
  std::vector<int> ats_unique;   // R' per ATS block
  int ats_fallbacks = 0;
};

}  // namespace tslab
