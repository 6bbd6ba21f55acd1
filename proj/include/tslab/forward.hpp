#pragma once

// Full forward pass with an optional sparsification mechanism.

#include <cstdint>
#include <random>
#include <vector>

#include "tslab/model.hpp"
#include "tslab/sparsifiers.hpp"

namespace tslab {

struct DefenseConfig;

// mask: every block sees all N+1 rows and inactive tokens are masked.
// gather: rows dropped by ATS are physically removed (vanilla and ATS only).
enum class ForwardMode { mask, gather };

struct ForwardOptions {
  ForwardMode mode = ForwardMode::mask;
  // Training draws Gumbel noise from `rng` for AdaViT and routes gradients
  // through straight-through gates (AdaViT decisions, A-ViT halting).
  bool training = false;
  std::mt19937_64* rng = nullptr;
  const DefenseConfig* defense = nullptr;
  std::uint64_t image_seed = 0;  // random defense policy
  bool record_activations = false;
};

template <typename T>
struct AdaVitSignals {
  ad::Var<T> patch_prob;  // N x 1
  ad::Var<T> head_prob;   // H x 1
  ad::Var<T> block_prob;  // 2 x 1
  bool msa_on = true;     // hard MSA decision
};

template <typename T>
struct ForwardResult {
  ad::Var<T> logits;  // 1 x M
  SparsifierTrace trace;

  // Differentiable signals for the attack losses and training surrogates.
  std::vector<ad::Var<T>> ats_scores;        // per ATS block: 1 x n_active
  std::vector<AdaVitSignals<T>> adavit;      // per decision block
  std::vector<ad::Var<T>> avit_cumulative;   // per halting block: N x 1
  std::vector<Tensor<T>> avit_gates;         // per halting block: N x 1, 1 if token counted
  ad::Var<T> avit_soft_usage;                // mean soft activity over all slots
  std::vector<ad::Var<T>> activations;       // when record_activations
};

// Runs the model on `image` (C*H*W values) using the image's tape.
template <typename T>
ForwardResult<T> model_forward(const BoundWeights<T>& w, const ad::Var<T>& image,
                               const MechanismSettings& mechanism,
                               const ForwardOptions& options = {});

}  // namespace tslab
