#pragma once

// Attack objectives. Every component is phrased as a distance to the
// worst-case (fully dense) behaviour, so the attack minimises it.

#include "tslab/forward.hpp"

namespace tslab {

// (1/M) * sum_m -p_clean[m] * log softmax(adv)[m], with p_clean = softmax of
// the frozen clean logits. Differentiable in the adversarial logits only.
template <typename T>
ad::Var<T> loss_cls(const ad::Var<T>& logits_adv, const Tensor<T>& logits_clean);

// Mean over ATS blocks of KL(S || uniform) on each block's scored tokens.
template <typename T>
ad::Var<T> loss_ats(const std::vector<ad::Var<T>>& scores);

// Mean over decision blocks of
//   mean_b (p_b - 1)^2 + [MSA on] * mean_h (p_h - 1)^2 + mean_p (p_p - 1)^2.
template <typename T>
ad::Var<T> loss_adavit(const std::vector<AdaVitSignals<T>>& decisions);

// (1/N) sum_j (1/L_h) sum_n gate_jn * (cumulative_jn)^2 over the halting blocks,
// where the gate keeps blocks up to and including the token's halting block.
template <typename T>
ad::Var<T> loss_avit(const std::vector<ad::Var<T>>& cumulative, const std::vector<Tensor<T>>& gates);

// Mechanism-specific term of a finished forward pass. Throws for
// Mechanism::none.
template <typename T>
ad::Var<T> attack_loss(const ForwardResult<T>& result, Mechanism mechanism);

template <typename T>
struct LossTotal {
  ad::Var<T> loss;
  ad::Var<T> attack;
  ad::Var<T> cls;
  ForwardResult<T> forward;
};

// Sparsified forward on image + delta followed by attack + lambda * cls.
template <typename T>
LossTotal<T> loss_total(const BoundWeights<T>& w, const ad::Var<T>& image, const ad::Var<T>& delta,
                        const MechanismSettings& mechanism, const Tensor<T>& logits_clean,
                        T lambda);

}  // namespace tslab
