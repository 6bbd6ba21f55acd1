#include "tslab/losses.hpp"

#include <cmath>

namespace tslab {

using ad::Var;

template <typename T>
Var<T> loss_cls(const Var<T>& logits_adv, const Tensor<T>& logits_clean) {
  auto& tape = logits_adv.tape();
  if (logits_adv.size() != logits_clean.size()) {
    throw ShapeError("loss_cls: adversarial and clean logits differ in size");
  }
  auto p = ad::softmax(tape.constant(Tensor<T>(logits_adv.shape(), logits_clean.data)));
  const T m = static_cast<T>(logits_clean.size());
  return ad::scale(ad::sum(ad::mul(tape.constant(p.value()), ad::log_softmax(logits_adv))),
                   T(-1) / m);
}

template <typename T>
Var<T> loss_ats(const std::vector<Var<T>>& scores) {
  if (scores.empty()) throw std::invalid_argument("loss_ats: no ATS blocks in trace");
  Var<T> total;
  for (const auto& s : scores) {
    const T n = static_cast<T>(s.size());
    // sum_j S_j log(S_j / (1/n)); the epsilon keeps log finite at S_j = 0.
    auto kl = ad::add_scalar(ad::sum(ad::mul(s, ad::log(ad::add_scalar(s, T(1e-12))))), std::log(n));
    total = total.defined() ? ad::add(total, kl) : kl;
  }
  return ad::scale(total, T(1) / static_cast<T>(scores.size()));
}

namespace {

template <typename T>
Var<T> mean_gap_sq(const Var<T>& p) {
  return ad::mean(ad::square(ad::add_scalar(p, T(-1))));
}

}  // namespace

template <typename T>
Var<T> loss_adavit(const std::vector<AdaVitSignals<T>>& decisions) {
  if (decisions.empty()) throw std::invalid_argument("loss_adavit: no decision blocks in trace");
  Var<T> total;
  for (const auto& d : decisions) {
    auto term = ad::add(mean_gap_sq(d.block_prob), mean_gap_sq(d.patch_prob));
    if (d.msa_on) term = ad::add(term, mean_gap_sq(d.head_prob));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return ad::scale(total, T(1) / static_cast<T>(decisions.size()));
}

template <typename T>
Var<T> loss_avit(const std::vector<Var<T>>& cumulative, const std::vector<Tensor<T>>& gates) {
  if (cumulative.empty()) throw std::invalid_argument("loss_avit: no halting blocks in trace");
  if (cumulative.size() != gates.size()) throw std::invalid_argument("loss_avit: gate count mismatch");
  auto& tape = cumulative[0].tape();
  Var<T> total;
  for (std::size_t n = 0; n < cumulative.size(); ++n) {
    auto term = ad::sum(ad::mul(ad::square(cumulative[n]), tape.constant(gates[n])));
    total = total.defined() ? ad::add(total, term) : term;
  }
  const T tokens = static_cast<T>(cumulative[0].size());
  return ad::scale(total, T(1) / (tokens * static_cast<T>(cumulative.size())));
}

template <typename T>
Var<T> attack_loss(const ForwardResult<T>& r, Mechanism mechanism) {
  switch (mechanism) {
    case Mechanism::ats: return loss_ats(r.ats_scores);
    case Mechanism::adavit: return loss_adavit(r.adavit);
    case Mechanism::avit: return loss_avit(r.avit_cumulative, r.avit_gates);
    case Mechanism::none: break;
  }
  throw std::invalid_argument("attack_loss: the vanilla model has no sparsification loss");
}

template <typename T>
LossTotal<T> loss_total(const BoundWeights<T>& w, const Var<T>& image, const Var<T>& delta,
                        const MechanismSettings& mechanism, const Tensor<T>& logits_clean,
                        T lambda) {
  LossTotal<T> out;
  out.forward = model_forward(w, ad::add(image, delta), mechanism);
  out.attack = attack_loss(out.forward, mechanism.kind);
  out.cls = loss_cls(out.forward.logits, logits_clean);
  out.loss = lambda == T(0) ? out.attack : ad::add(out.attack, ad::scale(out.cls, lambda));
  return out;
}

#define TSLAB_INSTANTIATE(T)                                                                 \
  template Var<T> loss_cls(const Var<T>&, const Tensor<T>&);                                 \
  template Var<T> loss_ats(const std::vector<Var<T>>&);                                      \
  template Var<T> loss_adavit(const std::vector<AdaVitSignals<T>>&);                         \
  template Var<T> loss_avit(const std::vector<Var<T>>&, const std::vector<Tensor<T>>&);      \
  template Var<T> attack_loss(const ForwardResult<T>&, Mechanism);                           \
  template LossTotal<T> loss_total(const BoundWeights<T>&, const Var<T>&, const Var<T>&,     \
                                   const MechanismSettings&, const Tensor<T>&, T);

TSLAB_INSTANTIATE(float)
TSLAB_INSTANTIATE(double)

#undef TSLAB_INSTANTIATE

}  // namespace tslab
