#include "tslab/sparsifiers.hpp"

#include <algorithm>
#include <cmath>

namespace tslab {

using ad::Var;

std::string_view mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::none: return "none";
    case Mechanism::ats: return "ats";
    case Mechanism::adavit: return "adavit";
    case Mechanism::avit: return "avit";
  }
  return "unknown";
}

Mechanism parse_mechanism(std::string_view name) {
  for (auto m : {Mechanism::none, Mechanism::ats, Mechanism::adavit, Mechanism::avit}) {
    if (name == mechanism_name(m)) return m;
  }
  throw std::invalid_argument("unknown mechanism '" + std::string(name) +
                              "' (expected none, ats, adavit or avit)");
}

void MechanismSettings::validate(const ModelConfig& config) const {
  std::vector<std::string> problems;
  auto in_range = [&](int v, const char* name) {
    if (v < 1 || v > config.depth) {
      problems.push_back(std::string(name) + " must be in [1, " + std::to_string(config.depth) +
                         "], got " + std::to_string(v));
    }
  };
  in_range(ats_start_block, "ats_start_block");
  in_range(adavit_start_block, "adavit_start_block");
  in_range(avit_start_block, "avit_start_block");
  if (!(avit_tau > 0 && avit_tau < 1)) problems.push_back("avit_tau must be in (0, 1)");
  if (!(gumbel_temperature > 0)) problems.push_back("gumbel_temperature must be > 0");
  if (!problems.empty()) {
    std::string msg = "invalid mechanism settings:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
}

// ---- ATS -------------------------------------------------------------------

template <typename T>
Var<T> ats_significance(const std::vector<Var<T>>& attn, const std::vector<Var<T>>& values,
                        std::span<const int> token_rows, bool* fallback) {
  if (attn.empty() || attn.size() != values.size()) {
    throw std::invalid_argument("ats_significance: need one value matrix per attention head");
  }
  if (token_rows.empty()) throw std::invalid_argument("ats_significance: no tokens to score");
  if (fallback) *fallback = false;
  auto& tape = attn[0].tape();
  const std::size_t n = token_rows.size();
  const int row0[] = {0};
  Var<T> total;
  for (std::size_t h = 0; h < attn.size(); ++h) {
    auto cls_row = ad::gather_cols<T>(ad::gather_rows<T>(attn[h], row0), token_rows);
    auto norms = ad::transpose(ad::l2_norm_rows(ad::gather_rows<T>(values[h], token_rows)));
    auto raw = ad::mul(cls_row, norms);
    auto denom = ad::sum(raw);
    Var<T> s;
    if (denom.item() > T(0)) {
      s = ad::div(raw, denom);
    } else {
      s = tape.constant(Tensor<T>({1, n}, T(1) / T(n)));
      if (fallback) *fallback = true;
    }
    total = total.defined() ? ad::add(total, s) : s;
  }
  return ad::scale(total, T(1) / T(attn.size()));
}

InverseCdfSample ats_inverse_cdf_sample(std::span<const double> scores, int samples) {
  if (samples < 1) throw std::invalid_argument("ats_inverse_cdf_sample: R must be >= 1");
  if (scores.empty()) throw std::invalid_argument("ats_inverse_cdf_sample: empty score vector");
  double total = 0;
  for (double s : scores) {
    if (!(s >= 0) || !std::isfinite(s)) {
      throw std::invalid_argument("ats_inverse_cdf_sample: scores must be finite and >= 0");
    }
    total += s;
  }
  if (std::abs(total - 1.0) > 1e-4) {
    throw std::invalid_argument("ats_inverse_cdf_sample: scores sum to " + std::to_string(total));
  }
  InverseCdfSample out;
  out.requested = samples;
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  double cdf = scores[0];
  for (int k = 1; k <= samples; ++k) {
    const double r = (2.0 * k - 1.0) / (2.0 * samples);
    while (cdf < r && pos + 1 < n) cdf += scores[++pos];
    if (out.indices.empty() || out.indices.back() != static_cast<int>(pos)) {
      out.indices.push_back(static_cast<int>(pos));
    }
  }
  out.unique = static_cast<int>(out.indices.size());
  return out;
}

// ---- AdaViT ----------------------------------------------------------------

namespace {

// Keep column (0) of a k x 2 matrix as a k x 1 column.
template <typename T>
Var<T> keep_column(const Var<T>& m) {
  return ad::slice_cols(m, 0, 1);
}

template <typename T>
Var<T> decide(const Var<T>& logits, T temperature, std::mt19937_64* rng, Var<T>* prob) {
  *prob = keep_column(ad::softmax(logits));
  if (rng) {
    auto noise = ad::sample_gumbel<T>(logits.shape(), *rng);
    return keep_column(ad::gumbel_softmax(logits, temperature, true, &noise));
  }
  return keep_column(ad::gumbel_softmax(logits, temperature, true));
}

}  // namespace

template <typename T>
PolicyDecision<T> adavit_decide(const BoundWeights<T>& w, int block, const Var<T>& z,
                                T temperature, std::mt19937_64* noise_rng) {
  const auto& c = w.config;
  const auto& p = w.blocks.at(static_cast<std::size_t>(block));
  if (z.rows() != static_cast<std::size_t>(c.seq_len())) {
    throw ShapeError("adavit_decide: expected " + std::to_string(c.seq_len()) + " token rows");
  }
  std::vector<int> patch_rows(static_cast<std::size_t>(c.num_patches()));
  for (int j = 0; j < c.num_patches(); ++j) patch_rows[j] = j + 1;
  const int row0[] = {0};
  auto patches = ad::gather_rows<T>(z, patch_rows);
  auto cls = ad::gather_rows<T>(z, row0);

  PolicyDecision<T> d;
  auto patch_logits = ad::add(ad::matmul(patches, p.policy_patch_w), p.policy_patch_b);
  d.patch_keep = decide(patch_logits, temperature, noise_rng, &d.patch_prob);
  auto head_logits = ad::reshape(ad::add(ad::matmul(cls, p.policy_head_w), p.policy_head_b),
                                 {static_cast<std::size_t>(c.heads), 2});
  d.head_keep = decide(head_logits, temperature, noise_rng, &d.head_prob);
  auto block_logits =
      ad::reshape(ad::add(ad::matmul(cls, p.policy_block_w), p.policy_block_b), {2, 2});
  d.block_keep = decide(block_logits, temperature, noise_rng, &d.block_prob);
  return d;
}

// ---- A-ViT -----------------------------------------------------------------

template <typename T>
Var<T> halting_scores(const BoundWeights<T>& w, const Var<T>& z) {
  const std::size_t n = z.rows();
  if (n < 2) throw ShapeError("halting_scores: no patch rows");
  std::vector<int> rows(n - 1);
  for (std::size_t j = 1; j < n; ++j) rows[j - 1] = static_cast<int>(j);
  const int col0[] = {0};
  auto first = ad::gather_cols<T>(ad::gather_rows<T>(z, rows), col0);
  return ad::sigmoid(ad::add(ad::mul(first, w.halting_gamma), w.halting_beta));
}

HaltingState::HaltingState(int tokens, double t)
    : tau(t), cumulative(static_cast<std::size_t>(tokens), 0.0),
      halt_block(static_cast<std::size_t>(tokens), 0) {}

void HaltingState::accumulate(std::span<const double> h, int block) {
  if (h.size() != cumulative.size()) throw ShapeError("HaltingState: score count mismatch");
  for (std::size_t j = 0; j < h.size(); ++j) {
    if (!active_in(static_cast<int>(j), block)) continue;
    cumulative[j] += h[j];
    if (cumulative[j] >= 1.0 - tau) halt_block[j] = block;
  }
}

template <typename T>
Var<T> avit_halting_step(const BoundWeights<T>& w, const Var<T>& z, int block,
                         HaltingState& state) {
  auto h = halting_scores(w, z);
  std::vector<double> hv(h.value().data.begin(), h.value().data.end());
  state.accumulate(hv, block);
  return h;
}

#define TSLAB_INSTANTIATE(T)                                                                  \
  template Var<T> ats_significance(const std::vector<Var<T>>&, const std::vector<Var<T>>&,    \
                                   std::span<const int>, bool*);                              \
  template PolicyDecision<T> adavit_decide(const BoundWeights<T>&, int, const Var<T>&, T,     \
                                           std::mt19937_64*);                                 \
  template Var<T> halting_scores(const BoundWeights<T>&, const Var<T>&);                      \
  template Var<T> avit_halting_step(const BoundWeights<T>&, const Var<T>&, int, HaltingState&);

TSLAB_INSTANTIATE(float)
TSLAB_INSTANTIATE(double)

#undef TSLAB_INSTANTIATE

}  // namespace tslab
