#include "tslab/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tslab/forward.hpp"

namespace tslab {

std::string_view policy_name(DefensePolicy p) {
  return p == DefensePolicy::random ? "random" : "confidence";
}

DefensePolicy parse_policy(std::string_view name) {
  if (name == "random") return DefensePolicy::random;
  if (name == "confidence") return DefensePolicy::confidence;
  throw std::invalid_argument("unknown defense policy '" + std::string(name) +
                              "' (expected random or confidence)");
}

void DefenseConfig::validate(const ModelConfig& config) const {
  std::vector<std::string> problems;
  if (caps.size() != static_cast<std::size_t>(config.depth)) {
    problems.push_back("caps must have " + std::to_string(config.depth) + " entries, got " +
                       std::to_string(caps.size()));
  }
  for (std::size_t l = 0; l < caps.size(); ++l) {
    if (caps[l] < 1 || caps[l] > config.seq_len()) {
      problems.push_back("caps[" + std::to_string(l) + "] = " + std::to_string(caps[l]) +
                         " outside [1, " + std::to_string(config.seq_len()) + "]");
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid defense config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
}

std::uint64_t defense_seed(std::uint64_t base, std::uint64_t image_seed, int block) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(image_seed),
                    static_cast<std::uint32_t>(image_seed >> 32), static_cast<std::uint32_t>(block)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

std::vector<int> enforce_cap(std::size_t count, std::span<const double> confidence, int cap,
                             DefensePolicy policy, std::uint64_t seed) {
  if (cap < 1) throw std::invalid_argument("enforce_cap: cap must be >= 1");
  if (!confidence.empty() && confidence.size() != count) {
    throw std::invalid_argument("enforce_cap: one confidence value per candidate required");
  }
  const std::size_t budget = static_cast<std::size_t>(cap);
  std::vector<int> order(count);
  std::iota(order.begin(), order.end(), 0);
  if (count <= budget) return order;
  if (policy == DefensePolicy::random) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  } else if (!confidence.empty()) {
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return confidence[a] > confidence[b]; });
  }
  order.resize(budget);
  std::sort(order.begin(), order.end());
  return order;
}

DefenseConfig caps_from_counts(const std::vector<std::vector<int>>& per_image_counts,
                               Mechanism mechanism, DefensePolicy policy) {
  if (per_image_counts.empty()) throw std::invalid_argument("calibration: empty holdout");
  const std::size_t L = per_image_counts.front().size();
  DefenseConfig cfg;
  cfg.mechanism = mechanism;
  cfg.policy = policy;
  cfg.holdout_size = static_cast<int>(per_image_counts.size());
  cfg.caps.assign(L, 0);
  for (std::size_t l = 0; l < L; ++l) {
    long long total = 0;
    for (const auto& counts : per_image_counts) {
      if (counts.size() != L) throw std::invalid_argument("calibration: ragged block counts");
      total += counts[l];
    }
    // Integer ceil keeps a constant trace exact.
    const long long n = static_cast<long long>(per_image_counts.size());
    cfg.caps[l] = static_cast<int>((total + n - 1) / n);
  }
  return cfg;
}

DefenseConfig calibrate_caps(const ModelWeights& weights, const MechanismSettings& mechanism,
                             std::span<const Tensor<float>> holdout, DefensePolicy policy,
                             std::uint64_t seed) {
  if (holdout.empty()) throw std::invalid_argument("calibrate_caps: empty holdout");
  ad::Tape<float> tape;
  const auto bound = bind_weights(tape, weights, false);
  const auto mark = tape.size();
  std::vector<std::vector<int>> counts;
  for (const auto& img : holdout) {
    tape.truncate(mark);
    auto res = model_forward(bound, tape.constant(img), mechanism);
    std::vector<int> c;
    for (const auto& b : res.trace.blocks) c.push_back(b.active_tokens);
    counts.push_back(std::move(c));
  }
  auto cfg = caps_from_counts(counts, mechanism.kind, policy);
  cfg.seed = seed;
  return cfg;
}

}  // namespace tslab
