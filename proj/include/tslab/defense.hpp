#pragma once

// Per-block token budget calibrated on clean holdout images.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tslab/sparsifiers.hpp"

namespace tslab {

enum class DefensePolicy { random, confidence };

std::string_view policy_name(DefensePolicy p);
DefensePolicy parse_policy(std::string_view name);

struct DefenseConfig {
  // cap_l bounds the patch tokens processed by block l. The class token is
  // never counted against it and never removed.
  std::vector<int> caps;
  DefensePolicy policy = DefensePolicy::confidence;
  Mechanism mechanism = Mechanism::none;
  int holdout_size = 0;
  std::uint64_t seed = 0;

  void validate(const ModelConfig& config) const;
};

// Picks which of `count` patch-token candidates survive a cap: at most cap of
// them. Confidence keeps
// the highest `confidence` values (ties to the lower position; an empty span
// keeps the lowest positions), random draws a uniform subset from a generator
// seeded by `seed`. Returns ascending positions.
std::vector<int> enforce_cap(std::size_t count, std::span<const double> confidence, int cap,
                             DefensePolicy policy, std::uint64_t seed);

// cap_l = ceil(mean over images of active_tokens at block l). The counts
// include the class token, so calibration leaves one token of slack.
DefenseConfig caps_from_counts(const std::vector<std::vector<int>>& per_image_counts,
                               Mechanism mechanism, DefensePolicy policy);

// Runs the undefended mechanism on clean holdout images (C*H*W each) and
// derives the caps from the observed per-block counts.
DefenseConfig calibrate_caps(const ModelWeights& weights, const MechanismSettings& mechanism,
                             std::span<const Tensor<float>> holdout, DefensePolicy policy,
                             std::uint64_t seed = 0);

// Seed used by the random policy for one image and block.
std::uint64_t defense_seed(std::uint64_t base, std::uint64_t image_seed, int block);

}  // namespace tslab
