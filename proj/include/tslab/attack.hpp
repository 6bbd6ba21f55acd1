#pragma once

// PGD availability attack and its baselines.
//
// Polarity: every objective here is minimised. The sparsification terms
// measure the distance to fully dense behaviour, so descending them drives
// the victim towards using every token. Baselines that maximise a quantity
// (task cross-entropy, activation energy) descend its negation.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tslab/dataset.hpp"
#include "tslab/sparsifiers.hpp"

namespace tslab {

enum class Variant { single, class_universal, universal, universal_patch };
std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

enum class BaselineKind { random, standard_pgd, sponge };
std::string_view baseline_name(BaselineKind b);
BaselineKind parse_baseline(std::string_view name);

enum class Precision { f32, f64 };

struct PatchSpec {
  int size = 16;
  int x = 0;  // left column
  int y = 0;  // top row
};

struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  int iterations = 250;  // optimisation steps; universal variants take one batch per step
  double lambda = 8e-4;
  Variant variant = Variant::single;
  int target_class = -1;  // class_universal only
  PatchSpec patch;
  std::vector<Mechanism> mechanisms = {Mechanism::avit};  // several: ensemble
  std::uint64_t seed = 0;
  bool random_init = false;
  int batch_size = 8;
  double patch_step = 0.1;  // initial step of the unbounded patch
  Precision precision = Precision::f32;

  // Throws std::invalid_argument listing every violated constraint.
  void validate(const ModelConfig& config) const;
};

nlohmann::json to_json(const AttackConfig& c);
// Unknown keys are errors.
AttackConfig attack_config_from_json(const nlohmann::json& j);

struct Victim {
  const ModelWeights* weights = nullptr;
  MechanismSettings mechanism;
};

struct Perturbation {
  Variant variant = Variant::single;
  AttackConfig config;
  std::string method = "token_attack";  // or a baseline name
  int image_id = -1;                    // single-image perturbations
  std::string selector;                 // description of the optimisation set
  // C x H x W offset, or C x s x s patch pixels for universal_patch.
  Tensor<float> delta;
  // Per iteration: the minimised loss, or for the optimised baselines the
  // ascended cross-entropy / activation energy.
  std::vector<double> curve;
};

// alpha0 * (1 + cos(pi t / T)) / 2.
double cosine_step(double alpha0, int t, int iterations);

// delta - alpha * sign(grad), clamped to [-eps, eps] and then to [-x, 1 - x].
template <typename T>
Tensor<T> pgd_step(const Tensor<T>& delta, std::span<const T> grad, T alpha, T eps,
                   const Tensor<T>& x);

// Both projections of pgd_step without the gradient move.
template <typename T>
void project(Tensor<T>& delta, T eps, const Tensor<T>& x);

// Image after the perturbation, clipped to [0, 1].
Tensor<float> apply_perturbation(const Tensor<float>& image, const Perturbation& p,
                                 const ModelConfig& config);

// Optimises the configured variant. `data` is the optimisation set D': every
// image for single (one perturbation each) and universal variants, the images
// of `target_class` for class_universal. `victims` must contain one entry for
// each configured mechanism.
std::vector<Perturbation> run_attack(const AttackConfig& config, std::span<const LabeledImage> data,
                                     std::span<const Victim> victims);

// One perturbation per image. random samples U(-eps, eps); standard_pgd
// ascends the task cross-entropy of the first configured mechanism's victim;
// sponge ascends the summed squared activations (attention head outputs and
// post-GELU hidden units) with the same PGD loop.
std::vector<Perturbation> run_baseline(BaselineKind kind, const AttackConfig& config,
                                       std::span<const LabeledImage> data,
                                       std::span<const Victim> victims);

// Bundle of perturbations, little-endian: "TSPERT01", u32 version, u32 count,
// then per entry a u32-length JSON header (variant, method, epsilon, lambda,
// iterations, seed, mechanisms, image id, selector, curve, full config)
// followed by u32 rank, u32 dims and f32 data.
void save_perturbations(const std::string& path, std::span<const Perturbation> items);
std::vector<Perturbation> load_perturbations(const std::string& path);

}  // namespace tslab
