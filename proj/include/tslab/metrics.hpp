#pragma once

// Token utilisation, analytic compute cost and prediction fidelity.

#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tslab/dataset.hpp"
#include "tslab/defense.hpp"
#include "tslab/sparsifiers.hpp"

namespace tslab {

// sum_l active_l / (L * (N + 1)). Blocks outside a mechanism's range report
// every token active, so an unsparsified trace gives exactly 1.
double compute_tur(const SparsifierTrace& trace);

// Multiply-accumulate count of one inference:
//   per block  [MSA on]  (4 N_l d^2 + 2 N_l^2 d) * H_l / H
//            + [FFN on]  8 N_l d^2
//   plus the patch embedding N * C p^2 * d and the classifier d * M.
// N_l counts the class token. This is the convention behind the usual
// "GFLOPs" figures for vision transformers (DeiT-S gives 4.6e9).
double compute_flops(const ModelConfig& config, const SparsifierTrace& trace);
// The same count with every token, head and component active.
double vanilla_flops(const ModelConfig& config);

struct EvalRow {
  int id = 0;
  int label = 0;
  int clean_pred = 0;
  int adv_pred = 0;
  double tur = 0;
  double flops = 0;
  std::vector<int> per_block_active;
  std::vector<int> token_depth;
};

struct MetricsReport {
  std::string mechanism;
  std::string variant;  // "clean" when no adversary
  int images = 0;
  double tur = 0;
  double flops = 0;
  double vanilla_flops = 0;
  double accuracy = 0;           // adversarial prediction == label
  double clean_accuracy = 0;     // clean prediction == label
  double preservation_rate = 0;  // adversarial prediction == clean prediction
  std::vector<double> per_block_active;  // mean over images
  std::vector<int> depth_histogram;      // tokens active in exactly k blocks, k = 0..L
  std::vector<EvalRow> rows;
};

// Returns the (already clipped) adversarial image for one test image.
using Adversary = std::function<Tensor<float>(const LabeledImage&)>;

struct EvalOptions {
  // Applies to the evaluated pass (adversarial input, or the clean input when
  // there is no adversary). clean_pred always comes from the undefended model.
  const DefenseConfig* defense = nullptr;
  std::string variant = "clean";
};

// Runs clean and (when `adversary` is set) adversarial inference on every
// image. ATS and the vanilla model use the physically gathered path.
MetricsReport evaluate_set(const ModelWeights& weights, const MechanismSettings& mechanism,
                           std::span<const LabeledImage> images, const Adversary& adversary = {},
                           const EvalOptions& options = {});

// Per-image CSV: id,variant,mechanism,label,tur,flops,clean_pred,adv_pred.
void write_rows_csv(std::ostream& os, const MetricsReport& report, bool header = true);

// Means, deltas against `clean` (when given) and percent-of-upper-bound
// figures (TUR * 100, FLOPs / vanilla * 100).
nlohmann::json summary_json(const MetricsReport& report, const MetricsReport* clean = nullptr);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace tslab
