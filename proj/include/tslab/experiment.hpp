#pragma once

// Config-driven experiment runner behind the `tslab` command line.
//
// One JSON file describes the dataset, the victims, the attack matrix and the
// defense. Every stage writes its artifacts under `out` and embeds the full
// resolved config and seeds in them:
//
//   gen-data  dataset.dir/manifest.csv + images/
//   train     victim checkpoints, <out>/train_log.jsonl, <out>/train.json
//   attack    <out>/seed-<s>/<attack>.tspert
//   evaluate  <out>/seed-<s>/rows.csv, <out>/seed-<s>/summary.json
//   defend    <out>/seed-<s>/defense_rows.csv, <out>/seed-<s>/defense.json
//   report    <out>/report.json (reads the files above, never rewrites them)

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tslab/attack.hpp"
#include "tslab/dataset.hpp"
#include "tslab/defense.hpp"
#include "tslab/train.hpp"

namespace tslab {

// Invalid configuration or missing input; carries every problem found.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct VictimSpec {
  MechanismSettings mechanism;
  std::string checkpoint;
};

struct AttackSpec {
  std::string name;
  std::string method = "token_attack";  // or random | standard_pgd | sponge
  AttackConfig config;
};

struct DefenseSpec {
  DefensePolicy policy = DefensePolicy::confidence;
  int holdout_images = 0;  // 0 = the whole holdout split
};

struct ExperimentConfig {
  std::string dataset_dir;
  DatasetSpec dataset;  // gen-data only
  ModelConfig model;
  TrainConfig train;
  std::vector<VictimSpec> victims;
  std::vector<AttackSpec> attacks;
  std::optional<DefenseSpec> defense;
  std::vector<std::uint64_t> seeds = {0};
  int test_images = 200;          // stratified subset of the test split
  int optimisation_images = 280;  // D' for universal variants, from the train split
  std::string out = "run";
};

enum class Stage { gen_data, train, attack, evaluate, defend, report };
std::string_view stage_name(Stage s);

// Unknown keys, wrong types and violated constraints all end up in one
// ValidationError. Relative paths resolve against `base_dir`.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::string& base_dir = "");
nlohmann::json to_json(const ExperimentConfig& c);

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const MechanismSettings& m);

// Checks the inputs a stage reads (manifest, checkpoints, earlier stage
// outputs). Throws ValidationError naming every missing path.
void check_inputs(const ExperimentConfig& c, Stage stage);

// Round-robin over classes in id order: the first `count` images of the
// interleaved sequence (all of them when count exceeds the set).
std::vector<LabeledImage> stratified_subset(std::span<const LabeledImage> images, int count);

// Each returns the JSON summary it also writes to disk.
nlohmann::json stage_gen_data(const ExperimentConfig& c);
nlohmann::json stage_train(const ExperimentConfig& c);
nlohmann::json stage_attack(const ExperimentConfig& c);
nlohmann::json stage_evaluate(const ExperimentConfig& c);
nlohmann::json stage_defend(const ExperimentConfig& c);
nlohmann::json stage_report(const ExperimentConfig& c);

nlohmann::json run_stage(const ExperimentConfig& c, Stage stage);

}  // namespace tslab
