#pragma once

// Toy victim training: a plain backbone, then optional fine-tuning of the
// AdaViT decision networks or the A-ViT halting unit together with the
// backbone under a usage-budget regulariser.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tslab/dataset.hpp"
#include "tslab/sparsifiers.hpp"

namespace tslab {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  int warmup_epochs = 1;
  // Mechanism fine-tuning (AdaViT, A-ViT).
  int finetune_epochs = 8;
  double finetune_lr = 5e-4;
  double usage_weight = 4.0;
  double usage_target = 0.6;  // mean keep probability / mean token activity
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One JSON object per epoch: stage, epoch, loss, accuracy, usage.
using TrainLogger = std::function<void(const nlohmann::json&)>;

ModelWeights train_backbone(const TrainConfig& config, const ModelConfig& model,
                            std::span<const LabeledImage> train, const TrainLogger& log = {});

// Fine-tunes every parameter with cross-entropy + usage_weight * (usage -
// usage_target)^2, where usage is the mean patch keep probability (AdaViT) or
// the mean soft token activity (A-ViT). ATS and the vanilla model return
// `base` unchanged.
ModelWeights finetune_mechanism(const TrainConfig& config, const ModelWeights& base,
                                const MechanismSettings& mechanism,
                                std::span<const LabeledImage> train, const TrainLogger& log = {});

ModelWeights train_victim(const TrainConfig& config, const ModelConfig& model,
                          const MechanismSettings& mechanism, std::span<const LabeledImage> train,
                          const TrainLogger& log = {});

}  // namespace tslab
