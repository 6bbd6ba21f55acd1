#include "tslab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "tslab/forward.hpp"
#include "tslab/losses.hpp"

namespace tslab {

using ad::Var;

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (epochs < 0) problems.push_back("epochs must be >= 0");
  if (finetune_epochs < 0) problems.push_back("finetune_epochs must be >= 0");
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (!(lr > 0)) problems.push_back("lr must be > 0");
  if (!(finetune_lr > 0)) problems.push_back("finetune_lr must be > 0");
  if (!(weight_decay >= 0)) problems.push_back("weight_decay must be >= 0");
  if (warmup_epochs < 0) problems.push_back("warmup_epochs must be >= 0");
  if (!(usage_weight >= 0)) problems.push_back("usage_weight must be >= 0");
  if (!(usage_target > 0 && usage_target <= 1)) problems.push_back("usage_target must be in (0, 1]");
  if (!problems.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"warmup_epochs", c.warmup_epochs},
          {"finetune_epochs", c.finetune_epochs},
          {"finetune_lr", c.finetune_lr},
          {"usage_weight", c.usage_weight},
          {"usage_target", c.usage_target},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  TrainConfig c;
  std::vector<std::string> problems;
  const auto known = to_json(c);
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) problems.push_back("unknown key 'train." + k + "'");
  }
  auto get = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
      problems.push_back("train." + std::string(key) + " has the wrong type");
    }
  };
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("lr", c.lr);
  get("weight_decay", c.weight_decay);
  get("warmup_epochs", c.warmup_epochs);
  get("finetune_epochs", c.finetune_epochs);
  get("finetune_lr", c.finetune_lr);
  get("usage_weight", c.usage_weight);
  get("usage_target", c.usage_target);
  get("seed", c.seed);
  if (!problems.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
  return c;
}

namespace {

// AdamW over the bound leaves; decay applies to matrices named "*weight".
class Adam {
 public:
  Adam(const BoundWeights<float>& w, double weight_decay) : wd_(weight_decay) {
    for (const auto& [name, var] : w.named) {
      const bool decay = name.size() >= 6 && name.compare(name.size() - 6, 6, "weight") == 0;
      slots_.push_back({var, std::vector<float>(var.size(), 0.0f),
                        std::vector<float>(var.size(), 0.0f), decay});
    }
  }

  void step(double lr) {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1 - std::pow(b1, t_), c2 = 1 - std::pow(b2, t_);
    for (auto& s : slots_) {
      auto& tape = s.var.tape();
      if (!tape.has_grad(s.var.id())) continue;
      const auto& g = tape.grad(s.var.id());
      auto& value = tape.mutable_value(s.var.id()).data;
      for (std::size_t i = 0; i < value.size(); ++i) {
        s.m[i] = static_cast<float>(b1 * s.m[i] + (1 - b1) * g[i]);
        s.v[i] = static_cast<float>(b2 * s.v[i] + (1 - b2) * g[i] * g[i]);
        double update = (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
        if (s.decay) update += wd_ * value[i];
        value[i] = static_cast<float>(value[i] - lr * update);
      }
    }
  }

 private:
  struct Slot {
    Var<float> var;
    std::vector<float> m, v;
    bool decay;
  };
  double wd_;
  long t_ = 0;
  std::vector<Slot> slots_;
};

double schedule(double base, long step, long warmup, long total) {
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(std::max<long>(1, total - warmup));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Var<float> cross_entropy(const Var<float>& logits, int label) {
  const int col[] = {label};
  return ad::scale(ad::gather_cols<float>(ad::log_softmax(logits), col), -1.0f);
}

// Mean patch keep probability over the decision blocks.
Var<float> adavit_usage(const ForwardResult<float>& r) {
  Var<float> total;
  for (const auto& d : r.adavit) {
    auto m = ad::mean(d.patch_prob);
    total = total.defined() ? ad::add(total, m) : m;
  }
  return ad::scale(total, 1.0f / static_cast<float>(r.adavit.size()));
}

struct StageSpec {
  std::string name;
  int epochs;
  double lr;
  MechanismSettings mechanism;
};

void run_stage(const TrainConfig& cfg, const StageSpec& stage, ModelWeights& weights,
               std::span<const LabeledImage> train, const TrainLogger& log, std::uint64_t salt) {
  if (train.empty()) throw std::invalid_argument("training: empty training set");
  if (stage.epochs == 0) return;
  ad::Tape<float> tape;
  const auto bound = bind_weights(tape, weights, true);
  const auto mark = tape.size();
  Adam opt(bound, cfg.weight_decay);
  std::mt19937_64 rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * salt));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((train.size() + B - 1) / B);
  const long total = steps_per_epoch * stage.epochs;
  const long warmup = stage.name == "backbone" ? steps_per_epoch * cfg.warmup_epochs : 0;
  const bool regularised = stage.mechanism.kind == Mechanism::adavit ||
                           stage.mechanism.kind == Mechanism::avit;
  long step = 0;
  for (int epoch = 0; epoch < stage.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0, usage_sum = 0;
    int correct = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      const std::size_t end = std::min(order.size(), start + B);
      const float inv = 1.0f / static_cast<float>(end - start);
      tape.zero_grad();
      for (std::size_t k = start; k < end; ++k) try {
        const auto& item = train[order[k]];
        tape.truncate(mark);
        ForwardOptions fo;
        fo.training = true;
        fo.rng = &rng;
        auto r = model_forward(bound, tape.constant(item.image), stage.mechanism, fo);
        auto loss = cross_entropy(r.logits, item.label);
        const auto& lv = r.logits.value().data;
        correct += static_cast<int>(std::max_element(lv.begin(), lv.end()) - lv.begin()) == item.label;
        if (regularised) {
          auto usage = stage.mechanism.kind == Mechanism::adavit ? adavit_usage(r) : r.avit_soft_usage;
          usage_sum += usage.item();
          auto gap = ad::add_scalar(usage, static_cast<float>(-cfg.usage_target));
          loss = ad::add(loss, ad::scale(ad::square(gap), static_cast<float>(cfg.usage_weight)));
        }
        const double lval = loss.item();
        if (!std::isfinite(lval)) {
          throw DivergenceError("training diverged: non-finite loss at stage " + stage.name +
                                ", epoch " + std::to_string(epoch + 1));
        }
        loss_sum += lval;
        tape.backward(ad::scale(loss, inv));
      } catch (const NonFiniteError& e) {
        throw DivergenceError("training diverged: non-finite values at stage " + stage.name +
                              ", epoch " + std::to_string(epoch + 1) + " (" + e.what() + ")");
      }
      opt.step(schedule(stage.lr, step++, warmup, total));
    }
    if (log) {
      const double n = static_cast<double>(train.size());
      nlohmann::json entry = {{"stage", stage.name},
                              {"epoch", epoch + 1},
                              {"loss", loss_sum / n},
                              {"train_accuracy", correct / n}};
      if (regularised) entry["usage"] = usage_sum / n;
      log(entry);
    }
  }
  unbind_weights(bound, weights);
}

}  // namespace

ModelWeights train_backbone(const TrainConfig& config, const ModelConfig& model,
                            std::span<const LabeledImage> train, const TrainLogger& log) {
  config.validate();
  model.validate();
  auto weights = init_weights(model, config.seed);
  run_stage(config, {"backbone", config.epochs, config.lr, MechanismSettings{}}, weights, train, log, 1);
  return weights;
}

ModelWeights finetune_mechanism(const TrainConfig& config, const ModelWeights& base,
                                const MechanismSettings& mechanism,
                                std::span<const LabeledImage> train, const TrainLogger& log) {
  config.validate();
  mechanism.validate(base.config);
  ModelWeights weights = base;
  if (mechanism.kind != Mechanism::adavit && mechanism.kind != Mechanism::avit) return weights;
  run_stage(config,
            {std::string(mechanism_name(mechanism.kind)), config.finetune_epochs, config.finetune_lr,
             mechanism},
            weights, train, log, 2);
  return weights;
}

ModelWeights train_victim(const TrainConfig& config, const ModelConfig& model,
                          const MechanismSettings& mechanism, std::span<const LabeledImage> train,
                          const TrainLogger& log) {
  auto base = train_backbone(config, model, train, log);
  return finetune_mechanism(config, base, mechanism, train, log);
}

}  // namespace tslab
