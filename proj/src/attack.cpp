#include "tslab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "tslab/forward.hpp"
#include "tslab/losses.hpp"

namespace tslab {

using ad::Tape;
using ad::Var;

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::single: return "single";
    case Variant::class_universal: return "class_universal";
    case Variant::universal: return "universal";
    case Variant::universal_patch: return "universal_patch";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (auto v : {Variant::single, Variant::class_universal, Variant::universal,
                 Variant::universal_patch}) {
    if (name == variant_name(v)) return v;
  }
  throw std::invalid_argument("unknown attack variant '" + std::string(name) + "'");
}

std::string_view baseline_name(BaselineKind b) {
  switch (b) {
    case BaselineKind::random: return "random";
    case BaselineKind::standard_pgd: return "standard_pgd";
    case BaselineKind::sponge: return "sponge";
  }
  return "unknown";
}

BaselineKind parse_baseline(std::string_view name) {
  for (auto b : {BaselineKind::random, BaselineKind::standard_pgd, BaselineKind::sponge}) {
    if (name == baseline_name(b)) return b;
  }
  throw std::invalid_argument("unknown baseline '" + std::string(name) + "'");
}

void AttackConfig::validate(const ModelConfig& config) const {
  std::vector<std::string> problems;
  if (!(epsilon > 0 && epsilon <= 1)) problems.push_back("epsilon must be in (0, 1]");
  if (!(lambda >= 0) || !std::isfinite(lambda)) problems.push_back("lambda must be >= 0");
  if (iterations < 0) problems.push_back("iterations must be >= 0");
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (!(patch_step > 0)) problems.push_back("patch_step must be > 0");
  if (mechanisms.empty()) problems.push_back("at least one mechanism is required");
  std::set<Mechanism> seen;
  for (auto m : mechanisms) {
    if (m == Mechanism::none) problems.push_back("the vanilla model cannot be attacked");
    if (!seen.insert(m).second) {
      problems.push_back("mechanism '" + std::string(mechanism_name(m)) + "' listed twice");
    }
  }
  if (variant == Variant::class_universal &&
      (target_class < 0 || target_class >= config.num_classes)) {
    problems.push_back("class_universal needs target_class in [0, " +
                       std::to_string(config.num_classes) + ")");
  }
  if (variant == Variant::universal_patch) {
    if (patch.size < 1) problems.push_back("patch.size must be >= 1");
    if (patch.x < 0 || patch.y < 0 || patch.x + patch.size > config.image_size ||
        patch.y + patch.size > config.image_size) {
      problems.push_back("patch does not fit inside the " + std::to_string(config.image_size) +
                         "x" + std::to_string(config.image_size) + " image");
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid attack config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
}

nlohmann::json to_json(const AttackConfig& c) {
  nlohmann::json mechs = nlohmann::json::array();
  for (auto m : c.mechanisms) mechs.push_back(std::string(mechanism_name(m)));
  return {{"epsilon", c.epsilon},
          {"iterations", c.iterations},
          {"lambda", c.lambda},
          {"variant", std::string(variant_name(c.variant))},
          {"target_class", c.target_class},
          {"patch", {{"size", c.patch.size}, {"x", c.patch.x}, {"y", c.patch.y}}},
          {"mechanisms", mechs},
          {"seed", c.seed},
          {"random_init", c.random_init},
          {"batch_size", c.batch_size},
          {"patch_step", c.patch_step},
          {"precision", c.precision == Precision::f64 ? "float64" : "float32"}};
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("attack config must be a JSON object");
  static const std::set<std::string> keys = {
      "epsilon", "iterations", "lambda", "variant", "target_class", "patch", "mechanisms",
      "seed", "random_init", "batch_size", "patch_step", "precision"};
  std::vector<std::string> problems;
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) problems.push_back("unknown key 'attack." + k + "'");
  }
  AttackConfig c;
  auto get = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
      problems.push_back("attack." + std::string(key) + " has the wrong type");
    }
  };
  get("epsilon", c.epsilon);
  get("iterations", c.iterations);
  get("lambda", c.lambda);
  get("target_class", c.target_class);
  get("seed", c.seed);
  get("random_init", c.random_init);
  get("batch_size", c.batch_size);
  get("patch_step", c.patch_step);
  try {
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("precision")) {
      const auto p = j.at("precision").get<std::string>();
      if (p == "float32") c.precision = Precision::f32;
      else if (p == "float64") c.precision = Precision::f64;
      else problems.push_back("attack.precision must be float32 or float64");
    }
    if (j.contains("mechanisms")) {
      c.mechanisms.clear();
      for (const auto& m : j.at("mechanisms")) c.mechanisms.push_back(parse_mechanism(m.get<std::string>()));
    }
    if (j.contains("patch")) {
      const auto& p = j.at("patch");
      for (const auto& [k, v] : p.items()) {
        if (k != "size" && k != "x" && k != "y") problems.push_back("unknown key 'attack.patch." + k + "'");
      }
      if (p.contains("size")) c.patch.size = p.at("size").get<int>();
      if (p.contains("x")) c.patch.x = p.at("x").get<int>();
      if (p.contains("y")) c.patch.y = p.at("y").get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    problems.push_back(std::string("attack config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    problems.push_back(e.what());
  }
  if (!problems.empty()) {
    std::string msg = "invalid attack config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
  return c;
}

double cosine_step(double alpha0, int t, int iterations) {
  return alpha0 * (1.0 + std::cos(std::numbers::pi * t / iterations)) / 2.0;
}

template <typename T>
void project(Tensor<T>& delta, T eps, const Tensor<T>& x) {
  if (delta.size() != x.size()) throw ShapeError("project: delta and image differ in size");
  for (std::size_t i = 0; i < delta.size(); ++i) {
    T d = std::clamp(delta.data[i], -eps, eps);
    delta.data[i] = std::clamp(d, -x.data[i], T(1) - x.data[i]);
  }
}

template <typename T>
Tensor<T> pgd_step(const Tensor<T>& delta, std::span<const T> grad, T alpha, T eps,
                   const Tensor<T>& x) {
  if (grad.size() != delta.size()) throw ShapeError("pgd_step: gradient and delta differ in size");
  Tensor<T> out = delta;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T s = grad[i] > T(0) ? T(1) : grad[i] < T(0) ? T(-1) : T(0);
    out.data[i] -= alpha * s;
  }
  project(out, eps, x);
  return out;
}

template void project(Tensor<float>&, float, const Tensor<float>&);
template void project(Tensor<double>&, double, const Tensor<double>&);
template Tensor<float> pgd_step(const Tensor<float>&, std::span<const float>, float, float,
                                const Tensor<float>&);
template Tensor<double> pgd_step(const Tensor<double>&, std::span<const double>, double, double,
                                 const Tensor<double>&);

namespace {

// Image pixel -> patch element (or -1 outside the patch).
std::vector<std::int64_t> patch_scatter_map(const ModelConfig& c, const PatchSpec& p) {
  const int S = c.image_size;
  std::vector<std::int64_t> idx(c.image_numel(), -1);
  for (int ch = 0; ch < c.channels; ++ch)
    for (int y = 0; y < p.size; ++y)
      for (int x = 0; x < p.size; ++x) {
        const std::size_t pixel = (static_cast<std::size_t>(ch) * S + (p.y + y)) * S + (p.x + x);
        idx[pixel] = (static_cast<std::int64_t>(ch) * p.size + y) * p.size + x;
      }
  return idx;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(salt)};
  std::uint32_t w[2];
  seq.generate(w, w + 2);
  return (static_cast<std::uint64_t>(w[0]) << 32) | w[1];
}

template <typename T>
Tensor<T> convert(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return Tensor<T>(t.shape, std::vector<T>(t.data.begin(), t.data.end()));
  }
}

template <typename T>
Tensor<float> to_float(const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return Tensor<float>(t.shape, std::vector<float>(t.data.begin(), t.data.end()));
  }
}

enum class Objective { sparsity, task_ce, sponge };

// Victims bound once onto a shared tape; every evaluation truncates back to
// the mark.
template <typename T>
class Engine {
 public:
  Engine(const AttackConfig& cfg, std::span<const Victim> victims) : cfg_(cfg) {
    if (victims.empty() || !victims.front().weights) {
      throw std::invalid_argument("attack: no victim model");
    }
    config_ = victims.front().weights->config;
    cfg.validate(config_);
    for (auto m : cfg.mechanisms) {
      const Victim* found = nullptr;
      for (const auto& v : victims)
        if (v.mechanism.kind == m && v.weights) found = &v;
      if (!found) {
        throw std::invalid_argument("attack: mechanism '" + std::string(mechanism_name(m)) +
                                    "' is unavailable (no victim given)");
      }
      if (!(found->weights->config == config_)) {
        throw std::invalid_argument("attack: victims disagree on model geometry");
      }
      bound_.push_back(bind_weights(tape_, *found->weights, false));
      mech_.push_back(found->mechanism);
    }
    mark_ = tape_.size();
    if (cfg.variant == Variant::universal_patch) {
      scatter_ = patch_scatter_map(config_, cfg.patch);
      keep_ = Tensor<T>({config_.image_numel()});
      for (std::size_t i = 0; i < scatter_.size(); ++i) keep_.data[i] = scatter_[i] < 0 ? T(1) : T(0);
    }
  }

  int victims() const { return static_cast<int>(bound_.size()); }
  const ModelConfig& config() const { return config_; }

  Tensor<T> clean_logits(int v, const Tensor<T>& x) {
    tape_.truncate(mark_);
    auto r = model_forward(bound_[v], tape_.constant(x), mech_[v]);
    return r.logits.value();
  }

  // Returns the reported objective and accumulates d(loss)/d(delta) into `grad`.
  double accumulate(int v, const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& clean,
                    Objective obj, int label, std::vector<T>& grad) {
    tape_.truncate(mark_);
    auto dv = tape_.leaf(delta, true);
    Var<T> image, offset;
    if (cfg_.variant == Variant::universal_patch && obj == Objective::sparsity) {
      Tensor<T> masked = x;
      for (std::size_t i = 0; i < masked.size(); ++i) masked.data[i] *= keep_.data[i];
      image = tape_.constant(std::move(masked));
      offset = ad::gather_elements<T>(dv, scatter_, x.shape);
    } else {
      image = tape_.constant(x);
      offset = dv;
    }
    Var<T> loss;
    double reported = 0;
    switch (obj) {
      case Objective::sparsity: {
        auto lt = loss_total(bound_[v], image, offset, mech_[v], clean, static_cast<T>(cfg_.lambda));
        loss = lt.loss;
        reported = static_cast<double>(loss.item());
        break;
      }
      case Objective::task_ce: {
        auto r = model_forward(bound_[v], ad::add(image, offset), mech_[v]);
        const int col[] = {label};
        auto logp = ad::gather_cols<T>(ad::log_softmax(r.logits), col);
        loss = logp;  // minimising log p(label) ascends the cross-entropy
        reported = -static_cast<double>(logp.item());
        break;
      }
      case Objective::sponge: {
        ForwardOptions fo;
        fo.record_activations = true;
        auto r = model_forward(bound_[v], ad::add(image, offset), mech_[v], fo);
        Var<T> energy;
        for (const auto& a : r.activations) {
          auto e = ad::sum(ad::square(a));
          energy = energy.defined() ? ad::add(energy, e) : e;
        }
        loss = ad::scale(energy, T(-1));
        reported = static_cast<double>(energy.item());
        break;
      }
    }
    tape_.backward(loss);
    const auto g = dv.grad();
    if (grad.empty()) grad.assign(g.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    return reported;
  }

 private:
  const AttackConfig& cfg_;
  ModelConfig config_;
  Tape<T> tape_;
  std::vector<BoundWeights<T>> bound_;
  std::vector<MechanismSettings> mech_;
  std::size_t mark_ = 0;
  std::vector<std::int64_t> scatter_;
  Tensor<T> keep_;
};

std::string mechanism_list(const AttackConfig& c) {
  std::string s;
  for (auto m : c.mechanisms) s += (s.empty() ? "" : "+") + std::string(mechanism_name(m));
  return s;
}

template <typename T>
Tensor<T> initial_delta(const AttackConfig& cfg, const Tensor<T>& x, std::mt19937_64& rng) {
  Tensor<T> delta(x.shape);
  if (cfg.random_init) {
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    for (auto& d : delta.data) d = static_cast<T>(u(rng));
    project(delta, static_cast<T>(cfg.epsilon), x);
  }
  return delta;
}

// Per-image PGD shared by the single-image attack and the optimised baselines.
template <typename T>
Perturbation optimise_single(Engine<T>& engine, const AttackConfig& cfg, const LabeledImage& item,
                             Objective obj, std::string method) {
  const auto x = convert<T>(item.image);
  std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(item.id), 1));
  Tensor<T> delta = initial_delta(cfg, x, rng);
  const int V = obj == Objective::sparsity ? engine.victims() : 1;
  std::vector<Tensor<T>> clean(static_cast<std::size_t>(V));
  if (obj == Objective::sparsity) {
    for (int v = 0; v < V; ++v) clean[v] = engine.clean_logits(v, x);
  }
  Perturbation p;
  p.variant = Variant::single;
  p.config = cfg;
  p.method = std::move(method);
  p.image_id = item.id;
  p.selector = "image " + std::to_string(item.id);
  std::uniform_int_distribution<int> pick(0, V - 1);
  const T eps = static_cast<T>(cfg.epsilon);
  std::vector<T> grad;
  for (int t = 0; t < cfg.iterations; ++t) {
    const int v = V > 1 ? pick(rng) : 0;
    grad.clear();
    p.curve.push_back(engine.accumulate(v, x, delta, clean[v], obj, item.label, grad));
    const T alpha = static_cast<T>(cosine_step(cfg.epsilon / 10.0, t, cfg.iterations));
    delta = pgd_step<T>(delta, grad, alpha, eps, x);
  }
  p.delta = to_float(delta);
  return p;
}

template <typename T>
Perturbation optimise_universal(Engine<T>& engine, const AttackConfig& cfg,
                                std::span<const LabeledImage> data) {
  const auto& mc = engine.config();
  const bool is_patch = cfg.variant == Variant::universal_patch;
  std::vector<const LabeledImage*> set;
  for (const auto& item : data) {
    if (cfg.variant != Variant::class_universal || item.label == cfg.target_class) set.push_back(&item);
  }
  if (set.empty()) throw std::invalid_argument("attack: the optimisation set D' is empty");

  std::vector<Tensor<T>> xs;
  std::vector<std::vector<Tensor<T>>> clean;
  for (const auto* item : set) {
    xs.push_back(convert<T>(item->image));
    std::vector<Tensor<T>> per_victim;
    for (int v = 0; v < engine.victims(); ++v) per_victim.push_back(engine.clean_logits(v, xs.back()));
    clean.push_back(std::move(per_victim));
  }

  std::mt19937_64 rng(mix_seed(cfg.seed, 0, 2));
  Tensor<T> delta;
  if (is_patch) {
    const auto s = static_cast<std::size_t>(cfg.patch.size);
    delta = Tensor<T>({static_cast<std::size_t>(mc.channels), s, s});
    std::fill(delta.data.begin(), delta.data.end(), T(0.5));
  } else {
    delta = Tensor<T>({static_cast<std::size_t>(mc.channels), static_cast<std::size_t>(mc.image_size),
                       static_cast<std::size_t>(mc.image_size)});
    if (cfg.random_init) {
      std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
      for (auto& d : delta.data) d = static_cast<T>(u(rng));
    }
  }

  Perturbation p;
  p.variant = cfg.variant;
  p.config = cfg;
  p.selector = cfg.variant == Variant::class_universal
                   ? std::to_string(set.size()) + " images of class " + std::to_string(cfg.target_class)
                   : std::to_string(set.size()) + " images";
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::uniform_int_distribution<int> pick(0, engine.victims() - 1);
  const T eps = static_cast<T>(cfg.epsilon);
  const double alpha0 = is_patch ? cfg.patch_step : cfg.epsilon / 10.0;
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), set.size());
  std::vector<T> grad;
  for (int t = 0; t < cfg.iterations; ++t) {
    const int v = engine.victims() > 1 ? pick(rng) : 0;
    grad.clear();
    double total = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      Tensor<T> offset = delta;
      if (!is_patch) {
        // Per-image pixel validity, as when the perturbation is applied.
        for (std::size_t k = 0; k < offset.size(); ++k) {
          offset.data[k] = std::clamp(offset.data[k], -xs[i].data[k], T(1) - xs[i].data[k]);
        }
      }
      total += engine.accumulate(v, xs[i], offset, clean[i][v], Objective::sparsity,
                                 set[i]->label, grad);
    }
    p.curve.push_back(total / static_cast<double>(batch));
    const T alpha = static_cast<T>(cosine_step(alpha0, t, cfg.iterations));
    for (std::size_t k = 0; k < delta.size(); ++k) {
      const T s = grad[k] > T(0) ? T(1) : grad[k] < T(0) ? T(-1) : T(0);
      const T next = delta.data[k] - alpha * s;
      delta.data[k] = is_patch ? std::clamp(next, T(0), T(1)) : std::clamp(next, -eps, eps);
    }
  }
  p.delta = to_float(delta);
  return p;
}

template <typename T>
std::vector<Perturbation> run_attack_t(const AttackConfig& cfg, std::span<const LabeledImage> data,
                                       std::span<const Victim> victims) {
  Engine<T> engine(cfg, victims);
  if (data.empty()) throw std::invalid_argument("attack: the optimisation set D' is empty");
  std::vector<Perturbation> out;
  if (cfg.variant == Variant::single) {
    for (const auto& item : data) {
      out.push_back(optimise_single(engine, cfg, item, Objective::sparsity, "token_attack"));
      out.back().selector += " (" + mechanism_list(cfg) + ")";
    }
  } else {
    out.push_back(optimise_universal(engine, cfg, data));
    out.back().selector += " (" + mechanism_list(cfg) + ")";
  }
  return out;
}

template <typename T>
std::vector<Perturbation> run_baseline_t(BaselineKind kind, const AttackConfig& cfg,
                                         std::span<const LabeledImage> data,
                                         std::span<const Victim> victims) {
  AttackConfig single = cfg;
  single.variant = Variant::single;
  single.mechanisms.resize(1);
  Engine<T> engine(single, victims);
  if (data.empty()) throw std::invalid_argument("baseline: empty dataset");
  std::vector<Perturbation> out;
  for (const auto& item : data) {
    if (kind == BaselineKind::random) {
      const auto x = convert<T>(item.image);
      std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(item.id), 3));
      std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
      Tensor<T> delta(x.shape);
      for (auto& d : delta.data) d = static_cast<T>(u(rng));
      project(delta, static_cast<T>(cfg.epsilon), x);
      Perturbation p;
      p.config = single;
      p.method = "random";
      p.image_id = item.id;
      p.selector = "image " + std::to_string(item.id);
      p.delta = to_float(delta);
      out.push_back(std::move(p));
    } else {
      const auto obj = kind == BaselineKind::sponge ? Objective::sponge : Objective::task_ce;
      out.push_back(optimise_single(engine, single, item, obj, std::string(baseline_name(kind))));
    }
  }
  return out;
}

}  // namespace

std::vector<Perturbation> run_attack(const AttackConfig& config, std::span<const LabeledImage> data,
                                     std::span<const Victim> victims) {
  return config.precision == Precision::f64 ? run_attack_t<double>(config, data, victims)
                                            : run_attack_t<float>(config, data, victims);
}

std::vector<Perturbation> run_baseline(BaselineKind kind, const AttackConfig& config,
                                       std::span<const LabeledImage> data,
                                       std::span<const Victim> victims) {
  return config.precision == Precision::f64 ? run_baseline_t<double>(kind, config, data, victims)
                                            : run_baseline_t<float>(kind, config, data, victims);
}

Tensor<float> apply_perturbation(const Tensor<float>& image, const Perturbation& p,
                                 const ModelConfig& config) {
  if (image.size() != config.image_numel()) throw ShapeError("apply_perturbation: image size mismatch");
  Tensor<float> out = image;
  if (p.variant == Variant::universal_patch) {
    const auto idx = patch_scatter_map(config, p.config.patch);
    if (p.delta.size() != static_cast<std::size_t>(config.channels) * p.config.patch.size * p.config.patch.size) {
      throw ShapeError("apply_perturbation: patch size mismatch");
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (idx[i] >= 0) out.data[i] = p.delta.data[static_cast<std::size_t>(idx[i])];
    }
  } else {
    if (p.delta.size() != image.size()) throw ShapeError("apply_perturbation: delta size mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += p.delta.data[i];
  }
  for (auto& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

// ---- files -----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'T', 'S', 'P', 'E', 'R', 'T', '0', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error(path + ": truncated perturbation file");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_perturbations(const std::string& path, std::span<const Perturbation> items) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(items.size()));
  for (const auto& p : items) {
    nlohmann::json mechs = nlohmann::json::array();
    for (auto m : p.config.mechanisms) mechs.push_back(std::string(mechanism_name(m)));
    const nlohmann::json header = {{"variant", std::string(variant_name(p.variant))},
                                   {"method", p.method},
                                   {"epsilon", p.config.epsilon},
                                   {"lambda", p.config.lambda},
                                   {"iterations", p.config.iterations},
                                   {"seed", p.config.seed},
                                   {"mechanisms", mechs},
                                   {"image_id", p.image_id},
                                   {"selector", p.selector},
                                   {"curve", p.curve},
                                   {"config", to_json(p.config)}};
    const auto text = header.dump();
    put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    put_u32(os, static_cast<std::uint32_t>(p.delta.rank()));
    for (auto d : p.delta.shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : p.delta.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<Perturbation> load_perturbations(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open perturbation file '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::runtime_error(path + ": not a perturbation file (bad magic)");
  }
  if (get_u32(is, path) != kVersion) throw std::runtime_error(path + ": unsupported version");
  const auto count = get_u32(is, path);
  std::vector<Perturbation> out;
  for (std::uint32_t n = 0; n < count; ++n) {
    const auto len = get_u32(is, path);
    if (len > (1u << 26)) throw std::runtime_error(path + ": header too large");
    std::string text(len, '\0');
    is.read(text.data(), len);
    if (!is) throw std::runtime_error(path + ": truncated header");
    Perturbation p;
    try {
      const auto h = nlohmann::json::parse(text);
      p.config = attack_config_from_json(h.at("config"));
      p.variant = parse_variant(h.at("variant").get<std::string>());
      p.method = h.at("method").get<std::string>();
      p.image_id = h.at("image_id").get<int>();
      p.selector = h.at("selector").get<std::string>();
      p.curve = h.at("curve").get<std::vector<double>>();
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ": bad header: " + e.what());
    }
    const auto rank = get_u32(is, path);
    if (rank > 4) throw std::runtime_error(path + ": bad tensor rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get_u32(is, path));
    Tensor<float> delta(shape);
    for (auto& v : delta.data) {
      const auto bits = get_u32(is, path);
      std::memcpy(&v, &bits, 4);
    }
    p.delta = std::move(delta);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace tslab
