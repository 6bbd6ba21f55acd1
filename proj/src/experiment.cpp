#include "tslab/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tslab/metrics.hpp"

namespace tslab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_problems(const std::vector<std::string>& problems) {
  std::string msg = "invalid experiment:";
  for (const auto& p : problems) msg += "\n  - " + p;
  return msg;
}

// Sub-validators throw "header:\n  - a\n  - b"; keep the bullet lines.
void absorb(std::vector<std::string>& problems, const std::string& prefix, const std::exception& e) {
  std::istringstream is(e.what());
  std::string line;
  bool any = false;
  while (std::getline(is, line)) {
    const auto pos = line.find("- ");
    if (line.rfind("  - ", 0) == 0 && pos != std::string::npos) {
      problems.push_back(prefix + line.substr(pos + 2));
      any = true;
    }
  }
  if (!any) problems.push_back(prefix + e.what());
}

void check_keys(const json& j, const std::set<std::string>& keys, const std::string& where,
                std::vector<std::string>& problems) {
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) problems.push_back("unknown key '" + where + k + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where,
          std::vector<std::string>& problems) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception&) {
    problems.push_back(where + key + " has the wrong type");
  }
}

std::string resolve(const std::string& base, const std::string& path) {
  if (path.empty() || base.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base) / path).lexically_normal().string();
}

fs::path seed_dir(const ExperimentConfig& c, std::uint64_t seed) {
  return fs::path(c.out) / ("seed-" + std::to_string(seed));
}

fs::path pert_path(const ExperimentConfig& c, std::uint64_t seed, const AttackSpec& a) {
  return seed_dir(c, seed) / (a.name + ".tspert");
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return json::parse(is);
}

struct Data {
  DatasetManifest manifest;
  std::vector<LabeledImage> train, holdout, test;
};

Data load_data(const ExperimentConfig& c, bool need_train, bool need_holdout) {
  Data d;
  d.manifest = load_manifest(c.dataset_dir);
  if (need_train) d.train = load_split(d.manifest, c.dataset_dir, Split::train);
  if (need_holdout) d.holdout = load_split(d.manifest, c.dataset_dir, Split::holdout);
  auto test = load_split(d.manifest, c.dataset_dir, Split::test);
  d.test = stratified_subset(test, c.test_images);
  if (d.test.empty()) throw std::runtime_error("dataset has no test images");
  return d;
}

struct LoadedVictim {
  const VictimSpec* spec;
  ModelWeights weights;
};

std::vector<LoadedVictim> load_victims(const ExperimentConfig& c) {
  std::vector<LoadedVictim> out;
  for (const auto& v : c.victims) out.push_back({&v, load_checkpoint(v.checkpoint)});
  return out;
}

const LoadedVictim& victim_for(const std::vector<LoadedVictim>& victims, Mechanism m) {
  for (const auto& v : victims) {
    if (v.spec->mechanism.kind == m) return v;
  }
  throw std::runtime_error("no victim for mechanism " + std::string(mechanism_name(m)));
}

bool targets(const AttackSpec& a, Mechanism m) {
  return std::find(a.config.mechanisms.begin(), a.config.mechanisms.end(), m) !=
         a.config.mechanisms.end();
}

AttackConfig seeded(const AttackConfig& config, std::uint64_t seed) {
  auto c = config;
  c.seed = seed;
  return c;
}

// Maps each test image to its perturbed version.
Adversary make_adversary(const std::vector<Perturbation>& perts, const ModelConfig& config) {
  auto table = std::make_shared<std::map<int, const Perturbation*>>();
  const Perturbation* shared = nullptr;
  for (const auto& p : perts) {
    if (p.variant == Variant::single && p.image_id >= 0) (*table)[p.image_id] = &p;
    else shared = &p;
  }
  return [table, shared, &config](const LabeledImage& item) {
    auto it = table->find(item.id);
    if (it != table->end()) return apply_perturbation(item.image, *it->second, config);
    if (!shared) {
      throw std::runtime_error("no perturbation for test image " + std::to_string(item.id) +
                               "; rerun attack with the current test subset");
    }
    return apply_perturbation(item.image, *shared, config);
  };
}

json row_json(const MetricsReport& rep, const MetricsReport* clean, const std::string& name,
              const std::string& method) {
  auto j = summary_json(rep, clean);
  j["name"] = name;
  j["method"] = method;
  return j;
}

}  // namespace

ValidationError::ValidationError(std::vector<std::string> problems)
    : std::invalid_argument(join_problems(problems)), problems_(std::move(problems)) {}

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::gen_data: return "gen-data";
    case Stage::train: return "train";
    case Stage::attack: return "attack";
    case Stage::evaluate: return "evaluate";
    case Stage::defend: return "defend";
    case Stage::report: return "report";
  }
  return "?";
}

json to_json(const ModelConfig& c) {
  return {{"depth", c.depth},           {"embed_dim", c.embed_dim},     {"heads", c.heads},
          {"image_size", c.image_size}, {"patch_size", c.patch_size},   {"channels", c.channels},
          {"num_classes", c.num_classes}, {"mlp_ratio", c.mlp_ratio}};
}

json to_json(const MechanismSettings& m) {
  return {{"kind", mechanism_name(m.kind)},
          {"ats_start_block", m.ats_start_block},
          {"adavit_start_block", m.adavit_start_block},
          {"avit_start_block", m.avit_start_block},
          {"avit_tau", m.avit_tau},
          {"gumbel_temperature", m.gumbel_temperature}};
}

json to_json(const ExperimentConfig& c) {
  json victims = json::array();
  for (const auto& v : c.victims) victims.push_back({{"mechanism", to_json(v.mechanism)}, {"checkpoint", v.checkpoint}});
  json attacks = json::array();
  for (const auto& a : c.attacks) {
    attacks.push_back({{"name", a.name}, {"method", a.method}, {"config", to_json(a.config)}});
  }
  json j = {{"dataset",
             {{"dir", c.dataset_dir},
              {"num_classes", c.dataset.num_classes},
              {"per_class", c.dataset.per_class},
              {"image_size", c.dataset.image_size},
              {"channels", c.dataset.channels},
              {"seed", c.dataset.seed},
              {"hard_fraction", c.dataset.hard_fraction}}},
            {"model", to_json(c.model)},
            {"train", to_json(c.train)},
            {"victims", victims},
            {"attacks", attacks},
            {"seeds", c.seeds},
            {"test_images", c.test_images},
            {"optimisation_images", c.optimisation_images},
            {"out", c.out}};
  if (c.defense) {
    j["defense"] = {{"policy", policy_name(c.defense->policy)},
                    {"holdout_images", c.defense->holdout_images}};
  }
  return j;
}

ExperimentConfig experiment_config_from_json(const json& j, const std::string& base_dir) {
  std::vector<std::string> problems;
  if (!j.is_object()) throw ValidationError({"experiment config must be a JSON object"});
  check_keys(j, {"dataset", "model", "train", "victims", "attacks", "defense", "seeds", "test_images",
                 "optimisation_images", "out"},
             "", problems);
  ExperimentConfig c;

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (!d.is_object()) {
      problems.push_back("dataset must be an object");
    } else {
      check_keys(d, {"dir", "num_classes", "per_class", "image_size", "channels", "seed", "hard_fraction"},
                 "dataset.", problems);
      read(d, "dir", c.dataset_dir, "dataset.", problems);
      read(d, "num_classes", c.dataset.num_classes, "dataset.", problems);
      read(d, "per_class", c.dataset.per_class, "dataset.", problems);
      read(d, "image_size", c.dataset.image_size, "dataset.", problems);
      read(d, "channels", c.dataset.channels, "dataset.", problems);
      read(d, "seed", c.dataset.seed, "dataset.", problems);
      read(d, "hard_fraction", c.dataset.hard_fraction, "dataset.", problems);
    }
  }
  if (c.dataset_dir.empty()) problems.push_back("dataset.dir is required");
  try {
    c.dataset.validate();
  } catch (const std::invalid_argument& e) {
    absorb(problems, "dataset: ", e);
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (!m.is_object()) {
      problems.push_back("model must be an object");
    } else {
      check_keys(m, {"depth", "embed_dim", "heads", "image_size", "patch_size", "channels", "num_classes",
                     "mlp_ratio"},
                 "model.", problems);
      read(m, "depth", c.model.depth, "model.", problems);
      read(m, "embed_dim", c.model.embed_dim, "model.", problems);
      read(m, "heads", c.model.heads, "model.", problems);
      read(m, "image_size", c.model.image_size, "model.", problems);
      read(m, "patch_size", c.model.patch_size, "model.", problems);
      read(m, "channels", c.model.channels, "model.", problems);
      read(m, "num_classes", c.model.num_classes, "model.", problems);
      read(m, "mlp_ratio", c.model.mlp_ratio, "model.", problems);
    }
  }
  bool model_ok = true;
  try {
    c.model.validate();
  } catch (const std::invalid_argument& e) {
    model_ok = false;
    absorb(problems, "model: ", e);
  }
  if (c.model.image_size != c.dataset.image_size || c.model.channels != c.dataset.channels ||
      c.model.num_classes != c.dataset.num_classes) {
    problems.push_back("model image_size/channels/num_classes must match the dataset");
  }

  if (j.contains("train")) {
    try {
      c.train = train_config_from_json(j.at("train"));
      c.train.validate();
    } catch (const std::invalid_argument& e) {
      absorb(problems, "", e);
    }
  }

  std::set<Mechanism> victim_kinds;
  if (j.contains("victims")) {
    const auto& vs = j.at("victims");
    if (!vs.is_array()) problems.push_back("victims must be an array");
    for (std::size_t i = 0; vs.is_array() && i < vs.size(); ++i) {
      const std::string where = "victims[" + std::to_string(i) + "].";
      const auto& v = vs[i];
      if (!v.is_object()) {
        problems.push_back(where + " must be an object");
        continue;
      }
      check_keys(v, {"mechanism", "checkpoint"}, where, problems);
      VictimSpec spec;
      read(v, "checkpoint", spec.checkpoint, where, problems);
      if (spec.checkpoint.empty()) problems.push_back(where + "checkpoint is required");
      spec.checkpoint = resolve(base_dir, spec.checkpoint);
      try {
        const auto& m = v.at("mechanism");
        if (m.is_string()) {
          spec.mechanism.kind = parse_mechanism(m.get<std::string>());
        } else {
          check_keys(m, {"kind", "ats_start_block", "adavit_start_block", "avit_start_block", "avit_tau",
                         "gumbel_temperature"},
                     where + "mechanism.", problems);
          spec.mechanism.kind = parse_mechanism(m.at("kind").get<std::string>());
          read(m, "ats_start_block", spec.mechanism.ats_start_block, where + "mechanism.", problems);
          read(m, "adavit_start_block", spec.mechanism.adavit_start_block, where + "mechanism.", problems);
          read(m, "avit_start_block", spec.mechanism.avit_start_block, where + "mechanism.", problems);
          read(m, "avit_tau", spec.mechanism.avit_tau, where + "mechanism.", problems);
          read(m, "gumbel_temperature", spec.mechanism.gumbel_temperature, where + "mechanism.", problems);
        }
        if (model_ok) spec.mechanism.validate(c.model);
      } catch (const json::exception&) {
        problems.push_back(where + "mechanism must be a name or an object with a kind");
        continue;
      } catch (const std::invalid_argument& e) {
        absorb(problems, where + "mechanism: ", e);
        continue;
      }
      if (!victim_kinds.insert(spec.mechanism.kind).second) {
        problems.push_back(where + "mechanism " + std::string(mechanism_name(spec.mechanism.kind)) +
                           " appears twice");
      }
      c.victims.push_back(spec);
    }
  }
  if (c.victims.empty()) problems.push_back("at least one victim is required");

  if (j.contains("attacks")) {
    const auto& as = j.at("attacks");
    if (!as.is_array()) problems.push_back("attacks must be an array");
    std::set<std::string> names;
    for (std::size_t i = 0; as.is_array() && i < as.size(); ++i) {
      const std::string where = "attacks[" + std::to_string(i) + "].";
      const auto& a = as[i];
      if (!a.is_object()) {
        problems.push_back(where + " must be an object");
        continue;
      }
      check_keys(a, {"name", "method", "config"}, where, problems);
      AttackSpec spec;
      read(a, "name", spec.name, where, problems);
      read(a, "method", spec.method, where, problems);
      if (spec.name.empty() || spec.name.find_first_of("/\\ ") != std::string::npos ||
          spec.name == "clean" || spec.name == "clean_wo") {
        problems.push_back(where + "name must be a non-empty file-safe word other than clean/clean_wo");
      } else if (!names.insert(spec.name).second) {
        problems.push_back(where + "name '" + spec.name + "' is not unique");
      }
      if (spec.method != "token_attack") {
        try {
          parse_baseline(spec.method);
        } catch (const std::invalid_argument&) {
          problems.push_back(where + "method must be token_attack, random, standard_pgd or sponge");
        }
      }
      try {
        if (a.contains("config")) spec.config = attack_config_from_json(a.at("config"));
        if (model_ok) spec.config.validate(c.model);
      } catch (const std::invalid_argument& e) {
        absorb(problems, where, e);
      }
      for (auto m : spec.config.mechanisms) {
        if (!victim_kinds.count(m)) {
          problems.push_back(where + "mechanism " + std::string(mechanism_name(m)) + " has no victim");
        }
      }
      c.attacks.push_back(spec);
    }
  }

  if (j.contains("defense") && !j.at("defense").is_null()) {
    const auto& d = j.at("defense");
    DefenseSpec spec;
    if (!d.is_object()) {
      problems.push_back("defense must be an object");
    } else {
      check_keys(d, {"policy", "holdout_images"}, "defense.", problems);
      std::string policy = "confidence";
      read(d, "policy", policy, "defense.", problems);
      try {
        spec.policy = parse_policy(policy);
      } catch (const std::invalid_argument&) {
        problems.push_back("defense.policy must be random or confidence");
      }
      read(d, "holdout_images", spec.holdout_images, "defense.", problems);
      if (spec.holdout_images < 0) problems.push_back("defense.holdout_images must be >= 0");
    }
    c.defense = spec;
  }

  read(j, "seeds", c.seeds, "", problems);
  if (c.seeds.empty()) problems.push_back("seeds must list at least one seed");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    problems.push_back("seeds must be distinct");
  }
  read(j, "test_images", c.test_images, "", problems);
  if (c.test_images < 1) problems.push_back("test_images must be >= 1");
  read(j, "optimisation_images", c.optimisation_images, "", problems);
  if (c.optimisation_images < 1) problems.push_back("optimisation_images must be >= 1");
  read(j, "out", c.out, "", problems);
  if (c.out.empty()) problems.push_back("out must not be empty");

  c.dataset_dir = resolve(base_dir, c.dataset_dir);
  c.out = resolve(base_dir, c.out);
  if (!problems.empty()) throw ValidationError(problems);
  return c;
}

void check_inputs(const ExperimentConfig& c, Stage stage) {
  std::vector<std::string> problems;
  if (stage == Stage::gen_data) return;
  const auto manifest = fs::path(c.dataset_dir) / "manifest.csv";
  if (stage != Stage::report) {
    if (!fs::exists(manifest)) {
      problems.push_back("dataset manifest not found: " + manifest.string());
    } else {
      try {
        const auto m = load_manifest(c.dataset_dir);
        if (m.image_size != c.model.image_size || m.channels != c.model.channels ||
            m.num_classes != c.model.num_classes) {
          problems.push_back("dataset at " + c.dataset_dir + " does not match the model geometry");
        }
      } catch (const std::exception& e) {
        problems.push_back(e.what());
      }
    }
  }
  if (stage == Stage::train) {
    for (const auto& v : c.victims) {
      const auto parent = fs::path(v.checkpoint).parent_path();
      if (!parent.empty() && fs::exists(parent) && !fs::is_directory(parent)) {
        problems.push_back("checkpoint directory is not a directory: " + parent.string());
      }
    }
  }
  if (stage == Stage::attack || stage == Stage::evaluate || stage == Stage::defend) {
    for (const auto& v : c.victims) {
      if (!fs::exists(v.checkpoint)) problems.push_back("checkpoint not found: " + v.checkpoint);
    }
  }
  if (stage == Stage::evaluate || stage == Stage::defend) {
    for (auto seed : c.seeds) {
      for (const auto& a : c.attacks) {
        const auto p = pert_path(c, seed, a);
        if (!fs::exists(p)) problems.push_back("perturbation not found: " + p.string());
      }
    }
  }
  if (stage == Stage::report) {
    for (auto seed : c.seeds) {
      const auto p = seed_dir(c, seed) / "summary.json";
      if (!fs::exists(p)) problems.push_back("summary not found: " + p.string());
    }
  }
  if (!problems.empty()) throw ValidationError(problems);
}

std::vector<LabeledImage> stratified_subset(std::span<const LabeledImage> images, int count) {
  std::map<int, std::vector<const LabeledImage*>> by_class;
  for (const auto& im : images) by_class[im.label].push_back(&im);
  for (auto& [label, v] : by_class) {
    std::sort(v.begin(), v.end(), [](auto* a, auto* b) { return a->id < b->id; });
  }
  std::vector<LabeledImage> out;
  const std::size_t want = std::min<std::size_t>(images.size(), static_cast<std::size_t>(std::max(0, count)));
  for (std::size_t round = 0; out.size() < want; ++round) {
    for (auto& [label, v] : by_class) {
      if (round < v.size() && out.size() < want) out.push_back(*v[round]);
    }
  }
  return out;
}

json stage_gen_data(const ExperimentConfig& c) {
  const auto m = gen_dataset(c.dataset, c.dataset_dir);
  std::map<std::string, int> counts;
  for (const auto& r : m.records) ++counts[std::string(split_name(r.split))];
  json summary = {{"stage", "gen-data"},
                  {"config", to_json(c)},
                  {"dir", c.dataset_dir},
                  {"records", m.records.size()},
                  {"splits", counts}};
  write_json(fs::path(c.dataset_dir) / "dataset.json", summary);
  return summary;
}

json stage_train(const ExperimentConfig& c) {
  const auto data = load_data(c, true, false);
  fs::create_directories(c.out);
  std::ofstream log_file(fs::path(c.out) / "train_log.jsonl");
  std::string current = "backbone";
  auto log = [&](const json& entry) {
    auto e = entry;
    e["victim"] = current;
    log_file << e.dump() << '\n';
    log_file.flush();
  };
  const auto backbone = train_backbone(c.train, c.model, data.train, log);
  json victims = json::array();
  for (const auto& v : c.victims) {
    current = std::string(mechanism_name(v.mechanism.kind));
    const auto weights = finetune_mechanism(c.train, backbone, v.mechanism, data.train, log);
    if (const auto parent = fs::path(v.checkpoint).parent_path(); !parent.empty()) {
      fs::create_directories(parent);
    }
    save_checkpoint(v.checkpoint, weights);
    const auto rep = evaluate_set(weights, v.mechanism, data.test);
    victims.push_back({{"mechanism", to_json(v.mechanism)},
                       {"checkpoint", v.checkpoint},
                       {"test_accuracy", rep.clean_accuracy},
                       {"clean_tur", rep.tur},
                       {"sparsifying", v.mechanism.kind == Mechanism::none || rep.tur < 0.95}});
  }
  json summary = {{"stage", "train"}, {"config", to_json(c)}, {"seed", c.train.seed}, {"victims", victims}};
  write_json(fs::path(c.out) / "train.json", summary);
  return summary;
}

json stage_attack(const ExperimentConfig& c) {
  const bool universal = std::any_of(c.attacks.begin(), c.attacks.end(), [](const AttackSpec& a) {
    return a.method == "token_attack" && a.config.variant != Variant::single;
  });
  const auto data = load_data(c, universal, false);
  const auto pool = stratified_subset(data.train, c.optimisation_images);
  const auto victims = load_victims(c);
  json runs = json::array();
  for (auto seed : c.seeds) {
    for (const auto& a : c.attacks) {
      const auto cfg = seeded(a.config, seed);
      std::vector<Victim> vs;
      for (auto m : cfg.mechanisms) {
        const auto& lv = victim_for(victims, m);
        vs.push_back({&lv.weights, lv.spec->mechanism});
      }
      std::vector<Perturbation> perts;
      if (a.method == "token_attack") {
        const bool single = cfg.variant == Variant::single;
        perts = run_attack(cfg, single ? std::span<const LabeledImage>(data.test)
                                       : std::span<const LabeledImage>(pool),
                           vs);
      } else {
        perts = run_baseline(parse_baseline(a.method), cfg, data.test, vs);
      }
      const auto path = pert_path(c, seed, a);
      fs::create_directories(path.parent_path());
      save_perturbations(path.string(), perts);
      runs.push_back({{"name", a.name}, {"seed", seed}, {"file", path.string()}, {"count", perts.size()}});
    }
  }
  json summary = {{"stage", "attack"}, {"config", to_json(c)}, {"seeds", c.seeds}, {"runs", runs}};
  write_json(fs::path(c.out) / "attack.json", summary);
  return summary;
}

json stage_evaluate(const ExperimentConfig& c) {
  const auto data = load_data(c, false, false);
  const auto victims = load_victims(c);
  json per_seed = json::array();
  for (auto seed : c.seeds) {
    const auto dir = seed_dir(c, seed);
    fs::create_directories(dir);
    std::ofstream csv(dir / "rows.csv");
    bool header = true;
    json rows = json::array();
    for (const auto& v : victims) {
      const auto& model = v.weights.config;
      const auto clean = evaluate_set(v.weights, v.spec->mechanism, data.test);
      MechanismSettings dense = v.spec->mechanism;
      dense.kind = Mechanism::none;
      EvalOptions wo;
      wo.variant = "clean_wo";
      auto vanilla = evaluate_set(v.weights, dense, data.test, {}, wo);
      vanilla.mechanism = clean.mechanism;
      write_rows_csv(csv, clean, header);
      write_rows_csv(csv, vanilla, false);
      header = false;
      rows.push_back(row_json(clean, nullptr, "clean", "none"));
      rows.push_back(row_json(vanilla, &clean, "clean_wo", "none"));
      for (const auto& a : c.attacks) {
        if (!targets(a, v.spec->mechanism.kind)) continue;
        const auto perts = load_perturbations(pert_path(c, seed, a).string());
        EvalOptions opt;
        opt.variant = a.name;
        const auto rep = evaluate_set(v.weights, v.spec->mechanism, data.test, make_adversary(perts, model), opt);
        write_rows_csv(csv, rep, false);
        rows.push_back(row_json(rep, &clean, a.name, a.method));
      }
    }
    json summary = {{"stage", "evaluate"}, {"config", to_json(c)}, {"seed", seed}, {"rows", rows}};
    write_json(dir / "summary.json", summary);
    per_seed.push_back(summary);
  }
  return {{"stage", "evaluate"}, {"seeds", c.seeds}, {"summaries", per_seed}};
}

json stage_defend(const ExperimentConfig& c) {
  const DefenseSpec spec = c.defense.value_or(DefenseSpec{});
  const auto data = load_data(c, false, true);
  const auto holdout = spec.holdout_images > 0 ? stratified_subset(data.holdout, spec.holdout_images)
                                               : data.holdout;
  if (holdout.empty()) throw std::runtime_error("dataset has no holdout images for calibration");
  std::vector<Tensor<float>> holdout_images;
  for (const auto& h : holdout) holdout_images.push_back(h.image);
  const auto victims = load_victims(c);
  json per_seed = json::array();
  for (auto seed : c.seeds) {
    const auto dir = seed_dir(c, seed);
    fs::create_directories(dir);
    std::ofstream csv(dir / "defense_rows.csv");
    bool header = true;
    json entries = json::array();
    for (const auto& v : victims) {
      if (v.spec->mechanism.kind == Mechanism::none) continue;
      const auto caps = calibrate_caps(v.weights, v.spec->mechanism, holdout_images, spec.policy, seed);
      const auto& model = v.weights.config;
      const auto clean = evaluate_set(v.weights, v.spec->mechanism, data.test);
      EvalOptions opt;
      opt.defense = &caps;
      opt.variant = "defended_clean";
      const auto defended_clean = evaluate_set(v.weights, v.spec->mechanism, data.test, {}, opt);
      write_rows_csv(csv, defended_clean, header);
      header = false;
      int violations = 0;
      auto count_violations = [&](const MetricsReport& rep) {
        for (const auto& r : rep.rows) {
          for (std::size_t l = 0; l < r.per_block_active.size(); ++l) {
            violations += r.per_block_active[l] - 1 > caps.caps[l];
          }
        }
      };
      count_violations(defended_clean);
      json rows = json::array();
      rows.push_back(row_json(clean, nullptr, "clean", "none"));
      rows.push_back(row_json(defended_clean, &clean, "defended_clean", "none"));
      for (const auto& a : c.attacks) {
        if (!targets(a, v.spec->mechanism.kind)) continue;
        const auto perts = load_perturbations(pert_path(c, seed, a).string());
        EvalOptions aopt;
        aopt.defense = &caps;
        aopt.variant = "defended_" + a.name;
        const auto rep = evaluate_set(v.weights, v.spec->mechanism, data.test, make_adversary(perts, model), aopt);
        write_rows_csv(csv, rep, false);
        count_violations(rep);
        rows.push_back(row_json(rep, &clean, aopt.variant, a.method));
      }
      entries.push_back({{"mechanism", std::string(mechanism_name(v.spec->mechanism.kind))},
                         {"policy", policy_name(caps.policy)},
                         {"holdout_size", caps.holdout_size},
                         {"caps", caps.caps},
                         {"cap_violations", violations},
                         {"clean_accuracy", clean.clean_accuracy},
                         {"defended_clean_accuracy", defended_clean.accuracy},
                         {"rows", rows}});
    }
    json summary = {{"stage", "defend"}, {"config", to_json(c)}, {"seed", seed}, {"victims", entries}};
    write_json(dir / "defense.json", summary);
    per_seed.push_back(summary);
  }
  return {{"stage", "defend"}, {"seeds", c.seeds}, {"summaries", per_seed}};
}

json stage_report(const ExperimentConfig& c) {
  static const char* fields[] = {"tur",      "tur_percent",       "gflops",   "flops_percent",
                                 "accuracy", "preservation_rate", "delta_tur", "delta_flops_percent"};
  // (mechanism, name) -> per-seed rows, in first-seen order.
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<json>> cells;
  auto collect = [&](const json& rows, std::uint64_t seed) {
    for (auto row : rows) {
      const std::pair<std::string, std::string> key{row.at("mechanism").get<std::string>(),
                                                    row.at("name").get<std::string>()};
      if (!cells.count(key)) order.push_back(key);
      row["seed"] = seed;
      cells[key].push_back(row);
    }
  };
  json defense = json::array();
  for (auto seed : c.seeds) {
    const auto dir = seed_dir(c, seed);
    collect(read_json(dir / "summary.json").at("rows"), seed);
    if (fs::exists(dir / "defense.json")) {
      const auto d = read_json(dir / "defense.json");
      for (const auto& v : d.at("victims")) {
        json rows = v.at("rows");
        json kept = json::array();
        for (const auto& r : rows) {
          if (r.at("name").get<std::string>() != "clean") kept.push_back(r);
        }
        collect(kept, seed);
        defense.push_back({{"seed", seed},
                           {"mechanism", v.at("mechanism")},
                           {"caps", v.at("caps")},
                           {"cap_violations", v.at("cap_violations")}});
      }
    }
  }
  json rows = json::array();
  for (const auto& key : order) {
    const auto& per = cells.at(key);
    json mean = json::object();
    for (const char* f : fields) {
      double sum = 0;
      int n = 0;
      for (const auto& r : per) {
        if (r.contains(f)) {
          sum += r.at(f).get<double>();
          ++n;
        }
      }
      if (n > 0) mean[f] = sum / n;
    }
    rows.push_back({{"mechanism", key.first},
                    {"name", key.second},
                    {"method", per.front().value("method", "none")},
                    {"mean", mean},
                    {"per_seed", per}});
  }
  json report = {{"stage", "report"}, {"config", to_json(c)}, {"seeds", c.seeds}, {"rows", rows}};
  if (!defense.empty()) report["defense"] = defense;
  write_json(fs::path(c.out) / "report.json", report);
  return report;
}

json run_stage(const ExperimentConfig& c, Stage stage) {
  check_inputs(c, stage);
  switch (stage) {
    case Stage::gen_data: return stage_gen_data(c);
    case Stage::train: return stage_train(c);
    case Stage::attack: return stage_attack(c);
    case Stage::evaluate: return stage_evaluate(c);
    case Stage::defend: return stage_defend(c);
    case Stage::report: return stage_report(c);
  }
  return {};
}

}  // namespace tslab
