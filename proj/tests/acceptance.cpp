// End-to-end acceptance suite: trains (or reloads) the toy victims, runs the
// attack matrix and prints one PASS/FAIL line per criterion. Exits nonzero
// when any criterion fails.
//
// Victim checkpoints are cached in TSLAB_ACCEPTANCE_CACHE (a build directory
// by default); everything else is recomputed on every run.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "fd_check.hpp"
#include "tslab/attack.hpp"
#include "tslab/defense.hpp"
#include "tslab/experiment.hpp"
#include "tslab/losses.hpp"
#include "tslab/metrics.hpp"
#include "tslab/train.hpp"

using namespace tslab;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr int kTestImages = 200;
constexpr int kOptimisationImages = 280;
constexpr std::uint64_t kDatasetSeed = 7;
const Mechanism kMechanisms[] = {Mechanism::ats, Mechanism::adavit, Mechanism::avit};

struct Outcome {
  int id;
  std::string title;
  bool pass;
  std::string detail;
  double seconds;
};

std::vector<Outcome> outcomes;

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

void record(int id, std::string title, bool pass, std::string detail, Clock::time_point start) {
  const double s = std::chrono::duration<double>(Clock::now() - start).count();
  outcomes.push_back({id, std::move(title), pass, std::move(detail), s});
  std::cout << "  [criterion " << id << " done in " << fmt("%.0f", s) << " s]" << std::endl;
}

void info(const std::string& line) { std::cout << "INFO " << line << std::endl; }

struct Data {
  std::vector<LabeledImage> train, holdout, test, opt;
};

Data make_data() {
  DatasetSpec spec;
  spec.seed = kDatasetSeed;
  Data d;
  for (auto& [img, split] : synthesize(spec)) {
    (split == Split::train ? d.train : split == Split::holdout ? d.holdout : d.test).push_back(std::move(img));
  }
  d.opt = stratified_subset(d.train, kOptimisationImages);
  d.test = stratified_subset(d.test, kTestImages);
  return d;
}

struct Victims {
  ModelWeights backbone, adavit, avit;
  const ModelWeights& of(Mechanism m) const {
    return m == Mechanism::adavit ? adavit : m == Mechanism::avit ? avit : backbone;
  }
};

Victims load_or_train(const Data& data) {
  const fs::path cache = TSLAB_ACCEPTANCE_CACHE;
  fs::create_directories(cache);
  const TrainConfig tc;
  const ModelConfig mc;
  const nlohmann::json stamp = {{"train", to_json(tc)}, {"model", to_json(mc)}, {"dataset_seed", kDatasetSeed}};
  const auto stamp_path = cache / "stamp.json";
  bool fresh = fs::exists(stamp_path) && fs::exists(cache / "backbone.ckpt") && fs::exists(cache / "adavit.ckpt") &&
               fs::exists(cache / "avit.ckpt");
  if (fresh) {
    std::ifstream is(stamp_path);
    fresh = nlohmann::json::parse(is, nullptr, false) == stamp;
  }
  Victims v;
  if (fresh) {
    info("loading cached victims from " + cache.string());
    v.backbone = load_checkpoint((cache / "backbone.ckpt").string());
    v.adavit = load_checkpoint((cache / "adavit.ckpt").string());
    v.avit = load_checkpoint((cache / "avit.ckpt").string());
    return v;
  }
  info("training victims (cached afterwards in " + cache.string() + ")");
  TrainLogger log = [](const nlohmann::json& j) { std::cout << "  train " << j.dump() << std::endl; };
  v.backbone = train_backbone(tc, mc, data.train, log);
  MechanismSettings ms;
  ms.kind = Mechanism::adavit;
  v.adavit = finetune_mechanism(tc, v.backbone, ms, data.train, log);
  ms.kind = Mechanism::avit;
  v.avit = finetune_mechanism(tc, v.backbone, ms, data.train, log);
  save_checkpoint((cache / "backbone.ckpt").string(), v.backbone);
  save_checkpoint((cache / "adavit.ckpt").string(), v.adavit);
  save_checkpoint((cache / "avit.ckpt").string(), v.avit);
  std::ofstream(stamp_path) << stamp.dump(2);
  return v;
}

MechanismSettings settings(Mechanism m) {
  MechanismSettings s;
  s.kind = m;
  return s;
}

// Perturbations keyed by image id (single-image kinds) or one shared entry.
struct Attack {
  std::vector<Perturbation> items;
  std::map<int, const Perturbation*> by_id;
  bool shared = false;

  void index() {
    by_id.clear();
    for (const auto& p : items) by_id[p.image_id] = &p;
  }
  Adversary adversary(const ModelConfig& c) const {
    return [this, c](const LabeledImage& item) {
      return apply_perturbation(item.image, shared ? items.front() : *by_id.at(item.id), c);
    };
  }
};

Attack make_attack(std::vector<Perturbation> ps, bool shared) {
  Attack a;
  a.items = std::move(ps);
  a.shared = shared;
  a.index();
  return a;
}

AttackConfig attack_config(std::vector<Mechanism> ms, double lambda = 8e-4) {
  AttackConfig c;
  c.mechanisms = std::move(ms);
  c.lambda = lambda;
  return c;
}

// ---- criteria --------------------------------------------------------------

void criterion1() {
  const auto t0 = Clock::now();
  ModelConfig deit;
  deit.depth = 12;
  deit.embed_dim = 384;
  deit.heads = 6;
  deit.image_size = 224;
  deit.patch_size = 16;
  deit.num_classes = 1000;
  deit.mlp_ratio = 4;
  const double g = vanilla_flops(deit) / 1e9;
  record(1, "FLOP model at DeiT-S dimensions", std::abs(g - 4.6) <= 0.05 * 4.6,
         fmt("%.3f GFLOPs (target 4.6 +/- 5%%)", g), t0);
}

void criterion2(const Victims& v, const Data& data) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0;
  int checks = 0;
  const auto image = data.test.front().image.cast<double>();
  for (auto m : kMechanisms) {
    const auto& w = v.of(m);
    const auto ms = settings(m);
    Tensor<double> clean;
    {
      ad::Tape<double> t;
      auto b = bind_weights<double>(t, w, false);
      clean = model_forward(b, t.constant(image), ms).logits.value();
    }
    auto delta0 = testing::random_tensor(image.shape, rng, -8.0 / 255, 8.0 / 255);
    for (std::size_t k = 0; k < delta0.size(); ++k) {
      delta0.data[k] = std::clamp(delta0.data[k], -image.data[k], 1.0 - image.data[k]);
    }
    const auto coords = testing::random_coords(delta0.size(), 20, rng);
    const std::string parts[] = {"loss_total", "loss_" + std::string(mechanism_name(m)), "loss_cls"};
    for (int part = 0; part < 3; ++part) {
      auto f = [&](ad::Tape<double>& t, ad::Var<double> d) {
        auto b = bind_weights<double>(t, w, false);
        auto lt = loss_total(b, t.constant(image), d, ms, clean, 8e-4);
        return part == 0 ? lt.loss : part == 1 ? lt.attack : lt.cls;
      };
      // On trained victims loss_cls gradients are ~1e-8, where a 1e-6 step is
      // dominated by float64 rounding; 1e-4 is graded, 1e-6 only reported.
      const auto r = testing::fd_compare(f, delta0, coords, 1e-4);
      const auto fine = testing::fd_compare(f, delta0, coords, 1e-6);
      worst = std::max(worst, r.max_rel_err);
      checks += static_cast<int>(r.checked);
      info("gradient check " + std::string(mechanism_name(m)) + " " + parts[part] + ": max rel err " +
           fmt("%.2e", r.max_rel_err) + " (h 1e-4), " + fmt("%.2e", fine.max_rel_err) + " (h 1e-6)");
    }
  }
  record(2, "finite-difference gradient fidelity (float64)", worst < 1e-4,
         std::to_string(checks) + " coordinates, max relative error " + fmt("%.2e", worst), t0);
}

std::vector<int> walk_oracle(const std::vector<double>& s, int R) {
  std::set<int> picked;
  for (int k = 1; k <= R; ++k) {
    const double r = (2.0 * k - 1.0) / (2.0 * R);
    double run = 0;
    int n = 0;
    for (; n < static_cast<int>(s.size()); ++n) {
      run += s[n];
      if (run >= r) break;
    }
    picked.insert(std::min(n, static_cast<int>(s.size()) - 1));
  }
  return {picked.begin(), picked.end()};
}

void criterion3() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(3);
  std::exponential_distribution<double> e(1.0);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 16), R = 1 + static_cast<int>(rng() % 16);
    std::vector<double> s(static_cast<std::size_t>(n));
    double total = 0;
    for (auto& x : s) total += x = e(rng);
    for (auto& x : s) x /= total;
    mismatches += ats_inverse_cdf_sample(s, R).indices != walk_oracle(s, R);
  }
  int extremes_ok = 0;
  for (int R = 1; R <= 16; ++R) {
    const std::vector<double> uniform(static_cast<std::size_t>(R), 1.0 / R);
    std::vector<double> point(16, 0.0);
    point[static_cast<std::size_t>(R - 1)] = 1.0;
    extremes_ok += ats_inverse_cdf_sample(uniform, R).unique == R;
    extremes_ok += ats_inverse_cdf_sample(point, R).unique == 1;
  }
  record(3, "ATS sampler equals the CDF-walk oracle", mismatches == 0 && extremes_ok == 32,
         std::to_string(mismatches) + " mismatches in 1000 simplexes, " + std::to_string(extremes_ok) +
             "/32 analytic extremes",
         t0);
}

struct MechanismRun {
  MetricsReport clean, single, universal, random, single_l0, ensemble;
  Attack single_attack, universal_attack, random_attack, ensemble_attack;
};

MetricsReport eval(const Victims& v, Mechanism m, const Data& d, const Attack* a, const std::string& variant) {
  EvalOptions opt;
  opt.variant = variant;
  return evaluate_set(v.of(m), settings(m), d.test, a ? a->adversary(v.backbone.config) : Adversary{}, opt);
}

std::string tur_line(const MetricsReport& r) {
  return r.variant + " TUR " + fmt("%.4f", r.tur) + " (" + fmt("%.1f", 100 * r.flops / r.vanilla_flops) +
         "% FLOPs, preservation " + fmt("%.3f", r.preservation_rate) + ", accuracy " + fmt("%.3f", r.accuracy) + ")";
}

void run_matrix(const Victims& v, const Data& d, std::map<Mechanism, MechanismRun>& runs) {
  for (auto m : kMechanisms) {
    auto& r = runs[m];
    const std::vector<Victim> victim = {{&v.of(m), settings(m)}};
    const auto name = std::string(mechanism_name(m));
    auto t = Clock::now();
    r.clean = eval(v, m, d, nullptr, "clean");
    r.single_attack = make_attack(run_attack(attack_config({m}), d.test, victim), false);
    r.single = eval(v, m, d, &r.single_attack, "single");
    info(name + " " + tur_line(r.clean));
    info(name + " " + tur_line(r.single) + fmt(" [%.0f s]", std::chrono::duration<double>(Clock::now() - t).count()));

    t = Clock::now();
    auto uc = attack_config({m});
    uc.variant = Variant::universal;
    uc.iterations = 1500;
    r.universal_attack = make_attack(run_attack(uc, d.opt, victim), true);
    r.universal = eval(v, m, d, &r.universal_attack, "universal");
    info(name + " " + tur_line(r.universal) + fmt(" [%.0f s]", std::chrono::duration<double>(Clock::now() - t).count()));

    r.random_attack = make_attack(run_baseline(BaselineKind::random, attack_config({m}), d.test, victim), false);
    r.random = eval(v, m, d, &r.random_attack, "random");
    info(name + " " + tur_line(r.random));

    t = Clock::now();
    const auto l0 = make_attack(run_attack(attack_config({m}, 0.0), d.test, victim), false);
    r.single_l0 = eval(v, m, d, &l0, "single_lambda0");
    info(name + " " + tur_line(r.single_l0) + fmt(" [%.0f s]", std::chrono::duration<double>(Clock::now() - t).count()));
  }
}

void criterion4(const std::map<Mechanism, MechanismRun>& runs) {
  const auto t0 = Clock::now();
  const auto& r = runs.at(Mechanism::avit);
  int high = 0;
  for (const auto& row : r.single.rows) high += row.tur >= 0.95;
  const double frac = static_cast<double>(high) / r.single.rows.size();
  record(4, "A-ViT single-image attack reaches TUR >= 0.95", r.clean.tur <= 0.85 && frac >= 0.9,
         "clean TUR " + fmt("%.4f", r.clean.tur) + " (<= 0.85), " + fmt("%.1f", 100 * frac) + "% of " +
             std::to_string(r.single.rows.size()) + " images at TUR >= 0.95 (>= 90%)",
         t0);
}

void criterion5(const std::map<Mechanism, MechanismRun>& runs) {
  const auto t0 = Clock::now();
  bool pass = true;
  std::string detail;
  for (auto m : kMechanisms) {
    const auto& r = runs.at(m);
    const bool ok = r.clean.tur < r.universal.tur && r.universal.tur < r.single.tur && r.single.tur <= 1.0 &&
                    std::abs(r.random.tur - r.clean.tur) < 0.05 && r.single.tur - r.clean.tur >= 0.10;
    pass = pass && ok;
    detail += std::string(detail.empty() ? "" : "; ") + std::string(mechanism_name(m)) + " clean " +
              fmt("%.4f", r.clean.tur) + " < universal " + fmt("%.4f", r.universal.tur) + " < single " +
              fmt("%.4f", r.single.tur) + ", random " + fmt("%.4f", r.random.tur) + (ok ? "" : " (violated)");
  }
  record(5, "effectiveness ordering clean < universal < single", pass, detail, t0);
}

void criterion6(const Victims& v, const Data& d, const std::map<Mechanism, MechanismRun>& runs) {
  const auto t0 = Clock::now();
  bool pass = true;
  std::string detail;
  for (auto m : kMechanisms) {
    const auto& r = runs.at(m);
    const double p = r.single.preservation_rate, p0 = r.single_l0.preservation_rate;
    const bool ok = p >= 0.85 && p - p0 >= 0.10;
    pass = pass && ok;
    detail += std::string(detail.empty() ? "" : "; ") + std::string(mechanism_name(m)) + " preservation " +
              fmt("%.3f", p) + " at lambda 8e-4 vs " + fmt("%.3f", p0) + " at 0" + (ok ? "" : " (violated)");
  }
  // Larger weights for reference: the classification term is small next to
  // the sparsity losses at this scale.
  Data small = d;
  small.test = stratified_subset(d.test, 50);
  for (auto m : kMechanisms) {
    const std::vector<Victim> victim = {{&v.of(m), settings(m)}};
    for (double lambda : {1.0}) {
      const auto a = make_attack(run_attack(attack_config({m}, lambda), small.test, victim), false);
      const auto rep = eval(v, m, small, &a, "single_lambda" + fmt("%g", lambda));
      info(std::string(mechanism_name(m)) + " lambda " + fmt("%g", lambda) + " on 50 images: " + tur_line(rep));
    }
  }
  record(6, "lambda = 8e-4 preserves predictions (>= 85%, +10 points over lambda = 0)", pass, detail, t0);
}

void criterion7(const Victims& v, const Data& d, std::map<Mechanism, MechanismRun>& runs) {
  const auto t0 = Clock::now();
  std::vector<Victim> all;
  for (auto m : kMechanisms) all.push_back({&v.of(m), settings(m)});
  const auto ensemble =
      make_attack(run_attack(attack_config({Mechanism::ats, Mechanism::adavit, Mechanism::avit}), d.test, all), false);
  bool pass = true;
  std::string detail;
  for (auto m : kMechanisms) {
    auto& r = runs.at(m);
    r.ensemble_attack = ensemble;
    r.ensemble_attack.index();
    r.ensemble = eval(v, m, d, &r.ensemble_attack, "ensemble");
    const double gain = r.single.tur - r.clean.tur;
    const double frac = gain > 0 ? (r.ensemble.tur - r.clean.tur) / gain : 0.0;
    const bool ok = frac >= 0.6;
    pass = pass && ok;
    detail += std::string(detail.empty() ? "" : "; ") + std::string(mechanism_name(m)) + " ensemble TUR " +
              fmt("%.4f", r.ensemble.tur) + " keeps " + fmt("%.0f", 100 * frac) + "% of the single-image gain" +
              (ok ? "" : " (violated)");
  }
  record(7, "ensemble perturbation keeps >= 60% of every dedicated gain", pass, detail, t0);
}

void criterion8(const Victims& v, const Data& d, const std::map<Mechanism, MechanismRun>& runs) {
  const auto t0 = Clock::now();
  bool pass = true;
  std::string detail;
  std::vector<Tensor<float>> holdout;
  for (const auto& item : d.holdout) holdout.push_back(item.image);
  for (auto m : kMechanisms) {
    const auto& r = runs.at(m);
    const auto caps = calibrate_caps(v.of(m), settings(m), holdout, DefensePolicy::confidence);
    EvalOptions opt;
    opt.defense = &caps;
    int violations = 0;
    auto count = [&](const MetricsReport& rep) {
      for (const auto& row : rep.rows)
        for (std::size_t l = 0; l < caps.caps.size(); ++l) violations += row.per_block_active[l] - 1 > caps.caps[l];
    };
    const auto& c = v.backbone.config;
    opt.variant = "defended_clean";
    const auto clean = evaluate_set(v.of(m), settings(m), d.test, {}, opt);
    count(clean);
    opt.variant = "defended_single";
    const auto adv = evaluate_set(v.of(m), settings(m), d.test, r.single_attack.adversary(c), opt);
    count(adv);
    for (const Attack* a : {&r.universal_attack, &r.random_attack, &r.ensemble_attack}) {
      opt.variant = "defended_other";
      count(evaluate_set(v.of(m), settings(m), d.test, a->adversary(c), opt));
    }
    const bool flops_ok = adv.flops <= 1.10 * r.clean.flops;
    const bool acc_ok = clean.accuracy >= r.clean.clean_accuracy - 0.02;
    const bool ok = violations == 0 && flops_ok && acc_ok;
    pass = pass && ok;
    detail += std::string(detail.empty() ? "" : "; ") + std::string(mechanism_name(m)) + " violations " +
              std::to_string(violations) + ", defended adversarial FLOPs " +
              fmt("%.3f", adv.flops / r.clean.flops) + "x clean, clean accuracy " +
              fmt("%.3f", r.clean.clean_accuracy) + " -> " + fmt("%.3f", clean.accuracy) + (ok ? "" : " (violated)");
  }
  record(8, "token-budget defense bounds counts, FLOPs and accuracy", pass, detail, t0);
}

void criterion9(const Victims& v, const Data& d, const std::map<Mechanism, MechanismRun>& runs) {
  const auto t0 = Clock::now();
  const auto& c = v.backbone.config;
  const double eps = AttackConfig{}.epsilon;
  std::size_t deltas = 0, bad = 0;
  std::map<int, const LabeledImage*> test_by_id;
  for (const auto& item : d.test) test_by_id[item.id] = &item;
  auto check = [&](const Attack& a) {
    for (const auto& p : a.items) {
      ++deltas;
      double m = 0;
      for (float x : p.delta.data) m = std::max(m, static_cast<double>(std::abs(x)));
      bool ok = m <= eps + 1e-6;
      std::vector<const LabeledImage*> targets;
      if (a.shared) {
        for (const auto& item : d.test) targets.push_back(&item);
      } else {
        targets.push_back(test_by_id.at(p.image_id));
      }
      for (const auto* item : targets) {
        const auto x = apply_perturbation(item->image, p, c);
        for (std::size_t k = 0; k < x.size() && ok; ++k) {
          ok = x.data[k] >= 0.0f && x.data[k] <= 1.0f && std::abs(x.data[k] - item->image.data[k]) <= eps + 1e-6;
        }
      }
      bad += !ok;
    }
  };
  for (const auto& [m, r] : runs) {
    check(r.single_attack);
    check(r.universal_attack);
    check(r.random_attack);
  }
  check(runs.at(Mechanism::ats).ensemble_attack);

  // Determinism: identical config and seed, float64, byte-identical files.
  const fs::path dir = fs::path(TSLAB_ACCEPTANCE_CACHE) / "determinism";
  fs::create_directories(dir);
  bool same = true;
  const auto few = stratified_subset(d.test, 3);
  for (auto variant : {Variant::single, Variant::universal}) {
    auto cfg = attack_config({Mechanism::ats, Mechanism::avit});
    cfg.precision = Precision::f64;
    cfg.iterations = 20;
    cfg.variant = variant;
    cfg.random_init = true;
    cfg.seed = 11;
    const std::vector<Victim> victims = {{&v.backbone, settings(Mechanism::ats)}, {&v.avit, settings(Mechanism::avit)}};
    std::string bytes[2];
    for (int k = 0; k < 2; ++k) {
      const auto path = (dir / ("run" + std::to_string(k) + ".tspert")).string();
      save_perturbations(path, run_attack(cfg, variant == Variant::single ? few : d.opt, victims));
      std::ifstream is(path, std::ios::binary);
      std::ostringstream os;
      os << is.rdbuf();
      bytes[k] = os.str();
    }
    same = same && !bytes[0].empty() && bytes[0] == bytes[1];
  }
  fs::remove_all(dir);
  record(9, "budget and determinism", bad == 0 && same,
         std::to_string(deltas) + " perturbations checked, " + std::to_string(bad) + " out of budget; float64 reruns " +
             (same ? "byte-identical" : "differ"),
         t0);
}

}  // namespace

int main() {
  const auto start = Clock::now();
  std::cout << std::unitbuf;
  criterion1();
  criterion3();
  const auto data = make_data();
  info("data: " + std::to_string(data.train.size()) + " train, " + std::to_string(data.holdout.size()) +
       " holdout, " + std::to_string(data.test.size()) + " test images");
  const auto victims = load_or_train(data);
  for (auto m : kMechanisms) {
    const auto rep = evaluate_set(victims.of(m), settings(m), data.test);
    info(std::string(mechanism_name(m)) + " victim: clean accuracy " + fmt("%.3f", rep.clean_accuracy) + ", TUR " +
         fmt("%.4f", rep.tur) + (rep.tur < 0.95 ? " (sparsifying)" : " (NOT sparsifying)"));
  }
  criterion2(victims, data);

  std::map<Mechanism, MechanismRun> runs;
  run_matrix(victims, data, runs);
  criterion4(runs);
  criterion5(runs);
  criterion6(victims, data, runs);
  criterion7(victims, data, runs);
  criterion8(victims, data, runs);
  criterion9(victims, data, runs);

  std::sort(outcomes.begin(), outcomes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::cout << "\n==== acceptance summary ====\n";
  int failed = 0;
  for (const auto& o : outcomes) {
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << o.id << ": " << o.title << " | " << o.detail
              << fmt(" | %.0f s", o.seconds) << "\n";
  }
  std::cout << outcomes.size() - failed << "/" << outcomes.size() << " criteria passed in "
            << fmt("%.0f", std::chrono::duration<double>(Clock::now() - start).count()) << " s\n";
  return failed == 0 ? 0 : 1;
}
