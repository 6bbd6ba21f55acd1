#include "tslab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tslab/forward.hpp"

namespace tslab {

double compute_tur(const SparsifierTrace& trace) {
  if (trace.blocks.empty() || trace.num_tokens <= 0) {
    throw std::invalid_argument("compute_tur: empty trace");
  }
  double active = 0;
  for (const auto& b : trace.blocks) active += b.active_tokens;
  return active / (static_cast<double>(trace.blocks.size()) * trace.num_tokens);
}

namespace {

double embed_and_head(const ModelConfig& c) {
  const double d = c.embed_dim;
  return static_cast<double>(c.num_patches()) * c.patch_dim() * d + d * c.num_classes;
}

double block_flops(const ModelConfig& c, const BlockTrace& b) {
  const double d = c.embed_dim, n = b.active_tokens;
  double f = 0;
  if (b.msa_on) f += (4 * n * d * d + 2 * n * n * d) * b.active_heads / c.heads;
  if (b.ffn_on) f += 2.0 * c.mlp_ratio * n * d * d;
  return f;
}

}  // namespace

double compute_flops(const ModelConfig& config, const SparsifierTrace& trace) {
  double f = embed_and_head(config);
  for (const auto& b : trace.blocks) f += block_flops(config, b);
  return f;
}

double vanilla_flops(const ModelConfig& config) {
  BlockTrace full;
  full.active_tokens = config.seq_len();
  full.active_heads = config.heads;
  return embed_and_head(config) + config.depth * block_flops(config, full);
}

namespace {

int argmax(const Tensor<float>& t) {
  return static_cast<int>(std::max_element(t.data.begin(), t.data.end()) - t.data.begin());
}

}  // namespace

MetricsReport evaluate_set(const ModelWeights& weights, const MechanismSettings& mechanism,
                           std::span<const LabeledImage> images, const Adversary& adversary,
                           const EvalOptions& options) {
  if (images.empty()) throw std::invalid_argument("evaluate_set: empty dataset");
  const auto& c = weights.config;
  ad::Tape<float> tape;
  const auto bound = bind_weights(tape, weights, false);
  const auto mark = tape.size();
  ForwardOptions fo;
  if (mechanism.kind == Mechanism::none || mechanism.kind == Mechanism::ats) {
    fo.mode = ForwardMode::gather;
  }

  MetricsReport rep;
  rep.mechanism = std::string(mechanism_name(mechanism.kind));
  rep.variant = options.variant;
  rep.images = static_cast<int>(images.size());
  rep.vanilla_flops = vanilla_flops(c);
  rep.per_block_active.assign(static_cast<std::size_t>(c.depth), 0.0);
  rep.depth_histogram.assign(static_cast<std::size_t>(c.depth) + 1, 0);
  int correct = 0, clean_correct = 0, preserved = 0;

  for (const auto& item : images) {
    if (item.image.size() != c.image_numel()) {
      throw ShapeError("evaluate_set: image " + std::to_string(item.id) + " has " +
                       std::to_string(item.image.size()) + " values, model expects " +
                       std::to_string(c.image_numel()));
    }
    EvalRow row;
    row.id = item.id;
    row.label = item.label;

    tape.truncate(mark);
    auto clean = model_forward(bound, tape.constant(item.image), mechanism, fo);
    row.clean_pred = argmax(clean.logits.value());

    ForwardOptions eo = fo;
    eo.defense = options.defense;
    eo.image_seed = static_cast<std::uint64_t>(item.id);
    SparsifierTrace trace;
    if (!adversary && !options.defense) {
      row.adv_pred = row.clean_pred;
      trace = std::move(clean.trace);
    } else {
      tape.truncate(mark);
      auto x = adversary ? adversary(item) : item.image;
      auto adv = model_forward(bound, tape.constant(std::move(x)), mechanism, eo);
      row.adv_pred = argmax(adv.logits.value());
      trace = std::move(adv.trace);
    }
    row.tur = compute_tur(trace);
    row.flops = compute_flops(c, trace);
    for (const auto& b : trace.blocks) row.per_block_active.push_back(b.active_tokens);
    row.token_depth = trace.token_depth;

    correct += row.adv_pred == row.label;
    clean_correct += row.clean_pred == row.label;
    preserved += row.adv_pred == row.clean_pred;
    rep.tur += row.tur;
    rep.flops += row.flops;
    for (int l = 0; l < c.depth; ++l) rep.per_block_active[l] += row.per_block_active[l];
    for (int d : row.token_depth) rep.depth_histogram[static_cast<std::size_t>(d)] += 1;
    rep.rows.push_back(std::move(row));
  }
  const double n = static_cast<double>(images.size());
  rep.tur /= n;
  rep.flops /= n;
  for (auto& v : rep.per_block_active) v /= n;
  rep.accuracy = correct / n;
  rep.clean_accuracy = clean_correct / n;
  rep.preservation_rate = preserved / n;
  return rep;
}

void write_rows_csv(std::ostream& os, const MetricsReport& report, bool header) {
  if (header) os << "id,variant,mechanism,label,tur,flops,clean_pred,adv_pred\n";
  for (const auto& r : report.rows) {
    os << r.id << ',' << report.variant << ',' << report.mechanism << ',' << r.label << ','
       << r.tur << ',' << r.flops << ',' << r.clean_pred << ',' << r.adv_pred << '\n';
  }
}

nlohmann::json summary_json(const MetricsReport& report, const MetricsReport* clean) {
  nlohmann::json j;
  j["mechanism"] = report.mechanism;
  j["variant"] = report.variant;
  j["images"] = report.images;
  j["tur"] = report.tur;
  j["tur_percent"] = 100.0 * report.tur;
  j["gflops"] = report.flops / 1e9;
  j["flops"] = report.flops;
  j["flops_percent"] = 100.0 * report.flops / report.vanilla_flops;
  j["vanilla_flops"] = report.vanilla_flops;
  j["accuracy"] = report.accuracy;
  j["clean_accuracy"] = report.clean_accuracy;
  j["preservation_rate"] = report.preservation_rate;
  j["per_block_active"] = report.per_block_active;
  j["depth_histogram"] = report.depth_histogram;
  if (clean) {
    j["delta_tur"] = report.tur - clean->tur;
    j["delta_flops"] = report.flops - clean->flops;
    j["delta_flops_percent"] = 100.0 * (report.flops - clean->flops) / report.vanilla_flops;
  }
  return j;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("spearman: need two equally sized samples of at least 2");
  }
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace tslab
