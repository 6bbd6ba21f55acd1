#include "tslab/forward.hpp"

#include <algorithm>
#include <numeric>

#include "tslab/defense.hpp"

namespace tslab {

using ad::Tape;
using ad::Var;

namespace {

// Constant key-weight row and query-mask column for the current rows.
template <typename T>
std::pair<Var<T>, Var<T>> row_masks(Tape<T>& tape, const std::vector<int>& rows,
                                    const std::vector<char>& token_active) {
  Tensor<T> kw({1, rows.size()});
  for (std::size_t r = 0; r < rows.size(); ++r) kw.data[r] = token_active[rows[r]] ? T(1) : T(0);
  Tensor<T> qm({rows.size(), 1}, kw.data);
  return {tape.constant(std::move(kw)), tape.constant(std::move(qm))};
}

template <typename T>
Var<T> scalar_const(Tape<T>& tape, T v) {
  return tape.constant(Tensor<T>({1, 1}, std::vector<T>{v}));
}

std::vector<double> column_values(const Tensor<float>& t) {
  return std::vector<double>(t.data.begin(), t.data.end());
}
std::vector<double> column_values(const Tensor<double>& t) { return t.data; }

}  // namespace

template <typename T>
ForwardResult<T> model_forward(const BoundWeights<T>& w, const Var<T>& image,
                               const MechanismSettings& mech, const ForwardOptions& opt) {
  const auto& c = w.config;
  mech.validate(c);
  if (opt.mode == ForwardMode::gather &&
      (mech.kind == Mechanism::adavit || mech.kind == Mechanism::avit)) {
    throw std::invalid_argument("gather mode supports only the vanilla model and ATS");
  }
  if (opt.defense && opt.defense->caps.size() != static_cast<std::size_t>(c.depth)) {
    throw std::invalid_argument("defense caps must have one entry per block");
  }
  if (opt.training && mech.kind == Mechanism::adavit && !opt.rng) {
    throw std::invalid_argument("training an AdaViT forward needs an rng for Gumbel noise");
  }
  Tape<T>& tape = image.tape();
  const int L = c.depth, N = c.num_patches(), H = c.heads;
  const bool masked = opt.mode == ForwardMode::mask;

  ForwardResult<T> res;
  auto& tr = res.trace;
  tr.mechanism = mech.kind;
  tr.num_tokens = N + 1;
  tr.heads = H;
  tr.token_depth.assign(static_cast<std::size_t>(N), 0);
  std::vector<Var<T>>* record = opt.record_activations ? &res.activations : nullptr;

  Var<T> z = patchify_embed(w, image);
  std::vector<char> active(static_cast<std::size_t>(N + 1), 1);  // by token id
  std::vector<int> rows(static_cast<std::size_t>(N + 1));         // row -> token id
  std::iota(rows.begin(), rows.end(), 0);

  HaltingState halting(N, mech.avit_tau);
  Var<T> cumulative;
  Var<T> usage;
  double usage_const = 0;

  auto cap_of = [&](int l) { return opt.defense ? opt.defense->caps[l] : N + 1; };
  auto policy = [&] { return opt.defense ? opt.defense->policy : DefensePolicy::confidence; };
  auto seed_of = [&](int blk) {
    return defense_seed(opt.defense ? opt.defense->seed : 0, opt.image_seed, blk);
  };
  auto count_active = [&] { return static_cast<int>(std::count(active.begin(), active.end(), 1)); };
  auto mark_depth = [&] {
    for (int j = 0; j < N; ++j) tr.token_depth[j] += active[j + 1] ? 1 : 0;
  };
  // Cap enforcement without a score: keeps the lowest token ids (confidence)
  // or a seeded random subset.
  auto cap_unscored = [&](int l) {
    const int cap = cap_of(l);
    if (count_active() - 1 <= cap) return;
    std::vector<int> cand;
    for (int j = 1; j <= N; ++j)
      if (active[j]) cand.push_back(j);
    const auto keep = enforce_cap(cand.size(), {}, cap, policy(), seed_of(l + 1));
    for (int j : cand) active[j] = 0;
    for (int k : keep) active[cand[k]] = 1;
  };

  for (int l = 0; l < L; ++l) {
    const int blk = l + 1;
    BlockTrace bt;
    bt.active_heads = H;
    BlockMasks<T> masks;

    switch (mech.kind) {
      case Mechanism::none:
      case Mechanism::ats: {
        const bool sampling = mech.kind == Mechanism::ats && blk >= mech.ats_start_block;
        if (!sampling) cap_unscored(l);
        const bool all_rows_active = count_active() == static_cast<int>(rows.size());
        if (masked && !all_rows_active) {
          std::tie(masks.key_weights, masks.query_mask) = row_masks(tape, rows, active);
        }
        if (!sampling) {
          z = block_forward(w, l, z, masks, record);
          bt.active_tokens = count_active();
          mark_depth();
          break;
        }
        auto attn = attention_forward(w, l, z, masks.key_weights);
        std::vector<int> cand_rows;
        for (std::size_t r = 1; r < rows.size(); ++r)
          if (active[rows[r]]) cand_rows.push_back(static_cast<int>(r));
        bool fallback = false;
        auto scores = ats_significance<T>(attn.attn, attn.values, cand_rows, &fallback);
        const auto sv = column_values(scores.value());
        auto sample = ats_inverse_cdf_sample(sv, N + 1);
        std::vector<int> kept = sample.indices;
        const int cap = cap_of(l);
        if (static_cast<int>(kept.size()) > cap) {
          std::vector<double> conf;
          for (int k : kept) conf.push_back(sv[k]);
          const auto keep = enforce_cap(kept.size(), conf, cap, policy(), seed_of(blk));
          std::vector<int> pruned;
          for (int k : keep) pruned.push_back(kept[k]);
          kept = std::move(pruned);
        }
        for (int r : cand_rows) active[rows[r]] = 0;
        std::vector<int> kept_rows = {0};
        for (int k : kept) {
          kept_rows.push_back(cand_rows[k]);
          active[rows[cand_rows[k]]] = 1;
        }
        if (static_cast<int>(kept_rows.size()) != static_cast<int>(rows.size())) {
          Tensor<T> qm({rows.size(), 1});
          for (int r : kept_rows) qm.data[r] = T(1);
          masks.query_mask = tape.constant(std::move(qm));
        }
        z = finish_block(w, l, z, attn, masks, record);
        if (!masked && kept_rows.size() != rows.size()) {
          z = ad::gather_rows<T>(z, kept_rows);
          std::vector<int> next;
          for (int r : kept_rows) next.push_back(rows[r]);
          rows = std::move(next);
        }
        res.ats_scores.push_back(scores);
        tr.ats_unique.push_back(sample.unique);
        tr.ats_fallbacks += fallback ? 1 : 0;
        bt.active_tokens = count_active();
        mark_depth();
        break;
      }

      case Mechanism::adavit: {
        if (blk < mech.adavit_start_block) {
          cap_unscored(l);
          if (count_active() != N + 1) {
            std::tie(masks.key_weights, masks.query_mask) = row_masks(tape, rows, active);
          }
          z = block_forward(w, l, z, masks, record);
          bt.active_tokens = count_active();
          mark_depth();
          std::fill(active.begin(), active.end(), 1);
          break;
        }
        auto dec = adavit_decide(w, l, z, static_cast<T>(mech.gumbel_temperature),
                                 opt.training ? opt.rng : nullptr);
        const std::vector<T> pk = dec.patch_keep.value().data;
        const std::vector<T> hk = dec.head_keep.value().data;
        const std::vector<T> bk = dec.block_keep.value().data;
        std::fill(active.begin(), active.end(), 0);
        active[0] = 1;
        std::vector<int> kept;
        for (int j = 0; j < N; ++j)
          if (pk[j] > T(0.5)) kept.push_back(j);
        bool pruned = false;
        if (static_cast<int>(kept.size()) > cap_of(l)) {
          std::vector<double> conf;
          for (int j : kept) conf.push_back(static_cast<double>(dec.patch_prob.value().data[j]));
          const auto keep = enforce_cap(kept.size(), conf, cap_of(l), policy(), seed_of(blk));
          std::vector<int> next;
          for (int k : keep) next.push_back(kept[k]);
          kept = std::move(next);
          pruned = true;
        }
        for (int j : kept) active[j + 1] = 1;
        const bool msa_on = bk[0] > T(0.5), ffn_on = bk[1] > T(0.5);

        Var<T> token_mask;
        if (opt.training && !pruned) {
          std::vector<Var<T>> parts = {scalar_const(tape, T(1)), dec.patch_keep};
          token_mask = ad::concat_rows<T>(parts);
          for (int h = 0; h < H; ++h) {
            const int r[] = {h};
            masks.head_gates.push_back(ad::gather_rows<T>(dec.head_keep, r));
          }
          const int r0[] = {0}, r1[] = {1};
          masks.msa_gate = ad::gather_rows<T>(dec.block_keep, r0);
          masks.ffn_gate = ad::gather_rows<T>(dec.block_keep, r1);
        } else {
          Tensor<T> tm({static_cast<std::size_t>(N + 1), 1});
          for (int j = 0; j <= N; ++j) tm.data[j] = active[j] ? T(1) : T(0);
          token_mask = tape.constant(std::move(tm));
          for (int h = 0; h < H; ++h) masks.head_gates.push_back(scalar_const(tape, hk[h]));
          masks.msa_gate = scalar_const(tape, msa_on ? T(1) : T(0));
          masks.ffn_gate = scalar_const(tape, ffn_on ? T(1) : T(0));
        }
        masks.key_weights = ad::transpose(token_mask);
        masks.query_mask = token_mask;
        z = block_forward(w, l, z, masks, record);

        res.adavit.push_back({dec.patch_prob, dec.head_prob, dec.block_prob, msa_on});
        int heads_on = 0;
        for (int h = 0; h < H; ++h) heads_on += hk[h] > T(0.5) ? 1 : 0;
        bt.active_tokens = count_active();
        bt.active_heads = msa_on ? heads_on : 0;
        bt.msa_on = msa_on;
        bt.ffn_on = ffn_on;
        mark_depth();
        break;
      }

      case Mechanism::avit: {
        std::vector<int> cand;
        for (int j = 0; j < N; ++j)
          if (halting.active_in(j, blk)) cand.push_back(j);
        if (static_cast<int>(cand.size()) > cap_of(l)) {
          std::vector<double> conf;
          for (int j : cand) conf.push_back(-halting.cumulative[j]);
          const auto keep = enforce_cap(cand.size(), conf, cap_of(l), policy(), seed_of(blk));
          std::vector<char> survive(cand.size(), 0);
          for (int k : keep) survive[k] = 1;
          for (std::size_t k = 0; k < cand.size(); ++k)
            if (!survive[k]) halting.force_halt(cand[k], blk - 1);
        }
        Tensor<T> hard({static_cast<std::size_t>(N), 1});
        for (int j = 0; j < N; ++j) {
          active[j + 1] = halting.active_in(j, blk) ? 1 : 0;
          hard.data[j] = active[j + 1] ? T(1) : T(0);
        }
        const int n_active = count_active();
        Var<T> token_mask;
        if (opt.training && cumulative.defined()) {
          auto soft = ad::clamp(ad::sub(scalar_const(tape, T(1)), cumulative), T(0), T(1));
          std::vector<Var<T>> parts = {scalar_const(tape, T(1)), ad::straight_through(hard, soft)};
          token_mask = ad::concat_rows<T>(parts);
        } else if (n_active != N + 1) {
          std::vector<Var<T>> parts = {scalar_const(tape, T(1)), tape.constant(hard)};
          token_mask = ad::concat_rows<T>(parts);
        }
        if (token_mask.defined()) {
          masks.key_weights = ad::transpose(token_mask);
          masks.query_mask = token_mask;
        }
        if (opt.training) {
          if (token_mask.defined() && token_mask.requires_grad()) {
            auto s = ad::sum(token_mask);
            usage = usage.defined() ? ad::add(usage, s) : s;
          } else {
            usage_const += n_active;
          }
        }
        z = block_forward(w, l, z, masks, record);
        bt.active_tokens = n_active;
        mark_depth();

        if (blk >= mech.avit_start_block) {
          Tensor<T> gate({static_cast<std::size_t>(N), 1});
          for (int j = 0; j < N; ++j) gate.data[j] = halting.active_in(j, blk) ? T(1) : T(0);
          auto h = avit_halting_step(w, z, blk, halting);
          cumulative = cumulative.defined() ? ad::add(cumulative, h) : h;
          res.avit_cumulative.push_back(cumulative);
          res.avit_gates.push_back(std::move(gate));
        }
        break;
      }
    }
    tr.blocks.push_back(bt);
  }

  if (mech.kind == Mechanism::avit) {
    tr.halt_block = halting.halt_block;
    if (opt.training) {
      const T denom = static_cast<T>(L) * static_cast<T>(N + 1);
      Var<T> total = scalar_const(tape, static_cast<T>(usage_const));
      if (usage.defined()) total = ad::add(total, usage);
      res.avit_soft_usage = ad::scale(total, T(1) / denom);
    }
  }
  res.logits = classify(w, z);
  return res;
}

template ForwardResult<float> model_forward(const BoundWeights<float>&, const Var<float>&,
                                            const MechanismSettings&, const ForwardOptions&);
template ForwardResult<double> model_forward(const BoundWeights<double>&, const Var<double>&,
                                             const MechanismSettings&, const ForwardOptions&);

}  // namespace tslab
