#include "tslab/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace tslab {

using ad::Tape;
using ad::Var;

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) problems.push_back(msg);
  };
  need(depth >= 1, "depth must be >= 1");
  need(embed_dim >= 1, "embed_dim must be >= 1");
  need(heads >= 1, "heads must be >= 1");
  need(heads >= 1 && embed_dim % heads == 0, "embed_dim must be divisible by heads");
  need(image_size >= 1, "image_size must be >= 1");
  need(patch_size >= 1, "patch_size must be >= 1");
  need(patch_size >= 1 && image_size % patch_size == 0, "patch_size must divide image_size");
  need(channels >= 1, "channels must be >= 1");
  need(num_classes >= 2, "num_classes must be >= 2");
  need(mlp_ratio >= 1, "mlp_ratio must be >= 1");
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
}

const Tensor<float>& ModelWeights::at(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

Tensor<float>& ModelWeights::at(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.size();
  return n;
}

namespace {

std::string block_name(int b, const char* suffix) {
  return "blocks." + std::to_string(b) + "." + suffix;
}

struct ParamSpec {
  std::string name;
  Shape shape;
  enum { normal, zeros, ones } init;
};

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  const std::size_t d = c.embed_dim, h = c.hidden_dim();
  std::vector<ParamSpec> s = {
      {"patch.weight", {static_cast<std::size_t>(c.patch_dim()), d}, ParamSpec::normal},
      {"patch.bias", {1, d}, ParamSpec::zeros},
      {"cls_token", {1, d}, ParamSpec::normal},
      {"pos_embed", {static_cast<std::size_t>(c.seq_len()), d}, ParamSpec::normal},
  };
  for (int b = 0; b < c.depth; ++b) {
    auto add = [&](const char* n, Shape shape, decltype(ParamSpec::normal) init) {
      s.push_back({block_name(b, n), std::move(shape), init});
    };
    add("ln1.gamma", {1, d}, ParamSpec::ones);
    add("ln1.beta", {1, d}, ParamSpec::zeros);
    add("qkv.weight", {d, 3 * d}, ParamSpec::normal);
    add("qkv.bias", {1, 3 * d}, ParamSpec::zeros);
    add("proj.weight", {d, d}, ParamSpec::normal);
    add("proj.bias", {1, d}, ParamSpec::zeros);
    add("ln2.gamma", {1, d}, ParamSpec::ones);
    add("ln2.beta", {1, d}, ParamSpec::zeros);
    add("fc1.weight", {d, h}, ParamSpec::normal);
    add("fc1.bias", {1, h}, ParamSpec::zeros);
    add("fc2.weight", {h, d}, ParamSpec::normal);
    add("fc2.bias", {1, d}, ParamSpec::zeros);
    add("policy.patch.weight", {d, 2}, ParamSpec::normal);
    add("policy.patch.bias", {1, 2}, ParamSpec::zeros);
    add("policy.head.weight", {d, 2 * static_cast<std::size_t>(c.heads)}, ParamSpec::normal);
    add("policy.head.bias", {1, 2 * static_cast<std::size_t>(c.heads)}, ParamSpec::zeros);
    add("policy.block.weight", {d, 4}, ParamSpec::normal);
    add("policy.block.bias", {1, 4}, ParamSpec::zeros);
  }
  s.push_back({"norm.gamma", {1, d}, ParamSpec::ones});
  s.push_back({"norm.beta", {1, d}, ParamSpec::zeros});
  s.push_back({"head.weight", {d, static_cast<std::size_t>(c.num_classes)}, ParamSpec::normal});
  s.push_back({"head.bias", {1, static_cast<std::size_t>(c.num_classes)}, ParamSpec::zeros});
  s.push_back({"halting.gamma", {1, 1}, ParamSpec::ones});
  s.push_back({"halting.beta", {1, 1}, ParamSpec::zeros});
  return s;
}

}  // namespace

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed, float halting_beta,
                          float policy_keep_bias) {
  config.validate();
  ModelWeights w;
  w.config = config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  constexpr double kStd = 0.02;
  for (const auto& spec : param_specs(config)) {
    Tensor<float> t(spec.shape);
    if (spec.init == ParamSpec::ones) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    } else if (spec.init == ParamSpec::normal) {
      for (auto& v : t.data) {
        double x;
        do {
          x = normal(rng);
        } while (std::abs(x) > 2.0);
        v = static_cast<float>(x * kStd);
      }
    }
    w.params.emplace(spec.name, std::move(t));
  }
  w.at("halting.beta").data[0] = halting_beta;
  for (int b = 0; b < config.depth; ++b) {
    // Column pairs are (keep, drop).
    for (const char* n : {"policy.patch.bias", "policy.head.bias", "policy.block.bias"}) {
      auto& bias = w.at(block_name(b, n));
      for (std::size_t k = 0; k < bias.size(); k += 2) bias.data[k] = policy_keep_bias;
    }
  }
  return w;
}

// ---- checkpoint I/O --------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'T', 'S', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename U>
void put(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is, const std::string& path) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw CheckpointError(path + ": truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelWeights& weights) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  const auto& c = weights.config;
  for (int v : {c.depth, c.embed_dim, c.heads, c.image_size, c.patch_size, c.channels,
                c.num_classes, c.mlp_ratio}) {
    put<std::int32_t>(os, v);
  }
  put<std::uint32_t>(os, static_cast<std::uint32_t>(weights.params.size()));
  for (const auto& [name, t] : weights.params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto dim : t.shape) put<std::uint32_t>(os, static_cast<std::uint32_t>(dim));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!os) throw CheckpointError("write failed for '" + path + "'");
}

ModelWeights load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointError(path + ": not a checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": unsupported version " + std::to_string(version));
  }
  ModelWeights w;
  auto& c = w.config;
  for (int* f : {&c.depth, &c.embed_dim, &c.heads, &c.image_size, &c.patch_size, &c.channels,
                 &c.num_classes, &c.mlp_ratio}) {
    *f = get<std::int32_t>(is, path);
  }
  c.validate();
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, path);
    if (len > 4096) throw CheckpointError(path + ": corrupt tensor name");
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = get<std::uint32_t>(is, path);
    if (rank > 8) throw CheckpointError(path + ": corrupt tensor rank");
    Shape shape(rank);
    for (auto& dim : shape) dim = get<std::uint32_t>(is, path);
    Tensor<float> t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!is) throw CheckpointError(path + ": truncated tensor '" + name + "'");
    w.params.emplace(std::move(name), std::move(t));
  }
  for (const auto& spec : param_specs(c)) {
    auto it = w.params.find(spec.name);
    if (it == w.params.end()) throw CheckpointError(path + ": missing tensor '" + spec.name + "'");
    if (it->second.shape != spec.shape) {
      throw CheckpointError(path + ": tensor '" + spec.name + "' has shape " +
                            shape_string(it->second.shape) + ", expected " +
                            shape_string(spec.shape));
    }
  }
  return w;
}

// ---- binding ---------------------------------------------------------------

template <typename T>
BoundWeights<T> bind_weights(Tape<T>& tape, const ModelWeights& weights, bool requires_grad) {
  BoundWeights<T> bw;
  bw.config = weights.config;
  std::map<std::string, Var<T>> vars;
  for (const auto& [name, t] : weights.params) {
    auto v = tape.leaf(t.template cast<T>(), requires_grad);
    vars.emplace(name, v);
    bw.named.emplace_back(name, v);
  }
  auto get_var = [&](const std::string& n) {
    auto it = vars.find(n);
    if (it == vars.end()) throw std::out_of_range("missing parameter '" + n + "'");
    return it->second;
  };
  bw.patch_w = get_var("patch.weight");
  bw.patch_b = get_var("patch.bias");
  bw.cls_token = get_var("cls_token");
  bw.pos_embed = get_var("pos_embed");
  for (int b = 0; b < weights.config.depth; ++b) {
    BlockParams<T> p;
    auto g = [&](const char* n) { return get_var(block_name(b, n)); };
    p.ln1_g = g("ln1.gamma");
    p.ln1_b = g("ln1.beta");
    p.qkv_w = g("qkv.weight");
    p.qkv_b = g("qkv.bias");
    p.proj_w = g("proj.weight");
    p.proj_b = g("proj.bias");
    p.ln2_g = g("ln2.gamma");
    p.ln2_b = g("ln2.beta");
    p.fc1_w = g("fc1.weight");
    p.fc1_b = g("fc1.bias");
    p.fc2_w = g("fc2.weight");
    p.fc2_b = g("fc2.bias");
    p.policy_patch_w = g("policy.patch.weight");
    p.policy_patch_b = g("policy.patch.bias");
    p.policy_head_w = g("policy.head.weight");
    p.policy_head_b = g("policy.head.bias");
    p.policy_block_w = g("policy.block.weight");
    p.policy_block_b = g("policy.block.bias");
    bw.blocks.push_back(p);
  }
  bw.norm_g = get_var("norm.gamma");
  bw.norm_b = get_var("norm.beta");
  bw.head_w = get_var("head.weight");
  bw.head_b = get_var("head.bias");
  bw.halting_gamma = get_var("halting.gamma");
  bw.halting_beta = get_var("halting.beta");
  return bw;
}

template <typename T>
void unbind_weights(const BoundWeights<T>& bound, ModelWeights& weights) {
  for (const auto& [name, v] : bound.named) {
    weights.at(name) = v.value().template cast<float>();
  }
}

// ---- block computation -----------------------------------------------------

std::vector<std::int64_t> patch_index_map(const ModelConfig& c) {
  const int p = c.patch_size, g = c.grid(), s = c.image_size;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(c.num_patches()) * c.patch_dim());
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx)
      for (int ch = 0; ch < c.channels; ++ch)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            idx.push_back(static_cast<std::int64_t>(ch) * s * s +
                          static_cast<std::int64_t>(gy * p + py) * s + (gx * p + px));
  return idx;
}

template <typename T>
Var<T> patchify_embed(const BoundWeights<T>& w, const Var<T>& image) {
  const auto& c = w.config;
  if (image.size() != c.image_numel()) {
    throw ShapeError("patchify_embed: image has " + std::to_string(image.size()) +
                     " values, expected " + std::to_string(c.image_numel()) + " (" +
                     std::to_string(c.channels) + "x" + std::to_string(c.image_size) + "x" +
                     std::to_string(c.image_size) + ")");
  }
  const auto idx = patch_index_map(c);
  auto patches = ad::gather_elements<T>(
      image, idx,
      {static_cast<std::size_t>(c.num_patches()), static_cast<std::size_t>(c.patch_dim())});
  // Per-channel standardisation with the ImageNet statistics.
  static constexpr double kMean[3] = {0.485, 0.456, 0.406};
  static constexpr double kStd[3] = {0.229, 0.224, 0.225};
  const std::size_t pp = static_cast<std::size_t>(c.patch_size) * c.patch_size;
  Tensor<T> scale({1, static_cast<std::size_t>(c.patch_dim())}), shift(scale.shape);
  for (std::size_t k = 0; k < scale.size(); ++k) {
    const std::size_t ch = (k / pp) % 3;
    scale.data[k] = static_cast<T>(1.0 / kStd[ch]);
    shift.data[k] = static_cast<T>(-kMean[ch] / kStd[ch]);
  }
  auto& tape = image.tape();
  patches = ad::add(ad::mul(patches, tape.constant(std::move(scale))), tape.constant(std::move(shift)));
  auto emb = ad::add(ad::matmul(patches, w.patch_w), w.patch_b);
  std::vector<Var<T>> rows = {w.cls_token, emb};
  return ad::add(ad::concat_rows<T>(rows), w.pos_embed);
}

template <typename T>
AttentionOutput<T> attention_forward(const BoundWeights<T>& w, int block, const Var<T>& z,
                                     const Var<T>& key_weights) {
  const auto& c = w.config;
  const auto& p = w.blocks.at(static_cast<std::size_t>(block));
  const std::size_t d = c.embed_dim, dh = c.head_dim();
  AttentionOutput<T> out;
  out.normed = ad::layernorm(z, p.ln1_g, p.ln1_b);
  auto qkv = ad::add(ad::matmul(out.normed, p.qkv_w), p.qkv_b);
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  for (int h = 0; h < c.heads; ++h) {
    const std::size_t o = static_cast<std::size_t>(h) * dh;
    auto q = ad::slice_cols(qkv, o, o + dh);
    auto k = ad::slice_cols(qkv, d + o, d + o + dh);
    auto v = ad::slice_cols(qkv, 2 * d + o, 2 * d + o + dh);
    auto logits = ad::scale(ad::matmul_nt(q, k), inv);
    out.attn.push_back(key_weights.defined() ? ad::weighted_softmax(logits, key_weights)
                                             : ad::softmax(logits));
    out.values.push_back(v);
  }
  return out;
}

namespace {

template <typename T>
bool constant_off(const Var<T>& gate) {
  return gate.defined() && !gate.requires_grad() && gate.item() == T(0);
}

}  // namespace

template <typename T>
Var<T> finish_block(const BoundWeights<T>& w, int block, const Var<T>& z,
                    const AttentionOutput<T>& attn, const BlockMasks<T>& masks,
                    std::vector<Var<T>>* record) {
  const auto& c = w.config;
  const auto& p = w.blocks.at(static_cast<std::size_t>(block));
  if (!masks.head_gates.empty() && masks.head_gates.size() != static_cast<std::size_t>(c.heads)) {
    throw ShapeError("finish_block: expected " + std::to_string(c.heads) + " head gates");
  }
  Var<T> z1 = z;
  if (!constant_off(masks.msa_gate)) {
    if (attn.attn.size() != static_cast<std::size_t>(c.heads)) {
      throw std::logic_error("finish_block: attention output missing");
    }
    std::vector<Var<T>> heads;
    for (int h = 0; h < c.heads; ++h) {
      auto o = ad::matmul(attn.attn[h], attn.values[h]);
      if (!masks.head_gates.empty()) o = ad::mul(o, masks.head_gates[h]);
      heads.push_back(o);
    }
    auto mixed = ad::concat_cols<T>(heads);
    if (record) record->push_back(mixed);
    auto branch = ad::add(ad::matmul(mixed, p.proj_w), p.proj_b);
    if (masks.query_mask.defined()) branch = ad::mul(branch, masks.query_mask);
    if (masks.msa_gate.defined()) branch = ad::mul(branch, masks.msa_gate);
    z1 = ad::add(z, branch);
  }
  if (constant_off(masks.ffn_gate)) return z1;
  auto x2 = ad::layernorm(z1, p.ln2_g, p.ln2_b);
  auto hidden = ad::gelu(ad::add(ad::matmul(x2, p.fc1_w), p.fc1_b));
  if (record) record->push_back(hidden);
  auto branch = ad::add(ad::matmul(hidden, p.fc2_w), p.fc2_b);
  if (masks.query_mask.defined()) branch = ad::mul(branch, masks.query_mask);
  if (masks.ffn_gate.defined()) branch = ad::mul(branch, masks.ffn_gate);
  return ad::add(z1, branch);
}

template <typename T>
Var<T> block_forward(const BoundWeights<T>& w, int block, const Var<T>& z,
                     const BlockMasks<T>& masks, std::vector<Var<T>>* record) {
  AttentionOutput<T> attn;
  if (!constant_off(masks.msa_gate)) attn = attention_forward(w, block, z, masks.key_weights);
  return finish_block(w, block, z, attn, masks, record);
}

template <typename T>
Var<T> classify(const BoundWeights<T>& w, const Var<T>& z) {
  const int row0[] = {0};
  auto cls = ad::gather_rows<T>(z, row0);
  auto normed = ad::layernorm(cls, w.norm_g, w.norm_b);
  return ad::add(ad::matmul(normed, w.head_w), w.head_b);
}

#define TSLAB_INSTANTIATE(T)                                                                    \
  template BoundWeights<T> bind_weights(Tape<T>&, const ModelWeights&, bool);                   \
  template void unbind_weights(const BoundWeights<T>&, ModelWeights&);                          \
  template Var<T> patchify_embed(const BoundWeights<T>&, const Var<T>&);                        \
  template AttentionOutput<T> attention_forward(const BoundWeights<T>&, int, const Var<T>&,     \
                                                const Var<T>&);                                 \
  template Var<T> finish_block(const BoundWeights<T>&, int, const Var<T>&,                      \
                               const AttentionOutput<T>&, const BlockMasks<T>&,                 \
                               std::vector<Var<T>>*);                                           \
  template Var<T> block_forward(const BoundWeights<T>&, int, const Var<T>&,                     \
                                const BlockMasks<T>&, std::vector<Var<T>>*);                    \
  template Var<T> classify(const BoundWeights<T>&, const Var<T>&);

TSLAB_INSTANTIATE(float)
TSLAB_INSTANTIATE(double)

#undef TSLAB_INSTANTIATE

}  // namespace tslab
