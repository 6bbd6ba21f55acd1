#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "tslab/metrics.hpp"

using namespace tslab;
using namespace tslab::testing;

namespace {

std::vector<double> values(const ad::Var<double>& v) { return v.value().data; }

}  // namespace

TEST(ModelConfig, DefaultSequence) {
  ModelConfig c;
  EXPECT_EQ(c.num_patches(), 64);
  EXPECT_EQ(c.seq_len(), 65);
  c.image_size = 32;
  c.patch_size = 4;
  EXPECT_EQ(c.num_patches(), 64);
  EXPECT_EQ(c.seq_len(), 65);
}

TEST(ModelConfig, ValidateListsEveryProblem) {
  ModelConfig c;
  c.embed_dim = 30;
  c.heads = 4;
  c.patch_size = 7;
  try {
    c.validate();
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("divisible by heads"), std::string::npos);
    EXPECT_NE(msg.find("patch_size must divide"), std::string::npos);
  }
}

TEST(ModelWeights, ShapesFollowConfig) {
  const auto c = tiny_config();
  const auto w = init_weights(c, 1);
  EXPECT_EQ(w.at("pos_embed").shape, (Shape{17, 16}));
  EXPECT_EQ(w.at("blocks.0.policy.patch.weight").shape, (Shape{16, 2}));
  EXPECT_EQ(w.at("blocks.0.policy.head.weight").shape, (Shape{16, 4}));
  EXPECT_EQ(w.at("blocks.0.policy.block.weight").shape, (Shape{16, 4}));
  for (const auto& [name, t] : w.params) {
    if (name.find("weight") == std::string::npos) continue;
    for (float v : t.data) EXPECT_LE(std::abs(v), 0.04f + 1e-6f) << name;
  }
}

TEST(Patchify, ZeroProjectionLeavesPositionalRows) {
  const auto c = tiny_config();
  auto w = init_weights(c, 2);
  for (auto& v : w.at("patch.weight").data) v = 0;
  ad::Tape<double> tape;
  auto b = bind_weights<double>(tape, w, false);
  Tensor<double> zero({3, 16, 16}, 0.0);
  auto z = patchify_embed(b, tape.constant(zero));
  ASSERT_EQ(z.shape(), (Shape{17, 16}));
  const auto& pos = w.at("pos_embed");
  const auto& cls = w.at("cls_token");
  for (std::size_t r = 0; r < 17; ++r) {
    for (std::size_t k = 0; k < 16; ++k) {
      const double expected = pos.at(r, k) + (r == 0 ? cls.data[k] : 0.0f);
      EXPECT_NEAR(z.value().at(r, k), expected, 1e-6);
    }
  }
}

TEST(Patchify, SwappingPatchesSwapsRows) {
  const auto c = tiny_config();
  auto w = init_weights(c, 3);
  for (auto& v : w.at("pos_embed").data) v = 0;
  const auto img = random_image(c, 4);
  auto swapped = img;
  // Patches 0 and 1 are the first two 4x4 tiles of the top row.
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 4; ++x) {
        const std::size_t a = ch * 256 + y * 16 + x, b = a + 4;
        std::swap(swapped.data[a], swapped.data[b]);
      }
    }
  }
  ad::Tape<double> tape;
  auto b = bind_weights<double>(tape, w, false);
  auto z1 = patchify_embed(b, tape.constant(img.cast<double>()));
  auto z2 = patchify_embed(b, tape.constant(swapped.cast<double>()));
  for (std::size_t k = 0; k < 16; ++k) {
    EXPECT_NEAR(z1.value().at(1, k), z2.value().at(2, k), 1e-12);
    EXPECT_NEAR(z1.value().at(2, k), z2.value().at(1, k), 1e-12);
    EXPECT_NEAR(z1.value().at(3, k), z2.value().at(3, k), 1e-12);
  }
}

TEST(Patchify, WrongImageSizeThrows) {
  const auto c = tiny_config();
  const auto w = init_weights(c, 1);
  ad::Tape<float> tape;
  auto b = bind_weights<float>(tape, w, false);
  EXPECT_THROW(patchify_embed(b, tape.constant(Tensor<float>({3, 8, 8}))), ShapeError);
}

TEST(Attention, SingleTokenAttendsToItself) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 5);
  ad::Tape<double> tape;
  auto b = bind_weights<double>(tape, w, false);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Tensor<double> z({1, 16});
  for (auto& v : z.data) v = n(rng);
  auto out = attention_forward(b, 0, tape.constant(z), ad::Var<double>{});
  for (const auto& a : out.attn) {
    ASSERT_EQ(a.shape(), (Shape{1, 1}));
    EXPECT_DOUBLE_EQ(a.item(), 1.0);
  }
}

TEST(Attention, ZeroQueryKeyGivesUniformRows) {
  const auto c = tiny_config();
  auto w = init_weights(c, 6);
  for (auto& v : w.at("blocks.0.qkv.weight").data) v = 0;
  ad::Tape<double> tape;
  auto b = bind_weights<double>(tape, w, false);
  Tensor<double> z({2, 16});
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (auto& v : z.data) v = n(rng);
  auto out = attention_forward(b, 0, tape.constant(z), ad::Var<double>{});
  for (const auto& a : out.attn) {
    for (double v : a.value().data) EXPECT_NEAR(v, 0.5, 1e-15);
  }
}

// Softmax(QK^T / sqrt(d_h)) V evaluated with plain loops on three tokens.
TEST(Attention, MatchesHandEvaluation) {
  ModelConfig c = tiny_config();
  c.embed_dim = 2;
  c.heads = 1;
  auto w = init_weights(c, 7);
  // Identity LayerNorm is impossible, so feed rows that are already
  // normalised: mean 0, variance 1 over two channels means +-1 entries.
  const std::vector<double> zv = {1, -1, -1, 1, 1, -1};
  auto& qkv = w.at("blocks.0.qkv.weight");  // 2 x 6: [q | k | v]
  const std::vector<float> wq = {0.5f, 0.1f, -0.3f, 0.2f}, wk = {0.4f, -0.2f, 0.3f, 0.6f},
                           wv = {1.0f, 0.5f, -0.5f, 2.0f};
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t k = 0; k < 2; ++k) {
      qkv.at(r, k) = wq[r * 2 + k];
      qkv.at(r, 2 + k) = wk[r * 2 + k];
      qkv.at(r, 4 + k) = wv[r * 2 + k];
    }
  }
  ad::Tape<double> tape;
  auto b = bind_weights<double>(tape, w, false);
  auto out = attention_forward(b, 0, tape.constant(Tensor<double>({3, 2}, zv)), ad::Var<double>{});
  // LayerNorm of (+-1, -+1) with eps 1e-5 scales by 1/sqrt(1 + 1e-5).
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  double x[3][2], q[3][2], kk[3][2], v[3][2];
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 2; ++k) x[i][k] = zv[i * 2 + k] * s;
    for (int k = 0; k < 2; ++k) {
      q[i][k] = x[i][0] * wq[k] + x[i][1] * wq[2 + k];
      kk[i][k] = x[i][0] * wk[k] + x[i][1] * wk[2 + k];
      v[i][k] = x[i][0] * wv[k] + x[i][1] * wv[2 + k];
    }
  }
  for (int i = 0; i < 3; ++i) {
    double logits[3], total = 0;
    for (int j = 0; j < 3; ++j) {
      logits[j] = std::exp((q[i][0] * kk[j][0] + q[i][1] * kk[j][1]) / std::sqrt(2.0));
      total += logits[j];
    }
    for (int j = 0; j < 3; ++j) {
      EXPECT_NEAR(out.attn[0].value().at(i, j), logits[j] / total, 1e-6);
    }
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(out.values[0].value().at(i, k), v[i][k], 1e-6);
  }
}

TEST(Attention, MaskedKeysGetZeroWeightAndRowsSumToOne) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 8);
  ad::Tape<double> tape;
  auto b = bind_weights<double>(tape, w, false);
  auto z = patchify_embed(b, tape.constant(random_image(c, 9).cast<double>()));
  Tensor<double> kw({1, 17}, 1.0);
  for (std::size_t j = 3; j < 17; j += 3) kw.data[j] = 0;
  auto out = attention_forward(b, 1, z, tape.constant(kw));
  for (const auto& a : out.attn) {
    for (std::size_t r = 0; r < 17; ++r) {
      double sum = 0;
      for (std::size_t j = 0; j < 17; ++j) {
        if (kw.data[j] == 0) {
          EXPECT_EQ(a.value().at(r, j), 0.0);
        }
        sum += a.value().at(r, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-5);
    }
  }
}

TEST(Block, AllComponentsOffIsIdentity) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 10);
  ad::Tape<float> tape;
  auto b = bind_weights<float>(tape, w, false);
  auto z = patchify_embed(b, tape.constant(random_image(c, 11)));
  BlockMasks<float> m;
  m.msa_gate = tape.constant(Tensor<float>({1, 1}, 0.0f));
  m.ffn_gate = tape.constant(Tensor<float>({1, 1}, 0.0f));
  auto out = block_forward(b, 0, z, m);
  EXPECT_EQ(out.value().data, z.value().data);
}

TEST(Block, DisabledHeadMatchesZeroedProjection) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 12);
  auto zeroed = w;
  // Rows of the output projection fed by head 1.
  auto& proj = zeroed.at("blocks.0.proj.weight");
  for (std::size_t r = 8; r < 16; ++r) {
    for (std::size_t k = 0; k < 16; ++k) proj.at(r, k) = 0;
  }
  const auto img = random_image(c, 13);
  ad::Tape<double> t1, t2;
  auto b1 = bind_weights<double>(t1, w, false);
  auto b2 = bind_weights<double>(t2, zeroed, false);
  BlockMasks<double> m;
  m.head_gates = {t1.constant(Tensor<double>({1, 1}, 1.0)), t1.constant(Tensor<double>({1, 1}, 0.0))};
  auto y1 = block_forward(b1, 0, patchify_embed(b1, t1.constant(img.cast<double>())), m);
  auto y2 = block_forward(b2, 0, patchify_embed(b2, t2.constant(img.cast<double>())), BlockMasks<double>{});
  for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_NEAR(y1.value().data[i], y2.value().data[i], 1e-12);
}

TEST(Block, FullMasksEqualUnmasked) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 14);
  ad::Tape<float> tape;
  auto b = bind_weights<float>(tape, w, false);
  auto z = patchify_embed(b, tape.constant(random_image(c, 15)));
  BlockMasks<float> m;
  m.key_weights = tape.constant(Tensor<float>({1, 17}, 1.0f));
  m.query_mask = tape.constant(Tensor<float>({17, 1}, 1.0f));
  for (int h = 0; h < 2; ++h) m.head_gates.push_back(tape.constant(Tensor<float>({1, 1}, 1.0f)));
  m.msa_gate = tape.constant(Tensor<float>({1, 1}, 1.0f));
  m.ffn_gate = tape.constant(Tensor<float>({1, 1}, 1.0f));
  auto y1 = block_forward(b, 2, z, m);
  auto y2 = block_forward(b, 2, z, BlockMasks<float>{});
  for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_NEAR(y1.value().data[i], y2.value().data[i], 1e-5);
}

TEST(Block, MaskedQueryRowsPassThrough) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 16);
  ad::Tape<double> tape;
  auto b = bind_weights<double>(tape, w, false);
  auto z = patchify_embed(b, tape.constant(random_image(c, 17).cast<double>()));
  Tensor<double> q({17, 1}, 1.0);
  q.data[5] = 0;
  BlockMasks<double> m;
  m.query_mask = tape.constant(q);
  m.key_weights = tape.constant(Tensor<double>({1, 17}, q.data));
  auto y = block_forward(b, 1, z, m);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(y.value().at(5, k), z.value().at(5, k));
}

TEST(ModelForward, VanillaTraceIsDense) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 18);
  ad::Tape<float> tape;
  auto r = run<float>(tape, w, random_image(c, 19), MechanismSettings{});
  EXPECT_EQ(r.logits.shape(), (Shape{1, 3}));
  EXPECT_DOUBLE_EQ(compute_tur(r.trace), 1.0);
}

TEST(ModelForward, DeterministicInDouble) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 20);
  for (auto kind : {Mechanism::none, Mechanism::ats, Mechanism::adavit, Mechanism::avit}) {
    ad::Tape<double> t1, t2;
    auto a = run<double>(t1, w, random_image(c, 21), tiny_mechanism(kind));
    auto b = run<double>(t2, w, random_image(c, 21), tiny_mechanism(kind));
    EXPECT_EQ(values(a.logits), values(b.logits)) << mechanism_name(kind);
  }
}

TEST(ModelForward, NeverDroppingMechanismsMatchVanilla) {
  const auto c = tiny_config();
  auto w = spread_weights(c, 22);
  w.at("halting.beta").data[0] = -60.0f;
  for (int blk = 0; blk < c.depth; ++blk) {
    for (const char* n : {"patch", "head", "block"}) {
      auto& bias = w.at("blocks." + std::to_string(blk) + ".policy." + n + ".bias");
      for (std::size_t k = 0; k < bias.size(); k += 2) bias.data[k] = 60.0f;
    }
  }
  const auto img = random_image(c, 23);
  ad::Tape<float> t0;
  auto ref = run<float>(t0, w, img, MechanismSettings{});
  for (auto kind : {Mechanism::adavit, Mechanism::avit}) {
    ad::Tape<float> t;
    auto r = run<float>(t, w, img, tiny_mechanism(kind));
    EXPECT_DOUBLE_EQ(compute_tur(r.trace), 1.0);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(r.logits.value().data[i], ref.logits.value().data[i], 1e-5) << mechanism_name(kind);
    }
  }
}

TEST(ModelForward, ClassTokenAlwaysActive) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 24);
  for (auto kind : {Mechanism::ats, Mechanism::adavit, Mechanism::avit}) {
    for (std::uint64_t s = 0; s < 5; ++s) {
      ad::Tape<float> t;
      auto r = run<float>(t, w, random_image(c, 100 + s), tiny_mechanism(kind));
      for (const auto& blk : r.trace.blocks) EXPECT_GE(blk.active_tokens, 1);
    }
  }
}

TEST(Checkpoint, RoundTripAndErrors) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 25);
  const auto dir = std::filesystem::temp_directory_path() / "tslab_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "w.ckpt").string();
  save_checkpoint(path, w);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.config, c);
  for (const auto& [name, t] : w.params) EXPECT_EQ(back.at(name).data, t.data) << name;

  std::ofstream(dir / "bad.ckpt") << "NOTACKPT";
  EXPECT_THROW(load_checkpoint((dir / "bad.ckpt").string()), CheckpointError);
  EXPECT_THROW(load_checkpoint((dir / "missing.ckpt").string()), CheckpointError);
  {
    std::ifstream is(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(is)), {});
    std::ofstream os(dir / "short.ckpt", std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_THROW(load_checkpoint((dir / "short.ckpt").string()), CheckpointError);
  std::filesystem::remove_all(dir);
}
