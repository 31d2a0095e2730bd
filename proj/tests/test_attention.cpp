#include <cmath>
#include <numeric>

#include "care/attention.hpp"
#include "care/errors.hpp"
#include "care/gradcheck.hpp"
#include "care/ops.hpp"
#include "care/rng.hpp"
#include "doctest.h"

using namespace care;
using namespace care::attn;

namespace {

Tensor random_tensor(SeededRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

void fill_random(Tensor& t, SeededRng& rng, double lo = -1.0, double hi = 1.0) {
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.uniform(lo, hi));
}

void zero(Tensor& t) {
  for (float& v : t.mutable_data()) v = 0.0F;
}

TransformerConfig small_config(PosKind pos, std::size_t heads, std::size_t h, std::size_t w) {
  TransformerConfig cfg;
  cfg.n_blocks = 1;
  cfg.channels = 8;
  cfg.dim = 8;
  cfg.heads = heads;
  cfg.pos = pos;
  cfg.grid_h = h;
  cfg.grid_w = w;
  return cfg;
}

// Position tables filled with O(1) values so the position term is visible.
void randomize_position(PositionEncoding& pos, SeededRng& rng) {
  if (pos.kind == PosKind::learn_abs) fill_random(pos.table, rng);
  if (pos.kind == PosKind::learn_rel) {
    fill_random(pos.row_table, rng);
    fill_random(pos.col_table, rng);
  }
}

// Position vector seen by query i for key j; empty for kind none.
std::vector<double> pos_vector(const PositionEncoding& pos, std::size_t i, std::size_t j,
                               std::size_t w) {
  std::vector<double> p(pos.dim, 0.0);
  switch (pos.kind) {
    case PosKind::none: return {};
    case PosKind::sincos_abs:
    case PosKind::learn_abs: {
      const std::size_t cell = (j / w) * pos.max_w + j % w;
      for (std::size_t t = 0; t < pos.dim; ++t) p[t] = pos.table.at({cell, t});
      return p;
    }
    case PosKind::learn_rel: {
      const auto dr = static_cast<long>(j / w) - static_cast<long>(i / w) + static_cast<long>(pos.max_h) - 1;
      const auto dc = static_cast<long>(j % w) - static_cast<long>(i % w) + static_cast<long>(pos.max_w) - 1;
      for (std::size_t t = 0; t < pos.dim; ++t) {
        p[t] = pos.row_table.at({static_cast<std::size_t>(dr), t}) +
               pos.col_table.at({static_cast<std::size_t>(dc), t});
      }
      return p;
    }
  }
  return {};
}

// Direct per-pair evaluation of the attention equation for one batch item.
std::vector<double> brute_mhsa(const AttentionBlockParams& block, const Tensor& tokens,
                               std::size_t h, std::size_t w) {
  const std::size_t n = h * w, d = block.w_q.dim(0), heads = block.heads, dk = d / heads;
  auto project = [&](const Tensor& W, std::size_t i, std::size_t col) {
    double acc = 0.0;
    for (std::size_t t = 0; t < d; ++t) acc += static_cast<double>(tokens.at({0, i, t})) * W.at({t, col});
    return acc;
  };
  std::vector<double> out(n * d, 0.0);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(n);
      for (std::size_t j = 0; j < n; ++j) {
        const auto p = pos_vector(block.pos, i, j, w);
        double s = 0.0;
        for (std::size_t t = 0; t < dk; ++t) {
          const double qi = project(block.w_q, i, hd * dk + t);
          s += qi * project(block.w_k, j, hd * dk + t);
          if (!p.empty()) s += qi * p[t];
        }
        logits[j] = s / std::sqrt(static_cast<double>(dk));
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t t = 0; t < dk; ++t) {
          out[i * d + hd * dk + t] += logits[j] / z * project(block.w_v, j, hd * dk + t);
        }
      }
    }
  }
  return out;
}

const PosKind kAllKinds[] = {PosKind::none, PosKind::sincos_abs, PosKind::learn_abs,
                             PosKind::learn_rel};

}  // namespace

TEST_CASE("token grid layout and roundtrip") {
  SeededRng rng(1);
  const Tensor fm = random_tensor(rng, {1, 2, 2, 2});
  const TokenGrid grid = tokens_from_featuremap(fm);
  CHECK(grid.tokens.shape() == Shape{1, 4, 2});
  for (std::size_t c = 0; c < 2; ++c) CHECK(grid.tokens.at({0, 3, c}) == fm.at({0, c, 1, 1}));

  const Tensor big = random_tensor(rng, {3, 5, 2, 4});
  const TokenGrid g2 = tokens_from_featuremap(big);
  CHECK(g2.h == 2);
  CHECK(g2.w == 4);
  for (std::size_t t = 0; t < 8; ++t) CHECK(g2.tokens.at({2, t, 4}) == big.at({2, 4, t / 4, t % 4}));
  CHECK(bitwise_equal(featuremap_from_tokens(g2), big));
}

TEST_CASE("position kind names") {
  for (PosKind k : kAllKinds) CHECK(parse_pos_kind(pos_kind_name(k)) == k);
  CHECK_THROWS_AS(parse_pos_kind("rotary"), ConfigError);
}

TEST_CASE("mhsa matches a per-pair evaluation") {
  for (PosKind kind : kAllKinds) {
    for (std::size_t heads : {1, 2}) {
      CAPTURE(pos_kind_name(kind));
      CAPTURE(heads);
      SeededRng rng(10 + heads);
      const std::size_t h = 2, w = heads == 1 ? 2 : 3;
      AttentionBlockParams block = init_attention_block(small_config(kind, heads, 3, 3), 7);
      randomize_position(block.pos, rng);
      const Tensor tokens = random_tensor(rng, {1, h * w, 8});
      const Tensor got = mhsa_forward(block, {tokens, h, w});
      const auto want = brute_mhsa(block, tokens, h, w);
      REQUIRE(got.numel() == want.size());
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data()[i] - want[i]) < 1e-5);
    }
  }
}

TEST_CASE("single token attends to itself") {
  SeededRng rng(2);
  AttentionBlockParams block = init_attention_block(small_config(PosKind::learn_rel, 2, 2, 2), 3);
  zero(block.pos.row_table);
  zero(block.pos.col_table);
  const Tensor token = random_tensor(rng, {1, 1, 8});
  const Tensor out = mhsa_forward(block, {token, 1, 1});
  const Tensor expect = matmul(reshape(token, {1, 8}), block.w_v);
  for (std::size_t t = 0; t < 8; ++t) CHECK(out.data()[t] == doctest::Approx(expect.data()[t]).epsilon(1e-6));
}

TEST_CASE("zero queries give the mean of the values") {
  SeededRng rng(3);
  AttentionBlockParams block = init_attention_block(small_config(PosKind::none, 2, 2, 3), 4);
  zero(block.w_q);
  const Tensor tokens = random_tensor(rng, {1, 6, 8});
  AttentionTrace trace;
  const Tensor out = mhsa_forward(block, {tokens, 2, 3}, &trace);
  const Tensor v = matmul(reshape(tokens, {6, 8}), block.w_v);
  for (std::size_t t = 0; t < 8; ++t) {
    double m = 0.0;
    for (std::size_t i = 0; i < 6; ++i) m += v.at({i, t});
    m /= 6.0;
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(out.at({0, i, t}) - m) < 1e-6);
  }
  for (float a : trace.at(0).data()) CHECK(a == doctest::Approx(1.0 / 6.0));
}

TEST_CASE("permutation equivariance without position term") {
  SeededRng rng(4);
  AttentionBlockParams block = init_attention_block(small_config(PosKind::none, 2, 2, 3), 5);
  zero(block.w_q);
  const Tensor tokens = random_tensor(rng, {1, 6, 8});
  const std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
  const Tensor permuted = reshape(gather_rows(reshape(tokens, {6, 8}), perm), {1, 6, 8});
  const Tensor a = mhsa_forward(block, {tokens, 2, 3});
  const Tensor b = mhsa_forward(block, {permuted, 2, 3});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t t = 0; t < 8; ++t) CHECK(std::abs(b.at({0, i, t}) - a.at({0, perm[i], t})) < 1e-6);
}

TEST_CASE("relative position scores depend only on the offset") {
  SeededRng rng(5);
  PositionEncoding pos = make_position_encoding(PosKind::learn_rel, 4, 4, 4, 9);
  randomize_position(pos, rng);
  const std::size_t h = 4, w = 4, n = 16;
  // The same query vector at every token isolates the position term.
  const Tensor qv = random_tensor(rng, {4});
  Tensor q({1, n, 4});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < 4; ++t) q.mutable_data()[i * 4 + t] = qv.data()[t];
  const Tensor s = position_scores(pos, q, h, w);
  auto at = [&](std::size_t r1, std::size_t c1, std::size_t r2, std::size_t c2) {
    return s.at({0, r1 * w + c1, r2 * w + c2});
  };
  for (std::size_t r1 = 0; r1 + 1 < h; ++r1)
    for (std::size_t c1 = 0; c1 + 1 < w; ++c1)
      for (std::size_t r2 = 0; r2 + 1 < h; ++r2)
        for (std::size_t c2 = 0; c2 + 1 < w; ++c2) {
          CHECK(at(r1, c1, r2, c2) == at(r1 + 1, c1 + 1, r2 + 1, c2 + 1));
          CHECK(at(r1, c1, r2, c2) == at(r1 + 1, c1, r2 + 1, c2));
        }

  zero(pos.row_table);
  zero(pos.col_table);
  const Tensor zeroed = position_scores(pos, q, h, w);
  for (float v : zeroed.data()) CHECK(v == 0.0F);
}

TEST_CASE("absolute position with a one-hot query reads one coordinate") {
  SeededRng rng(6);
  PositionEncoding pos = make_position_encoding(PosKind::learn_abs, 3, 3, 4, 2);
  randomize_position(pos, rng);
  Tensor q({1, 4, 4});
  q.mutable_data()[0 * 4 + 2] = 1.0F;  // token 0 queries coordinate 2
  const Tensor s = position_scores(pos, q, 2, 2);
  for (std::size_t j = 0; j < 4; ++j) {
    const std::size_t cell = (j / 2) * 3 + j % 2;
    CHECK(s.at({0, 0, j}) == pos.table.at({cell, 2}));
  }
}

TEST_CASE("grid larger than the table is rejected") {
  for (PosKind kind : {PosKind::sincos_abs, PosKind::learn_abs, PosKind::learn_rel}) {
    const PositionEncoding pos = make_position_encoding(kind, 2, 2, 4, 1);
    CHECK_THROWS_AS(position_scores(pos, Tensor({1, 9, 4}), 3, 3), ConfigError);
  }
  TransformerConfig cfg = small_config(PosKind::none, 3, 2, 2);
  CHECK_THROWS_AS(init_transformer(cfg, 1), ConfigError);
  cfg.heads = 2;
  cfg.n_blocks = 0;
  CHECK_THROWS_AS(init_transformer(cfg, 1), ConfigError);
  CHECK_THROWS_AS(transformer_forward(std::vector<AttentionBlockParams>{}, Tensor({1, 8, 2, 2})), ConfigError);
}

TEST_CASE("zero weights reduce the block to relu") {
  SeededRng rng(7);
  AttentionBlockParams block = init_attention_block(small_config(PosKind::learn_rel, 2, 2, 2), 1);
  for (Tensor* t : {&block.mlp_in.weight, &block.w_q, &block.w_k, &block.w_v, &block.mlp_out.weight}) zero(*t);
  const Tensor fm = random_tensor(rng, {2, 8, 2, 2});
  const Tensor out = attention_block_forward(block, fm);
  CHECK(out.shape() == fm.shape());
  for (std::size_t i = 0; i < fm.numel(); ++i) CHECK(out.data()[i] == std::max(fm.data()[i], 0.0F));

  Transformer t = init_transformer(small_config(PosKind::none, 2, 2, 2), 3);
  for (auto& b : t.blocks)
    for (Tensor* p : {&b.mlp_in.weight, &b.w_q, &b.w_k, &b.w_v, &b.mlp_out.weight}) zero(*p);
  for (float a : {-0.5F, 0.75F}) {
    const Tensor pooled = transformer_forward(t, Tensor({2, 8, 2, 2}, a));
    for (float v : pooled.data()) CHECK(v == std::max(a, 0.0F));
  }
}

TEST_CASE("one block transformer equals block then pool") {
  SeededRng rng(8);
  Transformer t = init_transformer(small_config(PosKind::learn_abs, 2, 2, 2), 4);
  const Tensor fm = random_tensor(rng, {2, 8, 2, 2});
  CHECK(bitwise_equal(transformer_forward(t, fm), mean_pool_2d(attention_block_forward(t.blocks[0], fm))));
}

TEST_CASE("attention block gradients match finite differences") {
  for (PosKind kind : kAllKinds) {
    CAPTURE(pos_kind_name(kind));
    SeededRng rng(20);
    AttentionBlockParams block = init_attention_block(small_config(kind, 2, 2, 2), 11);
    randomize_position(block.pos, rng);
    // Shrink weights so logits stay moderate and ReLU inputs avoid the kink.
    for (Tensor* p : {&block.w_q, &block.w_k}) {
      for (float& v : p->mutable_data()) v *= 0.3F;
    }
    Tensor fm = random_tensor(rng, {2, 8, 2, 2}, 0.2, 1.0);
    fm.set_requires_grad(true);
    std::vector<Tensor> inputs{fm, block.w_q, block.w_k, block.w_v, block.mlp_in.weight};
    if (kind == PosKind::learn_rel) inputs.push_back(block.pos.row_table);
    if (kind == PosKind::learn_abs) inputs.push_back(block.pos.table);
    const auto result = check::gradient_check(
        "attention_block",
        [&block](std::span<const Tensor> in) { return attention_block_forward(block, in[0]); },
        inputs);
    CAPTURE(result.rel_error);
    CHECK(result.passed);
  }
}

TEST_CASE("attention rows sum to one for every kind and depth") {
  for (PosKind kind : kAllKinds) {
    for (std::size_t n = 2; n <= 6; ++n) {
      TransformerConfig cfg;
      cfg.n_blocks = n;
      cfg.pos = kind;
      Transformer t = init_transformer(cfg, 100 + n);
      SeededRng rng(n);
      const Tensor fm = random_tensor(rng, {2, 128, 4, 4}, 0.0, 2.0);
      AttentionTrace trace;
      const Tensor pooled = transformer_forward(t, fm, &trace);
      CHECK(all_finite(pooled));
      REQUIRE(trace.size() == n);
      double worst = 0.0;
      for (const Tensor& wgt : trace) {
        CHECK(wgt.shape() == Shape{8, 16, 16});
        for (std::size_t r = 0; r < 8 * 16; ++r) {
          double s = 0.0;
          for (std::size_t j = 0; j < 16; ++j) s += wgt.data()[r * 16 + j];
          worst = std::max(worst, std::abs(s - 1.0));
        }
      }
      CHECK(worst < 1e-6);
    }
  }
}
