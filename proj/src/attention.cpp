#include "care/attention.hpp"

#include <cmath>

#include "care/errors.hpp"
#include "care/ops.hpp"
#include "care/rng.hpp"

namespace care::attn {

namespace {

constexpr float kEmbeddingStd = 0.02F;

Tensor normal_table(Shape shape, std::uint64_t seed) {
  SeededRng rng(seed);
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = kEmbeddingStd * static_cast<float>(rng.normal());
  t.set_requires_grad(true);
  return t;
}

// Half the channels encode the row, half the column, each as sin/cos pairs
// over geometrically spaced frequencies.
Tensor sincos_table(std::size_t max_h, std::size_t max_w, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor t({max_h * max_w, dim});
  auto data = t.mutable_data();
  for (std::size_t i = 0; i < max_h; ++i) {
    for (std::size_t j = 0; j < max_w; ++j) {
      float* row = data.data() + (i * max_w + j) * dim;
      for (std::size_t f = 0; f < half / 2; ++f) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(f) / static_cast<double>(half));
        row[2 * f] = static_cast<float>(std::sin(static_cast<double>(i) * freq));
        row[2 * f + 1] = static_cast<float>(std::cos(static_cast<double>(i) * freq));
        row[half + 2 * f] = static_cast<float>(std::sin(static_cast<double>(j) * freq));
        row[half + 2 * f + 1] = static_cast<float>(std::cos(static_cast<double>(j) * freq));
      }
    }
  }
  return t;
}

void check_grid(const PositionEncoding& pos, std::size_t h, std::size_t w) {
  if (h > pos.max_h || w > pos.max_w) {
    throw ConfigError("position encoding: grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " exceeds the " + std::to_string(pos.max_h) + "x" +
                      std::to_string(pos.max_w) + " embedding table");
  }
}

// [b*n, heads*dk] -> [b*heads, n, dk]
Tensor split_heads(const Tensor& x, std::size_t b, std::size_t n, std::size_t heads) {
  const std::size_t dk = x.dim(1) / heads;
  return reshape(permute(reshape(x, {b, n, heads, dk}), {0, 2, 1, 3}), {b * heads, n, dk});
}

Tensor merge_heads(const Tensor& x, std::size_t b, std::size_t heads) {
  const std::size_t n = x.dim(1), dk = x.dim(2);
  return reshape(permute(reshape(x, {b, heads, n, dk}), {0, 2, 1, 3}), {b * n, heads * dk});
}

}  // namespace

PosKind parse_pos_kind(std::string_view text) {
  if (text == "none") return PosKind::none;
  if (text == "sincos_abs") return PosKind::sincos_abs;
  if (text == "learn_abs") return PosKind::learn_abs;
  if (text == "learn_rel") return PosKind::learn_rel;
  throw ConfigError("unknown positional encoding '" + std::string(text) +
                    "' (expected none, sincos_abs, learn_abs or learn_rel)");
}

std::string_view pos_kind_name(PosKind kind) {
  switch (kind) {
    case PosKind::none: return "none";
    case PosKind::sincos_abs: return "sincos_abs";
    case PosKind::learn_abs: return "learn_abs";
    case PosKind::learn_rel: return "learn_rel";
  }
  return "none";
}

PositionEncoding make_position_encoding(PosKind kind, std::size_t max_h, std::size_t max_w,
                                        std::size_t dim, std::uint64_t seed) {
  PositionEncoding pos;
  pos.kind = kind;
  pos.max_h = max_h;
  pos.max_w = max_w;
  pos.dim = dim;
  switch (kind) {
    case PosKind::none: break;
    case PosKind::sincos_abs:
      if (dim % 4 != 0) throw ConfigError("sincos_abs needs a head width divisible by 4");
      pos.table = sincos_table(max_h, max_w, dim);
      break;
    case PosKind::learn_abs: pos.table = normal_table({max_h * max_w, dim}, seed); break;
    case PosKind::learn_rel:
      pos.row_table = normal_table({2 * max_h - 1, dim}, mix_seed(seed, 1));
      pos.col_table = normal_table({2 * max_w - 1, dim}, mix_seed(seed, 2));
      break;
  }
  return pos;
}

TokenGrid tokens_from_featuremap(const Tensor& fm) {
  if (fm.rank() != 4) throw DimensionError("tokens_from_featuremap: expected [b,c,h,w], got " + shape_str(fm.shape()));
  const std::size_t b = fm.dim(0), c = fm.dim(1), h = fm.dim(2), w = fm.dim(3);
  return {reshape(permute(fm, {0, 2, 3, 1}), {b, h * w, c}), h, w};
}

Tensor featuremap_from_tokens(const TokenGrid& grid) {
  const std::size_t b = grid.tokens.dim(0), c = grid.tokens.dim(2);
  return permute(reshape(grid.tokens, {b, grid.h, grid.w, c}), {0, 3, 1, 2});
}

Tensor position_scores(const PositionEncoding& pos, const Tensor& q, std::size_t h,
                       std::size_t w) {
  if (pos.kind == PosKind::none) throw ContractError("position_scores: kind none has no position term");
  check_grid(pos, h, w);
  const std::size_t g = q.dim(0), n = h * w, dk = q.dim(2);
  if (q.dim(1) != n || dk != pos.dim) {
    throw DimensionError("position_scores: q " + shape_str(q.shape()) + " does not match a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid of width " +
                         std::to_string(pos.dim));
  }
  const Tensor flat_q = reshape(q, {g * n, dk});

  if (pos.kind == PosKind::learn_rel) {
    const std::size_t nr = 2 * pos.max_h - 1, nc = 2 * pos.max_w - 1;
    const Tensor qr = matmul(flat_q, transpose(pos.row_table));  // [g*n, nr]
    const Tensor qc = matmul(flat_q, transpose(pos.col_table));  // [g*n, nc]
    std::vector<std::size_t> ri(g * n * n), ci(g * n * n);
    for (std::size_t b = 0; b < g; ++b) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t row = b * n + i;
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t dr = j / w + pos.max_h - 1 - i / w;
          const std::size_t dc = j % w + pos.max_w - 1 - i % w;
          ri[row * n + j] = row * nr + dr;
          ci[row * n + j] = row * nc + dc;
        }
      }
    }
    return add(gather(qr, ri, {g, n, n}), gather(qc, ci, {g, n, n}));
  }

  std::vector<std::size_t> cells(n);
  for (std::size_t t = 0; t < n; ++t) cells[t] = (t / w) * pos.max_w + t % w;
  const Tensor p = gather_rows(pos.table, cells);  // [n, dk]
  return reshape(matmul(flat_q, transpose(p)), {g, n, n});
}

void TransformerConfig::validate() const {
  if (n_blocks == 0) throw ConfigError("transformer: at least one attention block is required");
  if (channels == 0 || dim == 0 || heads == 0) {
    throw ConfigError("transformer: channels, dim and heads must be positive");
  }
  if (dim % heads != 0) {
    throw ConfigError("transformer: dim " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (grid_h * grid_w < 1) throw ConfigError("transformer: empty token grid");
}

AttentionBlockParams init_attention_block(const TransformerConfig& config, std::uint64_t seed) {
  AttentionBlockParams block;
  block.heads = config.heads;
  block.mlp_in = nn::init_linear(config.channels, config.dim, mix_seed(seed, 0));
  block.w_q = nn::he_uniform({config.dim, config.dim}, config.dim, mix_seed(seed, 1));
  block.w_k = nn::he_uniform({config.dim, config.dim}, config.dim, mix_seed(seed, 2));
  block.w_v = nn::he_uniform({config.dim, config.dim}, config.dim, mix_seed(seed, 3));
  block.mlp_out = nn::init_linear(config.dim, config.channels, mix_seed(seed, 4));
  block.pos = make_position_encoding(config.pos, config.grid_h, config.grid_w,
                                     config.dim / config.heads, mix_seed(seed, 5));
  return block;
}

Transformer init_transformer(const TransformerConfig& config, std::uint64_t seed) {
  config.validate();
  Transformer t;
  t.config = config;
  for (std::size_t i = 0; i < config.n_blocks; ++i) {
    t.blocks.push_back(init_attention_block(config, mix_seed(seed, i)));
  }
  return t;
}

Tensor mhsa_forward(const AttentionBlockParams& block, const TokenGrid& grid,
                    AttentionTrace* trace) {
  const Tensor& x = grid.tokens;
  const std::size_t d = block.w_q.dim(0);
  if (x.rank() != 3 || x.dim(2) != d) {
    throw DimensionError("mhsa: expected tokens [b, n, " + std::to_string(d) + "], got " +
                         shape_str(x.shape()));
  }
  if (d % block.heads != 0) {
    throw ConfigError("mhsa: dim " + std::to_string(d) + " is not divisible by " +
                      std::to_string(block.heads) + " heads");
  }
  const std::size_t b = x.dim(0), n = x.dim(1), heads = block.heads;
  const Tensor flat = reshape(x, {b * n, d});
  const Tensor q = split_heads(matmul(flat, block.w_q), b, n, heads);
  const Tensor k = split_heads(matmul(flat, block.w_k), b, n, heads);
  const Tensor v = split_heads(matmul(flat, block.w_v), b, n, heads);

  Tensor logits = matmul(q, transpose(k));
  if (block.pos.kind != PosKind::none) logits = add(logits, position_scores(block.pos, q, grid.h, grid.w));
  const auto dk = static_cast<float>(d / heads);
  const Tensor weights = softmax_rows(scale(logits, 1.0F / std::sqrt(dk)));
  if (trace != nullptr) trace->push_back(weights);
  return reshape(merge_heads(matmul(weights, v), b, heads), {b, n, d});
}

Tensor attention_block_forward(const AttentionBlockParams& block, const Tensor& fm,
                               AttentionTrace* trace) {
  const std::size_t c = block.mlp_in.weight.dim(0);
  if (fm.rank() != 4 || fm.dim(1) != c) {
    throw DimensionError("attention block: expected [b, " + std::to_string(c) + ", h, w], got " +
                         shape_str(fm.shape()));
  }
  const TokenGrid grid = tokens_from_featuremap(fm);
  const std::size_t b = fm.dim(0), n = grid.h * grid.w;
  const Tensor hidden = nn::linear_forward(block.mlp_in, reshape(grid.tokens, {b * n, c}));
  const std::size_t d = hidden.dim(1);
  const Tensor attended = mhsa_forward(block, {reshape(hidden, {b, n, d}), grid.h, grid.w}, trace);
  const Tensor out = nn::linear_forward(block.mlp_out, reshape(attended, {b * n, d}));
  return relu(add(fm, featuremap_from_tokens({reshape(out, {b, n, c}), grid.h, grid.w})));
}

Tensor transformer_forward(const std::vector<AttentionBlockParams>& blocks, const Tensor& fm,
                           AttentionTrace* trace) {
  if (blocks.empty()) throw ConfigError("transformer: at least one attention block is required");
  Tensor h = fm;
  for (const auto& block : blocks) h = attention_block_forward(block, h, trace);
  return mean_pool_2d(h);
}

void collect(Transformer& transformer, const std::string& prefix, nn::ParamList& out) {
  for (std::size_t i = 0; i < transformer.blocks.size(); ++i) {
    auto& block = transformer.blocks[i];
    const std::string p = prefix + ".block" + std::to_string(i);
    nn::collect(block.mlp_in, p + ".mlp_in", out);
    out.push_back({p + ".w_q", block.w_q, true});
    out.push_back({p + ".w_k", block.w_k, true});
    out.push_back({p + ".w_v", block.w_v, true});
    nn::collect(block.mlp_out, p + ".mlp_out", out);
    switch (block.pos.kind) {
      case PosKind::none: break;
      case PosKind::sincos_abs: out.push_back({p + ".pos.table", block.pos.table, false}); break;
      case PosKind::learn_abs: out.push_back({p + ".pos.table", block.pos.table, true}); break;
      case PosKind::learn_rel:
        out.push_back({p + ".pos.row_table", block.pos.row_table, true});
        out.push_back({p + ".pos.col_table", block.pos.col_table, true});
        break;
    }
  }
}

}  // namespace care::attn
