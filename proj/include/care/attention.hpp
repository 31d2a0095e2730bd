#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "care/nn.hpp"
#include "care/tensor.hpp"

namespace care::attn {

enum class PosKind { none, sincos_abs, learn_abs, learn_rel };

// Accepts none | sincos_abs | learn_abs | learn_rel.
PosKind parse_pos_kind(std::string_view text);
std::string_view pos_kind_name(PosKind kind);

// Position term of the attention logits. Tables are sized for a maximum grid
// and shared across heads; each row has the per-head width d_k.
struct PositionEncoding {
  PosKind kind = PosKind::none;
  std::size_t max_h = 0;
  std::size_t max_w = 0;
  std::size_t dim = 0;
  // sincos_abs / learn_abs: [max_h * max_w, dim], cell (i, j) at row i * max_w + j.
  Tensor table;
  // learn_rel: offsets d in [-(max-1), max-1] stored at row d + max - 1.
  Tensor row_table;  // [2 * max_h - 1, dim]
  Tensor col_table;  // [2 * max_w - 1, dim]
};

PositionEncoding make_position_encoding(PosKind kind, std::size_t max_h, std::size_t max_w,
                                        std::size_t dim, std::uint64_t seed);

// Tokens of a batch of feature maps: tokens [b, h*w, c], row t is pixel (t / w, t % w).
struct TokenGrid {
  Tensor tokens;
  std::size_t h = 0;
  std::size_t w = 0;
};

TokenGrid tokens_from_featuremap(const Tensor& fm);
Tensor featuremap_from_tokens(const TokenGrid& grid);

// q [g, h*w, dim] -> position logits [g, h*w, h*w] (before the 1/sqrt(d_k) scale).
Tensor position_scores(const PositionEncoding& pos, const Tensor& q, std::size_t h,
                       std::size_t w);

struct AttentionBlockParams {
  nn::Linear mlp_in;   // [c, d]
  Tensor w_q;          // [d, d], heads are contiguous column groups
  Tensor w_k;
  Tensor w_v;
  nn::Linear mlp_out;  // [d, c]
  PositionEncoding pos;
  std::size_t heads = 4;
};

struct TransformerConfig {
  std::size_t n_blocks = 2;
  std::size_t channels = 128;
  std::size_t dim = 64;
  std::size_t heads = 4;
  PosKind pos = PosKind::learn_rel;
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;

  void validate() const;
};

struct Transformer {
  TransformerConfig config;
  std::vector<AttentionBlockParams> blocks;
};

AttentionBlockParams init_attention_block(const TransformerConfig& config, std::uint64_t seed);
Transformer init_transformer(const TransformerConfig& config, std::uint64_t seed);

// Attention weights of one forward pass, [b * heads, n, n] per block.
using AttentionTrace = std::vector<Tensor>;

// tokens [b, n, d] -> [b, n, d]. Optionally appends the softmax weights to trace.
Tensor mhsa_forward(const AttentionBlockParams& block, const TokenGrid& grid,
                    AttentionTrace* trace = nullptr);
// ReLU(fm + mlp_out(mhsa(mlp_in(tokens(fm))))), same shape as fm.
Tensor attention_block_forward(const AttentionBlockParams& block, const Tensor& fm,
                               AttentionTrace* trace = nullptr);
// Blocks in sequence, then global average pooling: [b, c, h, w] -> [b, c].
Tensor transformer_forward(const std::vector<AttentionBlockParams>& blocks, const Tensor& fm,
                           AttentionTrace* trace = nullptr);
inline Tensor transformer_forward(const Transformer& t, const Tensor& fm,
                                  AttentionTrace* trace = nullptr) {
  return transformer_forward(t.blocks, fm, trace);
}

void collect(Transformer& transformer, const std::string& prefix, nn::ParamList& out);

}  // namespace care::attn
