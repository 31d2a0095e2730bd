#include <Eigen/Core>

#include "op_support.hpp"

namespace care::detail {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

template <typename L, typename R>
void accumulate(MutMap& c, const L& lhs, const R& rhs, float alpha, float beta) {
  if (beta == 0.0F) {
    c.noalias() = alpha * (lhs * rhs);
  } else {
    if (beta != 1.0F) c *= beta;
    c.noalias() += alpha * (lhs * rhs);
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, const float* b, float beta, float* c) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MutMap cm(c, M, N);
  if (!trans_a && !trans_b) {
    accumulate(cm, ConstMap(a, M, K), ConstMap(b, K, N), alpha, beta);
  } else if (trans_a && !trans_b) {
    accumulate(cm, ConstMap(a, K, M).transpose(), ConstMap(b, K, N), alpha, beta);
  } else if (!trans_a && trans_b) {
    accumulate(cm, ConstMap(a, M, K), ConstMap(b, N, K).transpose(), alpha, beta);
  } else {
    accumulate(cm, ConstMap(a, K, M).transpose(), ConstMap(b, N, K).transpose(), alpha, beta);
  }
}

}  // namespace care::detail
