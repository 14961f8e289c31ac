#pragma once

#include <span>
#include <vector>

#include "tpamtl/diff/rng.hpp"
#include "tpamtl/diff/tensor.hpp"

// Differentiable primitives over rank-2 tensors. Row vectors are [1 x n],
// column vectors [m x 1], scalars [1 x 1].
namespace tpamtl::diff {

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
Tensor add_scalar(const Tensor& x, Real offset);

// x[m x n] + row[1 x n] broadcast over rows.
Tensor add_row(const Tensor& x, const Tensor& row);
// col[m x 1] scales each row of x[m x n].
Tensor mul_col(const Tensor& col, const Tensor& x);
// s[1 x 1] broadcast to [rows x cols].
Tensor broadcast(const Tensor& s, std::size_t rows, std::size_t cols);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor leaky_relu(const Tensor& x, Real slope);
// max(x, 0) + log1p(exp(-|x|)).
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);

// Repeats x[b x n] `times` times along rows: [times*b x n].
Tensor tile_rows(const Tensor& x, std::size_t times);
// x[n*b x k] viewed as n stacked [b x k] blocks; returns their sum [b x k].
Tensor block_sum_rows(const Tensor& x, std::size_t block_rows);
// x[n*b x 1]: softmax across the n blocks independently for each of b rows.
Tensor block_softmax(const Tensor& x, std::size_t block_rows);

// Inverted dropout. With active == false, or rate == 0, returns x itself.
Tensor dropout(const Tensor& x, Real rate, RngStream& rng, bool active);

// mu + sigma * eps with eps ~ N(0, 1) drawn from rng; eps is a constant.
Tensor gaussian_sample(const Tensor& mu, const Tensor& sigma, RngStream& rng);

// Sum over rows where mask != 0 of -[y log p + (1-y) log(1-p)], with p
// clamped to [eps, 1 - eps]. p, labels and mask are all [m x 1].
Tensor binary_cross_entropy(const Tensor& p, std::span<const Real> labels,
                            std::span<const Real> mask, Real eps = Real(1e-7));

}  // namespace tpamtl::diff
