#pragma once

#include <cstddef>

#include "tpamtl/diff/tensor.hpp"

namespace tpamtl::diff {

// Gate columns are packed in the order input, forget, candidate, output:
// z = x Wx + h Wh + b, split into four [batch x hidden] blocks.
struct LstmParams {
  Tensor w_input;   // [in x 4*hidden]
  Tensor w_hidden;  // [hidden x 4*hidden]
  Tensor bias;      // [1 x 4*hidden]

  std::size_t input_size() const { return w_input.rows(); }
  std::size_t hidden_size() const { return w_hidden.rows(); }
};

struct LstmState {
  Tensor h;
  Tensor c;

  static LstmState zeros(std::size_t batch, std::size_t hidden);
};

// One step of a standard LSTM: i, f, o are sigmoids, the candidate is tanh,
// c' = f*c + i*g and h' = o*tanh(c'). Returns the new state; h' is the output.
LstmState lstm_step(const Tensor& input, const LstmState& state, const LstmParams& params);

}  // namespace tpamtl::diff
