#include "tpamtl/diff/lstm.hpp"

#include "tpamtl/diff/ops.hpp"

namespace tpamtl::diff {

LstmState LstmState::zeros(std::size_t batch, std::size_t hidden) {
  return {Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
}

LstmState lstm_step(const Tensor& input, const LstmState& state, const LstmParams& params) {
  const std::size_t k = params.hidden_size();
  const std::size_t batch = input.rows();
  if (params.w_hidden.cols() != 4 * k || params.w_input.cols() != 4 * k ||
      params.bias.rows() != 1 || params.bias.cols() != 4 * k) {
    throw DimensionError("lstm_step: inconsistent parameter shapes Wx" +
                         to_string(params.w_input.shape()) + " Wh" +
                         to_string(params.w_hidden.shape()) + " b" + to_string(params.bias.shape()));
  }
  if (input.cols() != params.input_size()) {
    throw DimensionError("lstm_step: input " + to_string(input.shape()) + " vs Wx " +
                         to_string(params.w_input.shape()));
  }
  const Shape state_shape{batch, k};
  if (state.h.shape() != state_shape || state.c.shape() != state_shape) {
    throw DimensionError("lstm_step: state h" + to_string(state.h.shape()) + " c" +
                         to_string(state.c.shape()) + " expected " + to_string(state_shape));
  }

  const Tensor z =
      add_row(add(matmul(input, params.w_input), matmul(state.h, params.w_hidden)), params.bias);
  const Tensor in_gate = sigmoid(slice_cols(z, 0, k));
  const Tensor forget_gate = sigmoid(slice_cols(z, k, k));
  const Tensor candidate = tanh(slice_cols(z, 2 * k, k));
  const Tensor out_gate = sigmoid(slice_cols(z, 3 * k, k));

  LstmState next;
  next.c = add(mul(forget_gate, state.c), mul(in_gate, candidate));
  next.h = mul(out_gate, tanh(next.c));
  return next;
}

}  // namespace tpamtl::diff
