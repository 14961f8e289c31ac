#include "tpamtl/diff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tpamtl::diff {

using detail::make_result;

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " +
                         (t.defined() ? to_string(t.shape()) : std::string("<undefined>")));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

Real* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer() : nullptr;
}

// Elementwise unary op; dfdx receives (x, y) and returns dy/dx.
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF dfdx) {
  std::vector<Real> out(x.size());
  const auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(x.shape(), std::move(out), {x}, [dfdx](Node& self) {
    Real* g = parent_grad(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      g[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
    }
  });
}

Real stable_sigmoid(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
  if (b.rows() != n) {
    throw DimensionError("matmul: inner extents differ for " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  std::vector<Real> out(m * p, Real{0});
  const Real* av = a.values().data();
  const Real* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    Real* row = out.data() + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const Real aik = av[i * n + k];
      const Real* brow = bv + k * p;
      for (std::size_t j = 0; j < p; ++j) row[j] += aik * brow[j];
    }
  }
  return make_result({m, p}, std::move(out), {a, b}, [m, n, p](Node& self) {
    const Real* g = self.grad.data();
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (Real* ga = parent_grad(self, 0)) {
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) {
          Real acc = 0;
          for (std::size_t j = 0; j < p; ++j) acc += g[i * p + j] * bv[k * p + j];
          ga[i * n + k] += acc;
        }
    }
    if (Real* gb = parent_grad(self, 1)) {
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) {
          const Real aik = av[i * n + k];
          for (std::size_t j = 0; j < p; ++j) gb[k * p + j] += aik * g[i * p + j];
        }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Real> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Real* g = parent_grad(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<Real> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (Real* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<Real> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (Real* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

Tensor scale(const Tensor& x, Real factor) {
  return unary(
      x, [factor](Real v) { return v * factor; }, [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& x, Real offset) {
  return unary(
      x, [offset](Real v) { return v + offset; }, [](Real, Real) { return Real(1); });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_rank2(x, "add_row");
  require_rank2(row, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (row.rows() != 1 || row.cols() != n) {
    throw DimensionError("add_row: cannot broadcast " + to_string(row.shape()) + " onto " +
                         to_string(x.shape()));
  }
  std::vector<Real> out(x.values().begin(), x.values().end());
  const auto rv = row.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  return make_result(x.shape(), std::move(out), {x, row}, [m, n](Node& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (Real* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
  });
}

Tensor mul_col(const Tensor& col, const Tensor& x) {
  require_rank2(col, "mul_col");
  require_rank2(x, "mul_col");
  const std::size_t m = x.rows(), n = x.cols();
  if (col.cols() != 1 || col.rows() != m) {
    throw DimensionError("mul_col: column " + to_string(col.shape()) + " does not scale rows of " +
                         to_string(x.shape()));
  }
  std::vector<Real> out(m * n);
  const auto cv = col.values(), xv = x.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = cv[i] * xv[i * n + j];
  return make_result(x.shape(), std::move(out), {col, x}, [m, n](Node& self) {
    const auto& cv = self.parents[0]->value;
    const auto& xv = self.parents[1]->value;
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i) {
        Real acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += self.grad[i * n + j] * xv[i * n + j];
        g[i] += acc;
      }
    if (Real* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * cv[i];
  });
}

Tensor broadcast(const Tensor& s, std::size_t rows, std::size_t cols) {
  if (s.size() != 1) throw DimensionError("broadcast: expected a scalar, got " + to_string(s.shape()));
  return make_result({rows, cols}, std::vector<Real>(rows * cols, s.item()), {s}, [](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      Real acc = 0;
      for (Real v : self.grad) acc += v;
      g[0] += acc;
    }
  });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return Real(1) - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor leaky_relu(const Tensor& x, Real slope) {
  return unary(
      x, [slope](Real v) { return v > 0 ? v : slope * v; },
      [slope](Real v, Real) { return v > 0 ? Real(1) : slope; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      // exp underflows below about -745; clamping to the smallest normal keeps
      // the output strictly positive.
      x,
      [](Real v) {
        return std::max(std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v))), std::numeric_limits<Real>::min());
      },
      [](Real v, Real) { return stable_sigmoid(v); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](Real v) { return v * v; }, [](Real v, Real) { return Real(2) * v; });
}

Tensor sum(const Tensor& x) {
  Real acc = 0;
  for (Real v : x.values()) acc += v;
  return make_result({1, 1}, {acc}, {x}, [](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), Real(1) / static_cast<Real>(x.size()));
}

Tensor sum_squares(const Tensor& x) {
  Real acc = 0;
  for (Real v : x.values()) acc += v * v;
  return make_result({1, 1}, {acc}, {x}, [](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      const auto& xv = self.parents[0]->value;
      for (std::size_t i = 0; i < xv.size(); ++i) g[i] += Real(2) * xv[i] * self.grad[0];
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch " + to_string(parts[0].shape()) + " vs " +
                           to_string(p.shape()));
    }
    offsets.push_back(total);
    total += p.cols();
  }
  std::vector<Real> out(m * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t c = parts[k].cols();
    const auto v = parts[k].values();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(v.data() + i * c, c, out.data() + i * total + offsets[k]);
  }
  return make_result({m, total}, std::move(out), {parts.begin(), parts.end()},
                     [m, total, offsets](Node& self) {
                       for (std::size_t k = 0; k < self.parents.size(); ++k) {
                         Real* g = parent_grad(self, k);
                         if (!g) continue;
                         const std::size_t c = self.parents[k]->shape[1];
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                             g[i * c + j] += self.grad[i * total + offsets[k] + j];
                       }
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (begin + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + to_string(x.shape()));
  }
  std::vector<Real> out(m * count);
  const auto v = x.values();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(v.data() + i * n + begin, count, out.data() + i * count);
  return make_result({m, count}, std::move(out), {x}, [m, n, begin, count](Node& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += self.grad[i * count + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column mismatch " + to_string(parts[0].shape()) + " vs " +
                           to_string(p.shape()));
    }
    rows += p.rows();
  }
  std::vector<Real> out;
  out.reserve(rows * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_result({rows, n}, std::move(out), {parts.begin(), parts.end()}, [](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t len = self.parents[k]->value.size();
      if (Real* g = parent_grad(self, k))
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      offset += len;
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_rows");
  const std::size_t n = x.cols();
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + to_string(x.shape()));
  }
  const auto v = x.values();
  std::vector<Real> out(v.begin() + begin * n, v.begin() + (begin + count) * n);
  return make_result({count, n}, std::move(out), {x}, [begin, n](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      g += begin * n;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor tile_rows(const Tensor& x, std::size_t times) {
  require_rank2(x, "tile_rows");
  const std::size_t len = x.size();
  std::vector<Real> out;
  out.reserve(len * times);
  for (std::size_t t = 0; t < times; ++t) out.insert(out.end(), x.values().begin(), x.values().end());
  return make_result({x.rows() * times, x.cols()}, std::move(out), {x}, [len, times](Node& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t t = 0; t < times; ++t)
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[t * len + i];
  });
}

Tensor block_sum_rows(const Tensor& x, std::size_t block_rows) {
  require_rank2(x, "block_sum_rows");
  if (block_rows == 0 || x.rows() % block_rows != 0) {
    throw DimensionError("block_sum_rows: " + to_string(x.shape()) + " is not a stack of " +
                         std::to_string(block_rows) + "-row blocks");
  }
  const std::size_t len = block_rows * x.cols();
  const std::size_t blocks = x.rows() / block_rows;
  std::vector<Real> out(len, Real{0});
  const auto v = x.values();
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < len; ++i) out[i] += v[b * len + i];
  return make_result({block_rows, x.cols()}, std::move(out), {x}, [len, blocks](Node& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t i = 0; i < len; ++i) g[b * len + i] += self.grad[i];
  });
}

Tensor block_softmax(const Tensor& x, std::size_t block_rows) {
  require_rank2(x, "block_softmax");
  if (x.cols() != 1 || block_rows == 0 || x.rows() % block_rows != 0) {
    throw DimensionError("block_softmax: " + to_string(x.shape()) + " is not a stack of [" +
                         std::to_string(block_rows) + "x1] blocks");
  }
  const std::size_t blocks = x.rows() / block_rows;
  const auto v = x.values();
  std::vector<Real> out(v.size());
  for (std::size_t r = 0; r < block_rows; ++r) {
    Real top = -std::numeric_limits<Real>::infinity();
    for (std::size_t b = 0; b < blocks; ++b) top = std::max(top, v[b * block_rows + r]);
    Real total = 0;
    for (std::size_t b = 0; b < blocks; ++b) {
      out[b * block_rows + r] = std::exp(v[b * block_rows + r] - top);
      total += out[b * block_rows + r];
    }
    for (std::size_t b = 0; b < blocks; ++b) out[b * block_rows + r] /= total;
  }
  return make_result(x.shape(), std::move(out), {x}, [block_rows, blocks](Node& self) {
    Real* g = parent_grad(self, 0);
    if (!g) return;
    const auto& y = self.value;
    for (std::size_t r = 0; r < block_rows; ++r) {
      Real dot = 0;
      for (std::size_t b = 0; b < blocks; ++b) dot += self.grad[b * block_rows + r] * y[b * block_rows + r];
      for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t i = b * block_rows + r;
        g[i] += y[i] * (self.grad[i] - dot);
      }
    }
  });
}

Tensor dropout(const Tensor& x, Real rate, RngStream& rng, bool active) {
  if (!(rate >= 0) || rate >= 1) {
    throw ConfigurationError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!active || rate == 0) return x;
  const Real keep_scale = Real(1) / (Real(1) - rate);
  std::vector<Real> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < static_cast<double>(rate) ? Real(0) : keep_scale;
  std::vector<Real> out(x.size());
  const auto v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * mask[i];
  return make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Tensor gaussian_sample(const Tensor& mu, const Tensor& sigma, RngStream& rng) {
  require_same_shape(mu, sigma, "gaussian_sample");
  std::vector<Real> eps(mu.size());
  for (auto& e : eps) e = static_cast<Real>(rng.normal());
  std::vector<Real> out(mu.size());
  const auto mv = mu.values(), sv = sigma.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mv[i] + sv[i] * eps[i];
  return make_result(mu.shape(), std::move(out), {mu, sigma}, [eps = std::move(eps)](Node& self) {
    if (Real* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < eps.size(); ++i) g[i] += self.grad[i];
    if (Real* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < eps.size(); ++i) g[i] += self.grad[i] * eps[i];
  });
}

Tensor binary_cross_entropy(const Tensor& p, std::span<const Real> labels,
                            std::span<const Real> mask, Real eps) {
  require_rank2(p, "binary_cross_entropy");
  if (p.cols() != 1 || labels.size() != p.rows() || mask.size() != p.rows()) {
    throw DimensionError("binary_cross_entropy: predictions " + to_string(p.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels / " + std::to_string(mask.size()) +
                         " mask entries");
  }
  std::vector<Real> y(labels.begin(), labels.end());
  std::vector<Real> w(mask.begin(), mask.end());
  Real loss = 0;
  const auto pv = p.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (w[i] == 0) continue;
    const Real pc = std::clamp(pv[i], eps, Real(1) - eps);
    loss -= w[i] * (y[i] * std::log(pc) + (Real(1) - y[i]) * std::log(Real(1) - pc));
  }
  return make_result({1, 1}, {loss}, {p}, [y = std::move(y), w = std::move(w), eps](Node& self) {
    Real* g = parent_grad(self, 0);
    if (!g) return;
    const auto& pv = self.parents[0]->value;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (w[i] == 0 || pv[i] < eps || pv[i] > Real(1) - eps) continue;
      g[i] -= self.grad[0] * w[i] * (y[i] / pv[i] - (Real(1) - y[i]) / (Real(1) - pv[i]));
    }
  });
}

}  // namespace tpamtl::diff
