#include "restune/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>

#include "restune/errors.hpp"
#include "restune/tape.hpp"

namespace restune {

namespace {

using GradFn = std::function<void(std::span<const double> grad_out)>;

void check_finite(const char* op, const Tensor& out) {
  if (!debug_checks_enabled()) return;
  for (double v : out.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

// Wraps freshly computed values into an output tensor and records the op.
Tensor emit(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs, GradFn grad_fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  check_finite(op, out);
  bool record = active_tape() != nullptr &&
                std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (record) {
    out.set_requires_grad(true);
    Tensor handle = out;
    active_tape()->record(op, std::move(inputs), out,
                          [handle, fn = std::move(grad_fn)]() { fn(handle.grad()); });
  }
  return out;
}

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// C[m,n] (+)= A[m,k] * B[k,n] with optional transposes of A or B.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a,
          bool trans_b) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw DimensionError("matmul: cannot multiply " + shape_str(sa) + " by " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) fail();
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  if (sb[sb.size() - 2] != k) fail();
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  const bool shared_b = batch_b.empty();
  if (!shared_b && batch_a != batch_b) fail();
  const std::size_t batch = shape_numel(batch_a);

  Shape out_shape = batch_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    gemm(pa + bi * m * k, pb + (shared_b ? 0 : bi * k * n), out.data() + bi * m * n, m, k, n, false, false);
  }

  return emit("matmul", std::move(out_shape), std::move(out), {a, b},
              [a, b, m, k, n, batch, shared_b](std::span<const double> g) mutable {
                const double* pa = a.data().data();
                const double* pb = b.data().data();
                if (a.requires_grad()) {
                  std::vector<double> da(batch * m * k, 0.0);
                  for (std::size_t bi = 0; bi < batch; ++bi) {
                    gemm(g.data() + bi * m * n, pb + (shared_b ? 0 : bi * k * n), da.data() + bi * m * k, m, n, k,
                         false, true);
                  }
                  accumulate_grad(a, da);
                }
                if (b.requires_grad()) {
                  std::vector<double> db(b.numel(), 0.0);
                  for (std::size_t bi = 0; bi < batch; ++bi) {
                    gemm(pa + bi * m * k, g.data() + bi * m * n, db.data() + (shared_b ? 0 : bi * k * n), k, m, n,
                         true, false);
                  }
                  accumulate_grad(b, db);
                }
              });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out = to_vec(a.data());
  const auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += db[i];
  return emit("add", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    accumulate_grad(a, g);
    accumulate_grad(b, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out = to_vec(a.data());
  const auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= db[i];
  return emit("sub", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    accumulate_grad(a, g);
    std::vector<double> neg(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
    accumulate_grad(b, neg);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out = to_vec(a.data());
  const auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= db[i];
  return emit("mul", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    const auto va = a.data();
    const auto vb = b.data();
    std::vector<double> tmp(g.size());
    if (a.requires_grad()) {
      for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * vb[i];
      accumulate_grad(a, tmp);
    }
    if (b.requires_grad()) {
      for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * va[i];
      accumulate_grad(b, tmp);
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out = to_vec(x.data());
  for (double& v : out) v *= factor;
  return emit("scale", x.shape(), std::move(out), {x}, [x, factor](std::span<const double> g) mutable {
    std::vector<double> dx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * factor;
    accumulate_grad(x, dx);
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return emit("sum", {1}, {total}, {x}, [x](std::span<const double> g) mutable {
    accumulate_grad(x, std::vector<double>(x.numel(), g[0]));
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t width = x.dim(-1);
  const std::size_t rows = x.numel() / width;
  const auto in = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * width;
    double* dst = out.data() + r * width;
    const double peak = *std::max_element(src, src + width);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      dst[j] = std::exp(src[j] - peak);
      z += dst[j];
    }
    for (std::size_t j = 0; j < width; ++j) dst[j] /= z;
  }
  std::vector<double> y = out;
  return emit("softmax", x.shape(), std::move(out), {x},
              [x, y = std::move(y), rows, width](std::span<const double> g) mutable {
                std::vector<double> dx(y.size());
                for (std::size_t r = 0; r < rows; ++r) {
                  double dot = 0.0;
                  for (std::size_t j = 0; j < width; ++j) dot += g[r * width + j] * y[r * width + j];
                  for (std::size_t j = 0; j < width; ++j) dx[r * width + j] = y[r * width + j] * (g[r * width + j] - dot);
                }
                accumulate_grad(x, dx);
              });
}

Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias) {
  if (weight.ndim() != 2 || x.dim(-1) != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t d_in = weight.dim(0);
  const std::size_t d_out = weight.dim(1);
  if (bias && (bias->ndim() != 1 || bias->dim(0) != d_out)) {
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / d_in;
  std::vector<double> out(rows * d_out, 0.0);
  if (bias) {
    const auto bv = bias->data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * d_out);
  }
  gemm(x.data().data(), weight.data().data(), out.data(), rows, d_in, d_out, false, false);
  Shape out_shape = x.shape();
  out_shape.back() = d_out;

  std::vector<Tensor> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  Tensor b = bias ? *bias : Tensor();
  return emit("linear", std::move(out_shape), std::move(out), std::move(inputs),
              [x, weight, b, rows, d_in, d_out](std::span<const double> g) mutable {
                if (x.requires_grad()) {
                  std::vector<double> dx(rows * d_in, 0.0);
                  gemm(g.data(), weight.data().data(), dx.data(), rows, d_out, d_in, false, true);
                  accumulate_grad(x, dx);
                }
                if (weight.requires_grad()) {
                  std::vector<double> dw(d_in * d_out, 0.0);
                  gemm(x.data().data(), g.data(), dw.data(), d_in, rows, d_out, true, false);
                  if (backward_fault() == BackwardFault::LinearWeightScale) {
                    for (double& v : dw) v *= 1.01;
                  }
                  accumulate_grad(weight, dw);
                }
                if (b.defined() && b.requires_grad()) {
                  std::vector<double> db(d_out, 0.0);
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d_out; ++j) db[j] += g[r * d_out + j];
                  }
                  accumulate_grad(b, db);
                }
              });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return emit("reshape", std::move(shape), to_vec(x.data()), {x},
              [x](std::span<const double> g) mutable { accumulate_grad(x, g); });
}

Tensor permute(const Tensor& x, std::span<const std::size_t> order) {
  const Shape& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  std::vector<bool> seen(rank, false);
  if (order.size() != rank) throw DimensionError("permute: order length does not match rank of " + shape_str(in_shape));
  for (std::size_t o : order) {
    if (o >= rank || seen[o]) throw DimensionError("permute: order is not a permutation");
    seen[o] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[order[i]];
  const auto in_strides = strides_of(in_shape);
  // Stride in the input for each output axis.
  std::vector<std::size_t> gather(rank);
  for (std::size_t i = 0; i < rank; ++i) gather[i] = in_strides[order[i]];

  const std::size_t n = x.numel();
  std::vector<std::size_t> src_index(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    src_index[flat] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      src += gather[ax];
      if (counter[ax] < out_shape[ax]) break;
      src -= gather[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  const auto in = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = in[src_index[i]];
  return emit("permute", std::move(out_shape), std::move(out), {x},
              [x, idx = std::move(src_index)](std::span<const double> g) mutable {
                std::vector<double> dx(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) dx[idx[i]] = g[i];
                accumulate_grad(x, dx);
              });
}

Tensor permute(const Tensor& x, std::initializer_list<std::size_t> order) {
  return permute(x, std::span<const std::size_t>(order.begin(), order.size()));
}

Tensor transpose_last2(const Tensor& x) {
  const std::size_t rank = x.ndim();
  if (rank < 2) throw DimensionError("transpose_last2 needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> order(rank);
  for (std::size_t i = 0; i < rank; ++i) order[i] = i;
  std::swap(order[rank - 1], order[rank - 2]);
  return permute(x, order);
}

Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  const Shape& s = x.shape();
  if (axis >= s.size() || index >= s[axis]) {
    throw DimensionError("select: axis " + std::to_string(axis) + " index " + std::to_string(index) +
                         " out of range for " + shape_str(s));
  }
  if (s.size() == 1) throw DimensionError("select: cannot drop the only axis");
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
  const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
  const std::size_t extent = s[axis];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  const auto in = x.data();
  std::vector<double> out(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(in.begin() + static_cast<long>((o * extent + index) * inner), inner,
                out.begin() + static_cast<long>(o * inner));
  }
  return emit("select", std::move(out_shape), std::move(out), {x},
              [x, outer, inner, extent, index](std::span<const double> g) mutable {
                std::vector<double> dx(x.numel(), 0.0);
                for (std::size_t o = 0; o < outer; ++o) {
                  std::copy_n(g.begin() + static_cast<long>(o * inner), inner,
                              dx.begin() + static_cast<long>((o * extent + index) * inner));
                }
                accumulate_grad(x, dx);
              });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = shape_numel(Shape(first.begin(), first.begin() + static_cast<long>(axis)));
  const std::size_t inner = shape_numel(Shape(first.begin() + static_cast<long>(axis) + 1, first.end()));
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<double> out(outer * out_row);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t row = p.dim(static_cast<int>(axis)) * inner;
    const auto in = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(in.begin() + static_cast<long>(o * row), row,
                  out.begin() + static_cast<long>(o * out_row + offset));
    }
    offset += row;
  }
  return emit("concat", std::move(out_shape), std::move(out), parts,
              [parts, offsets, outer, inner, out_row, axis](std::span<const double> g) mutable {
                for (std::size_t pi = 0; pi < parts.size(); ++pi) {
                  const Tensor& p = parts[pi];
                  if (!p.requires_grad()) continue;
                  const std::size_t row = p.dim(static_cast<int>(axis)) * inner;
                  std::vector<double> dp(p.numel());
                  for (std::size_t o = 0; o < outer; ++o) {
                    std::copy_n(g.begin() + static_cast<long>(o * out_row + offsets[pi]), row,
                                dp.begin() + static_cast<long>(o * row));
                  }
                  accumulate_grad(p, dp);
                }
              });
}

Tensor expand(const Tensor& x, const Shape& shape) {
  const Shape& s = x.shape();
  if (s.size() != shape.size()) throw DimensionError("expand: rank mismatch " + shape_str(s) + " -> " + shape_str(shape));
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != shape[i] && s[i] != 1) {
      throw DimensionError("expand: cannot expand " + shape_str(s) + " to " + shape_str(shape));
    }
  }
  const std::size_t rank = s.size();
  const auto in_strides = strides_of(s);
  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> src_index(n);
  std::vector<std::size_t> counter(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t ax = 0; ax < rank; ++ax) src += (s[ax] == 1 ? 0 : counter[ax]) * in_strides[ax];
    src_index[flat] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++counter[ax] < shape[ax]) break;
      counter[ax] = 0;
    }
  }
  const auto in = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = in[src_index[i]];
  return emit("expand", shape, std::move(out), {x}, [x, idx = std::move(src_index)](std::span<const double> g) mutable {
    std::vector<double> dx(x.numel(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) dx[idx[i]] += g[i];
    accumulate_grad(x, dx);
  });
}

Tensor gelu(const Tensor& x) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = 0.5 * in[i] * (1.0 + std::erf(in[i] * std::numbers::sqrt2 / 2.0));
  }
  return emit("gelu", x.shape(), std::move(out), {x}, [x](std::span<const double> g) mutable {
    const auto v = x.data();
    std::vector<double> dx(v.size());
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(v[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v[i] * v[i]);
      dx[i] = g[i] * (cdf + v[i] * pdf);
    }
    accumulate_grad(x, dx);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match input " + shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  const auto in = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += src[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (src[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  return emit("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
              [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](std::span<const double> g) mutable {
                const auto gv = gamma.data();
                std::vector<double> dx(rows * d);
                std::vector<double> dgamma(d, 0.0);
                std::vector<double> dbeta(d, 0.0);
                for (std::size_t r = 0; r < rows; ++r) {
                  double mean_dxhat = 0.0;
                  double mean_dxhat_xhat = 0.0;
                  for (std::size_t j = 0; j < d; ++j) {
                    const double gi = g[r * d + j];
                    const double dxh = gi * gv[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat[r * d + j];
                    dgamma[j] += gi * xhat[r * d + j];
                    dbeta[j] += gi;
                  }
                  mean_dxhat /= static_cast<double>(d);
                  mean_dxhat_xhat /= static_cast<double>(d);
                  for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = g[r * d + j] * gv[j];
                    dx[r * d + j] = rstd[r] * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                  }
                }
                accumulate_grad(x, dx);
                accumulate_grad(gamma, dgamma);
                accumulate_grad(beta, dbeta);
              });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng* rng) {
  if (p < 0.0 || p > 1.0) throw ContractError("dropout probability must lie in [0, 1]");
  if (!training || p == 0.0) return x;
  if (rng == nullptr) throw ContractError("dropout in training mode needs an RNG");
  std::vector<double> mask(x.numel());
  std::bernoulli_distribution keep(1.0 - p);
  const double factor = p < 1.0 ? 1.0 / (1.0 - p) : 0.0;
  for (double& m : mask) m = keep(*rng) ? factor : 0.0;
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * mask[i];
  return emit("dropout", x.shape(), std::move(out), {x}, [x, mask = std::move(mask)](std::span<const double> g) mutable {
    std::vector<double> dx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * mask[i];
    accumulate_grad(x, dx);
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> labels, double smoothing) {
  if (logits.ndim() != 2) throw DimensionError("cross_entropy: logits must be [B, K], got " + shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  if (smoothing < 0.0 || smoothing >= 1.0) throw ContractError("label smoothing must lie in [0, 1)");
  for (std::uint32_t y : labels) {
    if (y >= classes) {
      throw ContractError("label " + std::to_string(y) + " out of range for " + std::to_string(classes) + " classes");
    }
  }
  const auto in = logits.data();
  std::vector<double> probs(in.size());
  double total = 0.0;
  const double off = smoothing / static_cast<double>(classes);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = in.data() + b * classes;
    const double peak = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t k = 0; k < classes; ++k) z += std::exp(row[k] - peak);
    const double log_z = peak + std::log(z);
    for (std::size_t k = 0; k < classes; ++k) {
      const double logp = row[k] - log_z;
      probs[b * classes + k] = std::exp(logp);
      const double target = off + (k == labels[b] ? 1.0 - smoothing : 0.0);
      total -= target * logp;
    }
  }
  std::vector<std::uint32_t> label_copy(labels.begin(), labels.end());
  return emit("cross_entropy", {1}, {total / static_cast<double>(batch)}, {logits},
              [logits, probs = std::move(probs), label_copy = std::move(label_copy), batch, classes, smoothing,
               off](std::span<const double> g) mutable {
                std::vector<double> dx(batch * classes);
                const double inv = g[0] / static_cast<double>(batch);
                for (std::size_t b = 0; b < batch; ++b) {
                  for (std::size_t k = 0; k < classes; ++k) {
                    const double target = off + (k == label_copy[b] ? 1.0 - smoothing : 0.0);
                    dx[b * classes + k] = (probs[b * classes + k] - target) * inv;
                  }
                }
                accumulate_grad(logits, dx);
              });
}

}  // namespace restune
