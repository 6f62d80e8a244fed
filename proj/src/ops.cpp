// Copyright 2026 The cropr-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include "cropr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace cropr {
namespace {

template <typename Scalar>
using Node = TensorNode<Scalar>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using CMatMap = Eigen::Map<const RowMat<Scalar>>;

struct AxisSplit {
  Index outer;
  Index n;
  Index inner;
};

Index normalize_axis(Index axis, Index rank, const char* op) {
  Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

AxisSplit split_axis(const Shape& shape, Index axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

void require_rank(const Shape& s, Index rank, const char* op) {
  if (static_cast<Index>(s.size()) != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

template <typename Scalar>
bool wants(const Node<Scalar>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

Shape drop_axis(const Shape& s, Index axis) {
  Shape out = s;
  out.erase(out.begin() + axis);
  return out;
}

void check_rows(std::span<const Index> rows, Index limit, const char* op) {
  for (Index r : rows) {
    if (r < 0 || r >= limit) {
      throw IndexError(std::string(op) + ": row index " + std::to_string(r) + " outside [0, " +
                       std::to_string(limit) + ")");
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Vec<Scalar> out(m * n);
  MatMap<Scalar>(out.data(), m, n).noalias() =
      CMatMap<Scalar>(a.value().data(), m, k) * CMatMap<Scalar>(b.value().data(), k, n);
  return detail::make_result<Scalar>({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](const Node<Scalar>& self) {
    CMatMap<Scalar> dy(self.grad.data(), m, n);
    if (wants(self, 0)) {
      Vec<Scalar> da(m * k);
      MatMap<Scalar>(da.data(), m, k).noalias() =
          dy * CMatMap<Scalar>(self.parents[1]->value.data(), k, n).transpose();
      self.parents[0]->accumulate(da);
    }
    if (wants(self, 1)) {
      Vec<Scalar> db(k * n);
      MatMap<Scalar>(db.data(), k, n).noalias() =
          CMatMap<Scalar>(self.parents[0]->value.data(), m, k).transpose() * dy;
      self.parents[1]->accumulate(db);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> bmm(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool transpose_b) {
  require_rank(a.shape(), 3, "bmm");
  require_rank(b.shape(), 3, "bmm");
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index bk = transpose_b ? b.dim(2) : b.dim(1);
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != batch || bk != k) {
    throw ShapeError("bmm: incompatible shapes " + shape_string(a.shape()) + " x " + shape_string(b.shape()) +
                     (transpose_b ? "^T" : ""));
  }
  Vec<Scalar> out(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    CMatMap<Scalar> A(a.value().data() + i * m * k, m, k);
    MatMap<Scalar> Y(out.data() + i * m * n, m, n);
    if (transpose_b) {
      Y.noalias() = A * CMatMap<Scalar>(b.value().data() + i * n * k, n, k).transpose();
    } else {
      Y.noalias() = A * CMatMap<Scalar>(b.value().data() + i * k * n, k, n);
    }
  }
  return detail::make_result<Scalar>(
      {batch, m, n}, std::move(out), {a, b}, "bmm", [batch, m, k, n, transpose_b](const Node<Scalar>& self) {
        const bool ga = wants(self, 0), gb = wants(self, 1);
        Vec<Scalar> da, db;
        if (ga) da.resize(batch * m * k);
        if (gb) db.resize(batch * k * n);
        const Scalar* av = self.parents[0]->value.data();
        const Scalar* bv = self.parents[1]->value.data();
        for (Index i = 0; i < batch; ++i) {
          CMatMap<Scalar> dy(self.grad.data() + i * m * n, m, n);
          CMatMap<Scalar> A(av + i * m * k, m, k);
          if (transpose_b) {
            CMatMap<Scalar> B(bv + i * n * k, n, k);
            if (ga) MatMap<Scalar>(da.data() + i * m * k, m, k).noalias() = dy * B;
            if (gb) MatMap<Scalar>(db.data() + i * n * k, n, k).noalias() = dy.transpose() * A;
          } else {
            CMatMap<Scalar> B(bv + i * k * n, k, n);
            if (ga) MatMap<Scalar>(da.data() + i * m * k, m, k).noalias() = dy * B.transpose();
            if (gb) MatMap<Scalar>(db.data() + i * k * n, k, n).noalias() = A.transpose() * dy;
          }
        }
        if (ga) self.parents[0]->accumulate(da);
        if (gb) self.parents[1]->accumulate(db);
      });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  return detail::make_result<Scalar>(a.shape(), a.value() + b.value(), {a, b}, "add", [](const Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  return detail::make_result<Scalar>(a.shape(), a.value() - b.value(), {a, b}, "sub", [](const Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate(-self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Vec<Scalar> out = a.value().cwiseProduct(b.value());
  return detail::make_result<Scalar>(a.shape(), std::move(out), {a, b}, "mul", [](const Node<Scalar>& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad.cwiseProduct(self.parents[1]->value));
    if (wants(self, 1)) self.parents[1]->accumulate(self.grad.cwiseProduct(self.parents[0]->value));
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  return detail::make_result<Scalar>(x.shape(), x.value() * factor, {x}, "scale",
                                     [factor](const Node<Scalar>& self) {
                                       self.parents[0]->accumulate(self.grad * factor);
                                     });
}

template <typename Scalar>
Tensor<Scalar> add_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.dim(-1) != bias.dim(0)) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " does not match " + shape_string(x.shape()));
  }
  const Index cols = bias.dim(0), rows = x.numel() / std::max<Index>(cols, 1);
  Vec<Scalar> out = x.value();
  MatMap<Scalar>(out.data(), rows, cols).rowwise() += bias.value().transpose();
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x, bias}, "add_bias",
                                     [rows, cols](const Node<Scalar>& self) {
                                       self.parents[0]->accumulate(self.grad);
                                       if (wants(self, 1)) {
                                         Vec<Scalar> db =
                                             CMatMap<Scalar>(self.grad.data(), rows, cols).colwise().sum().transpose();
                                         self.parents[1]->accumulate(db);
                                       }
                                     });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Vec<Scalar> out = x.value().cwiseMax(Scalar(0));
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x}, "relu", [](const Node<Scalar>& self) {
    const auto& in = self.parents[0]->value;
    Vec<Scalar> d = (in.array() > Scalar(0)).select(self.grad.array(), Scalar(0)).matrix();
    self.parents[0]->accumulate(d);
  });
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  const Scalar c = static_cast<Scalar>(std::sqrt(2.0 / M_PI));
  const Scalar k = Scalar(0.044715);
  auto xa = x.value().array();
  Vec<Scalar> out = (Scalar(0.5) * xa * (Scalar(1) + (c * (xa + k * xa.cube())).tanh())).matrix();
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x}, "gelu", [c, k](const Node<Scalar>& self) {
    auto v = self.parents[0]->value.array();
    auto t = (c * (v + k * v.cube())).tanh();
    auto dt = c * (Scalar(1) + Scalar(3) * k * v.square());
    Vec<Scalar> d = (self.grad.array() *
                     (Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * v * (Scalar(1) - t.square()) * dt))
                        .matrix();
    self.parents[0]->accumulate(d);
  });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  Vec<Scalar> out = x.value().array().exp().matrix();
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x}, "exp", [](const Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad.cwiseProduct(self.value));
  });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  Vec<Scalar> out = x.value().array().log().matrix();
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x}, "log", [](const Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad.cwiseQuotient(self.parents[0]->value));
  });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, Index axis) {
  axis = normalize_axis(axis, x.rank(), "sum");
  const AxisSplit s = split_axis(x.shape(), axis);
  Vec<Scalar> out = Vec<Scalar>::Zero(s.outer * s.inner);
  const Scalar* in = x.value().data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.n; ++i) {
      out.segment(o * s.inner, s.inner) += Eigen::Map<const Vec<Scalar>>(in + (o * s.n + i) * s.inner, s.inner);
    }
  }
  return detail::make_result<Scalar>(drop_axis(x.shape(), axis), std::move(out), {x}, "sum",
                                     [s](const Node<Scalar>& self) {
                                       Vec<Scalar> d(s.outer * s.n * s.inner);
                                       for (Index o = 0; o < s.outer; ++o) {
                                         for (Index i = 0; i < s.n; ++i) {
                                           d.segment((o * s.n + i) * s.inner, s.inner) =
                                               self.grad.segment(o * s.inner, s.inner);
                                         }
                                       }
                                       self.parents[0]->accumulate(d);
                                     });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, Index axis) {
  Index a = normalize_axis(axis, x.rank(), "mean");
  const Index n = x.dim(a);
  if (n == 0) throw ShapeError("mean over an empty axis");
  return scale(sum(x, a), Scalar(1) / static_cast<Scalar>(n));
}

template <typename Scalar>
Tensor<Scalar> sum_all(const Tensor<Scalar>& x) {
  Vec<Scalar> out = Vec<Scalar>::Constant(1, x.value().sum());
  return detail::make_result<Scalar>(Shape{}, std::move(out), {x}, "sum_all", [](const Node<Scalar>& self) {
    self.parents[0]->accumulate(Vec<Scalar>::Constant(self.parents[0]->value.size(), self.grad[0]));
  });
}

template <typename Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum_all(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank < 2 " + shape_string(x.shape()));
  const Index r = x.dim(-2), c = x.dim(-1);
  const Index batch = x.numel() / std::max<Index>(r * c, 1);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Vec<Scalar> out(x.numel());
  for (Index i = 0; i < batch; ++i) {
    MatMap<Scalar>(out.data() + i * r * c, c, r) = CMatMap<Scalar>(x.value().data() + i * r * c, r, c).transpose();
  }
  return detail::make_result<Scalar>(std::move(shape), std::move(out), {x}, "transpose",
                                     [batch, r, c](const Node<Scalar>& self) {
                                       Vec<Scalar> d(batch * r * c);
                                       for (Index i = 0; i < batch; ++i) {
                                         MatMap<Scalar>(d.data() + i * r * c, r, c) =
                                             CMatMap<Scalar>(self.grad.data() + i * r * c, c, r).transpose();
                                       }
                                       self.parents[0]->accumulate(d);
                                     });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  return detail::make_result<Scalar>(std::move(shape), x.value(), {x}, "reshape", [](const Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Index rank = parts.front().rank();
  axis = normalize_axis(axis, rank, "concat");
  Shape shape = parts.front().shape();
  std::vector<Index> widths;
  Index total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts.front().shape();
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    a[static_cast<std::size_t>(axis)] = b[static_cast<std::size_t>(axis)] = 0;
    if (a != b) throw ShapeError("concat: shapes differ off-axis " + shape_string(p.shape()));
    widths.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  shape[static_cast<std::size_t>(axis)] = total;
  const AxisSplit s = split_axis(shape, axis);
  Vec<Scalar> out(shape_numel(shape));
  Index offset = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const Index w = widths[j];
    const Scalar* in = parts[j].value().data();
    for (Index o = 0; o < s.outer; ++o) {
      std::copy_n(in + o * w * s.inner, w * s.inner, out.data() + (o * total + offset) * s.inner);
    }
    offset += w;
  }
  return detail::make_result<Scalar>(shape, std::move(out), parts, "concat",
                                     [s, widths, total](const Node<Scalar>& self) {
                                       Index off = 0;
                                       for (std::size_t j = 0; j < widths.size(); ++j) {
                                         const Index w = widths[j];
                                         if (wants(self, j)) {
                                           Vec<Scalar> d(s.outer * w * s.inner);
                                           for (Index o = 0; o < s.outer; ++o) {
                                             std::copy_n(self.grad.data() + (o * total + off) * s.inner, w * s.inner,
                                                         d.data() + o * w * s.inner);
                                           }
                                           self.parents[j]->accumulate(d);
                                         }
                                         off += w;
                                       }
                                     });
}

template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const Index> rows) {
  if (x.rank() < 1) throw ShapeError("gather_rows on a scalar");
  const Index n = x.dim(0);
  const Index width = n == 0 ? 0 : x.numel() / n;
  check_rows(rows, n, "gather_rows");
  std::vector<Index> idx(rows.begin(), rows.end());
  Shape shape = x.shape();
  shape[0] = static_cast<Index>(idx.size());
  Vec<Scalar> out(static_cast<Index>(idx.size()) * width);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(x.value().data() + idx[k] * width, width, out.data() + static_cast<Index>(k) * width);
  }
  return detail::make_result<Scalar>(std::move(shape), std::move(out), {x}, "gather_rows",
                                     [idx = std::move(idx), n, width](const Node<Scalar>& self) {
                                       Vec<Scalar> d = Vec<Scalar>::Zero(n * width);
                                       for (std::size_t k = 0; k < idx.size(); ++k) {
                                         d.segment(idx[k] * width, width) +=
                                             self.grad.segment(static_cast<Index>(k) * width, width);
                                       }
                                       self.parents[0]->accumulate(d);
                                     });
}

template <typename Scalar>
Tensor<Scalar> scatter_rows(const Tensor<Scalar>& x, std::span<const Index> rows, Index num_rows) {
  if (x.rank() < 1) throw ShapeError("scatter_rows on a scalar");
  if (static_cast<Index>(rows.size()) != x.dim(0)) {
    throw ShapeError("scatter_rows: " + std::to_string(rows.size()) + " indices for " + std::to_string(x.dim(0)) +
                     " rows");
  }
  check_rows(rows, num_rows, "scatter_rows");
  std::vector<Index> idx(rows.begin(), rows.end());
  {
    std::vector<Index> sorted = idx;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw IndexError("scatter_rows: duplicate target row");
    }
  }
  const Index width = x.dim(0) == 0 ? 0 : x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = num_rows;
  Vec<Scalar> out = Vec<Scalar>::Zero(num_rows * width);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(x.value().data() + static_cast<Index>(k) * width, width, out.data() + idx[k] * width);
  }
  return detail::make_result<Scalar>(std::move(shape), std::move(out), {x}, "scatter_rows",
                                     [idx = std::move(idx), width](const Node<Scalar>& self) {
                                       Vec<Scalar> d(static_cast<Index>(idx.size()) * width);
                                       for (std::size_t k = 0; k < idx.size(); ++k) {
                                         d.segment(static_cast<Index>(k) * width, width) =
                                             self.grad.segment(idx[k] * width, width);
                                       }
                                       self.parents[0]->accumulate(d);
                                     });
}

template <typename Scalar>
Tensor<Scalar> expand_batch(const Tensor<Scalar>& x, Index batch) {
  const Index n = x.numel();
  Shape shape = x.shape();
  shape.insert(shape.begin(), batch);
  Vec<Scalar> out(batch * n);
  for (Index b = 0; b < batch; ++b) out.segment(b * n, n) = x.value();
  return detail::make_result<Scalar>(std::move(shape), std::move(out), {x}, "expand_batch",
                                     [batch, n](const Node<Scalar>& self) {
                                       Vec<Scalar> d = Vec<Scalar>::Zero(n);
                                       for (Index b = 0; b < batch; ++b) d += self.grad.segment(b * n, n);
                                       self.parents[0]->accumulate(d);
                                     });
}

template <typename Scalar>
Tensor<Scalar> split_heads(const Tensor<Scalar>& x, Index heads) {
  require_rank(x.shape(), 3, "split_heads");
  const Index B = x.dim(0), M = x.dim(1), D = x.dim(2);
  if (heads <= 0 || D % heads != 0) throw ShapeError("split_heads: width not divisible by heads");
  const Index dh = D / heads;
  Vec<Scalar> out(x.numel());
  const Scalar* in = x.value().data();
  for (Index b = 0; b < B; ++b)
    for (Index h = 0; h < heads; ++h)
      for (Index m = 0; m < M; ++m)
        std::copy_n(in + (b * M + m) * D + h * dh, dh, out.data() + ((b * heads + h) * M + m) * dh);
  return detail::make_result<Scalar>({B * heads, M, dh}, std::move(out), {x}, "split_heads",
                                     [B, M, D, heads, dh](const Node<Scalar>& self) {
                                       Vec<Scalar> d(B * M * D);
                                       for (Index b = 0; b < B; ++b)
                                         for (Index h = 0; h < heads; ++h)
                                           for (Index m = 0; m < M; ++m)
                                             std::copy_n(self.grad.data() + ((b * heads + h) * M + m) * dh, dh,
                                                         d.data() + (b * M + m) * D + h * dh);
                                       self.parents[0]->accumulate(d);
                                     });
}

template <typename Scalar>
Tensor<Scalar> merge_heads(const Tensor<Scalar>& x, Index heads) {
  require_rank(x.shape(), 3, "merge_heads");
  if (heads <= 0 || x.dim(0) % heads != 0) throw ShapeError("merge_heads: batch not divisible by heads");
  const Index B = x.dim(0) / heads, M = x.dim(1), dh = x.dim(2), D = dh * heads;
  Vec<Scalar> out(x.numel());
  const Scalar* in = x.value().data();
  for (Index b = 0; b < B; ++b)
    for (Index h = 0; h < heads; ++h)
      for (Index m = 0; m < M; ++m)
        std::copy_n(in + ((b * heads + h) * M + m) * dh, dh, out.data() + (b * M + m) * D + h * dh);
  return detail::make_result<Scalar>({B, M, D}, std::move(out), {x}, "merge_heads",
                                     [B, M, D, heads, dh](const Node<Scalar>& self) {
                                       Vec<Scalar> d(B * M * D);
                                       for (Index b = 0; b < B; ++b)
                                         for (Index h = 0; h < heads; ++h)
                                           for (Index m = 0; m < M; ++m)
                                             std::copy_n(self.grad.data() + (b * M + m) * D + h * dh, dh,
                                                         d.data() + ((b * heads + h) * M + m) * dh);
                                       self.parents[0]->accumulate(d);
                                     });
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis) {
  axis = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_axis(x.shape(), axis);
  Vec<Scalar> out(x.numel());
  const Scalar* in = x.value().data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index j = 0; j < s.inner; ++j) {
      const Index base = o * s.n * s.inner + j;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index i = 0; i < s.n; ++i) mx = std::max(mx, in[base + i * s.inner]);
      Scalar z = 0;
      for (Index i = 0; i < s.n; ++i) {
        Scalar e = std::exp(in[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        z += e;
      }
      for (Index i = 0; i < s.n; ++i) out[base + i * s.inner] /= z;
    }
  }
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x}, "softmax", [s](const Node<Scalar>& self) {
    Vec<Scalar> d(self.value.size());
    const Scalar* y = self.value.data();
    const Scalar* g = self.grad.data();
    for (Index o = 0; o < s.outer; ++o) {
      for (Index j = 0; j < s.inner; ++j) {
        const Index base = o * s.n * s.inner + j;
        Scalar dot = 0;
        for (Index i = 0; i < s.n; ++i) dot += g[base + i * s.inner] * y[base + i * s.inner];
        for (Index i = 0; i < s.n; ++i) {
          const Index at = base + i * s.inner;
          d[at] = y[at] * (g[at] - dot);
        }
      }
    }
    self.parents[0]->accumulate(d);
  });
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm on a scalar");
  const Index cols = x.dim(-1);
  if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols}) {
    throw ShapeError("layer_norm: affine parameters must have shape [" + std::to_string(cols) + "]");
  }
  const Index rows = cols == 0 ? 0 : x.numel() / cols;
  CMatMap<Scalar> X(x.value().data(), rows, cols);
  // Normalised input and inverse std are kept for the backward pass.
  RowMat<Scalar> xhat(rows, cols);
  Vec<Scalar> rstd(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = X.row(r).mean();
    const Scalar var = (X.row(r).array() - mu).square().mean();
    rstd[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mu) * rstd[r];
  }
  Vec<Scalar> out(rows * cols);
  MatMap<Scalar> Y(out.data(), rows, cols);
  Y = (xhat.array().rowwise() * gamma.value().transpose().array()).rowwise() + beta.value().transpose().array();
  return detail::make_result<Scalar>(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](const Node<Scalar>& self) {
        CMatMap<Scalar> dy(self.grad.data(), rows, cols);
        if (wants(self, 0)) {
          const auto& g = self.parents[1]->value;
          RowMat<Scalar> dxhat = dy.array().rowwise() * g.transpose().array();
          Vec<Scalar> dx(rows * cols);
          MatMap<Scalar> DX(dx.data(), rows, cols);
          for (Index r = 0; r < rows; ++r) {
            const Scalar m1 = dxhat.row(r).mean();
            const Scalar m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
            DX.row(r) = rstd[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
          }
          self.parents[0]->accumulate(dx);
        }
        if (wants(self, 1)) {
          Vec<Scalar> dg = dy.cwiseProduct(xhat).colwise().sum().transpose();
          self.parents[1]->accumulate(dg);
        }
        if (wants(self, 2)) {
          Vec<Scalar> db = dy.colwise().sum().transpose();
          self.parents[2]->accumulate(db);
        }
      });
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0)) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
  }
  const Index in = weight.dim(0), outw = weight.dim(1);
  const Index rows = in == 0 ? 0 : x.numel() / in;
  Shape shape = x.shape();
  shape.back() = outw;
  Vec<Scalar> out(rows * outw);
  MatMap<Scalar>(out.data(), rows, outw).noalias() =
      CMatMap<Scalar>(x.value().data(), rows, in) * CMatMap<Scalar>(weight.value().data(), in, outw);
  Tensor<Scalar> y = detail::make_result<Scalar>(
      std::move(shape), std::move(out), {x, weight}, "linear", [rows, in, outw](const Node<Scalar>& self) {
        CMatMap<Scalar> dy(self.grad.data(), rows, outw);
        if (wants(self, 0)) {
          Vec<Scalar> dx(rows * in);
          MatMap<Scalar>(dx.data(), rows, in).noalias() =
              dy * CMatMap<Scalar>(self.parents[1]->value.data(), in, outw).transpose();
          self.parents[0]->accumulate(dx);
        }
        if (wants(self, 1)) {
          Vec<Scalar> dw(in * outw);
          MatMap<Scalar>(dw.data(), in, outw).noalias() =
              CMatMap<Scalar>(self.parents[0]->value.data(), rows, in).transpose() * dy;
          self.parents[1]->accumulate(dw);
        }
      });
  return bias.defined() ? add_bias(y, bias) : y;
}

template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy");
  const Index B = logits.dim(0), C = logits.dim(1);
  if (static_cast<Index>(labels.size()) != B) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(B) + " rows");
  }
  CMatMap<Scalar> L(logits.value().data(), B, C);
  RowMat<Scalar> probs(B, C);
  std::vector<int> lab(labels.begin(), labels.end());
  Index valid = 0;
  Scalar total = 0;
  for (Index r = 0; r < B; ++r) {
    const int y = lab[static_cast<std::size_t>(r)];
    if (y != kIgnoreLabel && (y < 0 || y >= C)) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
    }
    const Scalar mx = L.row(r).maxCoeff();
    probs.row(r) = (L.row(r).array() - mx).exp();
    const Scalar z = probs.row(r).sum();
    probs.row(r) /= z;
    if (y == kIgnoreLabel) continue;
    ++valid;
    total += std::log(z) + mx - L(r, y);
  }
  const Scalar loss = valid ? total / static_cast<Scalar>(valid) : Scalar(0);
  return detail::make_result<Scalar>(
      Shape{}, Vec<Scalar>::Constant(1, loss), {logits}, "cross_entropy",
      [B, C, valid, lab = std::move(lab), probs = std::move(probs)](const Node<Scalar>& self) {
        Vec<Scalar> d = Vec<Scalar>::Zero(B * C);
        if (valid) {
          MatMap<Scalar> D(d.data(), B, C);
          const Scalar w = self.grad[0] / static_cast<Scalar>(valid);
          for (Index r = 0; r < B; ++r) {
            const int y = lab[static_cast<std::size_t>(r)];
            if (y == kIgnoreLabel) continue;
            D.row(r) = probs.row(r) * w;
            D(r, y) -= w;
          }
        }
        self.parents[0]->accumulate(d);
      });
}

template <typename Scalar>
Tensor<Scalar> binary_cross_entropy_with_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets) {
  require_same_shape(logits.shape(), targets.shape(), "binary_cross_entropy_with_logits");
  const Index n = logits.numel();
  if (n == 0) throw ShapeError("binary_cross_entropy_with_logits on an empty tensor");
  auto x = logits.value().array();
  auto t = targets.value().array();
  const Scalar total = (x.max(Scalar(0)) - x * t + (Scalar(1) + (-x.abs()).exp()).log()).sum();
  Vec<Scalar> tv = targets.value();
  return detail::make_result<Scalar>(Shape{}, Vec<Scalar>::Constant(1, total / static_cast<Scalar>(n)), {logits},
                                     "bce_with_logits", [n, tv = std::move(tv)](const Node<Scalar>& self) {
                                       auto v = self.parents[0]->value.array();
                                       Vec<Scalar> sig = (Scalar(1) / (Scalar(1) + (-v).exp())).matrix();
                                       self.parents[0]->accumulate((sig - tv) * (self.grad[0] / static_cast<Scalar>(n)));
                                     });
}

template <typename Scalar>
Tensor<Scalar> stop_gradient(const Tensor<Scalar>& x) {
  auto node = std::make_shared<TensorNode<Scalar>>();
  node->shape = x.shape();
  node->value = x.value();
  node->op = "stop_gradient";
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> droppath(const Tensor<Scalar>& x, double rate, bool training, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("droppath: rate must lie in [0, 1)");
  if (!training || rate == 0.0 || x.rank() == 0) return x;
  const Index B = x.dim(0);
  const Index per = B == 0 ? 0 : x.numel() / B;
  std::bernoulli_distribution keep(1.0 - rate);
  const Scalar inv = static_cast<Scalar>(1.0 / (1.0 - rate));
  Vec<Scalar> mask(x.numel());
  for (Index b = 0; b < B; ++b) mask.segment(b * per, per).setConstant(keep(rng) ? inv : Scalar(0));
  Vec<Scalar> out = x.value().cwiseProduct(mask);
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x}, "droppath",
                                     [mask = std::move(mask)](const Node<Scalar>& self) {
                                       self.parents[0]->accumulate(self.grad.cwiseProduct(mask));
                                     });
}

#define CROPR_INSTANTIATE_OPS(S)                                                                    \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> bmm(const Tensor<S>&, const Tensor<S>&, bool);                                 \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> scale(const Tensor<S>&, S);                                                    \
  template Tensor<S> add_bias(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> relu(const Tensor<S>&);                                                        \
  template Tensor<S> gelu(const Tensor<S>&);                                                        \
  template Tensor<S> exp(const Tensor<S>&);                                                         \
  template Tensor<S> log(const Tensor<S>&);                                                         \
  template Tensor<S> sum(const Tensor<S>&, Index);                                                  \
  template Tensor<S> mean(const Tensor<S>&, Index);                                                 \
  template Tensor<S> sum_all(const Tensor<S>&);                                                     \
  template Tensor<S> mean_all(const Tensor<S>&);                                                    \
  template Tensor<S> transpose(const Tensor<S>&);                                                   \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                              \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, Index);                                  \
  template Tensor<S> gather_rows(const Tensor<S>&, std::span<const Index>);                         \
  template Tensor<S> scatter_rows(const Tensor<S>&, std::span<const Index>, Index);                 \
  template Tensor<S> expand_batch(const Tensor<S>&, Index);                                         \
  template Tensor<S> split_heads(const Tensor<S>&, Index);                                          \
  template Tensor<S> merge_heads(const Tensor<S>&, Index);                                          \
  template Tensor<S> softmax(const Tensor<S>&, Index);                                              \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);           \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                  \
  template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const int>);                         \
  template Tensor<S> binary_cross_entropy_with_logits(const Tensor<S>&, const Tensor<S>&);          \
  template Tensor<S> stop_gradient(const Tensor<S>&);                                               \
  template Tensor<S> droppath(const Tensor<S>&, double, bool, std::mt19937_64&);

CROPR_INSTANTIATE_OPS(float)
CROPR_INSTANTIATE_OPS(double)

#undef CROPR_INSTANTIATE_OPS

}  // namespace cropr
