// Copyright 2026 The prefmem Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "prefmem/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <sstream>
#include <type_traits>
#include <unordered_set>
#include <utility>

namespace prefmem {

namespace {

thread_local bool g_grad_enabled = true;

template <typename Scalar>
using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

std::string shape_of(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << ", " << cols << "]";
  return os.str();
}

template <typename Scalar>
[[noreturn]] void shape_mismatch(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

// Zero-initialized gradient buffer for partial (block) accumulation.
template <typename Scalar>
Matrix<Scalar>& grad_buffer(detail::Node<Scalar>& n) {
  if (n.grad.size() == 0) n.grad = Matrix<Scalar>::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// Exponent-bit test; vectorizes where Eigen's allFinite() does not.
template <typename Scalar>
bool all_finite(const Matrix<Scalar>& m) {
  using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits kExp = static_cast<Bits>(sizeof(Scalar) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  const Scalar* p = m.data();
  Bits bad = 0;
  for (Index i = 0; i < m.size(); ++i) bad |= static_cast<Bits>((std::bit_cast<Bits>(p[i]) & kExp) == kExp);
  return bad == 0;
}

template <typename Scalar>
Tensor<Scalar> record(const char* op, Matrix<Scalar> value, std::vector<NodePtr<Scalar>> inputs,
                      std::function<void(detail::Node<Scalar>&)> backward) {
  if (!all_finite(value)) throw NumericError(std::string(op) + ": non-finite output");
  auto node = std::make_shared<detail::Node<Scalar>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& in : inputs) {
      if (in->requires_grad) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    node->parents = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>::from_node(std::move(node));
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename Scalar>
Tensor<Scalar>::Tensor(MatrixType value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(MatrixType::Zero(rows, cols), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar v, bool requires_grad) {
  MatrixType m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_node(std::shared_ptr<Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename Scalar>
std::string Tensor<Scalar>::shape_string() const {
  return shape_of(rows(), cols());
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item: expected a 1x1 tensor, got " + shape_string());
  return node_->value(0, 0);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(node_->value, false);
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_string());
  if (!node_->requires_grad) return;

  // Iterative post-order DFS: every node lands after all of its parents,
  // so the reversed order visits a node only once all consumers are done.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(MatrixType::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch("add", a, b);
  return record<Scalar>("add", a.value() + b.value(), {a.node(), b.node()}, [](detail::Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch("sub", a, b);
  return record<Scalar>("sub", a.value() - b.value(), {a.node(), b.node()}, [](detail::Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(-self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> negate(const Tensor<Scalar>& a) {
  return record<Scalar>("negate", -a.value(), {a.node()},
                        [](detail::Node<Scalar>& self) { self.parents[0]->accumulate(-self.grad); });
}

template <typename Scalar>
Tensor<Scalar> cwise_product(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch("cwise_product", a, b);
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return record<Scalar>("cwise_product", std::move(out), {a.node(), b.node()}, [](detail::Node<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    pa.accumulate(self.grad.cwiseProduct(pb.value));
    pb.accumulate(self.grad.cwiseProduct(pa.value));
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  return record<Scalar>("scale", a.value() * s, {a.node()},
                        [s](detail::Node<Scalar>& self) { self.parents[0]->accumulate(self.grad * s); });
}

template <typename Scalar>
Tensor<Scalar> add_row(const Tensor<Scalar>& a, const Tensor<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) shape_mismatch("add_row", a, row);
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  return record<Scalar>("add_row", std::move(out), {a.node(), row.node()}, [](detail::Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.rows()) shape_mismatch("matmul", a, b);
  Matrix<Scalar> out = a.value() * b.value();
  return record<Scalar>("matmul", std::move(out), {a.node(), b.node()}, [](detail::Node<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> matmul_transposed(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.cols()) shape_mismatch("matmul_transposed", a, b);
  Matrix<Scalar> out = a.value() * b.value().transpose();
  return record<Scalar>("matmul_transposed", std::move(out), {a.node(), b.node()}, [](detail::Node<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value);
    if (pb.requires_grad) pb.accumulate(self.grad.transpose() * pa.value);
  });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  Matrix<Scalar> out = a.value().transpose();
  return record<Scalar>("transpose", std::move(out), {a.node()},
                        [](detail::Node<Scalar>& self) { self.parents[0]->accumulate(self.grad.transpose()); });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + a.shape_string());
  }
  Matrix<Scalar> out = a.value().middleRows(start, count);
  return record<Scalar>("slice_rows", std::move(out), {a.node()}, [start, count](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    grad_buffer(p).middleRows(start, count) += self.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + a.shape_string());
  }
  Matrix<Scalar> out = a.value().middleCols(start, count);
  return record<Scalar>("slice_cols", std::move(out), {a.node()}, [start, count](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    grad_buffer(p).middleCols(start, count) += self.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> concat_rows(std::span<const Tensor<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) shape_mismatch("concat_rows", parts.front(), p);
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<NodePtr<Scalar>> inputs;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
    inputs.push_back(p.node());
  }
  return record<Scalar>("concat_rows", std::move(out), std::move(inputs), [](detail::Node<Scalar>& self) {
    Index o = 0;
    for (auto& p : self.parents) {
      const Index r = p->value.rows();
      p->accumulate(self.grad.middleRows(o, r));
      o += r;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> concat_cols(std::span<const Tensor<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) shape_mismatch("concat_cols", parts.front(), p);
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<NodePtr<Scalar>> inputs;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
    inputs.push_back(p.node());
  }
  return record<Scalar>("concat_cols", std::move(out), std::move(inputs), [](detail::Node<Scalar>& self) {
    Index o = 0;
    for (auto& p : self.parents) {
      const Index c = p->value.cols();
      p->accumulate(self.grad.middleCols(o, c));
      o += c;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& table, std::span<const Index> index) {
  const Index n = static_cast<Index>(index.size());
  Matrix<Scalar> out(n, table.cols());
  for (Index r = 0; r < n; ++r) {
    const Index i = index[r];
    if (i >= table.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(i) + " out of range for table " +
                              table.shape_string());
    }
    if (i < 0) {
      out.row(r).setZero();
    } else {
      out.row(r) = table.value().row(i);
    }
  }
  std::vector<Index> idx(index.begin(), index.end());
  return record<Scalar>("gather_rows", std::move(out), {table.node()},
                        [idx = std::move(idx)](detail::Node<Scalar>& self) {
                          auto& g = grad_buffer(*self.parents[0]);
                          for (std::size_t r = 0; r < idx.size(); ++r) {
                            if (idx[r] >= 0) g.row(idx[r]) += self.grad.row(static_cast<Index>(r));
                          }
                        });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return record<Scalar>("sum", std::move(out), {a.node()}, [](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    p.accumulate(Matrix<Scalar>::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().mean();
  return record<Scalar>("mean", std::move(out), {a.node()}, [](detail::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    const Scalar g = self.grad(0, 0) / static_cast<Scalar>(p.value.size());
    p.accumulate(Matrix<Scalar>::Constant(p.value.rows(), p.value.cols(), g));
  });
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& a) {
  Matrix<Scalar> y = (a.value().colwise() - a.value().rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  auto out = y;
  return record<Scalar>("softmax_rows", std::move(out), {a.node()}, [y = std::move(y)](detail::Node<Scalar>& self) {
    Matrix<Scalar> gy = self.grad.cwiseProduct(y);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = gy.rowwise().sum();
    gy -= (y.array().colwise() * dot.array()).matrix();
    self.parents[0]->accumulate(gy);
  });
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& a) {
  const Scalar kC = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
  const Scalar kA = static_cast<Scalar>(0.044715);
  const auto x = a.value().array();
  Matrix<Scalar> t = (kC * (x + kA * x.cube())).tanh().matrix();
  Matrix<Scalar> out = (Scalar(0.5) * x * (Scalar(1) + t.array())).matrix();
  return record<Scalar>("gelu", std::move(out), {a.node()}, [t = std::move(t), kC, kA](detail::Node<Scalar>& self) {
    const auto xs = self.parents[0]->value.array();
    const auto ts = t.array();
    auto d = Scalar(0.5) * (Scalar(1) + ts) +
             Scalar(0.5) * xs * (Scalar(1) - ts.square()) * kC * (Scalar(1) + Scalar(3) * kA * xs.square());
    self.parents[0]->accumulate((self.grad.array() * d).matrix());
  });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  Matrix<Scalar> out = a.value().cwiseMax(Scalar(0));
  return record<Scalar>("relu", std::move(out), {a.node()}, [](detail::Node<Scalar>& self) {
    const auto& x = self.parents[0]->value;
    self.parents[0]->accumulate((x.array() > Scalar(0)).select(self.grad, Scalar(0)));
  });
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps) {
  if (gamma.rows() != 1 || gamma.cols() != x.cols()) shape_mismatch("layer_norm", x, gamma);
  if (beta.rows() != 1 || beta.cols() != x.cols()) shape_mismatch("layer_norm", x, beta);
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const Scalar n = static_cast<Scalar>(x.cols());
  Vec mu = x.value().rowwise().mean();
  Matrix<Scalar> xhat = x.value().colwise() - mu;
  Vec inv_std = ((xhat.array().square().rowwise().sum() / n) + eps).rsqrt().matrix();
  xhat.array().colwise() *= inv_std.array();
  Matrix<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return record<Scalar>(
      "layer_norm", std::move(out), {x.node(), gamma.node(), beta.node()},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), n](detail::Node<Scalar>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) pg.accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
        if (pb.requires_grad) pb.accumulate(self.grad.colwise().sum());
        if (px.requires_grad) {
          Matrix<Scalar> dxhat = (self.grad.array().rowwise() * pg.value.row(0).array()).matrix();
          Vec mean_d = dxhat.rowwise().sum() / n;
          Vec mean_dx = dxhat.cwiseProduct(xhat).rowwise().sum() / n;
          Matrix<Scalar> dx = dxhat.colwise() - mean_d;
          dx -= (xhat.array().colwise() * mean_dx.array()).matrix();
          dx.array().colwise() *= inv_std.array();
          px.accumulate(dx);
        }
      });
}

template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const Index> targets) {
  const Index n = logits.rows();
  if (n == 0 || static_cast<Index>(targets.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     logits.shape_string());
  }
  Matrix<Scalar> p = logits.value();
  Scalar total = 0;
  for (Index r = 0; r < n; ++r) {
    const Index t = targets[r];
    if (t < 0 || t >= logits.cols()) {
      throw std::out_of_range("cross_entropy: class index " + std::to_string(t) + " outside [0, " +
                              std::to_string(logits.cols()) + ")");
    }
    auto row = p.row(r);
    const Scalar m = row.maxCoeff();
    row.array() = (row.array() - m).exp();
    const Scalar z = row.sum();
    total += std::log(z) + m - logits.value()(r, t);
    row /= z;
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total / static_cast<Scalar>(n);
  std::vector<Index> tgt(targets.begin(), targets.end());
  return record<Scalar>("cross_entropy", std::move(out), {logits.node()},
                        [p = std::move(p), tgt = std::move(tgt)](detail::Node<Scalar>& self) {
                          Matrix<Scalar> g = p;
                          for (std::size_t r = 0; r < tgt.size(); ++r) g(static_cast<Index>(r), tgt[r]) -= Scalar(1);
                          g *= self.grad(0, 0) / static_cast<Scalar>(tgt.size());
                          self.parents[0]->accumulate(g);
                        });
}

template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch("mse", a, b);
  if (a.size() == 0) throw ShapeError("mse: empty tensors");
  Matrix<Scalar> diff = a.value() - b.value();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = diff.squaredNorm() / static_cast<Scalar>(diff.size());
  return record<Scalar>("mse", std::move(out), {a.node(), b.node()},
                        [diff = std::move(diff)](detail::Node<Scalar>& self) {
                          const Scalar s = Scalar(2) * self.grad(0, 0) / static_cast<Scalar>(diff.size());
                          self.parents[0]->accumulate(diff * s);
                          self.parents[1]->accumulate(diff * -s);
                        });
}

template <typename Scalar>
Tensor<Scalar> attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                         std::span<const AttentionBlock> blocks, int n_heads, std::vector<Matrix<Scalar>>* probs) {
  if (q.rows() != k.rows() || q.cols() != k.cols()) shape_mismatch("attention", q, k);
  if (q.rows() != v.rows() || q.cols() != v.cols()) shape_mismatch("attention", q, v);
  if (n_heads <= 0 || q.cols() % n_heads != 0) {
    throw ShapeError("attention: width " + std::to_string(q.cols()) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  for (const auto& b : blocks) {
    if (!b.mask || b.mask->rows() != b.mask->cols() || b.offset < 0 || b.offset + b.length() > q.rows()) {
      throw ShapeError("attention: block out of range for " + q.shape_string());
    }
  }
  const Index dh = q.cols() / n_heads;
  const Scalar scale_factor = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  constexpr Scalar kNegInf = -std::numeric_limits<Scalar>::infinity();

  Matrix<Scalar> out = Matrix<Scalar>::Zero(q.rows(), q.cols());
  auto saved = std::make_shared<std::vector<Matrix<Scalar>>>();
  saved->reserve(blocks.size() * static_cast<std::size_t>(n_heads));
  for (const auto& b : blocks) {
    const Index t = b.length();
    for (int h = 0; h < n_heads; ++h) {
      const auto qh = q.value().block(b.offset, h * dh, t, dh);
      const auto kh = k.value().block(b.offset, h * dh, t, dh);
      const auto vh = v.value().block(b.offset, h * dh, t, dh);
      Matrix<Scalar> s = (qh * kh.transpose()) * scale_factor;
      s = b.mask->select(s, kNegInf);
      s = (s.colwise() - s.rowwise().maxCoeff()).array().exp().matrix();
      s.array().colwise() /= s.rowwise().sum().array();
      out.block(b.offset, h * dh, t, dh).noalias() = s * vh;
      saved->push_back(std::move(s));
    }
  }
  if (probs != nullptr) probs->insert(probs->end(), saved->begin(), saved->end());

  std::vector<AttentionBlock> block_copy(blocks.begin(), blocks.end());
  return record<Scalar>(
      "attention", std::move(out), {q.node(), k.node(), v.node()},
      [saved, block_copy = std::move(block_copy), n_heads, dh, scale_factor](detail::Node<Scalar>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        std::size_t idx = 0;
        for (const auto& b : block_copy) {
          const Index t = b.length();
          for (int h = 0; h < n_heads; ++h, ++idx) {
            const Matrix<Scalar>& p = (*saved)[idx];
            const auto go = self.grad.block(b.offset, h * dh, t, dh);
            const auto qh = pq.value.block(b.offset, h * dh, t, dh);
            const auto kh = pk.value.block(b.offset, h * dh, t, dh);
            const auto vh = pv.value.block(b.offset, h * dh, t, dh);
            if (pv.requires_grad) grad_buffer(pv).block(b.offset, h * dh, t, dh).noalias() += p.transpose() * go;
            Matrix<Scalar> dp = go * vh.transpose();
            Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = dp.cwiseProduct(p).rowwise().sum();
            Matrix<Scalar> ds = (p.array() * (dp.array().colwise() - dot.array())).matrix() * scale_factor;
            if (pq.requires_grad) grad_buffer(pq).block(b.offset, h * dh, t, dh).noalias() += ds * kh;
            if (pk.requires_grad) grad_buffer(pk).block(b.offset, h * dh, t, dh).noalias() += ds.transpose() * qh;
          }
        }
      });
}

#define PREFMEM_INSTANTIATE_TENSOR(S)                                                                         \
  template class Tensor<S>;                                                                                   \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> negate(const Tensor<S>&);                                                                \
  template Tensor<S> cwise_product(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> scale(const Tensor<S>&, S);                                                              \
  template Tensor<S> add_row(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                              \
  template Tensor<S> matmul_transposed(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> transpose(const Tensor<S>&);                                                             \
  template Tensor<S> slice_rows(const Tensor<S>&, Index, Index);                                              \
  template Tensor<S> slice_cols(const Tensor<S>&, Index, Index);                                              \
  template Tensor<S> concat_rows(std::span<const Tensor<S>>);                                                 \
  template Tensor<S> concat_cols(std::span<const Tensor<S>>);                                                 \
  template Tensor<S> gather_rows(const Tensor<S>&, std::span<const Index>);                                   \
  template Tensor<S> sum(const Tensor<S>&);                                                                   \
  template Tensor<S> mean(const Tensor<S>&);                                                                  \
  template Tensor<S> softmax_rows(const Tensor<S>&);                                                          \
  template Tensor<S> gelu(const Tensor<S>&);                                                                  \
  template Tensor<S> relu(const Tensor<S>&);                                                                  \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                     \
  template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const Index>);                                 \
  template Tensor<S> mse(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> attention(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,                          \
                               std::span<const AttentionBlock>, int, std::vector<Matrix<S>>*);

PREFMEM_INSTANTIATE_TENSOR(float)
PREFMEM_INSTANTIATE_TENSOR(double)

#undef PREFMEM_INSTANTIATE_TENSOR

}  // namespace prefmem
