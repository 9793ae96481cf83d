#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// Ops record a dynamic compute graph: each result holds its parents and a
// closure that propagates the result's gradient into them.  backward() walks
// the graph in reverse topological order.  Everything is sequential and
// row-major, so repeated runs are bit-identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "miclab/rng.hpp"

namespace miclab::nk {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily; same length as data
  bool requires_grad = false;

  std::vector<TensorPtr> parents;
  std::function<void(Tensor&)> backward_fn;  // pulls this->grad into parents

  std::size_t size() const { return data.size(); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  bool is_scalar() const { return data.size() == 1; }
  double scalar() const { return data[0]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    t->shape = std::move(shape);
    t->data.assign(n, 0.0);
    t->requires_grad = requires_grad;
    return t;
  }

  static TensorPtr from(std::vector<int> shape, std::vector<double> values,
                        bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    if (values.size() != t->data.size())
      throw std::invalid_argument("tensor: shape does not match data length");
    t->data = std::move(values);
    return t;
  }

  static TensorPtr scalar_of(double v) { return from({}, {v}); }

  static TensorPtr randn(std::vector<int> shape, Rng& rng, double stddev,
                         bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (double& x : t->data) x = stddev * rng.next_gaussian();
    return t;
  }
};

// Thread-local switch that disables graph recording; evaluation-only code
// wraps itself in NoGrad so forward passes allocate no gradient storage.
inline bool& grad_mode() {
  static thread_local bool enabled = true;
  return enabled;
}

struct NoGrad {
  bool prev;
  NoGrad() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGrad() { grad_mode() = prev; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

// ----------------------------------------------------------------- graph

// Ordered operation records in a valid evaluation order.  Built by a DFS from
// the root; backward() walks it in reverse, so every node is visited after
// all of its consumers.
struct ComputeGraph {
  std::vector<Tensor*> topo_order;

  static ComputeGraph from_root(Tensor& root) {
    ComputeGraph g;
    std::unordered_set<Tensor*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(&root, 0);
    seen.insert(&root);
    while (!stack.empty()) {
      auto& [node, next_child] = stack.back();
      if (next_child < node->parents.size()) {
        Tensor* p = node->parents[next_child++].get();
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        g.topo_order.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }
};

// Seeds d(root)/d(root) = 1 and accumulates gradients into every tensor
// reachable through parent links that has requires_grad set.
inline void backward(const TensorPtr& root) {
  if (!root->is_scalar())
    throw std::invalid_argument("backward: root must be a scalar");
  ComputeGraph g = ComputeGraph::from_root(*root);
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = g.topo_order.rbegin(); it != g.topo_order.rend(); ++it) {
    Tensor* t = *it;
    if (t->backward_fn && !t->grad.empty()) t->backward_fn(*t);
  }
}

namespace detail {

inline bool any_grad(const std::vector<TensorPtr>& ps) {
  for (const auto& p : ps)
    if (p->requires_grad || p->backward_fn) return true;
  return false;
}

// Attach the graph record to `out` if any input participates in autodiff.
inline void record(const TensorPtr& out, std::vector<TensorPtr> parents,
                   std::function<void(Tensor&)> fn) {
  if (!grad_mode() || !any_grad(parents)) return;
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backward_fn = std::move(fn);
  for (auto& p : out->parents) p->ensure_grad();
}

inline void check_2d(const TensorPtr& t, const char* who) {
  if (t->shape.size() != 2)
    throw std::invalid_argument(std::string(who) + ": expected a 2-D tensor");
}

// ------------------------------------------------- raw matmul kernels
// C[m,n] += A[m,k] * B[k,n]
inline void mm_nn(const double* a, const double* b, double* c, int m, int k,
                  int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void mm_nt(const double* a, const double* b, double* c, int m, int k,
                  int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void mm_tn(const double* a, const double* b, double* c, int m, int k,
                  int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    const double* bi = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

// ----------------------------------------------------------------- ops

// [m,k] x [k,n] -> [m,n]
inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  detail::check_2d(a, "matmul");
  detail::check_2d(b, "matmul");
  if (a->shape[1] != b->shape[0])
    throw std::invalid_argument(
        "matmul: inner dimensions disagree (" + std::to_string(a->shape[1]) +
        " vs " + std::to_string(b->shape[0]) + ")");
  int m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = Tensor::zeros({m, n});
  detail::mm_nn(a->data.data(), b->data.data(), out->data.data(), m, k, n);
  detail::record(out, {a, b}, [m, k, n](Tensor& o) {
    Tensor& a = *o.parents[0];
    Tensor& b = *o.parents[1];
    // dA += G * B^T ; dB += A^T * G
    if (a.requires_grad || a.backward_fn)
      detail::mm_nt(o.grad.data(), b.data.data(), a.grad.data(), m, n, k);
    if (b.requires_grad || b.backward_fn)
      detail::mm_tn(a.data.data(), o.grad.data(), b.grad.data(), m, k, n);
  });
  return out;
}

// [m,k] x [n,k]^T -> [m,n]
inline TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
  detail::check_2d(a, "matmul_nt");
  detail::check_2d(b, "matmul_nt");
  if (a->shape[1] != b->shape[1])
    throw std::invalid_argument("matmul_nt: inner dimensions disagree");
  int m = a->shape[0], k = a->shape[1], n = b->shape[0];
  auto out = Tensor::zeros({m, n});
  detail::mm_nt(a->data.data(), b->data.data(), out->data.data(), m, k, n);
  detail::record(out, {a, b}, [m, k, n](Tensor& o) {
    Tensor& a = *o.parents[0];
    Tensor& b = *o.parents[1];
    // dA += G * B ; dB += G^T * A
    if (a.requires_grad || a.backward_fn)
      detail::mm_nn(o.grad.data(), b.data.data(), a.grad.data(), m, n, k);
    if (b.requires_grad || b.backward_fn)
      detail::mm_tn(o.grad.data(), a.data.data(), b.grad.data(), m, n, k);
  });
  return out;
}

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("add: shape mismatch");
  auto out = Tensor::zeros(a->shape);
  for (std::size_t i = 0; i < out->size(); ++i)
    out->data[i] = a->data[i] + b->data[i];
  detail::record(out, {a, b}, [](Tensor& o) {
    for (int side = 0; side < 2; ++side) {
      Tensor& p = *o.parents[side];
      if (!(p.requires_grad || p.backward_fn)) continue;
      for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
    }
  });
  return out;
}

// [m,n] + [1,n] broadcast over rows
inline TensorPtr add_row_broadcast(const TensorPtr& a, const TensorPtr& bias) {
  detail::check_2d(a, "add_row_broadcast");
  if (static_cast<int>(bias->size()) != a->shape[1])
    throw std::invalid_argument("add_row_broadcast: bias length mismatch");
  int m = a->shape[0], n = a->shape[1];
  auto out = Tensor::zeros(a->shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->data[static_cast<std::size_t>(i) * n + j] =
          a->data[static_cast<std::size_t>(i) * n + j] + bias->data[j];
  detail::record(out, {a, bias}, [m, n](Tensor& o) {
    Tensor& a = *o.parents[0];
    Tensor& b = *o.parents[1];
    if (a.requires_grad || a.backward_fn)
      for (std::size_t i = 0; i < o.grad.size(); ++i) a.grad[i] += o.grad[i];
    if (b.requires_grad || b.backward_fn)
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          b.grad[j] += o.grad[static_cast<std::size_t>(i) * n + j];
  });
  return out;
}

inline TensorPtr scale(const TensorPtr& a, double c) {
  auto out = Tensor::zeros(a->shape);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = c * a->data[i];
  detail::record(out, {a}, [c](Tensor& o) {
    Tensor& a = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      a.grad[i] += c * o.grad[i];
  });
  return out;
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("mul: shape mismatch");
  auto out = Tensor::zeros(a->shape);
  for (std::size_t i = 0; i < out->size(); ++i)
    out->data[i] = a->data[i] * b->data[i];
  detail::record(out, {a, b}, [](Tensor& o) {
    Tensor& a = *o.parents[0];
    Tensor& b = *o.parents[1];
    if (a.requires_grad || a.backward_fn)
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        a.grad[i] += b.data[i] * o.grad[i];
    if (b.requires_grad || b.backward_fn)
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        b.grad[i] += a.data[i] * o.grad[i];
  });
  return out;
}

inline TensorPtr gelu(const TensorPtr& a) {
  auto out = Tensor::zeros(a->shape);
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < out->size(); ++i) {
    double x = a->data[i];
    out->data[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  detail::record(out, {a}, [](Tensor& o) {
    Tensor& a = *o.parents[0];
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      double x = a.data[i];
      double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      a.grad[i] += (phi + x * pdf) * o.grad[i];
    }
  });
  return out;
}

inline TensorPtr relu(const TensorPtr& a) {
  auto out = Tensor::zeros(a->shape);
  for (std::size_t i = 0; i < out->size(); ++i)
    out->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
  detail::record(out, {a}, [](Tensor& o) {
    Tensor& a = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (a.data[i] > 0.0) a.grad[i] += o.grad[i];
  });
  return out;
}

inline TensorPtr tanh_op(const TensorPtr& a) {
  auto out = Tensor::zeros(a->shape);
  for (std::size_t i = 0; i < out->size(); ++i)
    out->data[i] = std::tanh(a->data[i]);
  detail::record(out, {a}, [](Tensor& o) {
    Tensor& a = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      a.grad[i] += (1.0 - o.data[i] * o.data[i]) * o.grad[i];
  });
  return out;
}

inline TensorPtr sum(const TensorPtr& a) {
  auto out = Tensor::zeros({});
  out->data[0] = std::accumulate(a->data.begin(), a->data.end(), 0.0);
  detail::record(out, {a}, [](Tensor& o) {
    Tensor& a = *o.parents[0];
    for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += o.grad[0];
  });
  return out;
}

// Row-wise layer normalization with learned gain/bias.
inline TensorPtr layer_norm_rows(const TensorPtr& a, const TensorPtr& gain,
                                 const TensorPtr& bias, double eps = 1e-5) {
  detail::check_2d(a, "layer_norm_rows");
  int m = a->shape[0], n = a->shape[1];
  if (static_cast<int>(gain->size()) != n ||
      static_cast<int>(bias->size()) != n)
    throw std::invalid_argument("layer_norm_rows: gain/bias length mismatch");
  auto out = Tensor::zeros(a->shape);
  // keep per-row mean and inverse stddev for the backward pass
  auto stats = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(m) * 2);
  for (int i = 0; i < m; ++i) {
    const double* x = a->data.data() + static_cast<std::size_t>(i) * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += x[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= n;
    double inv_std = 1.0 / std::sqrt(var + eps);
    (*stats)[2 * i] = mean;
    (*stats)[2 * i + 1] = inv_std;
    double* y = out->data.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j)
      y[j] = (x[j] - mean) * inv_std * gain->data[j] + bias->data[j];
  }
  detail::record(out, {a, gain, bias}, [m, n, stats](Tensor& o) {
    Tensor& a = *o.parents[0];
    Tensor& gain = *o.parents[1];
    Tensor& bias = *o.parents[2];
    for (int i = 0; i < m; ++i) {
      const double* x = a.data.data() + static_cast<std::size_t>(i) * n;
      const double* g = o.grad.data() + static_cast<std::size_t>(i) * n;
      double mean = (*stats)[2 * i], inv_std = (*stats)[2 * i + 1];
      double sum_gy = 0.0, sum_gyx = 0.0;
      for (int j = 0; j < n; ++j) {
        double xhat = (x[j] - mean) * inv_std;
        double gy = g[j] * gain.data[j];
        sum_gy += gy;
        sum_gyx += gy * xhat;
        if (gain.requires_grad || gain.backward_fn)
          gain.grad[j] += g[j] * xhat;
        if (bias.requires_grad || bias.backward_fn) bias.grad[j] += g[j];
      }
      if (a.requires_grad || a.backward_fn) {
        double* da = a.grad.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
          double xhat = (x[j] - mean) * inv_std;
          double gy = g[j] * gain.data[j];
          da[j] += inv_std * (gy - (sum_gy + xhat * sum_gyx) / n);
        }
      }
    }
  });
  return out;
}

// Row-stochastic softmax, stabilized by row-max subtraction.
inline TensorPtr softmax_rows(const TensorPtr& a) {
  detail::check_2d(a, "softmax_rows");
  int m = a->shape[0], n = a->shape[1];
  auto out = Tensor::zeros(a->shape);
  for (int i = 0; i < m; ++i) {
    const double* x = a->data.data() + static_cast<std::size_t>(i) * n;
    double* y = out->data.data() + static_cast<std::size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    double inv = 1.0 / z;
    for (int j = 0; j < n; ++j) y[j] *= inv;
  }
  detail::record(out, {a}, [m, n](Tensor& o) {
    Tensor& a = *o.parents[0];
    for (int i = 0; i < m; ++i) {
      const double* y = o.data.data() + static_cast<std::size_t>(i) * n;
      const double* g = o.grad.data() + static_cast<std::size_t>(i) * n;
      double* da = a.grad.data() + static_cast<std::size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += y[j] * g[j];
      for (int j = 0; j < n; ++j) da[j] += y[j] * (g[j] - dot);
    }
  });
  return out;
}

// Causal row softmax: row i is a distribution over columns 0..i, entries
// above the diagonal are exactly zero.  Requires a square input.
inline TensorPtr causal_softmax_rows(const TensorPtr& a) {
  detail::check_2d(a, "causal_softmax_rows");
  if (a->shape[0] != a->shape[1])
    throw std::invalid_argument("causal_softmax_rows: square input required");
  int n = a->shape[0];
  auto out = Tensor::zeros(a->shape);
  for (int i = 0; i < n; ++i) {
    const double* x = a->data.data() + static_cast<std::size_t>(i) * n;
    double* y = out->data.data() + static_cast<std::size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j <= i; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j <= i; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    double inv = 1.0 / z;
    for (int j = 0; j <= i; ++j) y[j] *= inv;
  }
  detail::record(out, {a}, [n](Tensor& o) {
    Tensor& a = *o.parents[0];
    for (int i = 0; i < n; ++i) {
      const double* y = o.data.data() + static_cast<std::size_t>(i) * n;
      const double* g = o.grad.data() + static_cast<std::size_t>(i) * n;
      double* da = a.grad.data() + static_cast<std::size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j <= i; ++j) dot += y[j] * g[j];
      for (int j = 0; j <= i; ++j) da[j] += y[j] * (g[j] - dot);
    }
  });
  return out;
}

// Mean over masked positions of -log p(target); unmasked rows contribute
// nothing to the value or the gradient.
inline TensorPtr cross_entropy(const TensorPtr& logits,
                               const std::vector<int>& targets,
                               const std::vector<bool>& mask) {
  detail::check_2d(logits, "cross_entropy");
  int m = logits->shape[0], n = logits->shape[1];
  if (static_cast<int>(targets.size()) != m ||
      static_cast<int>(mask.size()) != m)
    throw std::invalid_argument(
        "cross_entropy: logits rows, targets and mask lengths must agree");
  int active = 0;
  for (bool b : mask)
    if (b) ++active;
  if (active == 0)
    throw std::invalid_argument("cross_entropy: no supervised positions");
  for (int i = 0; i < m; ++i)
    if (mask[i] && (targets[i] < 0 || targets[i] >= n))
      throw std::invalid_argument("cross_entropy: target index out of range");

  auto out = Tensor::zeros({});
  // cache per-row log-normalizers for the backward pass
  auto lse = std::make_shared<std::vector<double>>(m, 0.0);
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    const double* x = logits->data.data() + static_cast<std::size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    double log_z = mx + std::log(z);
    (*lse)[i] = log_z;
    loss += log_z - x[targets[i]];
  }
  out->data[0] = loss / active;
  auto targets_copy = std::make_shared<std::vector<int>>(targets);
  auto mask_copy = std::make_shared<std::vector<bool>>(mask);
  detail::record(out, {logits},
                 [m, n, active, lse, targets_copy, mask_copy](Tensor& o) {
                   Tensor& logits = *o.parents[0];
                   double g = o.grad[0] / active;
                   for (int i = 0; i < m; ++i) {
                     if (!(*mask_copy)[i]) continue;
                     const double* x =
                         logits.data.data() + static_cast<std::size_t>(i) * n;
                     double* dx =
                         logits.grad.data() + static_cast<std::size_t>(i) * n;
                     double log_z = (*lse)[i];
                     for (int j = 0; j < n; ++j)
                       dx[j] += g * std::exp(x[j] - log_z);
                     dx[(*targets_copy)[i]] -= g;
                   }
                 });
  return out;
}

// Output row r is row picks[r].second of tensor picks[r].first.  Used to
// interleave embedding-table rows and projected audio rows into one sequence.
inline TensorPtr gather_rows_multi(
    const std::vector<std::pair<TensorPtr, int>>& picks, int width) {
  int m = static_cast<int>(picks.size());
  auto out = Tensor::zeros({m, width});
  std::vector<TensorPtr> parents;
  for (int r = 0; r < m; ++r) {
    const auto& [src, row] = picks[r];
    if (src->cols() != width)
      throw std::invalid_argument("gather_rows_multi: width mismatch");
    if (row < 0 || row >= src->rows())
      throw std::invalid_argument("gather_rows_multi: row out of range");
    std::copy_n(src->data.data() + static_cast<std::size_t>(row) * width,
                width, out->data.data() + static_cast<std::size_t>(r) * width);
  }
  bool grad = grad_mode();
  if (grad) {
    grad = false;
    for (const auto& [src, row] : picks)
      if (src->requires_grad || src->backward_fn) grad = true;
  }
  if (grad) {
    auto picks_copy =
        std::make_shared<std::vector<std::pair<TensorPtr, int>>>(picks);
    for (auto& [src, row] : *picks_copy) src->ensure_grad();
    out->requires_grad = true;
    // parents kept for graph reachability; dedup to keep the topo walk small
    std::unordered_set<Tensor*> seen;
    for (const auto& [src, row] : picks)
      if (seen.insert(src.get()).second) out->parents.push_back(src);
    out->backward_fn = [picks_copy, width](Tensor& o) {
      for (std::size_t r = 0; r < picks_copy->size(); ++r) {
        auto& [src, row] = (*picks_copy)[r];
        if (!(src->requires_grad || src->backward_fn)) continue;
        double* dst = src->grad.data() + static_cast<std::size_t>(row) * width;
        const double* g = o.grad.data() + r * width;
        for (int j = 0; j < width; ++j) dst[j] += g[j];
      }
    };
  }
  return out;
}

inline TensorPtr gather_rows(const TensorPtr& table,
                             const std::vector<int>& rows) {
  std::vector<std::pair<TensorPtr, int>> picks;
  picks.reserve(rows.size());
  for (int r : rows) picks.emplace_back(table, r);
  return gather_rows_multi(picks, table->cols());
}

inline TensorPtr slice_rows(const TensorPtr& a, int r0, int r1) {
  detail::check_2d(a, "slice_rows");
  if (r0 < 0 || r1 > a->shape[0] || r0 > r1)
    throw std::invalid_argument("slice_rows: bad range");
  int n = a->shape[1];
  auto out = Tensor::zeros({r1 - r0, n});
  std::copy_n(a->data.data() + static_cast<std::size_t>(r0) * n,
              static_cast<std::size_t>(r1 - r0) * n, out->data.data());
  detail::record(out, {a}, [r0, n](Tensor& o) {
    Tensor& a = *o.parents[0];
    double* dst = a.grad.data() + static_cast<std::size_t>(r0) * n;
    for (std::size_t i = 0; i < o.grad.size(); ++i) dst[i] += o.grad[i];
  });
  return out;
}

inline TensorPtr slice_cols(const TensorPtr& a, int c0, int c1) {
  detail::check_2d(a, "slice_cols");
  if (c0 < 0 || c1 > a->shape[1] || c0 > c1)
    throw std::invalid_argument("slice_cols: bad range");
  int m = a->shape[0], n = a->shape[1], w = c1 - c0;
  auto out = Tensor::zeros({m, w});
  for (int i = 0; i < m; ++i)
    std::copy_n(a->data.data() + static_cast<std::size_t>(i) * n + c0, w,
                out->data.data() + static_cast<std::size_t>(i) * w);
  detail::record(out, {a}, [c0, n, w](Tensor& o) {
    Tensor& a = *o.parents[0];
    int m = o.shape[0];
    for (int i = 0; i < m; ++i) {
      double* dst = a.grad.data() + static_cast<std::size_t>(i) * n + c0;
      const double* g = o.grad.data() + static_cast<std::size_t>(i) * w;
      for (int j = 0; j < w; ++j) dst[j] += g[j];
    }
  });
  return out;
}

inline TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  int m = parts[0]->shape[0];
  int total = 0;
  for (const auto& p : parts) {
    detail::check_2d(p, "concat_cols");
    if (p->shape[0] != m)
      throw std::invalid_argument("concat_cols: row count mismatch");
    total += p->shape[1];
  }
  auto out = Tensor::zeros({m, total});
  int off = 0;
  for (const auto& p : parts) {
    int w = p->shape[1];
    for (int i = 0; i < m; ++i)
      std::copy_n(p->data.data() + static_cast<std::size_t>(i) * w, w,
                  out->data.data() + static_cast<std::size_t>(i) * total + off);
    off += w;
  }
  detail::record(out, std::vector<TensorPtr>(parts), [m, total](Tensor& o) {
    int off = 0;
    for (auto& pp : o.parents) {
      Tensor& p = *pp;
      int w = p.shape[1];
      if (p.requires_grad || p.backward_fn)
        for (int i = 0; i < m; ++i) {
          const double* g =
              o.grad.data() + static_cast<std::size_t>(i) * total + off;
          double* dst = p.grad.data() + static_cast<std::size_t>(i) * w;
          for (int j = 0; j < w; ++j) dst[j] += g[j];
        }
      off += w;
    }
  });
  return out;
}

// Inverted dropout; identity when rate == 0.
inline TensorPtr dropout(const TensorPtr& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  auto keep = std::make_shared<std::vector<bool>>(a->size());
  double inv_keep = 1.0 / (1.0 - rate);
  auto out = Tensor::zeros(a->shape);
  for (std::size_t i = 0; i < a->size(); ++i) {
    bool k = rng.next_double() >= rate;
    (*keep)[i] = k;
    out->data[i] = k ? a->data[i] * inv_keep : 0.0;
  }
  detail::record(out, {a}, [keep, inv_keep](Tensor& o) {
    Tensor& a = *o.parents[0];
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if ((*keep)[i]) a.grad[i] += inv_keep * o.grad[i];
  });
  return out;
}

}  // namespace miclab::nk
