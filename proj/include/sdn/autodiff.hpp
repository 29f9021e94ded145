#pragma once

// Tensor-valued reverse-mode differentiation with just the operations the score network
// needs: periodic 3x3-style convolution, SiLU, addition, scalar affine maps and a mean of
// squares. Tensors are row-major; images are laid out [channels, height, width].

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "sdn/errors.hpp"

namespace sdn::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  std::vector<std::size_t> dims;
  std::vector<double> value;
  std::vector<double> grad;  ///< same length as value
  std::string op;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;  ///< pushes this->grad into the parents
  bool requires_grad = false;

  [[nodiscard]] std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

inline std::size_t element_count(const std::vector<std::size_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_text(const std::vector<std::size_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
  return s + "]";
}

inline Var make_node(std::vector<std::size_t> dims, std::vector<double> value, std::string op, bool requires_grad) {
  if (element_count(dims) != value.size()) {
    throw ShapeError(op + ": " + std::to_string(value.size()) + " values for dims " + dims_text(dims));
  }
  auto n = std::make_shared<Node>();
  n->grad.assign(value.size(), 0.0);
  n->dims = std::move(dims);
  n->value = std::move(value);
  n->op = std::move(op);
  n->requires_grad = requires_grad;
  return n;
}

/// Leaf that gradients are not needed for.
inline Var constant(std::vector<std::size_t> dims, std::vector<double> value) {
  return make_node(std::move(dims), std::move(value), "constant", false);
}

/// Trainable leaf.
inline Var parameter(std::vector<std::size_t> dims, std::vector<double> value) {
  return make_node(std::move(dims), std::move(value), "parameter", true);
}

namespace detail {

inline Var result(std::vector<std::size_t> dims, std::vector<double> value, std::string op, std::vector<Var> parents,
                  std::function<void(Node&)> back) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  Var n = make_node(std::move(dims), std::move(value), std::move(op), rg);
  if (rg) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(back);
  }
  return n;
}

// out[x] += w * in[(x + shift) mod n] for x in [0, n)
inline void axpy_shifted(double* out, const double* in, std::size_t n, std::ptrdiff_t shift, double w) {
  const std::size_t s = static_cast<std::size_t>(((shift % static_cast<std::ptrdiff_t>(n)) + static_cast<std::ptrdiff_t>(n)) %
                                                 static_cast<std::ptrdiff_t>(n));
  const std::size_t first = n - s;
  for (std::size_t x = 0; x < first; ++x) out[x] += w * in[x + s];
  for (std::size_t x = first; x < n; ++x) out[x] += w * in[x + s - n];
}

// sum_x a[x] * b[(x + shift) mod n]
inline double dot_shifted(const double* a, const double* b, std::size_t n, std::ptrdiff_t shift) {
  const std::size_t s = static_cast<std::size_t>(((shift % static_cast<std::ptrdiff_t>(n)) + static_cast<std::ptrdiff_t>(n)) %
                                                 static_cast<std::ptrdiff_t>(n));
  const std::size_t first = n - s;
  double acc = 0.0;
  for (std::size_t x = 0; x < first; ++x) acc += a[x] * b[x + s];
  for (std::size_t x = first; x < n; ++x) acc += a[x] * b[x + s - n];
  return acc;
}

inline std::size_t wrap(std::ptrdiff_t v, std::size_t n) {
  const auto m = static_cast<std::ptrdiff_t>(n);
  return static_cast<std::size_t>(((v % m) + m) % m);
}

}  // namespace detail

/// Periodic "same" cross-correlation: x [Cin,H,W], w [Cout,Cin,K,K] (K odd), b [Cout].
/// out[o,y,x] = b[o] + sum_{c,i,j} w[o,c,i,j] x[c, y+i-K/2, x+j-K/2] (indices mod H, W).
inline Var conv2d(const Var& x, const Var& w, const Var& b) {
  if (x->dims.size() != 3 || w->dims.size() != 4 || b->dims.size() != 1) {
    throw ShapeError("conv2d expects x [C,H,W], w [O,C,K,K], b [O]; got " + dims_text(x->dims) + ", " +
                     dims_text(w->dims) + ", " + dims_text(b->dims));
  }
  const std::size_t cin = x->dims[0], h = x->dims[1], wd = x->dims[2];
  const std::size_t cout = w->dims[0], k = w->dims[2];
  if (w->dims[1] != cin || w->dims[3] != k || k % 2 == 0 || b->dims[0] != cout) {
    throw ShapeError("conv2d: incompatible shapes " + dims_text(x->dims) + ", " + dims_text(w->dims) + ", " +
                     dims_text(b->dims));
  }
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t plane = h * wd;
  std::vector<double> out(cout * plane);
  for (std::size_t o = 0; o < cout; ++o) {
    double* op = out.data() + o * plane;
    std::fill(op, op + plane, b->value[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* ip = x->value.data() + c * plane;
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const double wt = w->value[((o * cin + c) * k + i) * k + j];
          if (wt == 0.0) continue;
          const auto dy = static_cast<std::ptrdiff_t>(i) - r;
          const auto dx = static_cast<std::ptrdiff_t>(j) - r;
          for (std::size_t y = 0; y < h; ++y) {
            detail::axpy_shifted(op + y * wd, ip + detail::wrap(static_cast<std::ptrdiff_t>(y) + dy, h) * wd, wd, dx,
                                 wt);
          }
        }
      }
    }
  }
  return detail::result({cout, h, wd}, std::move(out), "conv2d", {x, w, b}, [=](Node& self) {
    const Var& xv = self.parents[0];
    const Var& wv = self.parents[1];
    const Var& bv = self.parents[2];
    for (std::size_t o = 0; o < cout; ++o) {
      const double* g = self.grad.data() + o * plane;
      if (bv->requires_grad) {
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) acc += g[p];
        bv->grad[o] += acc;
      }
      for (std::size_t c = 0; c < cin; ++c) {
        const double* ip = xv->value.data() + c * plane;
        double* gx = xv->grad.data() + c * plane;
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t widx = ((o * cin + c) * k + i) * k + j;
            const auto dy = static_cast<std::ptrdiff_t>(i) - r;
            const auto dx = static_cast<std::ptrdiff_t>(j) - r;
            if (wv->requires_grad) {
              double acc = 0.0;
              for (std::size_t y = 0; y < h; ++y) {
                acc += detail::dot_shifted(g + y * wd, ip + detail::wrap(static_cast<std::ptrdiff_t>(y) + dy, h) * wd,
                                           wd, dx);
              }
              wv->grad[widx] += acc;
            }
            if (xv->requires_grad) {
              const double wt = wv->value[widx];
              if (wt == 0.0) continue;
              // gx[c, y+dy, x+dx] += wt * g[o, y, x]
              for (std::size_t y = 0; y < h; ++y) {
                detail::axpy_shifted(gx + detail::wrap(static_cast<std::ptrdiff_t>(y) + dy, h) * wd, g + y * wd, wd,
                                     -dx, wt);
              }
            }
          }
        }
      }
    }
  });
}

/// x * sigmoid(x), elementwise.
inline Var silu(const Var& x) {
  std::vector<double> out(x->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->value[i] / (1.0 + std::exp(-x->value[i]));
  return detail::result(x->dims, std::move(out), "silu", {x}, [](Node& self) {
    const Var& p = self.parents[0];
    for (std::size_t i = 0; i < self.size(); ++i) {
      const double sg = 1.0 / (1.0 + std::exp(-p->value[i]));
      p->grad[i] += self.grad[i] * sg * (1.0 + p->value[i] * (1.0 - sg));
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  if (a->dims != b->dims) throw ShapeError("add: " + dims_text(a->dims) + " vs " + dims_text(b->dims));
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return detail::result(a->dims, std::move(out), "add", {a, b}, [](Node& self) {
    for (const auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

/// scale * x + offset with scalar constants.
inline Var affine(const Var& x, double scale, double offset = 0.0) {
  std::vector<double> out(x->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x->value[i] + offset;
  return detail::result(x->dims, std::move(out), "affine", {x}, [scale](Node& self) {
    const Var& p = self.parents[0];
    for (std::size_t i = 0; i < self.size(); ++i) p->grad[i] += scale * self.grad[i];
  });
}

/// Scalar mean of x^2.
inline Var mean_square(const Var& x) {
  double acc = 0.0;
  for (double v : x->value) acc += v * v;
  const double n = static_cast<double>(x->size());
  return detail::result({1}, {acc / n}, "mean_square", {x}, [n](Node& self) {
    const Var& p = self.parents[0];
    const double g = self.grad[0] * 2.0 / n;
    for (std::size_t i = 0; i < p->size(); ++i) p->grad[i] += g * p->value[i];
  });
}

/// Mean of scalar nodes.
inline Var mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("mean_of needs at least one input");
  double acc = 0.0;
  for (const auto& x : xs) {
    if (x->size() != 1) throw ShapeError("mean_of expects scalars, got " + dims_text(x->dims));
    acc += x->value[0];
  }
  const double n = static_cast<double>(xs.size());
  return detail::result({1}, {acc / n}, "mean_of", xs, [n](Node& self) {
    for (const auto& p : self.parents) {
      if (p->requires_grad) p->grad[0] += self.grad[0] / n;
    }
  });
}

/// Reverse sweep from a scalar root. Gradients accumulate into every node that requires them;
/// zero parameter gradients between steps.
inline void backward(const Var& root) {
  if (root->size() != 1) throw ShapeError("backward needs a scalar root, got " + dims_text(root->dims));
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Interior gradients restart from zero on every pass; leaves accumulate until zero_grad().
  for (Node* n : order)
    if (!n->parents.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

/// Largest |analytic - numeric| / max |numeric| over the listed leaves, where numeric is the
/// centered difference of `loss` in each leaf coordinate. `loss` must rebuild the graph.
inline double gradient_check(const std::function<Var()>& loss, const std::vector<Var>& leaves, double step = 1e-5) {
  for (const auto& l : leaves) l->zero_grad();
  backward(loss());
  double worst = 0.0;
  for (const auto& l : leaves) {
    std::vector<double> numeric(l->size());
    for (std::size_t i = 0; i < l->size(); ++i) {
      const double keep = l->value[i];
      l->value[i] = keep + step;
      const double up = loss()->value[0];
      l->value[i] = keep - step;
      const double dn = loss()->value[0];
      l->value[i] = keep;
      numeric[i] = (up - dn) / (2.0 * step);
    }
    double scale = 0.0, diff = 0.0;
    for (std::size_t i = 0; i < l->size(); ++i) {
      scale = std::max(scale, std::abs(numeric[i]));
      diff = std::max(diff, std::abs(numeric[i] - l->grad[i]));
    }
    worst = std::max(worst, scale > 0.0 ? diff / scale : diff);
  }
  return worst;
}

}  // namespace sdn::ad
