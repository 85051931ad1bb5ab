#include "histodistill/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace histodistill::ad {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

// Creates the result node of an op. The vjp is recorded only while the tape
// is enabled and some parent needs gradients; otherwise the result is a
// plain constant leaf.
Tensor record(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
              std::function<std::vector<Tensor>(const Tensor&)> vjp) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->vjp = std::move(vjp);
    }
  }
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check(shape_numel(shape) == static_cast<int64_t>(data.size()),
        "from_data: shape " + shape_str(shape) + " does not match data size");
  return make_leaf(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), 0.0);
  return make_leaf(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), v);
  return make_leaf(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return make_leaf({1}, {v}, requires_grad);
}

double Tensor::item() const {
  check(defined() && numel() == 1, "item: tensor is not a scalar");
  return node_->value[0];
}

Tensor Tensor::detach() const {
  return make_leaf(node_->shape, node_->value, false);
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return record(a.shape(), std::move(out), {a, b},
                [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return record(a.shape(), std::move(out), {a, b},
                [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const auto& x = a.data();
  const auto& y = b.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return record(a.shape(), std::move(out), {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{mul(g, b), mul(g, a)};
  });
}

Tensor neg(const Tensor& a) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = -x[i];
  return record(a.shape(), std::move(out), {a},
                [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

Tensor add_scalar(const Tensor& a, double s) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] + s;
  return record(a.shape(), std::move(out), {a},
                [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
  return record(a.shape(), std::move(out), {a}, [s](const Tensor& g) {
    return std::vector<Tensor>{mul_scalar(g, s)};
  });
}

namespace {

// Shared helper for ops whose local derivative is a constant 0/1 mask; the
// mask is captured detached, which is the a.e.-exact rule for relu, clamps
// and abs-style kinks.
Tensor masked_grad(const Tensor& g, const std::shared_ptr<std::vector<double>>& mask) {
  Tensor m = Tensor::from_data(g.shape(), *mask, false);
  return mul(g, m);
}

}  // namespace

Tensor relu(const Tensor& a) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  auto mask = std::make_shared<std::vector<double>>(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const bool pos = x[i] > 0.0;
    out[i] = pos ? x[i] : 0.0;
    (*mask)[i] = pos ? 1.0 : 0.0;
  }
  return record(a.shape(), std::move(out), {a}, [mask](const Tensor& g) {
    return std::vector<Tensor>{masked_grad(g, mask)};
  });
}

Tensor abs(const Tensor& a) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  auto sign = std::make_shared<std::vector<double>>(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    out[i] = std::fabs(x[i]);
    (*sign)[i] = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
  }
  return record(a.shape(), std::move(out), {a}, [sign](const Tensor& g) {
    return std::vector<Tensor>{masked_grad(g, sign)};
  });
}

Tensor exp(const Tensor& a) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
  // Recomputing exp(a) in the vjp keeps the rule differentiable without a
  // reference cycle through the output node.
  return record(a.shape(), std::move(out), {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{mul(g, exp(a))};
  });
}

Tensor log(const Tensor& a) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
  return record(a.shape(), std::move(out), {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{mul(g, pow_scalar(a, -1.0))};
  });
}

Tensor tanh(const Tensor& a) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  return record(a.shape(), std::move(out), {a}, [a](const Tensor& g) {
    Tensor t = tanh(a);
    return std::vector<Tensor>{mul(g, add_scalar(neg(mul(t, t)), 1.0))};
  });
}

Tensor pow_scalar(const Tensor& a, double p) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = std::pow(x[i], p);
  return record(a.shape(), std::move(out), {a}, [a, p](const Tensor& g) {
    return std::vector<Tensor>{mul(g, mul_scalar(pow_scalar(a, p - 1.0), p))};
  });
}

Tensor max_scalar(const Tensor& a, double s) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  auto mask = std::make_shared<std::vector<double>>(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const bool keep = x[i] > s;
    out[i] = keep ? x[i] : s;
    (*mask)[i] = keep ? 1.0 : 0.0;
  }
  return record(a.shape(), std::move(out), {a}, [mask](const Tensor& g) {
    return std::vector<Tensor>{masked_grad(g, mask)};
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  auto mask = std::make_shared<std::vector<double>>(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const bool interior = x[i] > lo && x[i] < hi;
    out[i] = std::min(std::max(x[i], lo), hi);
    (*mask)[i] = interior ? 1.0 : 0.0;
  }
  return record(a.shape(), std::move(out), {a}, [mask](const Tensor& g) {
    return std::vector<Tensor>{masked_grad(g, mask)};
  });
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape s) {
  check(shape_numel(s) == a.numel(),
        "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
  Shape orig = a.shape();
  return record(std::move(s), a.data(), {a}, [orig](const Tensor& g) {
    return std::vector<Tensor>{reshape(g, orig)};
  });
}

namespace {

// Aligns src to target by numpy trailing rules; returns per-target-dim source
// dimension (1 where broadcast, matching size otherwise).
Shape aligned_src_dims(const Shape& src, const Shape& target) {
  check(src.size() <= target.size(), "broadcast_to: source rank exceeds target");
  Shape dims(target.size(), 1);
  const size_t off = target.size() - src.size();
  for (size_t i = 0; i < src.size(); ++i) {
    check(src[i] == 1 || src[i] == target[off + i],
          "broadcast_to: cannot expand " + shape_str(src) + " to " + shape_str(target));
    dims[off + i] = src[i];
  }
  return dims;
}

}  // namespace

Tensor broadcast_to(const Tensor& a, const Shape& target) {
  if (a.shape() == target) return a;
  const Shape src_dims = aligned_src_dims(a.shape(), target);
  const size_t rank = target.size();
  const int64_t out_n = shape_numel(target);
  std::vector<double> out(static_cast<size_t>(out_n));
  // Source strides in target rank, 0 along broadcast dims.
  std::vector<int64_t> sstride(rank, 0);
  {
    int64_t acc = 1;
    for (size_t i = rank; i-- > 0;) {
      sstride[i] = (src_dims[i] == 1) ? 0 : acc;
      acc *= src_dims[i];
    }
  }
  const auto& x = a.data();
  std::vector<int64_t> idx(rank, 0);
  int64_t sidx = 0;
  for (int64_t o = 0; o < out_n; ++o) {
    out[static_cast<size_t>(o)] = x[static_cast<size_t>(sidx)];
    for (size_t i = rank; i-- > 0;) {
      ++idx[i];
      sidx += sstride[i];
      if (idx[i] < target[i]) break;
      sidx -= sstride[i] * target[i];
      idx[i] = 0;
    }
  }
  Shape orig = a.shape();
  return record(target, std::move(out), {a}, [orig, target](const Tensor& g) {
    // Reduce over every broadcast axis, then restore the original rank.
    const Shape src_dims = aligned_src_dims(orig, target);
    std::vector<int> axes;
    for (size_t i = 0; i < target.size(); ++i) {
      if (src_dims[i] != target[i]) axes.push_back(static_cast<int>(i));
    }
    Tensor r = axes.empty() ? g : sum_axes(g, axes, /*keepdim=*/true);
    return std::vector<Tensor>{reshape(r, orig)};
  });
}

Tensor sum_axes(const Tensor& a, std::vector<int> axes, bool keepdim) {
  const Shape& s = a.shape();
  const size_t rank = s.size();
  std::sort(axes.begin(), axes.end());
  check(!axes.empty(), "sum_axes: no axes");
  check(axes.front() >= 0 && axes.back() < static_cast<int>(rank), "sum_axes: axis out of range");
  for (size_t i = 1; i < axes.size(); ++i) check(axes[i] != axes[i - 1], "sum_axes: duplicate axis");

  Shape kept = s;
  for (int ax : axes) kept[static_cast<size_t>(ax)] = 1;
  Shape out_shape;
  if (keepdim) {
    out_shape = kept;
  } else {
    for (size_t i = 0; i < rank; ++i) {
      if (std::find(axes.begin(), axes.end(), static_cast<int>(i)) == axes.end())
        out_shape.push_back(s[i]);
    }
    if (out_shape.empty()) out_shape = {1};
  }

  const auto& x = a.data();
  std::vector<double> out(static_cast<size_t>(shape_numel(kept)), 0.0);

  // Fast path: the reduced axes form one contiguous block.
  bool contiguous = true;
  for (size_t i = 1; i < axes.size(); ++i) contiguous = contiguous && axes[i] == axes[i - 1] + 1;
  if (contiguous) {
    int64_t outer = 1, red = 1, inner = 1;
    for (int i = 0; i < axes.front(); ++i) outer *= s[static_cast<size_t>(i)];
    for (int i = axes.front(); i <= axes.back(); ++i) red *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axes.back()) + 1; i < rank; ++i) inner *= s[i];
    for (int64_t o = 0; o < outer; ++o) {
      const double* base = x.data() + o * red * inner;
      double* obase = out.data() + o * inner;
      if (inner == 1) {
        double acc = 0.0;
        for (int64_t r = 0; r < red; ++r) acc += base[r];
        obase[0] = acc;
      } else {
        for (int64_t r = 0; r < red; ++r) {
          const double* row = base + r * inner;
          for (int64_t i = 0; i < inner; ++i) obase[i] += row[i];
        }
      }
    }
  } else {
    // General odometer walk.
    std::vector<int64_t> kstride(rank, 0);
    {
      int64_t acc = 1;
      for (size_t i = rank; i-- > 0;) {
        kstride[i] = (kept[i] == 1) ? 0 : acc;
        acc *= kept[i];
      }
    }
    std::vector<int64_t> idx(rank, 0);
    int64_t kidx = 0;
    const int64_t n = a.numel();
    for (int64_t f = 0; f < n; ++f) {
      out[static_cast<size_t>(kidx)] += x[static_cast<size_t>(f)];
      for (size_t i = rank; i-- > 0;) {
        ++idx[i];
        kidx += kstride[i];
        if (idx[i] < s[i]) break;
        kidx -= kstride[i] * s[i];
        idx[i] = 0;
      }
    }
  }

  Shape orig = s;
  Shape kept_copy = kept;
  return record(out_shape, std::move(out), {a}, [orig, kept_copy](const Tensor& g) {
    return std::vector<Tensor>{broadcast_to(reshape(g, kept_copy), orig)};
  });
}

Tensor sum_all(const Tensor& a) {
  const auto& x = a.data();
  double acc = 0.0;
  for (double v : x) acc += v;
  Shape orig = a.shape();
  return record({1}, {acc}, {a}, [orig](const Tensor& g) {
    return std::vector<Tensor>{broadcast_to(g, orig)};
  });
}

Tensor gather(const Tensor& a, const IndexArray& idx, Shape out_shape) {
  check(static_cast<int64_t>(idx->size()) == shape_numel(out_shape),
        "gather: index count does not match output shape");
  const auto& x = a.data();
  const auto& ix = *idx;
  std::vector<double> out(ix.size());
  for (size_t i = 0; i < ix.size(); ++i) out[i] = x[static_cast<size_t>(ix[i])];
  Shape src_shape = a.shape();
  return record(std::move(out_shape), std::move(out), {a}, [idx, src_shape](const Tensor& g) {
    return std::vector<Tensor>{scatter_add(g, idx, src_shape)};
  });
}

Tensor scatter_add(const Tensor& src, const IndexArray& idx, Shape out_shape) {
  check(static_cast<int64_t>(idx->size()) == src.numel(),
        "scatter_add: index count does not match source");
  const auto& x = src.data();
  const auto& ix = *idx;
  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)), 0.0);
  for (size_t i = 0; i < ix.size(); ++i) out[static_cast<size_t>(ix[i])] += x[i];
  Shape src_shape = src.shape();
  return record(std::move(out_shape), std::move(out), {src}, [idx, src_shape](const Tensor& g) {
    return std::vector<Tensor>{gather(g, idx, src_shape)};
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul: both operands must be 2-D");
  check(a.dim(1) == b.dim(0), "matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                  " x " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  {
    ConstMap ma(a.data().data(), m, k);
    ConstMap mb(b.data().data(), k, n);
    MutMap mo(out.data(), m, n);
    mo.noalias() = ma * mb;
  }
  return record({m, n}, std::move(out), {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{matmul(g, transpose2d(b)), matmul(transpose2d(a), g)};
  });
}

Tensor transpose2d(const Tensor& a) {
  check(a.rank() == 2, "transpose2d: operand must be 2-D");
  const int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  {
    ConstMap ma(a.data().data(), m, n);
    MutMap mo(out.data(), n, m);
    mo = ma.transpose();
  }
  return record({n, m}, std::move(out), {a}, [](const Tensor& g) {
    return std::vector<Tensor>{transpose2d(g)};
  });
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

Tensor mean_all(const Tensor& a) { return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean_axes(const Tensor& a, std::vector<int> axes, bool keepdim) {
  int64_t red = 1;
  for (int ax : axes) red *= a.shape()[static_cast<size_t>(ax)];
  return mul_scalar(sum_axes(a, std::move(axes), keepdim), 1.0 / static_cast<double>(red));
}

Tensor badd(const Tensor& a, const Tensor& b) { return add(a, broadcast_to(b, a.shape())); }
Tensor bmul(const Tensor& a, const Tensor& b) { return mul(a, broadcast_to(b, a.shape())); }

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check(logits.rank() == 2, "softmax_cross_entropy: logits must be B x C");
  const int64_t bsz = logits.dim(0), ncls = logits.dim(1);
  check(static_cast<int64_t>(labels.size()) == bsz, "softmax_cross_entropy: label count mismatch");
  // Detached row max; the loss is invariant to a per-row shift, so this only
  // stabilizes the exponentials.
  std::vector<double> rowmax(static_cast<size_t>(bsz), 0.0);
  {
    const auto& x = logits.data();
    for (int64_t r = 0; r < bsz; ++r) {
      double m = x[static_cast<size_t>(r * ncls)];
      for (int64_t c = 1; c < ncls; ++c) m = std::max(m, x[static_cast<size_t>(r * ncls + c)]);
      rowmax[static_cast<size_t>(r)] = m;
    }
  }
  Tensor shift = Tensor::from_data({bsz, 1}, std::move(rowmax), false);
  Tensor z = sub(logits, broadcast_to(shift, logits.shape()));
  Tensor lse = log(sum_axes(exp(z), {1}, false));  // (B)
  auto pick = std::make_shared<std::vector<int64_t>>();
  pick->reserve(static_cast<size_t>(bsz));
  for (int64_t r = 0; r < bsz; ++r) {
    check(labels[static_cast<size_t>(r)] >= 0 && labels[static_cast<size_t>(r)] < ncls,
          "softmax_cross_entropy: label out of range");
    pick->push_back(r * ncls + labels[static_cast<size_t>(r)]);
  }
  Tensor zy = gather(z, pick, {bsz});
  return mean_all(sub(lse, zy));
}

Tensor softmax2d(const Tensor& x, int axis) {
  check(x.rank() == 2 && (axis == 0 || axis == 1), "softmax2d: need 2-D tensor, axis 0 or 1");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  // Detached max along the softmax axis for stability.
  const auto& v = x.data();
  Shape mshape = axis == 1 ? Shape{rows, 1} : Shape{1, cols};
  std::vector<double> mx(static_cast<size_t>(shape_numel(mshape)), -1e300);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) {
      const size_t mi = static_cast<size_t>(axis == 1 ? r : c);
      mx[mi] = std::max(mx[mi], v[static_cast<size_t>(r * cols + c)]);
    }
  Tensor shift = Tensor::from_data(mshape, std::move(mx), false);
  Tensor e = exp(sub(x, broadcast_to(shift, x.shape())));
  Tensor denom = sum_axes(e, {axis}, true);
  return mul(e, broadcast_to(pow_scalar(denom, -1.0), x.shape()));
}

// ---------------------------------------------------------------------------
// reverse-mode driver
// ---------------------------------------------------------------------------

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt, GradOptions opts) {
  check(output.defined() && output.numel() == 1, "grad: output must be a defined scalar");

  // Iterative post-order topological sort over the requires_grad subgraph.
  std::vector<Node*> topo;
  std::unordered_map<Node*, int> state;  // 0 unseen, 1 open, 2 done
  if (output.requires_grad()) {
    std::vector<Node*> stack{output.node_ptr()};
    while (!stack.empty()) {
      Node* n = stack.back();
      int& st = state[n];
      if (st == 0) {
        st = 1;
        for (const auto& p : n->parents) {
          Node* pn = p.node_ptr();
          if (pn && pn->requires_grad && state[pn] == 0) stack.push_back(pn);
        }
      } else {
        stack.pop_back();
        if (st == 1) {
          st = 2;
          topo.push_back(n);
        }
      }
    }
  }

  std::unordered_map<Node*, Tensor> cot;
  cot[output.node_ptr()] = Tensor::full({1}, 1.0);

  {
    // Cotangent math is recorded only when a second-order graph is wanted.
    std::unique_ptr<NoGradGuard> off;
    if (!opts.create_graph) off = std::make_unique<NoGradGuard>();

    for (size_t i = topo.size(); i-- > 0;) {
      Node* n = topo[i];
      auto it = cot.find(n);
      if (it == cot.end() || !n->vjp) continue;
      Tensor g = it->second;
      if (g.shape() != n->shape) g = reshape(g, n->shape);
      std::vector<Tensor> pg = n->vjp(g);
      check(pg.size() == n->parents.size(), "grad: vjp arity mismatch");
      for (size_t j = 0; j < pg.size(); ++j) {
        if (!pg[j].defined()) continue;
        Node* pn = n->parents[j].node_ptr();
        if (!pn->requires_grad) continue;
        auto pit = cot.find(pn);
        if (pit == cot.end()) {
          cot.emplace(pn, pg[j]);
        } else {
          Tensor cur = pit->second;
          if (cur.shape() != pg[j].shape()) cur = reshape(cur, pg[j].shape());
          pit->second = add(cur, pg[j]);
        }
      }
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = cot.find(w.node_ptr());
    if (it == cot.end()) {
      out.push_back(Tensor::zeros(w.shape()));
    } else {
      Tensor g = it->second;
      if (g.shape() != w.shape()) g = reshape(g, w.shape());
      out.push_back(opts.create_graph ? g : g.detach());
    }
  }
  return out;
}

}  // namespace histodistill::ad
