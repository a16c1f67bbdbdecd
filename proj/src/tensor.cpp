#include "wf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "gemm.hpp"

namespace wf {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (const std::int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

thread_local bool g_grad_enabled = true;
thread_local AllocMeter* g_alloc_meter = nullptr;

void check_shape(const Shape& shape, const char* op) {
  for (const std::int64_t d : shape) {
    if (d <= 0) throw ShapeError(std::string(op) + ": nonpositive dimension in " + shape_str(shape));
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

std::vector<std::int64_t> natural_strides(const Shape& shape) {
  std::vector<std::int64_t> str(shape.size());
  std::int64_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    str[i] = acc;
    acc *= shape[i];
  }
  return str;
}

// Strides of `src` viewed under `dst` (right-aligned), 0 on broadcast dims.
std::vector<std::int64_t> bcast_strides(const Shape& src, const Shape& dst) {
  const std::size_t off = dst.size() - src.size();
  const auto nat = natural_strides(src);
  std::vector<std::int64_t> str(dst.size(), 0);
  for (std::size_t i = 0; i < src.size(); ++i) {
    str[off + i] = src[i] == 1 && dst[off + i] != 1 ? 0 : nat[i];
  }
  return str;
}

// Row-major odometer over `shape` invoking f(linear, off_a, off_b). The last
// dimension runs in a tight inner loop; the call order is plain row-major
// either way, so results stay bit-identical.
template <typename F>
void for2(const Shape& shape, const std::vector<std::int64_t>& sa,
          const std::vector<std::int64_t>& sb, F&& f) {
  const std::int64_t total = shape_numel(shape);
  const int r = static_cast<int>(shape.size());
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::int64_t n_last = shape[static_cast<std::size_t>(r - 1)];
  const std::int64_t da = sa[static_cast<std::size_t>(r - 1)];
  const std::int64_t db = sb[static_cast<std::size_t>(r - 1)];
  const std::int64_t outer = total / n_last;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t oa = 0, ob = 0, lin = 0;
  for (std::int64_t o = 0; o < outer; ++o) {
    std::int64_t a = oa, b = ob;
    for (std::int64_t j = 0; j < n_last; ++j) {
      f(lin, a, b);
      ++lin;
      a += da;
      b += db;
    }
    for (int d = r - 2; d >= 0; --d) {
      idx[d] += 1;
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < shape[d]) break;
      oa -= sa[d] * shape[d];
      ob -= sb[d] * shape[d];
      idx[d] = 0;
    }
  }
}

template <typename S>
bool want_grad(const Tensor<S>& t) {
  return g_grad_enabled && t.requires_grad();
}

// Splits a softmax-style axis into (outer, n, inner) extents.
struct AxisFold {
  std::int64_t outer = 1, n = 1, inner = 1;
};

AxisFold fold_axis(const Shape& shape, int axis, const char* op) {
  if (axis < 0) axis += static_cast<int>(shape.size());
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw ShapeError(std::string(op) + ": axis out of range for " + shape_str(shape));
  }
  AxisFold fold;
  for (int i = 0; i < axis; ++i) fold.outer *= shape[static_cast<std::size_t>(i)];
  fold.n = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) fold.inner *= shape[i];
  return fold;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

AllocMeter* active_alloc_meter() { return g_alloc_meter; }

AllocMeterScope::AllocMeterScope(AllocMeter& meter) : prev_(g_alloc_meter) { g_alloc_meter = &meter; }
AllocMeterScope::~AllocMeterScope() { g_alloc_meter = prev_; }

// ---- Node / Tensor --------------------------------------------------------

template <typename S>
Node<S>::Node(Shape s, bool rg)
    : shape(std::move(s)),
      data(static_cast<std::size_t>(shape_numel(shape)), S(0)),
      requires_grad(rg),
      meter(g_alloc_meter) {
  if (meter) {
    meter->cur_bytes += data.size() * sizeof(S);
    meter->peak_bytes = std::max(meter->peak_bytes, meter->cur_bytes);
  }
}

template <typename S>
Node<S>::~Node() {
  if (meter) meter->cur_bytes -= data.size() * sizeof(S);
}

template <typename S>
void Node<S>::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), S(0));
}

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape, bool requires_grad) {
  check_shape(shape, "Tensor::zeros");
  return Tensor(std::make_shared<Node<S>>(std::move(shape), requires_grad));
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node()->data.begin(), t.node()->data.end(), value);
  return t;
}

template <typename S>
Tensor<S> Tensor<S>::from(Shape shape, std::vector<S> values, bool requires_grad) {
  check_shape(shape, "Tensor::from");
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  }
  Tensor t(std::make_shared<Node<S>>(std::move(shape), requires_grad));
  t.node()->data = std::move(values);
  return t;
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value) {
  return from({1}, {value});
}

template <typename S>
std::span<S> Tensor<S>::grad() {
  node_->ensure_grad();
  return {node_->grad.data(), node_->grad.size()};
}

template <typename S>
std::span<const S> Tensor<S>::grad() const {
  if (node_->grad.empty()) throw ContractError("Tensor::grad: no gradient computed");
  return {node_->grad.data(), node_->grad.size()};
}

template <typename S>
void Tensor<S>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
}

template <typename S>
S Tensor<S>::item() const {
  if (numel() != 1) throw ContractError("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

template <typename S>
Tensor<S> Tensor<S>::detach() const {
  Tensor out = zeros(node_->shape, false);
  out.node()->data = node_->data;
  return out;
}

// ---- elementwise binary ----------------------------------------------------

namespace {

template <typename S, typename FwdF, typename BwdA, typename BwdB>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, const char* name, FwdF fwd,
                    BwdA bwd_a, BwdB bwd_b) {
  const Shape oshape = broadcast_shape(a.shape(), b.shape(), name);
  const bool rg = want_grad(a) || want_grad(b);
  Tensor<S> out = Tensor<S>::zeros(oshape, rg);
  const auto sa = bcast_strides(a.shape(), oshape);
  const auto sb = bcast_strides(b.shape(), oshape);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.data().data();
  if (a.shape() == oshape && b.shape() == oshape) {
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else {
    for2(oshape, sa, sb, [&](std::int64_t lin, std::int64_t ia, std::int64_t ib) {
      po[lin] = fwd(pa[ia], pb[ib]);
    });
  }
  if (rg) {
    auto& node = *out.node();
    node.parents = {a.node(), b.node()};
    node.backward = [oshape, sa, sb, bwd_a, bwd_b](Node<S>& o) {
      auto& pa_n = *o.parents[0];
      auto& pb_n = *o.parents[1];
      const S* da = pa_n.data.data();
      const S* db = pb_n.data.data();
      const S* go = o.grad.data();
      if (pa_n.requires_grad) pa_n.ensure_grad();
      if (pb_n.requires_grad) pb_n.ensure_grad();
      for2(oshape, sa, sb, [&](std::int64_t lin, std::int64_t ia, std::int64_t ib) {
        if (pa_n.requires_grad) pa_n.grad[static_cast<std::size_t>(ia)] += bwd_a(go[lin], da[ia], db[ib]);
        if (pb_n.requires_grad) pb_n.grad[static_cast<std::size_t>(ib)] += bwd_b(go[lin], da[ia], db[ib]);
      });
    };
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(
      a, b, "add", [](S x, S y) { return x + y; },
      [](S g, S, S) { return g; }, [](S g, S, S) { return g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(
      a, b, "sub", [](S x, S y) { return x - y; },
      [](S g, S, S) { return g; }, [](S g, S, S) { return -g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(
      a, b, "mul", [](S x, S y) { return x * y; },
      [](S g, S, S y) { return g * y; }, [](S g, S x, S) { return g * x; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S v) {
  const bool rg = want_grad(a);
  Tensor<S> out = Tensor<S>::zeros(a.shape(), rg);
  const S* pa = a.data().data();
  S* po = out.data().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + v;
  if (rg) {
    out.node()->parents = {a.node()};
    out.node()->backward = [](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
    };
  }
  return out;
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S v) {
  const bool rg = want_grad(a);
  Tensor<S> out = Tensor<S>::zeros(a.shape(), rg);
  const S* pa = a.data().data();
  S* po = out.data().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * v;
  if (rg) {
    out.node()->parents = {a.node()};
    out.node()->backward = [v](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * v;
    };
  }
  return out;
}

// ---- matmul ----------------------------------------------------------------

namespace {

struct MatDims {
  std::int64_t batch = 1, m = 0, k = 0, n = 0;
  bool b_shared = false;  // b is rank-2, shared across the batch
};

template <typename S>
MatDims matmul_dims(const Tensor<S>& a, const Tensor<S>& b, bool b_transposed, const char* op) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError(std::string(op) + ": need rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  MatDims d;
  d.m = a.shape()[a.shape().size() - 2];
  d.k = a.shape()[a.shape().size() - 1];
  const std::int64_t bk = b_transposed ? b.shape().back() : b.shape()[b.shape().size() - 2];
  d.n = b_transposed ? b.shape()[b.shape().size() - 2] : b.shape().back();
  if (d.k != bk) {
    throw ShapeError(std::string(op) + ": inner dimensions mismatch for shapes " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  for (std::size_t i = 0; i + 2 < a.shape().size(); ++i) d.batch *= a.shape()[i];
  if (b.rank() == 2) {
    d.b_shared = true;
  } else {
    if (std::vector<std::int64_t>(b.shape().begin(), b.shape().end() - 2) !=
        std::vector<std::int64_t>(a.shape().begin(), a.shape().end() - 2)) {
      throw ShapeError(std::string(op) + ": batch dimensions mismatch for shapes " +
                       shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
  }
  return d;
}

template <typename S>
Tensor<S> matmul_impl(const Tensor<S>& a, const Tensor<S>& b, bool b_transposed) {
  const char* op = b_transposed ? "matmul_nt" : "matmul";
  const MatDims d = matmul_dims(a, b, b_transposed, op);
  Shape oshape(a.shape().begin(), a.shape().end() - 2);
  oshape.push_back(d.m);
  oshape.push_back(d.n);
  const bool rg = want_grad(a) || want_grad(b);
  Tensor<S> out = Tensor<S>::zeros(oshape, rg);

  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.data().data();
  const std::int64_t a_sz = d.m * d.k, b_sz = d.k * d.n, o_sz = d.m * d.n;
  for (std::int64_t bi = 0; bi < d.batch; ++bi) {
    const S* bslice = d.b_shared ? pb : pb + bi * b_sz;
    if (b_transposed) {
      detail::gemm_nt(pa + bi * a_sz, bslice, po + bi * o_sz, d.m, d.k, d.n);
    } else {
      detail::gemm_nn(pa + bi * a_sz, bslice, po + bi * o_sz, d.m, d.k, d.n);
    }
  }

  if (rg) {
    out.node()->parents = {a.node(), b.node()};
    out.node()->backward = [d, b_transposed](Node<S>& o) {
      auto& an = *o.parents[0];
      auto& bn = *o.parents[1];
      const S* go = o.grad.data();
      const std::int64_t a_sz = d.m * d.k, b_sz = d.k * d.n, o_sz = d.m * d.n;
      if (an.requires_grad) {
        an.ensure_grad();
        for (std::int64_t bi = 0; bi < d.batch; ++bi) {
          const S* bslice = (d.b_shared ? bn.data.data() : bn.data.data() + bi * b_sz);
          // dA = dC * B^T (nn layout) or dC * B (nt layout)
          if (b_transposed) {
            detail::gemm_nn(go + bi * o_sz, bslice, an.grad.data() + bi * a_sz, d.m, d.n, d.k);
          } else {
            detail::gemm_nt(go + bi * o_sz, bslice, an.grad.data() + bi * a_sz, d.m, d.n, d.k);
          }
        }
      }
      if (bn.requires_grad) {
        bn.ensure_grad();
        for (std::int64_t bi = 0; bi < d.batch; ++bi) {
          S* gb = bn.grad.data() + (d.b_shared ? 0 : bi * b_sz);
          const S* aslice = an.data.data() + bi * a_sz;
          const S* oslice = go + bi * o_sz;
          if (b_transposed) {
            // dB[n,k] = sum_m dC[m,n] * A[m,k]
            detail::gemm_tn(oslice, aslice, gb, d.n, d.m, d.k);
          } else {
            // dB[k,n] = sum_m A[m,k] * dC[m,n]
            detail::gemm_tn(aslice, oslice, gb, d.k, d.m, d.n);
          }
        }
      }
    };
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  return matmul_impl(a, b, false);
}

template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  return matmul_impl(a, b, true);
}

// ---- shape manipulation -----------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  check_shape(shape, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const bool rg = want_grad(x);
  Tensor<S> out = Tensor<S>::zeros(std::move(shape), rg);
  out.node()->data = x.node()->data;
  if (rg) {
    out.node()->parents = {x.node()};
    out.node()->backward = [](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
    };
  }
  return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) throw ShapeError("permute: axes size mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  Shape oshape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int ax = axes[static_cast<std::size_t>(i)];
    if (ax < 0 || ax >= r || seen[static_cast<std::size_t>(ax)]) {
      throw ShapeError("permute: invalid axis list");
    }
    seen[static_cast<std::size_t>(ax)] = true;
    oshape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(ax)];
  }
  const bool rg = want_grad(x);
  Tensor<S> out = Tensor<S>::zeros(oshape, rg);
  // Out strides expressed in input coordinates: walking the output row-major
  // advances the input offset by the permuted strides.
  const auto in_str = natural_strides(x.shape());
  std::vector<std::int64_t> src_str(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) src_str[static_cast<std::size_t>(i)] = in_str[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  const S* px = x.data().data();
  S* po = out.data().data();
  const std::vector<std::int64_t> zero(static_cast<std::size_t>(r), 0);
  for2(oshape, src_str, zero, [&](std::int64_t lin, std::int64_t si, std::int64_t) { po[lin] = px[si]; });
  if (rg) {
    out.node()->parents = {x.node()};
    out.node()->backward = [oshape, src_str, zero](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const S* go = o.grad.data();
      for2(oshape, src_str, zero, [&](std::int64_t lin, std::int64_t si, std::int64_t) {
        p.grad[static_cast<std::size_t>(si)] += go[lin];
      });
    };
  }
  return out;
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
  std::vector<int> axes(static_cast<std::size_t>(x.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

template <typename S>
Tensor<S> narrow(const Tensor<S>& x, int axis, std::int64_t start, std::int64_t len) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ShapeError("narrow: axis out of range");
  const std::int64_t extent = x.dim(axis);
  if (start < 0 || len <= 0 || start + len > extent) {
    throw ShapeError("narrow: slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") outside axis of size " + std::to_string(extent));
  }
  const AxisFold f = fold_axis(x.shape(), axis, "narrow");
  Shape oshape = x.shape();
  oshape[static_cast<std::size_t>(axis)] = len;
  const bool rg = want_grad(x);
  Tensor<S> out = Tensor<S>::zeros(oshape, rg);
  const S* px = x.data().data();
  S* po = out.data().data();
  for (std::int64_t o = 0; o < f.outer; ++o) {
    const S* src = px + (o * f.n + start) * f.inner;
    S* dst = po + o * len * f.inner;
    std::copy(src, src + len * f.inner, dst);
  }
  if (rg) {
    out.node()->parents = {x.node()};
    out.node()->backward = [f, start, len](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const S* go = o.grad.data();
      for (std::int64_t ou = 0; ou < f.outer; ++ou) {
        S* dst = p.grad.data() + (ou * f.n + start) * f.inner;
        const S* src = go + ou * len * f.inner;
        for (std::int64_t i = 0; i < len * f.inner; ++i) dst[i] += src[i];
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<std::int64_t>& rows) {
  if (x.rank() < 1) throw ShapeError("gather_rows: rank-0 input");
  const std::int64_t r0 = x.dim(0);
  const std::int64_t row_sz = x.numel() / r0;
  for (const std::int64_t r : rows) {
    if (r < 0 || r >= r0) {
      throw RangeError("gather_rows: row " + std::to_string(r) + " outside [0," + std::to_string(r0) + ")");
    }
  }
  Shape oshape = x.shape();
  oshape[0] = static_cast<std::int64_t>(rows.size());
  const bool rg = want_grad(x);
  Tensor<S> out = Tensor<S>::zeros(oshape, rg);
  const S* px = x.data().data();
  S* po = out.data().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(px + rows[i] * row_sz, px + (rows[i] + 1) * row_sz, po + static_cast<std::int64_t>(i) * row_sz);
  }
  if (rg) {
    out.node()->parents = {x.node()};
    out.node()->backward = [rows, row_sz](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const S* go = o.grad.data();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        S* dst = p.grad.data() + rows[i] * row_sz;
        const S* src = go + static_cast<std::int64_t>(i) * row_sz;
        for (std::int64_t j = 0; j < row_sz; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: empty input list");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  Shape oshape = parts[0].shape();
  std::int64_t total_axis = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && p.dim(i) != oshape[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat: shapes " + shape_str(oshape) + " and " + shape_str(p.shape()) +
                         " differ off-axis");
      }
    }
    total_axis += p.dim(axis);
    rg = rg || want_grad(p);
  }
  oshape[static_cast<std::size_t>(axis)] = total_axis;
  Tensor<S> out = Tensor<S>::zeros(oshape, rg);
  const AxisFold f = fold_axis(oshape, axis, "concat");
  S* po = out.data().data();
  std::int64_t at = 0;
  for (const auto& p : parts) {
    const std::int64_t pn = p.dim(axis);
    const S* src = p.data().data();
    for (std::int64_t o = 0; o < f.outer; ++o) {
      std::copy(src + o * pn * f.inner, src + (o + 1) * pn * f.inner, po + (o * f.n + at) * f.inner);
    }
    at += pn;
  }
  if (rg) {
    auto& node = *out.node();
    for (const auto& p : parts) node.parents.push_back(p.node());
    std::vector<std::int64_t> sizes;
    for (const auto& p : parts) sizes.push_back(p.dim(axis));
    node.backward = [f, sizes](Node<S>& o) {
      const S* go = o.grad.data();
      std::int64_t at = 0;
      for (std::size_t pi = 0; pi < o.parents.size(); ++pi) {
        auto& p = *o.parents[pi];
        const std::int64_t pn = sizes[pi];
        if (p.requires_grad) {
          p.ensure_grad();
          for (std::int64_t ou = 0; ou < f.outer; ++ou) {
            const S* src = go + (ou * f.n + at) * f.inner;
            S* dst = p.grad.data() + ou * pn * f.inner;
            for (std::int64_t i = 0; i < pn * f.inner; ++i) dst[i] += src[i];
          }
        }
        at += pn;
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& x, Shape shape) {
  check_shape(shape, "broadcast_to");
  if (x.rank() > static_cast<int>(shape.size())) {
    throw ShapeError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const std::size_t off = shape.size() - x.shape().size();
  for (std::size_t i = 0; i < x.shape().size(); ++i) {
    if (x.shape()[i] != shape[off + i] && x.shape()[i] != 1) {
      throw ShapeError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
  }
  const bool rg = want_grad(x);
  Tensor<S> out = Tensor<S>::zeros(shape, rg);
  const auto sx = bcast_strides(x.shape(), shape);
  const std::vector<std::int64_t> zero(shape.size(), 0);
  const S* px = x.data().data();
  S* po = out.data().data();
  for2(out.shape(), sx, zero, [&](std::int64_t lin, std::int64_t xi, std::int64_t) { po[lin] = px[xi]; });
  if (rg) {
    out.node()->parents = {x.node()};
    const Shape oshape = out.shape();
    out.node()->backward = [oshape, sx, zero](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const S* go = o.grad.data();
      for2(oshape, sx, zero, [&](std::int64_t lin, std::int64_t xi, std::int64_t) {
        p.grad[static_cast<std::size_t>(xi)] += go[lin];
      });
    };
  }
  return out;
}

template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& x, std::vector<int> axes, bool keepdims) {
  const int r = x.rank();
  std::vector<bool> reduced(static_cast<std::size_t>(r), false);
  for (int& ax : axes) {
    if (ax < 0) ax += r;
    if (ax < 0 || ax >= r || reduced[static_cast<std::size_t>(ax)]) {
      throw ShapeError("reduce_sum: bad axis list for " + shape_str(x.shape()));
    }
    reduced[static_cast<std::size_t>(ax)] = true;
  }
  Shape kshape = x.shape();  // keepdims view, used for the index mapping
  for (int i = 0; i < r; ++i) {
    if (reduced[static_cast<std::size_t>(i)]) kshape[static_cast<std::size_t>(i)] = 1;
  }
  Shape oshape;
  for (int i = 0; i < r; ++i) {
    if (!reduced[static_cast<std::size_t>(i)]) {
      oshape.push_back(x.dim(i));
    } else if (keepdims) {
      oshape.push_back(1);
    }
  }
  if (oshape.empty()) oshape.push_back(1);
  const bool rg = want_grad(x);
  Tensor<S> out = Tensor<S>::zeros(oshape, rg);
  const auto so = bcast_strides(kshape, x.shape());
  const std::vector<std::int64_t> zero(x.shape().size(), 0);
  const S* px = x.data().data();
  S* po = out.data().data();
  const Shape xshape = x.shape();
  for2(xshape, so, zero, [&](std::int64_t lin, std::int64_t oi, std::int64_t) { po[oi] += px[lin]; });
  if (rg) {
    out.node()->parents = {x.node()};
    out.node()->backward = [xshape, so, zero](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const S* go = o.grad.data();
      for2(xshape, so, zero, [&](std::int64_t lin, std::int64_t oi, std::int64_t) {
        p.grad[static_cast<std::size_t>(lin)] += go[oi];
      });
    };
  }
  return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  std::vector<int> axes(static_cast<std::size_t>(x.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  return reduce_sum(x, axes, false);
}

// ---- softmax family ---------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const AxisFold f = fold_axis(x.shape(), axis, "softmax");
  const bool rg = want_grad(x);
  Tensor<S> out = Tensor<S>::zeros(x.shape(), rg);
  const S* px = x.data().data();
  S* po = out.data().data();
  constexpr S kNegInf = -std::numeric_limits<S>::infinity();
  for (std::int64_t o = 0; o < f.outer; ++o) {
    for (std::int64_t in = 0; in < f.inner; ++in) {
      const std::int64_t base = o * f.n * f.inner + in;
      S mx = kNegInf;
      for (std::int64_t j = 0; j < f.n; ++j) mx = std::max(mx, px[base + j * f.inner]);
      if (mx == kNegInf) continue;  // fully masked slice stays all-zero
      S sum = 0;
      for (std::int64_t j = 0; j < f.n; ++j) {
        const S v = px[base + j * f.inner];
        const S e = v == kNegInf ? S(0) : std::exp(v - mx);
        po[base + j * f.inner] = e;
        sum += e;
      }
      const S inv = S(1) / sum;
      for (std::int64_t j = 0; j < f.n; ++j) po[base + j * f.inner] *= inv;
    }
  }
  if (rg) {
    out.node()->parents = {x.node()};
    out.node()->backward = [f](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const S* y = o.data.data();
      const S* go = o.grad.data();
      for (std::int64_t ou = 0; ou < f.outer; ++ou) {
        for (std::int64_t in = 0; in < f.inner; ++in) {
          const std::int64_t base = ou * f.n * f.inner + in;
          S dot = 0;
          for (std::int64_t j = 0; j < f.n; ++j) {
            const std::int64_t at = base + j * f.inner;
            dot += y[at] * go[at];
          }
          for (std::int64_t j = 0; j < f.n; ++j) {
            const std::int64_t at = base + j * f.inner;
            p.grad[static_cast<std::size_t>(at)] += y[at] * (go[at] - dot);
          }
        }
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, int axis) {
  const AxisFold f = fold_axis(x.shape(), axis, "log_softmax");
  const bool rg = want_grad(x);
  Tensor<S> out = Tensor<S>::zeros(x.shape(), rg);
  const S* px = x.data().data();
  S* po = out.data().data();
  for (std::int64_t o = 0; o < f.outer; ++o) {
    for (std::int64_t in = 0; in < f.inner; ++in) {
      const std::int64_t base = o * f.n * f.inner + in;
      S mx = px[base];
      for (std::int64_t j = 1; j < f.n; ++j) mx = std::max(mx, px[base + j * f.inner]);
      S sum = 0;
      for (std::int64_t j = 0; j < f.n; ++j) sum += std::exp(px[base + j * f.inner] - mx);
      const S lse = mx + std::log(sum);
      for (std::int64_t j = 0; j < f.n; ++j) {
        const std::int64_t at = base + j * f.inner;
        po[at] = px[at] - lse;
      }
    }
  }
  if (rg) {
    out.node()->parents = {x.node()};
    out.node()->backward = [f](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const S* y = o.data.data();
      const S* go = o.grad.data();
      for (std::int64_t ou = 0; ou < f.outer; ++ou) {
        for (std::int64_t in = 0; in < f.inner; ++in) {
          const std::int64_t base = ou * f.n * f.inner + in;
          S gsum = 0;
          for (std::int64_t j = 0; j < f.n; ++j) gsum += go[base + j * f.inner];
          for (std::int64_t j = 0; j < f.n; ++j) {
            const std::int64_t at = base + j * f.inner;
            p.grad[static_cast<std::size_t>(at)] += go[at] - std::exp(y[at]) * gsum;
          }
        }
      }
    };
  }
  return out;
}

// ---- layer norm / gelu -------------------------------------------------------

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  const std::int64_t d = x.shape().back();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                     shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  if (eps <= S(0)) throw ContractError("layer_norm: eps must be positive");
  const std::int64_t rows = x.numel() / d;
  const bool rg = want_grad(x) || want_grad(gain) || want_grad(bias);
  Tensor<S> out = Tensor<S>::zeros(x.shape(), rg);
  // xhat and inv-stddev are stashed for the backward pass.
  auto xhat = std::make_shared<std::vector<S>>(static_cast<std::size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  const S* px = x.data().data();
  const S* pg = gain.data().data();
  const S* pb = bias.data().data();
  S* po = out.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* row = px + r * d;
    S mean = 0;
    for (std::int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<S>(d);
    S var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const S c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S inv = S(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = inv;
    for (std::int64_t j = 0; j < d; ++j) {
      const S xh = (row[j] - mean) * inv;
      (*xhat)[static_cast<std::size_t>(r * d + j)] = xh;
      po[r * d + j] = pg[j] * xh + pb[j];
    }
  }
  if (rg) {
    out.node()->parents = {x.node(), gain.node(), bias.node()};
    out.node()->backward = [d, rows, xhat, inv_std](Node<S>& o) {
      auto& xn = *o.parents[0];
      auto& gn = *o.parents[1];
      auto& bn = *o.parents[2];
      const S* go = o.grad.data();
      const S* xh = xhat->data();
      if (gn.requires_grad) gn.ensure_grad();
      if (bn.requires_grad) bn.ensure_grad();
      if (xn.requires_grad) xn.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const S* grow = go + r * d;
        const S* xrow = xh + r * d;
        if (gn.requires_grad || bn.requires_grad) {
          for (std::int64_t j = 0; j < d; ++j) {
            if (gn.requires_grad) gn.grad[static_cast<std::size_t>(j)] += grow[j] * xrow[j];
            if (bn.requires_grad) bn.grad[static_cast<std::size_t>(j)] += grow[j];
          }
        }
        if (xn.requires_grad) {
          const S inv = (*inv_std)[static_cast<std::size_t>(r)];
          // dxhat = dy * gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          S m1 = 0, m2 = 0;
          for (std::int64_t j = 0; j < d; ++j) {
            const S dxh = grow[j] * gn.data[static_cast<std::size_t>(j)];
            m1 += dxh;
            m2 += dxh * xrow[j];
          }
          m1 /= static_cast<S>(d);
          m2 /= static_cast<S>(d);
          for (std::int64_t j = 0; j < d; ++j) {
            const S dxh = grow[j] * gn.data[static_cast<std::size_t>(j)];
            xn.grad[static_cast<std::size_t>(r * d + j)] += inv * (dxh - m1 - xrow[j] * m2);
          }
        }
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  const bool rg = want_grad(x);
  Tensor<S> out = Tensor<S>::zeros(x.shape(), rg);
  const S kC = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S kA = static_cast<S>(0.044715);
  const S* px = x.data().data();
  S* po = out.data().data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const S v = px[i];
    const S t = std::tanh(kC * (v + kA * v * v * v));
    po[i] = S(0.5) * v * (S(1) + t);
  }
  if (rg) {
    out.node()->parents = {x.node()};
    out.node()->backward = [kC, kA](Node<S>& o) {
      auto& p = *o.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      const S* go = o.grad.data();
      const S* px = p.data.data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const S v = px[i];
        const S t = std::tanh(kC * (v + kA * v * v * v));
        const S d = S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * kC * (S(1) + S(3) * kA * v * v);
        p.grad[i] += go[i] * d;
      }
    };
  }
  return out;
}

// ---- backward sweep ----------------------------------------------------------

template <typename S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not require grad (no graph recorded)");
  }
  if (loss.node()->consumed) {
    throw ContractError("backward: graph already replayed; run a fresh forward first");
  }

  // Iterative DFS post-order: children appear after all parents are visited,
  // so reverse iteration replays each op exactly once after its output grad
  // is complete.
  std::vector<Node<S>*> topo;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  std::unordered_set<Node<S>*> visited;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Node<S>* node = stack.back().first;
    const std::size_t next = stack.back().second;
    if (node->consumed) {
      throw ContractError("backward: graph already replayed; run a fresh forward first");
    }
    if (next < node->parents.size()) {
      stack.back().second += 1;
      Node<S>* parent = node->parents[next].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] = S(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node<S>* node = *it;
    if (node->backward) {
      node->ensure_grad();
      node->backward(*node);
      node->consumed = true;
    }
  }
}

// ---- explicit instantiations ---------------------------------------------------

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;

#define WF_INSTANTIATE_OPS(S)                                                               \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                       \
  template Tensor<S> mul_scalar(const Tensor<S>&, S);                                       \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                            \
  template Tensor<S> matmul_nt(const Tensor<S>&, const Tensor<S>&);                         \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                      \
  template Tensor<S> permute(const Tensor<S>&, const std::vector<int>&);                    \
  template Tensor<S> transpose_last2(const Tensor<S>&);                                     \
  template Tensor<S> narrow(const Tensor<S>&, int, std::int64_t, std::int64_t);             \
  template Tensor<S> gather_rows(const Tensor<S>&, const std::vector<std::int64_t>&);       \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                            \
  template Tensor<S> broadcast_to(const Tensor<S>&, Shape);                                 \
  template Tensor<S> reduce_sum(const Tensor<S>&, std::vector<int>, bool);                  \
  template Tensor<S> sum_all(const Tensor<S>&);                                             \
  template Tensor<S> softmax(const Tensor<S>&, int);                                        \
  template Tensor<S> log_softmax(const Tensor<S>&, int);                                    \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);   \
  template Tensor<S> gelu(const Tensor<S>&);                                                \
  template void backward(const Tensor<S>&);

WF_INSTANTIATE_OPS(float)
WF_INSTANTIATE_OPS(double)

#undef WF_INSTANTIATE_OPS

}  // namespace wf
