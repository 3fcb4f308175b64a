#include "evtraffic/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "evtraffic/errors.hpp"
#include "evtraffic/special.hpp"

namespace evtraffic::ad {

using kernels::BatchStrides;
using kernels::Exec;
using kernels::GemmDims;

// ---- Var / Tape -------------------------------------------------------------

const Tensor& Var::value() const { return tape_->nodes_[id_].value; }
bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }

Var Tape::leaf(Tensor value) {
  Node node;
  node.requires_grad = value.requires_grad();
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  Node node;
  node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                   [this](std::size_t p) { return nodes_[p].requires_grad; });
  node.value = std::move(value);
  if (node.requires_grad) {
    node.parents = std::move(parents);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor* Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0);
  return &node.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw ValidationError("backward: loss belongs to another tape");
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (backward_done_) throw ValidationError("backward: already run on this tape");
  backward_done_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())->fill(1.0);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this, id);
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& node = nodes_[v.id()];
  if (node.grad.empty()) return Tensor(node.value.shape(), 0.0);
  return node.grad;
}

// ---- helpers ----------------------------------------------------------------

namespace {

Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ValidationError("operands recorded on different tapes");
  return *a.tape();
}

struct AxisView {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

// Offsets into `in` for every element of `out` under broadcasting.
std::vector<std::size_t> broadcast_offsets(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t in_axis = in.size() - 1 - k;
    const std::size_t out_axis = rank - 1 - k;
    stride[out_axis] = in[in_axis] == 1 ? 0 : s;
    s *= in[in_axis];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> offsets(n);
  std::vector<std::size_t> index(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    offsets[i] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++index[axis];
      offset += stride[axis];
      if (index[axis] < out[axis]) break;
      offset -= stride[axis] * index[axis];
      index[axis] = 0;
    }
  }
  return offsets;
}

enum class BinOp { add, sub, mul, div };

Var binary(const Var& a, const Var& b, BinOp op) {
  Tape& tape = same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const Shape out_shape = broadcast_shape(sa, sb);
  Tensor out(out_shape);
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t n = out.size();

  std::shared_ptr<std::vector<std::size_t>> ia, ib;
  if (sa != out_shape) ia = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(out_shape, sa));
  if (sb != out_shape) ib = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(out_shape, sb));
  auto ai = [&](std::size_t i) { return ia ? (*ia)[i] : i; };
  auto bi = [&](std::size_t i) { return ib ? (*ib)[i] : i; };

  switch (op) {
    case BinOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] + bv[bi(i)];
      break;
    case BinOp::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] - bv[bi(i)];
      break;
    case BinOp::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] * bv[bi(i)];
      break;
    case BinOp::div:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] / bv[bi(i)];
      break;
  }

  const std::size_t pa = a.id(), pb = b.id();
  return tape.record(std::move(out), {pa, pb}, [pa, pb, ia, ib, op](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& av = t.value(pa);
    const Tensor& bv = t.value(pb);
    Tensor* ga = t.grad_buffer(pa);
    Tensor* gb = t.grad_buffer(pb);
    auto ai = [&](std::size_t i) { return ia ? (*ia)[i] : i; };
    auto bi = [&](std::size_t i) { return ib ? (*ib)[i] : i; };
    const std::size_t n = g.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      switch (op) {
        case BinOp::add:
          if (ga) (*ga)[ai(i)] += gi;
          if (gb) (*gb)[bi(i)] += gi;
          break;
        case BinOp::sub:
          if (ga) (*ga)[ai(i)] += gi;
          if (gb) (*gb)[bi(i)] -= gi;
          break;
        case BinOp::mul:
          if (ga) (*ga)[ai(i)] += gi * bv[bi(i)];
          if (gb) (*gb)[bi(i)] += gi * av[ai(i)];
          break;
        case BinOp::div: {
          const double y = bv[bi(i)];
          if (ga) (*ga)[ai(i)] += gi / y;
          if (gb) (*gb)[bi(i)] -= gi * av[ai(i)] / (y * y);
          break;
        }
      }
    }
  });
}

// y = f(x) elementwise; dydx(x, y) gives the local derivative.
template <class F, class D>
Var unary(const Var& a, F f, D dydx) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t pa = a.id();
  return tape.record(std::move(out), {pa}, [pa, dydx](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(pa);
    if (!ga) return;
    const Tensor& g = t.out_grad(self);
    const Tensor& x = t.value(pa);
    const Tensor& y = t.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * dydx(x[i], y[i]);
  });
}

void gemm_nn(Exec e, const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s, bool acc) {
  if (e == Exec::serial) {
    kernels::serial::gemm_nn(d, a, b, c, s, acc);
  } else {
    kernels::parallel::gemm_nn(d, a, b, c, s, acc);
  }
}
void gemm_tn(Exec e, const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s) {
  if (e == Exec::serial) {
    kernels::serial::gemm_tn(d, a, b, c, s);
  } else {
    kernels::parallel::gemm_tn(d, a, b, c, s);
  }
}
void gemm_nt(Exec e, const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s) {
  if (e == Exec::serial) {
    kernels::serial::gemm_nt(d, a, b, c, s);
  } else {
    kernels::parallel::gemm_nt(d, a, b, c, s);
  }
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[rank - 1 - k] = std::max(da, db);
  }
  return out;
}

// ---- arithmetic ---------------------------------------------------------------

Var add(const Var& a, const Var& b) { return binary(a, b, BinOp::add); }
Var sub(const Var& a, const Var& b) { return binary(a, b, BinOp::sub); }
Var mul(const Var& a, const Var& b) { return binary(a, b, BinOp::mul); }
Var div(const Var& a, const Var& b) { return binary(a, b, BinOp::div); }

Var neg(const Var& a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

// ---- linear algebra -------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool ok_rank = (sa.size() == 2 || sa.size() == 3) && (sb.size() == 2 || sb.size() == 3);
  if (!ok_rank) throw ShapeError("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t k2 = sb[sb.size() - 2], n = sb.back();
  if (k != k2) throw ShapeError("matmul: inner dimensions differ in " + shape_str(sa) + " x " + shape_str(sb));

  GemmDims d;
  BatchStrides s;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2) {
    d = {1, m, k, n};
    out_shape = {m, n};
  } else if (sa.size() == 3 && sb.size() == 2) {
    d = {1, sa[0] * m, k, n};  // shared right operand: one tall product
    out_shape = {sa[0], m, n};
  } else if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0]) throw ShapeError("matmul: batch sizes differ in " + shape_str(sa) + " x " + shape_str(sb));
    d = {sa[0], m, k, n};
    s = {m * k, k * n, m * n};
    out_shape = {sa[0], m, n};
  } else {
    d = {sb[0], m, k, n};
    s = {0, k * n, m * n};
    out_shape = {sb[0], m, n};
  }

  Tensor out(out_shape);
  const Exec exec = tape.exec();
  gemm_nn(exec, d, a.value().data().data(), b.value().data().data(), out.data().data(), s, false);

  const std::size_t pa = a.id(), pb = b.id();
  return tape.record(std::move(out), {pa, pb}, [pa, pb, d, s, exec](Tape& t, std::size_t self) {
    const double* g = t.out_grad(self).data().data();
    if (Tensor* ga = t.grad_buffer(pa)) {
      // dA = dC · Bᵀ
      const GemmDims dd{d.batch, d.m, d.k, d.n};
      gemm_nt(exec, dd, g, t.value(pb).data().data(), ga->data().data(), {s.c, s.b, s.a});
    }
    if (Tensor* gb = t.grad_buffer(pb)) {
      // dB = Aᵀ · dC
      gemm_tn(exec, d, t.value(pa).data().data(), g, gb->data().data(), {s.a, s.c, s.b});
    }
  });
}

Var transpose(const Var& a) {
  const Shape& sa = a.shape();
  if (sa.size() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(sa));
  const std::size_t r = sa[sa.size() - 2], c = sa.back();
  const std::size_t batch = a.size() / (r * c);
  Shape out_shape = sa;
  std::swap(out_shape[sa.size() - 2], out_shape.back());
  Tensor out(out_shape);
  const Tensor& av = a.value();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = av[b * r * c + i * c + j];
    }
  }
  const std::size_t pa = a.id();
  return a.tape()->record(std::move(out), {pa}, [pa, batch, r, c](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(pa);
    if (!ga) return;
    const Tensor& g = t.out_grad(self);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*ga)[b * r * c + i * c + j] += g[b * r * c + j * r + i];
      }
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t pa = a.id();
  return a.tape()->record(std::move(out), {pa}, [pa](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(pa);
    if (!ga) return;
    const Tensor& g = t.out_grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

Var broadcast_to(const Var& a, Shape shape) {
  if (broadcast_shape(a.shape(), shape) != shape) {
    throw ShapeError("cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  auto offsets = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(shape, a.shape()));
  Tensor out(shape);
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[(*offsets)[i]];
  const std::size_t pa = a.id();
  return a.tape()->record(std::move(out), {pa}, [pa, offsets](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(pa);
    if (!ga) return;
    const Tensor& g = t.out_grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[(*offsets)[i]] += g[i];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape& tape = *parts.front().tape();
  Shape out_shape = parts.front().shape();
  if (axis >= out_shape.size()) throw ShapeError("concat axis out of range for " + shape_str(out_shape));
  std::size_t total = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw ValidationError("concat operands recorded on different tapes");
    const Shape& s = p.shape();
    bool match = s.size() == out_shape.size();
    for (std::size_t i = 0; match && i < s.size(); ++i) {
      if (i != axis && s[i] != out_shape[i]) match = false;
    }
    if (!match) {
      throw ShapeError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(out_shape) +
                       " along axis " + std::to_string(axis));
    }
    lens.push_back(s[axis]);
    total += s[axis];
  }
  out_shape[axis] = total;
  const AxisView v = axis_view(out_shape, axis);
  Tensor out(out_shape);
  std::size_t start = 0;
  std::vector<std::size_t> ids;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& pv = parts[p].value();
    const std::size_t block = lens[p] * v.inner;
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(pv.data().begin() + o * block, block, out.data().begin() + (o * v.len + start) * v.inner);
    }
    start += lens[p];
    ids.push_back(parts[p].id());
  }
  return tape.record(std::move(out), ids, [ids, lens, v](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    std::size_t start = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t block = lens[p] * v.inner;
      if (Tensor* gp = t.grad_buffer(ids[p])) {
        for (std::size_t o = 0; o < v.outer; ++o) {
          const double* src = g.data().data() + (o * v.len + start) * v.inner;
          double* dst = gp->data().data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      start += lens[p];
    }
  });
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& sa = a.shape();
  const AxisView v = axis_view(sa, axis);
  if (length == 0 || start + length > v.len) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(axis) + " of " + shape_str(sa));
  }
  Shape out_shape = sa;
  out_shape[axis] = length;
  Tensor out(out_shape);
  const Tensor& av = a.value();
  const std::size_t block = length * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(av.data().begin() + (o * v.len + start) * v.inner, block, out.data().begin() + o * block);
  }
  const std::size_t pa = a.id();
  return a.tape()->record(std::move(out), {pa}, [pa, v, start, block](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(pa);
    if (!ga) return;
    const Tensor& g = t.out_grad(self);
    for (std::size_t o = 0; o < v.outer; ++o) {
      double* dst = ga->data().data() + (o * v.len + start) * v.inner;
      const double* src = g.data().data() + o * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

// ---- reductions -------------------------------------------------------------------

Var sum(const Var& a) {
  const Tensor& av = a.value();
  double total = 0.0;
  for (double x : av.data()) total += x;
  const std::size_t pa = a.id();
  return a.tape()->record(Tensor::scalar(total), {pa}, [pa](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(pa);
    if (!ga) return;
    const double g = t.out_grad(self)[0];
    for (auto& x : ga->data()) x += g;
  });
}

Var sum(const Var& a, std::size_t axis) {
  const Shape& sa = a.shape();
  const AxisView v = axis_view(sa, axis);
  Shape out_shape;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (i != axis) out_shape.push_back(sa[i]);
  }
  Tensor out(out_shape, 0.0);
  const Tensor& av = a.value();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t l = 0; l < v.len; ++l) {
      for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += av[(o * v.len + l) * v.inner + i];
    }
  }
  const std::size_t pa = a.id();
  return a.tape()->record(std::move(out), {pa}, [pa, v](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(pa);
    if (!ga) return;
    const Tensor& g = t.out_grad(self);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t l = 0; l < v.len; ++l) {
        for (std::size_t i = 0; i < v.inner; ++i) (*ga)[(o * v.len + l) * v.inner + i] += g[o * v.inner + i];
      }
    }
  });
}

Var mean(const Var& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size())); }

Var mean(const Var& a, std::size_t axis) {
  const double len = static_cast<double>(axis_view(a.shape(), axis).len);
  return mul_scalar(sum(a, axis), 1.0 / len);
}

// ---- elementwise ------------------------------------------------------------------

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(a, special::sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& a) {
  return unary(a, special::softplus, [](double x, double) { return special::sigmoid(x); });
}

Var abs(const Var& a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var lgamma(const Var& a) {
  return unary(a, special::lgamma, [](double x, double) { return special::digamma(x); });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
               [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var softmax(const Var& a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis);
  const Tensor& av = a.value();
  Tensor out(a.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.len * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < v.len; ++l) mx = std::max(mx, av[base + l * v.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) {
        const double e = std::exp(av[base + l * v.inner] - mx);
        out[base + l * v.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] /= z;
    }
  }
  const std::size_t pa = a.id();
  return a.tape()->record(std::move(out), {pa}, [pa, v](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(pa);
    if (!ga) return;
    const Tensor& g = t.out_grad(self);
    const Tensor& y = t.value(self);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.len * v.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < v.len; ++l) dot += g[base + l * v.inner] * y[base + l * v.inner];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t idx = base + l * v.inner;
          (*ga)[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

}  // namespace evtraffic::ad
