#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stochnorm {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
class BasicTape;

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // same length as data iff requires_grad
  bool requires_grad = false;
};

// Dense n-dimensional array with value semantics over shared storage.
// Copies alias the same buffer; data is treated as immutable once an op has
// consumed the tensor, except for gradient accumulation during backward.
//
// A tensor optionally carries a (non-owning) pointer to the tape it was
// recorded on. Ops record themselves when at least one input requires
// gradients AND a tape is reachable through some input; see BasicTape.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static BasicTensor filled(Shape shape, T value, bool requires_grad = false) {
    auto impl = std::make_shared<TensorStorage<T>>();
    const int64_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<size_t>(n), value);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(static_cast<size_t>(n), T(0));
    return BasicTensor(std::move(impl));
  }

  static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor data length does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorStorage<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(impl->data.size(), T(0));
    return BasicTensor(std::move(impl));
  }

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  T at(int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  T* grad() { return impl_->grad.data(); }
  const T* grad() const { return impl_->grad.data(); }

  void zero_grad() {
    if (impl_ && impl_->requires_grad) impl_->grad.assign(impl_->data.size(), T(0));
  }

  T item() const {
    if (!impl_ || impl_->data.size() != 1)
      throw ShapeError("item() requires a single-element tensor");
    return impl_->data[0];
  }

  // Independent copy of the values; no grad, no tape.
  BasicTensor detached_copy() const {
    auto impl = std::make_shared<TensorStorage<T>>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return BasicTensor(std::move(impl));
  }

  BasicTape<T>* tape() const { return tape_; }

  // Library-internal: storage access and op-result construction.
  const std::shared_ptr<TensorStorage<T>>& storage() const { return impl_; }
  static BasicTensor make(Shape shape, std::vector<T> data, bool requires_grad,
                          BasicTape<T>* tape) {
    BasicTensor t = from(std::move(shape), std::move(data), requires_grad);
    t.tape_ = tape;
    return t;
  }

 private:
  friend class BasicTape<T>;
  explicit BasicTensor(std::shared_ptr<TensorStorage<T>> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<TensorStorage<T>> impl_;
  BasicTape<T>* tape_ = nullptr;
};

// Records the forward pass as an ordered list of operations, each holding
// references to its parents and a closure that pushes gradients to them.
// Recording order is a topological order by construction, so backward()
// simply walks the list in reverse. A tape is consumed by exactly one
// backward pass; tensors and their tape are confined to a single thread.
template <typename T>
class BasicTape {
 public:
  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  // Attaches `t` to this tape so downstream ops record themselves. Gradients
  // of ops are written straight into the storage of tensors that require
  // them, so watching a parameter is enough to collect its gradient.
  BasicTensor<T> watch(const BasicTensor<T>& t) {
    if (t.tape_ && t.tape_ != this)
      throw std::logic_error("tensor already belongs to another tape");
    BasicTensor<T> out = t;
    out.tape_ = this;
    return out;
  }

  size_t num_ops() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void record(std::vector<std::shared_ptr<TensorStorage<T>>> parents,
              std::function<void()> backward_fn) {
    nodes_.push_back(Node{std::move(parents), std::move(backward_fn)});
  }

  // Seeds d(loss)/d(loss) = 1 and runs all recorded ops in reverse. After the
  // sweep, grad of every reachable leaf holds the derivative of the loss.
  void backward(const BasicTensor<T>& loss) {
    if (consumed_) throw std::logic_error("tape already consumed by a backward pass");
    if (!loss.defined() || loss.size() != 1)
      throw ShapeError("backward expects a scalar loss");
    if (loss.tape_ != this)
      throw std::logic_error("loss was not recorded on this tape");
    if (!loss.requires_grad())
      throw std::logic_error("loss does not depend on any tensor requiring gradients");
    loss.storage()->grad[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    consumed_ = true;
  }

 private:
  struct Node {
    std::vector<std::shared_ptr<TensorStorage<T>>> parents;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
BasicTape<T>* resolve_tape(std::initializer_list<const BasicTensor<T>*> inputs) {
  BasicTape<T>* tape = nullptr;
  for (const auto* t : inputs) {
    if (!t->defined() || !t->tape()) continue;
    if (tape && tape != t->tape())
      throw std::logic_error("op inputs belong to different tapes");
    tape = t->tape();
  }
  return tape;
}

template <typename T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Output stride per input dimension for a reduction; reduced dims get 0.
struct ReducePlan {
  Shape in_shape;
  Shape out_shape;
  std::vector<int64_t> out_stride;  // per input dim
  int64_t group = 1;                // input elements per output element
};

inline ReducePlan make_reduce_plan(const Shape& in, const std::vector<int>& dims) {
  if (dims.empty()) throw ShapeError("reduction requires at least one dim");
  const int rank = static_cast<int>(in.size());
  std::vector<char> reduced(static_cast<size_t>(rank), 0);
  for (int d : dims) {
    if (d < 0 || d >= rank) throw ShapeError("reduction dim out of range");
    if (reduced[static_cast<size_t>(d)]) throw ShapeError("duplicate reduction dim");
    reduced[static_cast<size_t>(d)] = 1;
  }
  ReducePlan plan;
  plan.in_shape = in;
  for (int d = 0; d < rank; ++d)
    if (!reduced[static_cast<size_t>(d)]) plan.out_shape.push_back(in[static_cast<size_t>(d)]);
  plan.out_stride.assign(static_cast<size_t>(rank), 0);
  int64_t stride = 1;
  for (int d = rank - 1; d >= 0; --d) {
    if (!reduced[static_cast<size_t>(d)]) {
      plan.out_stride[static_cast<size_t>(d)] = stride;
      stride *= in[static_cast<size_t>(d)];
    } else {
      plan.group *= in[static_cast<size_t>(d)];
    }
  }
  return plan;
}

// Calls fn(input_index, output_index) for every input element in order.
// The batch-norm pattern (reduce batch and spatial dims of [k,c,...]) is
// special-cased; everything else goes through the generic odometer.
template <typename Fn>
void for_each_reduce_index(const ReducePlan& plan, Fn&& fn) {
  const int rank = static_cast<int>(plan.in_shape.size());
  const int64_t n = shape_numel(plan.in_shape);
  const bool channel_only =
      (rank == 4 && plan.out_stride[0] == 0 && plan.out_stride[1] == 1 &&
       plan.out_stride[2] == 0 && plan.out_stride[3] == 0) ||
      (rank == 2 && plan.out_stride[0] == 0 && plan.out_stride[1] == 1);
  if (channel_only) {
    const int64_t c = plan.in_shape[1];
    const int64_t sp = rank == 4 ? static_cast<int64_t>(plan.in_shape[2]) * plan.in_shape[3] : 1;
    int64_t i = 0;
    for (int64_t b = 0; b < plan.in_shape[0]; ++b)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t s = 0; s < sp; ++s) fn(i++, ch);
    return;
  }
  std::vector<int> idx(static_cast<size_t>(rank), 0);
  int64_t oidx = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, oidx);
    for (int d = rank - 1; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      oidx += plan.out_stride[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < plan.in_shape[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
      oidx -= plan.out_stride[static_cast<size_t>(d)] * plan.in_shape[static_cast<size_t>(d)];
    }
  }
}

// Splits [k, c, ...] into batch, channels and trailing spatial extent.
template <typename T>
void batch_channel_spatial(const BasicTensor<T>& x, int64_t* k, int64_t* c, int64_t* sp) {
  if (x.rank() < 2) throw ShapeError("expected rank >= 2 tensor, got " + shape_str(x.shape()));
  *k = x.dim(0);
  *c = x.dim(1);
  *sp = 1;
  for (int d = 2; d < x.rank(); ++d) *sp *= x.dim(d);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

// Generic differentiable elementwise map; df(x, y) is evaluated at the
// forward point with y = f(x).
template <typename T, typename F, typename DF>
BasicTensor<T> unary_map(const BasicTensor<T>& x, F f, DF df) {
  std::vector<T> out(static_cast<size_t>(x.size()));
  const T* xd = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  auto* tape = detail::resolve_tape<T>({&x});
  const bool rec = tape && x.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make(x.shape(), std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto yi = y.storage();
    tape->record({xi}, [xi, yi, df]() {
      const T* g = yi->grad.data();
      const T* xv = xi->data.data();
      const T* yv = yi->data.data();
      T* xg = xi->grad.data();
      for (size_t i = 0; i < yi->data.size(); ++i) xg[i] += g[i] * df(xv[i], yv[i]);
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& x) {
  return unary_map(
      x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
BasicTensor<T> tensor_sqrt(const BasicTensor<T>& x) {
  return unary_map(
      x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
BasicTensor<T> tensor_log(const BasicTensor<T>& x) {
  return unary_map(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
BasicTensor<T> tensor_exp(const BasicTensor<T>& x) {
  return unary_map(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> tensor_erf(const BasicTensor<T>& x) {
  constexpr T two_over_sqrt_pi = T(1.1283791670955126);
  return unary_map(
      x, [](T v) { return std::erf(v); },
      [](T v, T) { return two_over_sqrt_pi * std::exp(-v * v); });
}

template <typename T>
BasicTensor<T> neg(const BasicTensor<T>& x) {
  return unary_map(
      x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T c) {
  return unary_map(
      x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, T c) {
  return unary_map(
      x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

// y = x if x >= 0 else slope * x. The subgradient at 0 is fixed to the
// positive branch.
template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& x, T slope) {
  return unary_map(
      x, [slope](T v) { return v >= T(0) ? v : slope * v; },
      [slope](T v, T) { return v >= T(0) ? T(1) : slope; });
}

namespace detail {

template <typename T, typename FwdFn, typename BwdAFn, typename BwdBFn>
BasicTensor<T> binary_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b,
                                 const char* name, FwdFn fwd, BwdAFn bwd_a, BwdBFn bwd_b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<T> out(static_cast<size_t>(a.size()));
  const T* ad = a.data();
  const T* bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
  auto* tape = resolve_tape<T>({&a, &b});
  const bool rec = tape && any_requires_grad<T>({&a, &b});
  BasicTensor<T> y = BasicTensor<T>::make(a.shape(), std::move(out), rec, tape);
  if (rec) {
    auto ai = a.storage();
    auto bi = b.storage();
    auto yi = y.storage();
    tape->record({ai, bi}, [ai, bi, yi, bwd_a, bwd_b]() {
      const T* g = yi->grad.data();
      const T* av = ai->data.data();
      const T* bv = bi->data.data();
      if (ai->requires_grad) {
        T* ag = ai->grad.data();
        for (size_t i = 0; i < yi->data.size(); ++i) ag[i] += g[i] * bwd_a(av[i], bv[i]);
      }
      if (bi->requires_grad) {
        T* bg = bi->grad.data();
        for (size_t i = 0; i < yi->data.size(); ++i) bg[i] += g[i] * bwd_b(av[i], bv[i]);
      }
    });
  }
  return y;
}

}  // namespace detail

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_same_shape(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_same_shape(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_same_shape(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
BasicTensor<T> divide(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_same_shape(
      a, b, "divide", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int64_t m = a.dim(0), p = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<size_t>(m * n), T(0));
  {
    const T* ad = a.data();
    const T* bd = b.data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t k = 0; k < p; ++k) {
        const T av = ad[i * p + k];
        if (av == T(0)) continue;
        const T* brow = bd + k * n;
        T* orow = out.data() + i * n;
        for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  }
  auto* tape = detail::resolve_tape<T>({&a, &b});
  const bool rec = tape && detail::any_requires_grad<T>({&a, &b});
  BasicTensor<T> y = BasicTensor<T>::make({static_cast<int>(m), static_cast<int>(n)},
                                          std::move(out), rec, tape);
  if (rec) {
    auto ai = a.storage();
    auto bi = b.storage();
    auto yi = y.storage();
    tape->record({ai, bi}, [ai, bi, yi, m, p, n]() {
      const T* g = yi->grad.data();
      if (ai->requires_grad) {
        T* ag = ai->grad.data();
        const T* bd = bi->data.data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) {
            const T gv = g[i * n + j];
            if (gv == T(0)) continue;
            for (int64_t k = 0; k < p; ++k) ag[i * p + k] += gv * bd[k * n + j];
          }
      }
      if (bi->requires_grad) {
        T* bg = bi->grad.data();
        const T* ad = ai->data.data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t k = 0; k < p; ++k) {
            const T av = ad[i * p + k];
            if (av == T(0)) continue;
            const T* grow = g + i * n;
            T* brow = bg + k * n;
            for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> transpose2d(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose2d expects rank 2");
  const int64_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(static_cast<size_t>(m * n));
  const T* xd = x.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = xd[i * n + j];
  auto* tape = detail::resolve_tape<T>({&x});
  const bool rec = tape && x.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make({static_cast<int>(n), static_cast<int>(m)},
                                          std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto yi = y.storage();
    tape->record({xi}, [xi, yi, m, n]() {
      const T* g = yi->grad.data();
      T* xg = xi->grad.data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) xg[i * n + j] += g[j * m + i];
    });
  }
  return y;
}

// Cross-correlation of x[k,c,h,w] with w[o,c,kh,kw], zero padding `pad`,
// square stride. Output is [k,o,h',w'] with h' = (h + 2*pad - kh)/stride + 1.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, int stride = 1,
                      int pad = 0) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d expects x[k,c,h,w] and w[o,c,kh,kw]");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d: pad must be >= 0");
  const int k = x.dim(0), c = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (kh > h + 2 * pad || kw > ww + 2 * pad)
    throw ShapeError("conv2d: kernel larger than padded input");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (ww + 2 * pad - kw) / stride + 1;

  // Valid output ranges per kernel offset, so the inner loops are branch
  // free: i in [lo, hi) keeps i*stride - pad + ki inside [0, h).
  const auto valid_range = [stride, pad](int extent, int out_extent, int koff, int* lo, int* hi) {
    int l = 0;
    while (l < out_extent && l * stride - pad + koff < 0) ++l;
    int r = out_extent;
    while (r > l && (r - 1) * stride - pad + koff >= extent) --r;
    *lo = l;
    *hi = r;
  };

  std::vector<T> out(static_cast<size_t>(k) * o * oh * ow, T(0));
  const T* xd = x.data();
  const T* wd = w.data();
  for (int n = 0; n < k; ++n)
    for (int oc = 0; oc < o; ++oc) {
      T* oplane = out.data() + (static_cast<int64_t>(n) * o + oc) * oh * ow;
      for (int ic = 0; ic < c; ++ic) {
        const T* xplane = xd + (static_cast<int64_t>(n) * c + ic) * h * ww;
        const T* wplane = wd + (static_cast<int64_t>(oc) * c + ic) * kh * kw;
        for (int ki = 0; ki < kh; ++ki) {
          int ilo, ihi;
          valid_range(h, oh, ki, &ilo, &ihi);
          for (int kj = 0; kj < kw; ++kj) {
            const T wv = wplane[ki * kw + kj];
            if (wv == T(0)) continue;
            int jlo, jhi;
            valid_range(ww, ow, kj, &jlo, &jhi);
            for (int i = ilo; i < ihi; ++i) {
              const T* xrow = xplane + (i * stride - pad + ki) * ww - pad + kj;
              T* orow = oplane + i * ow;
              if (stride == 1) {
                for (int j = jlo; j < jhi; ++j) orow[j] += wv * xrow[j];
              } else {
                for (int j = jlo; j < jhi; ++j) orow[j] += wv * xrow[j * stride];
              }
            }
          }
        }
      }
    }

  auto* tape = detail::resolve_tape<T>({&x, &w});
  const bool rec = tape && detail::any_requires_grad<T>({&x, &w});
  BasicTensor<T> y = BasicTensor<T>::make({k, o, oh, ow}, std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto wi = w.storage();
    auto yi = y.storage();
    tape->record({xi, wi}, [xi, wi, yi, k, c, h, ww, o, kh, kw, oh, ow, stride, pad]() {
      const auto valid_range = [stride, pad](int extent, int out_extent, int koff, int* lo,
                                             int* hi) {
        int l = 0;
        while (l < out_extent && l * stride - pad + koff < 0) ++l;
        int r = out_extent;
        while (r > l && (r - 1) * stride - pad + koff >= extent) --r;
        *lo = l;
        *hi = r;
      };
      const T* g = yi->grad.data();
      const T* xd2 = xi->data.data();
      T* xg = xi->requires_grad ? xi->grad.data() : nullptr;
      T* wg = wi->requires_grad ? wi->grad.data() : nullptr;
      const T* wd2 = wi->data.data();
      for (int n = 0; n < k; ++n)
        for (int oc = 0; oc < o; ++oc) {
          const T* gplane = g + (static_cast<int64_t>(n) * o + oc) * oh * ow;
          for (int ic = 0; ic < c; ++ic) {
            const T* xplane = xd2 + (static_cast<int64_t>(n) * c + ic) * h * ww;
            const T* wplane = wd2 + (static_cast<int64_t>(oc) * c + ic) * kh * kw;
            T* xgplane = xg ? xg + (static_cast<int64_t>(n) * c + ic) * h * ww : nullptr;
            T* wgplane = wg ? wg + (static_cast<int64_t>(oc) * c + ic) * kh * kw : nullptr;
            for (int ki = 0; ki < kh; ++ki) {
              int ilo, ihi;
              valid_range(h, oh, ki, &ilo, &ihi);
              for (int kj = 0; kj < kw; ++kj) {
                int jlo, jhi;
                valid_range(ww, ow, kj, &jlo, &jhi);
                const T wv = wplane[ki * kw + kj];
                T wacc = T(0);
                for (int i = ilo; i < ihi; ++i) {
                  const T* grow = gplane + i * ow;
                  const int64_t xoff = (i * stride - pad + ki) * ww - pad + kj;
                  const T* xrow = xplane + xoff;
                  T* xgrow = xgplane ? xgplane + xoff : nullptr;
                  if (stride == 1) {
                    for (int j = jlo; j < jhi; ++j) {
                      const T gv = grow[j];
                      if (xgrow) xgrow[j] += gv * wv;
                      wacc += gv * xrow[j];
                    }
                  } else {
                    for (int j = jlo; j < jhi; ++j) {
                      const T gv = grow[j];
                      if (xgrow) xgrow[j * stride] += gv * wv;
                      wacc += gv * xrow[j * stride];
                    }
                  }
                }
                if (wgplane) wgplane[ki * kw + kj] += wacc;
              }
            }
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> reduce_sum(const BasicTensor<T>& x, const std::vector<int>& dims) {
  auto plan = detail::make_reduce_plan(x.shape(), dims);
  std::vector<T> out(static_cast<size_t>(shape_numel(plan.out_shape)), T(0));
  const T* xd = x.data();
  detail::for_each_reduce_index(plan, [&](int64_t i, int64_t oi) { out[oi] += xd[i]; });
  auto* tape = detail::resolve_tape<T>({&x});
  const bool rec = tape && x.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make(plan.out_shape, std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto yi = y.storage();
    tape->record({xi}, [xi, yi, plan]() {
      const T* g = yi->grad.data();
      T* xg = xi->grad.data();
      detail::for_each_reduce_index(plan, [&](int64_t i, int64_t oi) { xg[i] += g[oi]; });
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> reduce_mean(const BasicTensor<T>& x, const std::vector<int>& dims) {
  auto plan = detail::make_reduce_plan(x.shape(), dims);
  const T inv = T(1) / static_cast<T>(plan.group);
  std::vector<T> out(static_cast<size_t>(shape_numel(plan.out_shape)), T(0));
  const T* xd = x.data();
  detail::for_each_reduce_index(plan, [&](int64_t i, int64_t oi) { out[oi] += xd[i]; });
  for (auto& v : out) v *= inv;
  auto* tape = detail::resolve_tape<T>({&x});
  const bool rec = tape && x.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make(plan.out_shape, std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto yi = y.storage();
    tape->record({xi}, [xi, yi, plan, inv]() {
      const T* g = yi->grad.data();
      T* xg = xi->grad.data();
      detail::for_each_reduce_index(plan, [&](int64_t i, int64_t oi) { xg[i] += g[oi] * inv; });
    });
  }
  return y;
}

// Population variance (1/n normalization) over `dims`.
template <typename T>
BasicTensor<T> reduce_var(const BasicTensor<T>& x, const std::vector<int>& dims) {
  auto plan = detail::make_reduce_plan(x.shape(), dims);
  const T inv = T(1) / static_cast<T>(plan.group);
  const size_t out_n = static_cast<size_t>(shape_numel(plan.out_shape));
  std::vector<T> mean(out_n, T(0));
  const T* xd = x.data();
  detail::for_each_reduce_index(plan, [&](int64_t i, int64_t oi) { mean[oi] += xd[i]; });
  for (auto& v : mean) v *= inv;
  std::vector<T> out(out_n, T(0));
  detail::for_each_reduce_index(plan, [&](int64_t i, int64_t oi) {
    const T d = xd[i] - mean[oi];
    out[oi] += d * d;
  });
  for (auto& v : out) v *= inv;
  auto* tape = detail::resolve_tape<T>({&x});
  const bool rec = tape && x.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make(plan.out_shape, std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto yi = y.storage();
    auto means = std::make_shared<std::vector<T>>(std::move(mean));
    tape->record({xi}, [xi, yi, plan, inv, means]() {
      const T* g = yi->grad.data();
      const T* xv = xi->data.data();
      T* xg = xi->grad.data();
      const T two_inv = T(2) * inv;
      detail::for_each_reduce_index(plan, [&](int64_t i, int64_t oi) {
        xg[i] += g[oi] * two_inv * (xv[i] - (*means)[oi]);
      });
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> mean_all(const BasicTensor<T>& x) {
  std::vector<int> dims(static_cast<size_t>(x.rank()));
  for (int d = 0; d < x.rank(); ++d) dims[static_cast<size_t>(d)] = d;
  return reduce_mean(x, dims);
}

template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x) {
  std::vector<int> dims(static_cast<size_t>(x.rank()));
  for (int d = 0; d < x.rank(); ++d) dims[static_cast<size_t>(d)] = d;
  return reduce_sum(x, dims);
}

// Non-overlapping average pooling with window = stride = ksize.
template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, int ksize) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d expects [k,c,h,w]");
  if (ksize < 1 || ksize > x.dim(2) || ksize > x.dim(3))
    throw ShapeError("avg_pool2d: bad window size");
  const int k = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h / ksize, ow = w / ksize;
  const T inv = T(1) / static_cast<T>(ksize * ksize);
  std::vector<T> out(static_cast<size_t>(k) * c * oh * ow, T(0));
  const T* xd = x.data();
  for (int n = 0; n < k; ++n)
    for (int ic = 0; ic < c; ++ic) {
      const T* xplane = xd + (static_cast<int64_t>(n) * c + ic) * h * w;
      T* oplane = out.data() + (static_cast<int64_t>(n) * c + ic) * oh * ow;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          T acc = T(0);
          for (int di = 0; di < ksize; ++di)
            for (int dj = 0; dj < ksize; ++dj)
              acc += xplane[(i * ksize + di) * w + (j * ksize + dj)];
          oplane[i * ow + j] = acc * inv;
        }
    }
  auto* tape = detail::resolve_tape<T>({&x});
  const bool rec = tape && x.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make({k, c, oh, ow}, std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto yi = y.storage();
    tape->record({xi}, [xi, yi, k, c, h, w, oh, ow, ksize, inv]() {
      const T* g = yi->grad.data();
      T* xg = xi->grad.data();
      for (int n = 0; n < k; ++n)
        for (int ic = 0; ic < c; ++ic) {
          T* xplane = xg + (static_cast<int64_t>(n) * c + ic) * h * w;
          const T* gplane = g + (static_cast<int64_t>(n) * c + ic) * oh * ow;
          for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
              const T gv = gplane[i * ow + j] * inv;
              for (int di = 0; di < ksize; ++di)
                for (int dj = 0; dj < ksize; ++dj)
                  xplane[(i * ksize + di) * w + (j * ksize + dj)] += gv;
            }
        }
    });
  }
  return y;
}

// Mean over the spatial dims of [k,c,h,w], yielding [k,c].
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects [k,c,h,w]");
  return reduce_mean(x, {2, 3});
}

// ---------------------------------------------------------------------------
// Softmax / loss
// ---------------------------------------------------------------------------

// Numerically stable row-wise log softmax of [k,c] logits.
template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) < 2) throw ShapeError("log_softmax expects [k,c] with c >= 2");
  const int64_t k = x.dim(0), c = x.dim(1);
  std::vector<T> out(static_cast<size_t>(k * c));
  const T* xd = x.data();
  for (int64_t r = 0; r < k; ++r) {
    const T* row = xd + r * c;
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T lse = T(0);
    for (int64_t j = 0; j < c; ++j) lse += std::exp(row[j] - mx);
    lse = std::log(lse) + mx;
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(r * c + j)] = row[j] - lse;
  }
  auto* tape = detail::resolve_tape<T>({&x});
  const bool rec = tape && x.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make(x.shape(), std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto yi = y.storage();
    tape->record({xi}, [xi, yi, k, c]() {
      const T* g = yi->grad.data();
      const T* yv = yi->data.data();
      T* xg = xi->grad.data();
      for (int64_t r = 0; r < k; ++r) {
        T gsum = T(0);
        for (int64_t j = 0; j < c; ++j) gsum += g[r * c + j];
        for (int64_t j = 0; j < c; ++j)
          xg[r * c + j] += g[r * c + j] - std::exp(yv[r * c + j]) * gsum;
      }
    });
  }
  return y;
}

// Mean negative log likelihood of the true labels under log-probabilities.
template <typename T>
BasicTensor<T> nll_loss(const BasicTensor<T>& logp, const std::vector<int>& labels) {
  if (logp.rank() != 2) throw ShapeError("nll_loss expects [k,c] log-probabilities");
  const int64_t k = logp.dim(0), c = logp.dim(1);
  if (static_cast<int64_t>(labels.size()) != k)
    throw ShapeError("nll_loss: label count does not match batch");
  for (int y : labels)
    if (y < 0 || y >= c) throw std::out_of_range("nll_loss: label out of range");
  T acc = T(0);
  const T* d = logp.data();
  for (int64_t r = 0; r < k; ++r) acc -= d[r * c + labels[static_cast<size_t>(r)]];
  acc /= static_cast<T>(k);
  auto* tape = detail::resolve_tape<T>({&logp});
  const bool rec = tape && logp.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make({}, {acc}, rec, tape);
  if (rec) {
    auto xi = logp.storage();
    auto yi = y.storage();
    tape->record({xi}, [xi, yi, labels, k, c]() {
      const T g = yi->grad[0] / static_cast<T>(k);
      T* xg = xi->grad.data();
      for (int64_t r = 0; r < k; ++r) xg[r * c + labels[static_cast<size_t>(r)]] -= g;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Broadcast helpers (per-channel and per-sample-channel only)
// ---------------------------------------------------------------------------

namespace detail {

enum class ChannelOp { Add, Sub, Mul, Div };

template <typename T>
BasicTensor<T> channel_op(const BasicTensor<T>& x, const BasicTensor<T>& v, ChannelOp op) {
  int64_t k, c, sp;
  batch_channel_spatial(x, &k, &c, &sp);
  if (v.rank() != 1 || v.dim(0) != c)
    throw ShapeError("channel op: expected [c] operand matching channels of " +
                     shape_str(x.shape()));
  std::vector<T> out(static_cast<size_t>(x.size()));
  const T* xd = x.data();
  const T* vd = v.data();
  for (int64_t n = 0; n < k; ++n)
    for (int64_t ic = 0; ic < c; ++ic) {
      const T vv = vd[ic];
      const T* xrow = xd + (n * c + ic) * sp;
      T* orow = out.data() + (n * c + ic) * sp;
      switch (op) {
        case ChannelOp::Add:
          for (int64_t s = 0; s < sp; ++s) orow[s] = xrow[s] + vv;
          break;
        case ChannelOp::Sub:
          for (int64_t s = 0; s < sp; ++s) orow[s] = xrow[s] - vv;
          break;
        case ChannelOp::Mul:
          for (int64_t s = 0; s < sp; ++s) orow[s] = xrow[s] * vv;
          break;
        case ChannelOp::Div:
          for (int64_t s = 0; s < sp; ++s) orow[s] = xrow[s] / vv;
          break;
      }
    }
  auto* tape = resolve_tape<T>({&x, &v});
  const bool rec = tape && any_requires_grad<T>({&x, &v});
  BasicTensor<T> y = BasicTensor<T>::make(x.shape(), std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto vi = v.storage();
    auto yi = y.storage();
    tape->record({xi, vi}, [xi, vi, yi, k, c, sp, op]() {
      const T* g = yi->grad.data();
      const T* xv = xi->data.data();
      const T* vv = vi->data.data();
      for (int64_t n = 0; n < k; ++n)
        for (int64_t ic = 0; ic < c; ++ic) {
          const int64_t base = (n * c + ic) * sp;
          const T vc = vv[ic];
          if (xi->requires_grad) {
            T* xg = xi->grad.data();
            switch (op) {
              case ChannelOp::Add:
              case ChannelOp::Sub:
                for (int64_t s = 0; s < sp; ++s) xg[base + s] += g[base + s];
                break;
              case ChannelOp::Mul:
                for (int64_t s = 0; s < sp; ++s) xg[base + s] += g[base + s] * vc;
                break;
              case ChannelOp::Div:
                for (int64_t s = 0; s < sp; ++s) xg[base + s] += g[base + s] / vc;
                break;
            }
          }
          if (vi->requires_grad) {
            T acc = T(0);
            switch (op) {
              case ChannelOp::Add:
                for (int64_t s = 0; s < sp; ++s) acc += g[base + s];
                break;
              case ChannelOp::Sub:
                for (int64_t s = 0; s < sp; ++s) acc -= g[base + s];
                break;
              case ChannelOp::Mul:
                for (int64_t s = 0; s < sp; ++s) acc += g[base + s] * xv[base + s];
                break;
              case ChannelOp::Div:
                for (int64_t s = 0; s < sp; ++s) acc -= g[base + s] * xv[base + s] / (vc * vc);
                break;
            }
            vi->grad[static_cast<size_t>(ic)] += acc;
          }
        }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> sample_channel_op(const BasicTensor<T>& x, const BasicTensor<T>& v, bool multiply) {
  int64_t k, c, sp;
  batch_channel_spatial(x, &k, &c, &sp);
  if (v.rank() != 2 || v.dim(0) != k || v.dim(1) != c)
    throw ShapeError("sample-channel op: expected [k,c] operand for " + shape_str(x.shape()));
  std::vector<T> out(static_cast<size_t>(x.size()));
  const T* xd = x.data();
  const T* vd = v.data();
  for (int64_t n = 0; n < k; ++n)
    for (int64_t ic = 0; ic < c; ++ic) {
      const T vv = vd[n * c + ic];
      const int64_t base = (n * c + ic) * sp;
      if (multiply)
        for (int64_t s = 0; s < sp; ++s) out[base + s] = xd[base + s] * vv;
      else
        for (int64_t s = 0; s < sp; ++s) out[base + s] = xd[base + s] + vv;
    }
  auto* tape = resolve_tape<T>({&x, &v});
  const bool rec = tape && any_requires_grad<T>({&x, &v});
  BasicTensor<T> y = BasicTensor<T>::make(x.shape(), std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto vi = v.storage();
    auto yi = y.storage();
    tape->record({xi, vi}, [xi, vi, yi, k, c, sp, multiply]() {
      const T* g = yi->grad.data();
      const T* xv = xi->data.data();
      const T* vv = vi->data.data();
      for (int64_t n = 0; n < k; ++n)
        for (int64_t ic = 0; ic < c; ++ic) {
          const int64_t base = (n * c + ic) * sp;
          if (xi->requires_grad) {
            T* xg = xi->grad.data();
            if (multiply) {
              const T vc = vv[n * c + ic];
              for (int64_t s = 0; s < sp; ++s) xg[base + s] += g[base + s] * vc;
            } else {
              for (int64_t s = 0; s < sp; ++s) xg[base + s] += g[base + s];
            }
          }
          if (vi->requires_grad) {
            T acc = T(0);
            if (multiply)
              for (int64_t s = 0; s < sp; ++s) acc += g[base + s] * xv[base + s];
            else
              for (int64_t s = 0; s < sp; ++s) acc += g[base + s];
            vi->grad[static_cast<size_t>(n * c + ic)] += acc;
          }
        }
    });
  }
  return y;
}

}  // namespace detail

// x has shape [k,c,...]; v has shape [c], broadcast over batch and space.
template <typename T>
BasicTensor<T> add_channel(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  return detail::channel_op(x, v, detail::ChannelOp::Add);
}
template <typename T>
BasicTensor<T> sub_channel(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  return detail::channel_op(x, v, detail::ChannelOp::Sub);
}
template <typename T>
BasicTensor<T> mul_channel(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  return detail::channel_op(x, v, detail::ChannelOp::Mul);
}
template <typename T>
BasicTensor<T> div_channel(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  return detail::channel_op(x, v, detail::ChannelOp::Div);
}

// x has shape [k,c,...]; v has shape [k,c]: one value per sample and channel,
// broadcast over spatial positions (spatially correlated by construction).
template <typename T>
BasicTensor<T> add_sample_channel(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  return detail::sample_channel_op(x, v, false);
}
template <typename T>
BasicTensor<T> mul_sample_channel(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  return detail::sample_channel_op(x, v, true);
}

// [c] -> [k,c] by repeating the row k times.
template <typename T>
BasicTensor<T> broadcast_rows(const BasicTensor<T>& v, int k) {
  if (v.rank() != 1) throw ShapeError("broadcast_rows expects a rank-1 tensor");
  if (k < 1) throw ShapeError("broadcast_rows: k must be >= 1");
  const int64_t c = v.dim(0);
  std::vector<T> out(static_cast<size_t>(k) * c);
  const T* vd = v.data();
  for (int64_t n = 0; n < k; ++n)
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(n * c + j)] = vd[j];
  auto* tape = detail::resolve_tape<T>({&v});
  const bool rec = tape && v.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make({k, static_cast<int>(c)}, std::move(out), rec, tape);
  if (rec) {
    auto vi = v.storage();
    auto yi = y.storage();
    tape->record({vi}, [vi, yi, k, c]() {
      const T* g = yi->grad.data();
      T* vg = vi->grad.data();
      for (int64_t n = 0; n < k; ++n)
        for (int64_t j = 0; j < c; ++j) vg[j] += g[n * c + j];
    });
  }
  return y;
}

// [c] -> [c*times], each entry repeated `times` consecutively.
template <typename T>
BasicTensor<T> repeat_each(const BasicTensor<T>& v, int times) {
  if (v.rank() != 1) throw ShapeError("repeat_each expects a rank-1 tensor");
  if (times < 1) throw ShapeError("repeat_each: times must be >= 1");
  const int64_t c = v.dim(0);
  std::vector<T> out(static_cast<size_t>(c) * times);
  const T* vd = v.data();
  for (int64_t j = 0; j < c; ++j)
    for (int t = 0; t < times; ++t) out[static_cast<size_t>(j * times + t)] = vd[j];
  auto* tape = detail::resolve_tape<T>({&v});
  const bool rec = tape && v.requires_grad();
  BasicTensor<T> y =
      BasicTensor<T>::make({static_cast<int>(c * times)}, std::move(out), rec, tape);
  if (rec) {
    auto vi = v.storage();
    auto yi = y.storage();
    tape->record({vi}, [vi, yi, c, times]() {
      const T* g = yi->grad.data();
      T* vg = vi->grad.data();
      for (int64_t j = 0; j < c; ++j) {
        T acc = T(0);
        for (int t = 0; t < times; ++t) acc += g[j * times + t];
        vg[j] += acc;
      }
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size())
    throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                     shape_str(new_shape));
  std::vector<T> out(x.data(), x.data() + x.size());
  auto* tape = detail::resolve_tape<T>({&x});
  const bool rec = tape && x.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make(std::move(new_shape), std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto yi = y.storage();
    tape->record({xi}, [xi, yi]() {
      const T* g = yi->grad.data();
      T* xg = xi->grad.data();
      for (size_t i = 0; i < yi->data.size(); ++i) xg[i] += g[i];
    });
  }
  return y;
}

// Contiguous slice [start, start+len) along dim 0.
template <typename T>
BasicTensor<T> narrow0(const BasicTensor<T>& x, int start, int len) {
  if (x.rank() < 1) throw ShapeError("narrow0 expects rank >= 1");
  if (start < 0 || len < 1 || start + len > x.dim(0))
    throw ShapeError("narrow0: slice out of range");
  int64_t row = 1;
  for (int d = 1; d < x.rank(); ++d) row *= x.dim(d);
  std::vector<T> out(static_cast<size_t>(len) * row);
  std::copy(x.data() + start * row, x.data() + (start + len) * row, out.begin());
  Shape oshape = x.shape();
  oshape[0] = len;
  auto* tape = detail::resolve_tape<T>({&x});
  const bool rec = tape && x.requires_grad();
  BasicTensor<T> y = BasicTensor<T>::make(std::move(oshape), std::move(out), rec, tape);
  if (rec) {
    auto xi = x.storage();
    auto yi = y.storage();
    tape->record({xi}, [xi, yi, start, row]() {
      const T* g = yi->grad.data();
      T* xg = xi->grad.data() + start * row;
      for (size_t i = 0; i < yi->data.size(); ++i) xg[i] += g[i];
    });
  }
  return y;
}

using Tensor = BasicTensor<double>;
using Tape = BasicTape<double>;

}  // namespace stochnorm
