#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "aim/errors.hpp"
#include "aim/tensor.hpp"

namespace aim {

/// A trainable tensor with its accumulated gradient. Owned by a network; a
/// tape only borrows it for the duration of one forward/backward pass.
template <typename T>
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

#ifdef NDEBUG
inline constexpr bool kCheckFiniteDefault = false;
#else
inline constexpr bool kCheckFiniteDefault = true;
#endif

/// Reverse-mode tape. Records are appended in execution order and replayed
/// in exact reverse order by backward(). Single-threaded.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool check_finite = kCheckFiniteDefault) : check_finite_(check_finite) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::string& op_name(std::size_t id) const { return records_[id].op; }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return records_[id].inputs; }

  Var<T> constant(Tensor<T> value) { return leaf("constant", std::move(value), false); }
  Var<T> variable(Tensor<T> value) { return leaf("variable", std::move(value), true); }

  /// Binds a parameter as a differentiable leaf; backward() adds into p.grad.
  Var<T> param(Parameter<T>& p) {
    Record r;
    r.op = "param:" + p.name;
    r.external = &p.value;
    r.param = &p;
    r.requires_grad = true;
    records_.push_back(std::move(r));
    return {this, records_.size() - 1};
  }

  /// Binds a parameter read-only: no gradient flows to it through this tape.
  Var<T> frozen(const Parameter<T>& p) {
    Record r;
    r.op = "frozen:" + p.name;
    r.external = &p.value;
    records_.push_back(std::move(r));
    return {this, records_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Record& r = records_[id];
    return r.external ? *r.external : r.value;
  }
  bool requires_grad(std::size_t id) const { return records_[id].requires_grad; }

  /// Appends an op output. `backward` is kept only when some input needs a gradient.
  Var<T> record(std::string op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn backward) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericError(op + ": non-finite value in output " + shape_str(value.shape()));
    }
    Record r;
    r.op = std::move(op);
    r.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return records_[i].requires_grad; });
    r.inputs = std::move(inputs);
    r.value = std::move(value);
    if (r.requires_grad) r.backward = std::move(backward);
    records_.push_back(std::move(r));
    return {this, records_.size() - 1};
  }

  /// Gradient buffer of a record, allocated (zeroed) on first use. Empty when
  /// the record does not require a gradient.
  std::span<T> grad_buffer(std::size_t id) {
    Record& r = records_[id];
    if (!r.requires_grad) return {};
    if (r.grad.empty()) r.grad.assign(value(id).size(), T{0});
    return r.grad;
  }

  /// Upstream gradient of a record during backward (empty if nothing reached it).
  std::span<const T> upstream(std::size_t id) const { return records_[id].grad; }

  /// Records with id < `stop_below` are neither visited nor accumulated.
  void backward(Var<T> loss, std::size_t stop_below = 0) {
    if (records_.empty()) throw UsageError("backward: tape is empty");
    if (loss.tape != this) throw UsageError("backward: loss belongs to a different tape");
    if (value(loss.id).size() != 1) {
      throw UsageError("backward: loss must be a scalar, got " + shape_str(value(loss.id).shape()));
    }
    for (auto& r : records_) r.grad.clear();
    if (!records_[loss.id].requires_grad) return;
    records_[loss.id].grad.assign(1, T{1});
    for (std::size_t i = loss.id + 1; i-- > stop_below;) {
      Record& r = records_[i];
      if (r.grad.empty()) continue;
      if (r.backward) r.backward(*this, i);
      if (r.param) {
        auto& g = r.param->grad.storage();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += r.grad[k];
      }
    }
  }

  /// Gradient of the last backward() w.r.t. `v`, zeros if none reached it.
  Tensor<T> grad(Var<T> v) const {
    const Record& r = records_[v.id];
    if (r.grad.empty()) return Tensor<T>(value(v.id).shape());
    return Tensor<T>(value(v.id).shape(), r.grad);
  }

 private:
  struct Record {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
    std::vector<T> grad;
  };

  Var<T> leaf(const char* op, Tensor<T> value, bool requires_grad) {
    if (check_finite_ && !value.all_finite()) throw NumericError(std::string(op) + ": non-finite leaf value");
    Record r;
    r.op = op;
    r.value = std::move(value);
    r.requires_grad = requires_grad;
    records_.push_back(std::move(r));
    return {this, records_.size() - 1};
  }

  std::vector<Record> records_;
  bool check_finite_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape != b.tape) throw UsageError(std::string(op) + ": operands live on different tapes");
}

// Broadcast plan for binary elementwise ops. Shapes are right-aligned; a
// dimension broadcasts when it is 1 (or missing).
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;
  std::vector<std::size_t> b_stride;
};

inline Broadcast plan_broadcast(const Shape& a, const Shape& b, const std::string& op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(rank, 1);
  p.a_stride.assign(rank, 0);
  p.b_stride.assign(rank, 0);
  auto get = [rank](const Shape& s, std::size_t i) -> std::size_t {
    const std::size_t off = rank - s.size();
    return i < off ? 1 : s[i - off];
  };
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = get(a, i), db = get(b, i);
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(op + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(da, db);
  }
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    const std::size_t da = get(a, i), db = get(b, i);
    p.a_stride[i] = da == 1 ? 0 : sa;
    p.b_stride[i] = db == 1 ? 0 : sb;
    sa *= da;
    sb *= db;
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in row-major order.
template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t rank = p.out.size();
  const std::size_t total = shape_size(p.out);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ai = 0, bi = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, ai, bi);
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < p.out[d]) {
        ai += p.a_stride[d];
        bi += p.b_stride[d];
        break;
      }
      ai -= p.a_stride[d] * (p.out[d] - 1);
      bi -= p.b_stride[d] * (p.out[d] - 1);
      idx[d] = 0;
    }
  }
}

// Elementwise binary op with broadcasting. `fwd(a, b)`; `da(a, b)` and
// `db(a, b)` are the local partial derivatives.
template <typename T, typename Fwd, typename Da, typename Db>
Var<T> binary(const std::string& op, Var<T> a, Var<T> b, Fwd fwd, Da da, Db db) {
  same_tape(a, b, op.c_str());
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return tape.record(op, {a.id, b.id}, std::move(out), [ai = a.id, bi = b.id, da, db](Tape<T>& t, std::size_t self) {
      auto g = t.upstream(self);
      const Tensor<T>& x = t.value(ai);
      const Tensor<T>& y = t.value(bi);
      if (auto ga = t.grad_buffer(ai); !ga.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(x[i], y[i]);
      }
      if (auto gb = t.grad_buffer(bi); !gb.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(x[i], y[i]);
      }
    });
  }
  auto plan = std::make_shared<Broadcast>(plan_broadcast(av.shape(), bv.shape(), op));
  Tensor<T> out(plan->out);
  for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
  return tape.record(op, {a.id, b.id}, std::move(out), [ai = a.id, bi = b.id, plan, da, db](Tape<T>& t, std::size_t self) {
    auto g = t.upstream(self);
    const Tensor<T>& x = t.value(ai);
    const Tensor<T>& y = t.value(bi);
    auto ga = t.grad_buffer(ai);
    auto gb = t.grad_buffer(bi);
    for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (!ga.empty()) ga[i] += g[o] * da(x[i], y[j]);
      if (!gb.empty()) gb[j] += g[o] * db(x[i], y[j]);
    });
  });
}

// Elementwise unary op. `df(x, y)` receives input and output values.
template <typename T, typename Fwd, typename Df>
Var<T> unary(const std::string& op, Var<T> x, Fwd fwd, Df df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return x.tape->record(op, {x.id}, std::move(out), [xi = x.id, df](Tape<T>& t, std::size_t self) {
    auto g = t.upstream(self);
    const Tensor<T>& in = t.value(xi);
    const Tensor<T>& y = t.value(self);
    auto gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(in[i], y[i]);
  });
}

// Splits a shape around `axis` into (outer, extent, inner).
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& extent, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

// Sliding-window geometry shared by convolution and transposed convolution.
// The "big" side is the conv input (or the transposed-conv output); the
// "small" side is the grid of window positions.
struct ConvGeometry {
  std::size_t channels, big_h, big_w, small_h, small_w, kernel, stride, pad;

  std::size_t col_rows() const { return channels * kernel * kernel; }
};

// col[(c,ki,kj), (n,i,j)] = big[n, c, i*s-p+ki, j*s-p+kj] (zero outside).
template <typename T>
void im2col(const T* big, std::size_t batch, const ConvGeometry& g, T* col) {
  const std::size_t cols = batch * g.small_h * g.small_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
        for (std::size_t n = 0; n < batch; ++n) {
          const T* plane = big + (n * g.channels + c) * g.big_h * g.big_w;
          for (std::size_t i = 0; i < g.small_h; ++i) {
            const long h = static_cast<long>(i * g.stride + ki) - static_cast<long>(g.pad);
            T* dst = row + (n * g.small_h + i) * g.small_w;
            if (h < 0 || h >= static_cast<long>(g.big_h)) {
              std::fill(dst, dst + g.small_w, T{0});
              continue;
            }
            const T* src = plane + h * g.big_w;
            for (std::size_t j = 0; j < g.small_w; ++j) {
              const long w = static_cast<long>(j * g.stride + kj) - static_cast<long>(g.pad);
              dst[j] = (w < 0 || w >= static_cast<long>(g.big_w)) ? T{0} : src[w];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into `big`.
template <typename T>
void col2im(const T* col, std::size_t batch, const ConvGeometry& g, T* big) {
  const std::size_t cols = batch * g.small_h * g.small_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
        for (std::size_t n = 0; n < batch; ++n) {
          T* plane = big + (n * g.channels + c) * g.big_h * g.big_w;
          for (std::size_t i = 0; i < g.small_h; ++i) {
            const long h = static_cast<long>(i * g.stride + ki) - static_cast<long>(g.pad);
            if (h < 0 || h >= static_cast<long>(g.big_h)) continue;
            const T* src = row + (n * g.small_h + i) * g.small_w;
            T* dst = plane + h * g.big_w;
            for (std::size_t j = 0; j < g.small_w; ++j) {
              const long w = static_cast<long>(j * g.stride + kj) - static_cast<long>(g.pad);
              if (w >= 0 && w < static_cast<long>(g.big_w)) dst[w] += src[j];
            }
          }
        }
      }
    }
  }
}

// N x C x HW  <->  C x (N*HW)
template <typename T>
void nchw_to_cm(const T* x, std::size_t n, std::size_t c, std::size_t hw, T* out) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) std::copy_n(x + (b * c + ch) * hw, hw, out + ch * n * hw + b * hw);
}

template <typename T>
void cm_to_nchw_add(const T* m, std::size_t n, std::size_t c, std::size_t hw, T* out) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = m + ch * n * hw + b * hw;
      T* dst = out + (b * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) dst[k] += src[k];
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary<T>("add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
                           [](T, T) { return T{1}; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary<T>("sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
                           [](T, T) { return T{-1}; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary<T>("mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                           [](T x, T) { return x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return detail::binary<T>("div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T{1} / y; },
                           [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T>
Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }

/// x * s for a constant s.
template <typename T>
Var<T> scale(Var<T> x, T s) {
  return detail::unary<T>("scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

/// x + s for a constant s.
template <typename T>
Var<T> add_scalar(Var<T> x, T s) {
  return detail::unary<T>("add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

/// s - x for a constant s.
template <typename T>
Var<T> rsub_scalar(T s, Var<T> x) {
  return detail::unary<T>("rsub_scalar", x, [s](T v) { return s - v; }, [](T, T) { return T{-1}; });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Var<T> relu(Var<T> x) {
  return detail::unary<T>("relu", x, [](T v) { return v > T{0} ? v : T{0}; },
                          [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, T slope) {
  return detail::unary<T>("leaky_relu", x, [slope](T v) { return v > T{0} ? v : slope * v; },
                          [slope](T v, T) { return v > T{0} ? T{1} : slope; });
}

template <typename T>
T sigmoid_value(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return sigmoid_value(v); },
                          [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  return detail::unary<T>("tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

/// 2*sigmoid(x) - 1, range (-1, 1).
template <typename T>
Var<T> scaled_sigmoid(Var<T> x) {
  return detail::unary<T>(
      "scaled_sigmoid", x, [](T v) { return T{2} * sigmoid_value(v) - T{1}; },
      [](T v, T) {
        const T s = sigmoid_value(v);
        return T{2} * s * (T{1} - s);
      });
}

/// Natural log with the argument clamped below at `floor`; the gradient is
/// zero where the clamp is active.
template <typename T>
Var<T> log(Var<T> x, T floor = T{0}) {
  return detail::unary<T>(
      "log", x, [floor](T v) { return std::log(std::max(v, floor)); },
      [floor](T v, T) { return v > floor ? T{1} / v : T{0}; });
}

template <typename T>
Var<T> square(Var<T> x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

/// Identity forward; backward multiplies the upstream gradient by -coeff.
template <typename T>
Var<T> gradient_reversal(Var<T> x, T coeff) {
  if (!(coeff >= T{0})) throw UsageError("gradient_reversal: coefficient must be >= 0");
  Tensor<T> out = x.value();
  return x.tape->record("grl", {x.id}, std::move(out), [xi = x.id, coeff](Tape<T>& t, std::size_t self) {
    auto g = t.upstream(self);
    auto gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += -coeff * g[i];
  });
}

/// Softmax over the last axis.
template <typename T>
Var<T> softmax(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("softmax: needs rank >= 1");
  const std::size_t width = xv.shape().back();
  const std::size_t rows = xv.size() / width;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data().data() + r * width;
    T* o = out.data().data() + r * width;
    const T mx = *std::max_element(in, in + width);
    T sum = 0;
    for (std::size_t k = 0; k < width; ++k) sum += (o[k] = std::exp(in[k] - mx));
    for (std::size_t k = 0; k < width; ++k) o[k] /= sum;
  }
  return x.tape->record("softmax", {x.id}, std::move(out), [xi = x.id, rows, width](Tape<T>& t, std::size_t self) {
    auto g = t.upstream(self);
    const Tensor<T>& y = t.value(self);
    auto gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t k = 0; k < width; ++k) dot += g[r * width + k] * y[r * width + k];
      for (std::size_t k = 0; k < width; ++k) gx[r * width + k] += y[r * width + k] * (g[r * width + k] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> x) {
  const Tensor<T>& xv = x.value();
  T s = 0;
  for (T v : xv.data()) s += v;
  return x.tape->record("sum", {x.id}, Tensor<T>::scalar(s), [xi = x.id](Tape<T>& t, std::size_t self) {
    const T g = t.upstream(self)[0];
    for (T& v : t.grad_buffer(xi)) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const T n = static_cast<T>(xv.size());
  T s = 0;
  for (T v : xv.data()) s += v;
  return x.tape->record("mean", {x.id}, Tensor<T>::scalar(s / n), [xi = x.id, n](Tape<T>& t, std::size_t self) {
    const T g = t.upstream(self)[0] / n;
    for (T& v : t.grad_buffer(xi)) v += g;
  });
}

/// Sums out one axis (the axis is removed from the shape).
template <typename T>
Var<T> sum_axis(Var<T> x, std::size_t axis) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank()) throw DimensionError("sum_axis: axis out of range for " + shape_str(xv.shape()));
  std::size_t outer, extent, inner;
  detail::split_axis(xv.shape(), axis, outer, extent, inner);
  Shape os = xv.shape();
  os.erase(os.begin() + static_cast<long>(axis));
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * extent + e) * inner + i];
  return x.tape->record("sum_axis", {x.id}, std::move(out),
                        [xi = x.id, outer, extent, inner](Tape<T>& t, std::size_t self) {
                          auto g = t.upstream(self);
                          auto gx = t.grad_buffer(xi);
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t e = 0; e < extent; ++e)
                              for (std::size_t i = 0; i < inner; ++i) gx[(o * extent + e) * inner + i] += g[o * inner + i];
                        });
}

template <typename T>
Var<T> mean_axis(Var<T> x, std::size_t axis) {
  const T extent = static_cast<T>(x.value().dim(axis));
  return scale(sum_axis(x, axis), T{1} / extent);
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record("reshape", {x.id}, std::move(out), [xi = x.id](Tape<T>& t, std::size_t self) {
    auto g = t.upstream(self);
    auto gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape os = first;
  os[axis] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    detail::same_tape(p, parts[0], "concat");
    Shape s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(first));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw DimensionError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first));
      }
    }
    os[axis] += s[axis];
    ids.push_back(p.id);
    extents.push_back(s[axis]);
  }
  std::size_t outer, extent, inner;
  detail::split_axis(os, axis, outer, extent, inner);
  Tensor<T> out(os);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& pv = parts[k].value();
    const std::size_t block = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data().data() + o * block, block, out.data().data() + o * extent * inner + offset * inner);
    }
    offset += extents[k];
  }
  return parts[0].tape->record("concat", ids, std::move(out),
                               [ids, extents, outer, extent, inner](Tape<T>& t, std::size_t self) {
                                 auto g = t.upstream(self);
                                 std::size_t offset = 0;
                                 for (std::size_t k = 0; k < ids.size(); ++k) {
                                   auto gp = t.grad_buffer(ids[k]);
                                   const std::size_t block = extents[k] * inner;
                                   if (!gp.empty()) {
                                     for (std::size_t o = 0; o < outer; ++o) {
                                       const T* src = g.data() + o * extent * inner + offset * inner;
                                       for (std::size_t i = 0; i < block; ++i) gp[o * block + i] += src[i];
                                     }
                                   }
                                   offset += extents[k];
                                 }
                               });
}

/// Elements [begin, end) along `axis`.
template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank() || begin >= end || end > xv.dim(axis)) {
    throw DimensionError("slice: invalid range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(xv.shape()));
  }
  std::size_t outer, extent, inner;
  detail::split_axis(xv.shape(), axis, outer, extent, inner);
  Shape os = xv.shape();
  os[axis] = end - begin;
  Tensor<T> out(os);
  const std::size_t block = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data().data() + o * extent * inner + begin * inner, block, out.data().data() + o * block);
  }
  return x.tape->record("slice", {x.id}, std::move(out),
                        [xi = x.id, outer, extent, inner, begin, block](Tape<T>& t, std::size_t self) {
                          auto g = t.upstream(self);
                          auto gx = t.grad_buffer(xi);
                          for (std::size_t o = 0; o < outer; ++o) {
                            T* dst = gx.data() + o * extent * inner + begin * inner;
                            for (std::size_t i = 0; i < block; ++i) dst[i] += g[o * block + i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// (M x K) * (K x N).
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "matmul");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out(Shape{m, n});
  detail::MatMap<T>(out.data().data(), m, n).noalias() =
      detail::ConstMatMap<T>(av.data().data(), m, k) * detail::ConstMatMap<T>(bv.data().data(), k, n);
  return a.tape->record("matmul", {a.id, b.id}, std::move(out), [ai = a.id, bi = b.id, m, k, n](Tape<T>& t, std::size_t self) {
    detail::ConstMatMap<T> g(t.upstream(self).data(), m, n);
    if (auto ga = t.grad_buffer(ai); !ga.empty()) {
      detail::MatMap<T>(ga.data(), m, k).noalias() += g * detail::ConstMatMap<T>(t.value(bi).data().data(), k, n).transpose();
    }
    if (auto gb = t.grad_buffer(bi); !gb.empty()) {
      detail::MatMap<T>(gb.data(), k, n).noalias() += detail::ConstMatMap<T>(t.value(ai).data().data(), m, k).transpose() * g;
    }
  });
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// 2-D convolution. x: N x C x H x W, weight: O x C x k x k, bias: O (optional).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, const Var<T>* bias, Conv2dOptions opt) {
  detail::same_tape(x, weight, "conv2d");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(2) != wv.dim(3)) {
    throw DimensionError("conv2d: expected NCHW input and OxCxkxk weight, got " + shape_str(xv.shape()) + " and " +
                         shape_str(wv.shape()));
  }
  if (xv.dim(1) != wv.dim(1)) {
    throw DimensionError("conv2d: input has " + std::to_string(xv.dim(1)) + " channels, weight expects " +
                         std::to_string(wv.dim(1)));
  }
  if (opt.stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t o = wv.dim(0), k = wv.dim(2);
  if (h + 2 * opt.padding < k || w + 2 * opt.padding < k) throw DimensionError("conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * opt.padding - k) / opt.stride + 1;
  const std::size_t wo = (w + 2 * opt.padding - k) / opt.stride + 1;
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != o)) {
    throw DimensionError("conv2d: bias must have shape [" + std::to_string(o) + "]");
  }
  const detail::ConvGeometry geo{c, h, w, ho, wo, k, opt.stride, opt.padding};
  const std::size_t cols = n * ho * wo;
  auto col = std::make_shared<std::vector<T>>(geo.col_rows() * cols);
  detail::im2col(xv.data().data(), n, geo, col->data());
  std::vector<T> mat(o * cols);
  detail::MatMap<T>(mat.data(), o, cols).noalias() =
      detail::ConstMatMap<T>(wv.data().data(), o, geo.col_rows()) * detail::ConstMatMap<T>(col->data(), geo.col_rows(), cols);
  Tensor<T> out(Shape{n, o, ho, wo});
  detail::cm_to_nchw_add(mat.data(), n, o, ho * wo, out.data().data());
  if (bias) {
    const Tensor<T>& bv = bias->value();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < o; ++ch) {
        T* p = out.data().data() + (b * o + ch) * ho * wo;
        for (std::size_t i = 0; i < ho * wo; ++i) p[i] += bv[ch];
      }
  }
  std::vector<std::size_t> inputs{x.id, weight.id};
  if (bias) inputs.push_back(bias->id);
  const std::size_t bias_id = bias ? bias->id : SIZE_MAX;
  return x.tape->record(
      "conv2d", inputs, std::move(out),
      [xi = x.id, wi = weight.id, bias_id, geo, col, n, o, cols](Tape<T>& t, std::size_t self) {
        auto g = t.upstream(self);
        const std::size_t hw = geo.small_h * geo.small_w;
        std::vector<T> gm(o * cols);
        detail::nchw_to_cm(g.data(), n, o, hw, gm.data());
        detail::ConstMatMap<T> gmat(gm.data(), o, cols);
        if (auto gw = t.grad_buffer(wi); !gw.empty()) {
          detail::MatMap<T>(gw.data(), o, geo.col_rows()).noalias() +=
              gmat * detail::ConstMatMap<T>(col->data(), geo.col_rows(), cols).transpose();
        }
        if (bias_id != SIZE_MAX) {
          if (auto gb = t.grad_buffer(bias_id); !gb.empty()) {
            for (std::size_t ch = 0; ch < o; ++ch) gb[ch] += gmat.row(static_cast<Eigen::Index>(ch)).sum();
          }
        }
        if (auto gx = t.grad_buffer(xi); !gx.empty()) {
          std::vector<T> dcol(geo.col_rows() * cols);
          detail::MatMap<T>(dcol.data(), geo.col_rows(), cols).noalias() =
              detail::ConstMatMap<T>(t.value(wi).data().data(), o, geo.col_rows()).transpose() * gmat;
          detail::col2im(dcol.data(), n, geo, gx.data());
        }
      });
}

struct ConvTranspose2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t output_padding = 0;
};

/// Fractionally-strided convolution. x: N x Ci x H x W, weight: Ci x Co x k x k,
/// output spatial size (H-1)*stride - 2*padding + k + output_padding.
template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> weight, const Var<T>* bias, ConvTranspose2dOptions opt) {
  detail::same_tape(x, weight, "conv_transpose2d");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(2) != wv.dim(3)) {
    throw DimensionError("conv_transpose2d: expected NCHW input and CixCoxkxk weight, got " + shape_str(xv.shape()) +
                         " and " + shape_str(wv.shape()));
  }
  if (xv.dim(1) != wv.dim(0)) {
    throw DimensionError("conv_transpose2d: input has " + std::to_string(xv.dim(1)) + " channels, weight expects " +
                         std::to_string(wv.dim(0)));
  }
  if (opt.stride == 0) throw DimensionError("conv_transpose2d: stride must be positive");
  const std::size_t n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t co = wv.dim(1), k = wv.dim(2);
  const long ho_l = static_cast<long>((h - 1) * opt.stride + k + opt.output_padding) - 2 * static_cast<long>(opt.padding);
  const long wo_l = static_cast<long>((w - 1) * opt.stride + k + opt.output_padding) - 2 * static_cast<long>(opt.padding);
  if (ho_l <= 0 || wo_l <= 0) throw DimensionError("conv_transpose2d: non-positive output size");
  const std::size_t ho = static_cast<std::size_t>(ho_l), wo = static_cast<std::size_t>(wo_l);
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != co)) {
    throw DimensionError("conv_transpose2d: bias must have shape [" + std::to_string(co) + "]");
  }
  const detail::ConvGeometry geo{co, ho, wo, h, w, k, opt.stride, opt.padding};
  const std::size_t cols = n * h * w;
  auto xmat = std::make_shared<std::vector<T>>(ci * cols);
  detail::nchw_to_cm(xv.data().data(), n, ci, h * w, xmat->data());
  std::vector<T> col(geo.col_rows() * cols);
  detail::MatMap<T>(col.data(), geo.col_rows(), cols).noalias() =
      detail::ConstMatMap<T>(wv.data().data(), ci, geo.col_rows()).transpose() * detail::ConstMatMap<T>(xmat->data(), ci, cols);
  Tensor<T> out(Shape{n, co, ho, wo});
  detail::col2im(col.data(), n, geo, out.data().data());
  if (bias) {
    const Tensor<T>& bv = bias->value();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < co; ++ch) {
        T* p = out.data().data() + (b * co + ch) * ho * wo;
        for (std::size_t i = 0; i < ho * wo; ++i) p[i] += bv[ch];
      }
  }
  std::vector<std::size_t> inputs{x.id, weight.id};
  if (bias) inputs.push_back(bias->id);
  const std::size_t bias_id = bias ? bias->id : SIZE_MAX;
  return x.tape->record(
      "conv_transpose2d", inputs, std::move(out),
      [xi = x.id, wi = weight.id, bias_id, geo, xmat, n, ci, co, h, w, cols](Tape<T>& t, std::size_t self) {
        auto g = t.upstream(self);
        std::vector<T> dcol(geo.col_rows() * cols);
        detail::im2col(g.data(), n, geo, dcol.data());
        detail::ConstMatMap<T> dcm(dcol.data(), geo.col_rows(), cols);
        if (auto gw = t.grad_buffer(wi); !gw.empty()) {
          detail::MatMap<T>(gw.data(), ci, geo.col_rows()).noalias() +=
              detail::ConstMatMap<T>(xmat->data(), ci, cols) * dcm.transpose();
        }
        if (bias_id != SIZE_MAX) {
          if (auto gb = t.grad_buffer(bias_id); !gb.empty()) {
            const std::size_t hw = geo.big_h * geo.big_w;
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t ch = 0; ch < co; ++ch) {
                const T* p = g.data() + (b * co + ch) * hw;
                T s = 0;
                for (std::size_t i = 0; i < hw; ++i) s += p[i];
                gb[ch] += s;
              }
          }
        }
        if (auto gx = t.grad_buffer(xi); !gx.empty()) {
          std::vector<T> dx(ci * cols);
          detail::MatMap<T>(dx.data(), ci, cols).noalias() =
              detail::ConstMatMap<T>(t.value(wi).data().data(), ci, geo.col_rows()) * dcm;
          detail::cm_to_nchw_add(dx.data(), n, ci, h * w, gx.data());
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and regularization

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.9);
  T eps = T(1e-5);
};

/// Batch normalization over N (and H, W for rank-4 input) per channel.
/// Training mode normalizes with batch statistics and updates `stats`;
/// inference mode uses the running averages.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, bool training) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2 && xv.rank() != 4) throw DimensionError("batch_norm: expected rank 2 or 4, got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  const std::size_t hw = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  if (gamma.value().size() != c || beta.value().size() != c || stats.running_mean.size() != c) {
    throw DimensionError("batch_norm: parameters do not match " + std::to_string(c) + " channels");
  }
  const std::size_t m = n * hw;
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(c);
  Tensor<T> out(xv.shape());
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      if (m < 2) throw DimensionError("batch_norm: training mode needs more than one value per channel");
      T s = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += xv[(b * c + ch) * hw + i];
      mu = s / static_cast<T>(m);
      T ss = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = xv[(b * c + ch) * hw + i] - mu;
          ss += d * d;
        }
      var = ss / static_cast<T>(m);
      stats.running_mean[ch] = stats.momentum * stats.running_mean[ch] + (T{1} - stats.momentum) * mu;
      stats.running_var[ch] = stats.momentum * stats.running_var[ch] + (T{1} - stats.momentum) * var;
    } else {
      mu = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    const T is = T{1} / std::sqrt(var + stats.eps);
    (*inv_std)[ch] = is;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        const T xh = (xv[idx] - mu) * is;
        (*xhat)[idx] = xh;
        out[idx] = gv[ch] * xh + bv[ch];
      }
  }
  return x.tape->record(
      training ? "batch_norm_train" : "batch_norm_eval", {x.id, gamma.id, beta.id}, std::move(out),
      [xi = x.id, gi = gamma.id, bi = beta.id, xhat, inv_std, n, c, hw, m, training](Tape<T>& t, std::size_t self) {
        auto g = t.upstream(self);
        const Tensor<T>& gv = t.value(gi);
        auto gg = t.grad_buffer(gi);
        auto gb = t.grad_buffer(bi);
        auto gx = t.grad_buffer(xi);
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_g = 0, sum_gx = 0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * c + ch) * hw + i;
              sum_g += g[idx];
              sum_gx += g[idx] * (*xhat)[idx];
            }
          if (!gg.empty()) gg[ch] += sum_gx;
          if (!gb.empty()) gb[ch] += sum_g;
          if (gx.empty()) continue;
          const T k = gv[ch] * (*inv_std)[ch];
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * c + ch) * hw + i;
              if (training) {
                gx[idx] += k * (g[idx] - sum_g / static_cast<T>(m) - (*xhat)[idx] * sum_gx / static_cast<T>(m));
              } else {
                gx[idx] += k * g[idx];
              }
            }
        }
      });
}

/// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Inverted dropout: in training mode each element survives with
/// probability `keep` and is scaled by 1/keep; identity otherwise.
template <typename T>
Var<T> dropout(Var<T> x, T keep, std::mt19937_64& rng, bool training) {
  if (!(keep > T{0} && keep <= T{1})) throw UsageError("dropout: keep probability must be in (0, 1]");
  if (!training || keep == T{1}) {
    return detail::unary<T>("dropout_eval", x, [](T v) { return v; }, [](T, T) { return T{1}; });
  }
  auto mask = std::make_shared<std::vector<T>>(x.value().size());
  for (T& v : *mask) v = uniform01(rng) < static_cast<double>(keep) ? T{1} / keep : T{0};
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * (*mask)[i];
  return x.tape->record("dropout", {x.id}, std::move(out), [xi = x.id, mask](Tape<T>& t, std::size_t self) {
    auto g = t.upstream(self);
    auto gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (64-bit only)

template <typename T>
using ScalarGraph = std::function<Var<T>(Tape<T>&, Var<T>)>;

namespace detail {
template <typename T>
void require_grad_check_precision(T eps) {
  if constexpr (!std::is_same_v<T, double>) {
    throw PrecisionError("grad_check: finite-difference checks require 64-bit mode");
  }
  if (!(eps >= T(1e-7) && eps <= T(1e-3))) throw UsageError("grad_check: eps must lie in [1e-7, 1e-3]");
}

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}
}  // namespace detail

/// Max over coordinates of |analytic - s * central difference| / max(1, |analytic|).
/// `numeric_scale` (s) is 1 except for graphs whose backward rule is defined
/// to differ from the forward derivative, e.g. -coeff behind a gradient reversal.
template <typename T>
T grad_check(const ScalarGraph<T>& f, const Tensor<T>& x, T eps, T numeric_scale = T{1}) {
  detail::require_grad_check_precision(eps);
  Tensor<T> analytic;
  {
    Tape<T> tape;
    Var<T> xv = tape.variable(x);
    Var<T> loss = f(tape, xv);
    tape.backward(loss);
    analytic = tape.grad(xv);
  }
  auto eval = [&](const Tensor<T>& at) {
    Tape<T> tape;
    return f(tape, tape.constant(at)).value().item();
  };
  T worst = 0;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T up = eval(probe);
    probe[i] = orig - eps;
    const T down = eval(probe);
    probe[i] = orig;
    worst = std::max<T>(worst, static_cast<T>(detail::rel_error(analytic[i], numeric_scale * (up - down) / (T{2} * eps))));
  }
  return worst;
}

/// Same check over every element of a set of parameters; `f` rebuilds the
/// graph from the parameters' current values.
template <typename T>
T grad_check_params(const std::function<Var<T>(Tape<T>&)>& f, const std::vector<Parameter<T>*>& params, T eps) {
  detail::require_grad_check_precision(eps);
  for (auto* p : params) p->zero_grad();
  {
    Tape<T> tape;
    Var<T> loss = f(tape);
    tape.backward(loss);
  }
  std::vector<Tensor<T>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);
  auto eval = [&] {
    Tape<T> tape;
    return f(tape).value().item();
  };
  T worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& v = params[k]->value;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T orig = v[i];
      v[i] = orig + eps;
      const T up = eval();
      v[i] = orig - eps;
      const T down = eval();
      v[i] = orig;
      worst = std::max<T>(worst, static_cast<T>(detail::rel_error(analytic[k][i], (up - down) / (T{2} * eps))));
    }
  }
  for (auto* p : params) p->zero_grad();
  return worst;
}

}  // namespace aim
