#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dcmnet {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

// Dense row-major tensor of 64-bit reals. Copying a Tensor copies the
// handle, not the payload: values are immutable after construction except
// for gradient accumulation during a backward pass (and explicit in-place
// updates by the optimizer / finite-difference oracle, which own their
// tensors for the duration).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> values);
  static Tensor scalar_value(double v);

  bool defined() const { return static_cast<bool>(rep_); }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  double at(std::size_t i) const { return values()[i]; }
  double scalar() const;

  const std::vector<double>& values() const;
  std::vector<double>& values_mut();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  const std::vector<double>& grad() const;
  // Accumulation mutates the shared payload and is legal on const handles:
  // it is the one sanctioned mutation of a live tensor (see concurrency note).
  void accumulate_grad(const std::vector<double>& g) const;
  void accumulate_grad_at(std::size_t i, double g) const;
  void clear_grad() const;

  Tensor clone() const;
  bool all_finite() const;

  // identity of the underlying storage; used by gradcheck utilities
  const void* id() const { return rep_.get(); }

 private:
  struct Rep {
    Shape shape;
    std::vector<double> v;
    bool requires_grad = false;
    std::vector<double> g;  // allocated on first accumulation
  };
  std::shared_ptr<Rep> rep_;
};

// Records the backward closures of one forward pass. A tape is created per
// forward, driven by one thread, and consumed by backward().
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  bool empty() const { return steps_.empty(); }
  std::size_t size() const { return steps_.size(); }

  // Seeds d(loss)/d(loss) = 1, replays all recorded steps in reverse
  // execution order, then clears the tape.
  void backward(const Tensor& loss);

  void clear() { steps_.clear(); }

 private:
  std::vector<std::function<void()>> steps_;
};

enum class Activation { Relu, Tanh, RestrictedTanh };
enum class Elementwise { Add, Mul };

// ---- differentiable operations -------------------------------------------
// Every op runs the forward computation; when `tape` is non-null and an
// input requires grad, a backward closure is recorded.

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor transpose2d(const Tensor& a, Tape* tape = nullptr);
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise op, Tape* tape = nullptr);
Tensor scale(const Tensor& x, double k, Tape* tape = nullptr);
// x scaled by a 1-element tensor; gradient flows to both operands
Tensor scale_by(const Tensor& x, const Tensor& s, Tape* tape = nullptr);
// 1-element view of v[i] that keeps gradient flow
Tensor element_at(const Tensor& v, std::size_t i, Tape* tape = nullptr);
Tensor softmax(const Tensor& x, std::size_t axis, Tape* tape = nullptr);
Tensor activation(const Tensor& x, Activation kind, Tape* tape = nullptr);
// x: (C_in, H, W), w: (C_out, C_in, kh, kw), b: (C_out)
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1,
              std::size_t pad = 0, Tape* tape = nullptr);
// x: (C_in, D, H, W), w: (C_out, C_in, kd, kh, kw), b: (C_out)
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1,
              std::size_t pad = 0, Tape* tape = nullptr);
// x: (n), w: (m, n), b: (m)  ->  w x + b
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape = nullptr);
// x: (r, n), w: (m, n), b: (m)  ->  x w^T + b, applied row-wise
Tensor linear_rows(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape = nullptr);
Tensor reshape(const Tensor& x, Shape shape, Tape* tape = nullptr);
Tensor flatten(const Tensor& x, Tape* tape = nullptr);
Tensor sum(const Tensor& x, Tape* tape = nullptr);

double relu_scalar(double x);
double restricted_tanh_scalar(double x);

// Central-difference gradient of a pure scalar function: the independent
// oracle every reverse-mode gradient is checked against.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-5);

}  // namespace dcmnet
