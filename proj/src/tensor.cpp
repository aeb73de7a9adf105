#include "dcmnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dcmnet/rng.hpp"

namespace dcmnet {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ")";
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), static_cast<std::size_t>(1), std::multiplies<>());
}

std::uint64_t stream_seed(std::uint64_t root, std::string_view stream) {
  // FNV-1a over the name, then one splitmix round against the root.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : stream) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  Rng mix(root ^ h);
  return mix.next_u64();
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

// ---- Tensor ----------------------------------------------------------------

static void check_finite_payload(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw std::invalid_argument("tensor payload contains NaN/Inf");
  }
}

Tensor Tensor::zeros(Shape shape) {
  Tensor t;
  t.rep_ = std::make_shared<Rep>();
  t.rep_->v.assign(shape_size(shape), 0.0);
  t.rep_->shape = std::move(shape);
  return t;
}

Tensor Tensor::full(Shape shape, double value) {
  if (!std::isfinite(value)) throw std::invalid_argument("tensor fill value is not finite");
  Tensor t;
  t.rep_ = std::make_shared<Rep>();
  t.rep_->v.assign(shape_size(shape), value);
  t.rep_->shape = std::move(shape);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
  if (values.size() != shape_size(shape)) {
    throw std::invalid_argument("data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  check_finite_payload(values);
  Tensor t;
  t.rep_ = std::make_shared<Rep>();
  t.rep_->shape = std::move(shape);
  t.rep_->v = std::move(values);
  return t;
}

Tensor Tensor::scalar_value(double v) { return from_data({1}, {v}); }

const Shape& Tensor::shape() const {
  if (!rep_) throw std::logic_error("use of undefined tensor");
  return rep_->shape;
}

std::size_t Tensor::size() const { return rep_ ? rep_->v.size() : 0; }

double Tensor::scalar() const {
  if (size() != 1) throw std::invalid_argument("scalar() on tensor of shape " + shape_str(shape()));
  return rep_->v[0];
}

const std::vector<double>& Tensor::values() const {
  if (!rep_) throw std::logic_error("use of undefined tensor");
  return rep_->v;
}

std::vector<double>& Tensor::values_mut() {
  if (!rep_) throw std::logic_error("use of undefined tensor");
  return rep_->v;
}

bool Tensor::requires_grad() const { return rep_ && rep_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!rep_) throw std::logic_error("use of undefined tensor");
  rep_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return rep_ && !rep_->g.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("tensor has no gradient");
  return rep_->g;
}

void Tensor::accumulate_grad(const std::vector<double>& g) const {
  if (!rep_) throw std::logic_error("use of undefined tensor");
  if (g.size() != rep_->v.size()) throw std::invalid_argument("gradient size mismatch");
  if (rep_->g.empty()) rep_->g.assign(rep_->v.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) rep_->g[i] += g[i];
}

void Tensor::accumulate_grad_at(std::size_t i, double g) const {
  if (!rep_) throw std::logic_error("use of undefined tensor");
  if (rep_->g.empty()) rep_->g.assign(rep_->v.size(), 0.0);
  rep_->g[i] += g;
}

void Tensor::clear_grad() const {
  if (rep_) rep_->g.clear();
}

Tensor Tensor::clone() const {
  if (!rep_) return Tensor();
  Tensor t;
  t.rep_ = std::make_shared<Rep>(*rep_);
  return t;
}

bool Tensor::all_finite() const {
  if (!rep_) return true;
  for (double x : rep_->v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// ---- Tape ------------------------------------------------------------------

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
  }
  if (steps_.empty()) throw std::logic_error("backward on empty tape");
  Tensor seed = loss;
  seed.accumulate_grad_at(0, 1.0);
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  steps_.clear();
}

// ---- op helpers -------------------------------------------------------------

namespace {

bool recording(Tape* tape, const Tensor& a) { return tape && a.requires_grad(); }
bool recording(Tape* tape, const Tensor& a, const Tensor& b) {
  return tape && (a.requires_grad() || b.requires_grad());
}
bool recording(Tape* tape, const Tensor& a, const Tensor& b, const Tensor& c) {
  return tape && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out = Tensor::zeros({m, n});
  {
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values_mut().data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = pa[i * k + kk];
        const double* brow = pb + kk * n;
        double* orow = po + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  if (recording(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out, m, k, n]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      if (a.requires_grad()) {
        std::vector<double> da(m * k, 0.0);
        const double* pb = b.values().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double gv = g[i * n + j];
            for (std::size_t kk = 0; kk < k; ++kk) da[i * k + kk] += gv * pb[kk * n + j];
          }
        a.accumulate_grad(da);
      }
      if (b.requires_grad()) {
        std::vector<double> db(k * n, 0.0);
        const double* pa = a.values().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            for (std::size_t j = 0; j < n; ++j) db[kk * n + j] += av * g[i * n + j];
          }
        b.accumulate_grad(db);
      }
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& a, Tape* tape) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d: rank-2 tensor required, got " +
                                                 shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values_mut()[j * m + i] = a.values()[i * n + j];
  if (recording(tape, a)) {
    out.set_requires_grad(true);
    tape->record([a, out, m, n]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      std::vector<double> da(m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] = g[j * m + i];
      a.accumulate_grad(da);
    });
  }
  return out;
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] + b.values()[i];
  if (recording(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) b.accumulate_grad(g);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] * b.values()[i];
  if (recording(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out, n]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      if (a.requires_grad()) {
        std::vector<double> da(n);
        for (std::size_t i = 0; i < n; ++i) da[i] = g[i] * b.values()[i];
        a.accumulate_grad(da);
      }
      if (b.requires_grad()) {
        std::vector<double> db(n);
        for (std::size_t i = 0; i < n; ++i) db[i] = g[i] * a.values()[i];
        b.accumulate_grad(db);
      }
    });
  }
  return out;
}

Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise op, Tape* tape) {
  return op == Elementwise::Add ? add(a, b, tape) : mul(a, b, tape);
}

Tensor scale(const Tensor& x, double k, Tape* tape) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = x.values()[i] * k;
  if (recording(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out, k, n]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      std::vector<double> dx(n);
      for (std::size_t i = 0; i < n; ++i) dx[i] = g[i] * k;
      x.accumulate_grad(dx);
    });
  }
  return out;
}

Tensor scale_by(const Tensor& x, const Tensor& s, Tape* tape) {
  if (s.size() != 1) throw std::invalid_argument("scale_by: scale must be a 1-element tensor");
  const double sv = s.values()[0];
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = x.values()[i] * sv;
  if (recording(tape, x, s)) {
    out.set_requires_grad(true);
    tape->record([x, s, out, sv, n]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      if (x.requires_grad()) {
        std::vector<double> dx(n);
        for (std::size_t i = 0; i < n; ++i) dx[i] = g[i] * sv;
        x.accumulate_grad(dx);
      }
      if (s.requires_grad()) {
        double ds = 0.0;
        for (std::size_t i = 0; i < n; ++i) ds += g[i] * x.values()[i];
        s.accumulate_grad_at(0, ds);
      }
    });
  }
  return out;
}

Tensor element_at(const Tensor& v, std::size_t i, Tape* tape) {
  if (i >= v.size()) throw std::invalid_argument("element_at: index out of range");
  Tensor out = Tensor::from_data({1}, {v.values()[i]});
  if (recording(tape, v)) {
    out.set_requires_grad(true);
    tape->record([v, out, i]() {
      if (!out.has_grad()) return;
      v.accumulate_grad_at(i, out.grad()[0]);
    });
  }
  return out;
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis, Tape* tape) {
  if (axis >= x.rank()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(x.shape()));
  }
  const Shape& sh = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t len = sh[axis];

  Tensor out = Tensor::zeros(sh);
  const double* px = x.values().data();
  double* po = out.values_mut().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = px[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, px[base + l * inner]);
      double denom = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(px[base + l * inner] - mx);
        po[base + l * inner] = e;
        denom += e;
      }
      for (std::size_t l = 0; l < len; ++l) po[base + l * inner] /= denom;
    }
  }
  if (recording(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out, outer, inner, len]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      const std::vector<double>& s = out.values();
      std::vector<double> dx(x.size());
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * s[base + l * inner];
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t idx = base + l * inner;
            dx[idx] = s[idx] * (g[idx] - dot);
          }
        }
      }
      x.accumulate_grad(dx);
    });
  }
  return out;
}

// ---- activations --------------------------------------------------------------

double relu_scalar(double x) { return x > 0.0 ? x : 0.0; }

double restricted_tanh_scalar(double x) {
  // tanh rounds to exactly 1.0 for x >~ 19; keep the codomain strictly
  // below 1 so gate weights are always valid path probabilities.
  const double t = std::max(0.0, std::tanh(x));
  return t < 1.0 ? t : std::nextafter(1.0, 0.0);
}

Tensor activation(const Tensor& x, Activation kind, Tape* tape) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x.values()[i];
    switch (kind) {
      case Activation::Relu: out.values_mut()[i] = relu_scalar(v); break;
      case Activation::Tanh: out.values_mut()[i] = std::tanh(v); break;
      case Activation::RestrictedTanh: out.values_mut()[i] = restricted_tanh_scalar(v); break;
    }
  }
  if (recording(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out, kind, n]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      std::vector<double> dx(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double v = x.values()[i];
        double d = 0.0;
        switch (kind) {
          case Activation::Relu: d = v > 0.0 ? 1.0 : 0.0; break;
          case Activation::Tanh: {
            const double t = std::tanh(v);
            d = 1.0 - t * t;
            break;
          }
          case Activation::RestrictedTanh: {
            if (v > 0.0) {
              const double t = std::tanh(v);
              d = 1.0 - t * t;
            }
            break;
          }
        }
        dx[i] = g[i] * d;
      }
      x.accumulate_grad(dx);
    });
  }
  return out;
}

// ---- convolutions -------------------------------------------------------------

namespace {

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                        const char* op) {
  const std::size_t padded = in + 2 * pad;
  if (k > padded) {
    throw std::invalid_argument(std::string(op) + ": kernel extent " + std::to_string(k) +
                                " exceeds padded input " + std::to_string(padded));
  }
  if ((padded - k) % stride != 0) {
    throw std::invalid_argument(std::string(op) + ": non-integral output extent for input " +
                                std::to_string(in) + ", kernel " + std::to_string(k) +
                                ", stride " + std::to_string(stride) + ", pad " +
                                std::to_string(pad));
  }
  return (padded - k) / stride + 1;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad, Tape* tape) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1) {
    throw std::invalid_argument("conv2d: expected x(C,H,W), w(Co,Ci,kh,kw), b(Co); got " +
                                shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                                shape_str(b.shape()));
  }
  const std::size_t ci = x.shape()[0], h = x.shape()[1], ww = x.shape()[2];
  const std::size_t co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != ci) {
    throw std::invalid_argument("conv2d: channel mismatch x" + shape_str(x.shape()) + " vs w" +
                                shape_str(w.shape()));
  }
  if (b.shape()[0] != co) throw std::invalid_argument("conv2d: bias size mismatch");
  const std::size_t oh = conv_extent(h, kh, stride, pad, "conv2d");
  const std::size_t ow = conv_extent(ww, kw, stride, pad, "conv2d");

  Tensor out = Tensor::zeros({co, oh, ow});
  {
    const double* px = x.values().data();
    const double* pw = w.values().data();
    const double* pb = b.values().data();
    double* po = out.values_mut().data();
    for (std::size_t oc = 0; oc < co; ++oc) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double acc = pb[oc];
          for (std::size_t ic = 0; ic < ci; ++ic) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * stride + kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(ww)) continue;
                acc += px[(ic * h + iy) * ww + ix] * pw[((oc * ci + ic) * kh + ky) * kw + kx];
              }
            }
          }
          po[(oc * oh + y) * ow + xo] = acc;
        }
      }
    }
  }
  if (recording(tape, x, w, b)) {
    out.set_requires_grad(true);
    tape->record([x, w, b, out, ci, h, ww, co, kh, kw, oh, ow, stride, pad]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      const double* px = x.values().data();
      const double* pw = w.values().data();
      std::vector<double> dx(x.requires_grad() ? x.size() : 0, 0.0);
      std::vector<double> dw(w.requires_grad() ? w.size() : 0, 0.0);
      std::vector<double> db(b.requires_grad() ? b.size() : 0, 0.0);
      for (std::size_t oc = 0; oc < co; ++oc) {
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const double gv = g[(oc * oh + y) * ow + xo];
            if (gv == 0.0) continue;
            if (!db.empty()) db[oc] += gv;
            for (std::size_t ic = 0; ic < ci; ++ic) {
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * stride + kx) -
                                            static_cast<std::ptrdiff_t>(pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(ww)) continue;
                  const std::size_t xi = (ic * h + iy) * ww + ix;
                  const std::size_t wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                  if (!dx.empty()) dx[xi] += gv * pw[wi];
                  if (!dw.empty()) dw[wi] += gv * px[xi];
                }
              }
            }
          }
        }
      }
      if (!dx.empty()) x.accumulate_grad(dx);
      if (!dw.empty()) w.accumulate_grad(dw);
      if (!db.empty()) b.accumulate_grad(db);
    });
  }
  return out;
}

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad, Tape* tape) {
  if (x.rank() != 4 || w.rank() != 5 || b.rank() != 1) {
    throw std::invalid_argument("conv3d: expected x(C,D,H,W), w(Co,Ci,kd,kh,kw), b(Co); got " +
                                shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                                shape_str(b.shape()));
  }
  const std::size_t ci = x.shape()[0], dd = x.shape()[1], h = x.shape()[2], ww = x.shape()[3];
  const std::size_t co = w.shape()[0], kd = w.shape()[2], kh = w.shape()[3], kw = w.shape()[4];
  if (w.shape()[1] != ci) {
    throw std::invalid_argument("conv3d: channel mismatch x" + shape_str(x.shape()) + " vs w" +
                                shape_str(w.shape()));
  }
  if (b.shape()[0] != co) throw std::invalid_argument("conv3d: bias size mismatch");
  const std::size_t od = conv_extent(dd, kd, stride, pad, "conv3d");
  const std::size_t oh = conv_extent(h, kh, stride, pad, "conv3d");
  const std::size_t ow = conv_extent(ww, kw, stride, pad, "conv3d");

  Tensor out = Tensor::zeros({co, od, oh, ow});
  {
    const double* px = x.values().data();
    const double* pw = w.values().data();
    const double* pb = b.values().data();
    double* po = out.values_mut().data();
    for (std::size_t oc = 0; oc < co; ++oc) {
      for (std::size_t z = 0; z < od; ++z) {
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t xo = 0; xo < ow; ++xo) {
            double acc = pb[oc];
            for (std::size_t ic = 0; ic < ci; ++ic) {
              for (std::size_t kz = 0; kz < kd; ++kz) {
                const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z * stride + kz) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(dd)) continue;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) -
                                            static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * stride + kx) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(ww)) continue;
                    acc += px[((ic * dd + iz) * h + iy) * ww + ix] *
                           pw[(((oc * ci + ic) * kd + kz) * kh + ky) * kw + kx];
                  }
                }
              }
            }
            po[((oc * od + z) * oh + y) * ow + xo] = acc;
          }
        }
      }
    }
  }
  if (recording(tape, x, w, b)) {
    out.set_requires_grad(true);
    tape->record([x, w, b, out, ci, dd, h, ww, co, kd, kh, kw, stride, pad]() {
      if (!out.has_grad()) return;
      const Shape& osh = out.shape();
      const std::size_t od = osh[1], oh = osh[2], ow = osh[3];
      const std::vector<double>& g = out.grad();
      const double* px = x.values().data();
      const double* pw = w.values().data();
      std::vector<double> dx(x.requires_grad() ? x.size() : 0, 0.0);
      std::vector<double> dw(w.requires_grad() ? w.size() : 0, 0.0);
      std::vector<double> db(b.requires_grad() ? b.size() : 0, 0.0);
      for (std::size_t oc = 0; oc < co; ++oc) {
        for (std::size_t z = 0; z < od; ++z) {
          for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xo = 0; xo < ow; ++xo) {
              const double gv = g[((oc * od + z) * oh + y) * ow + xo];
              if (gv == 0.0) continue;
              if (!db.empty()) db[oc] += gv;
              for (std::size_t ic = 0; ic < ci; ++ic) {
                for (std::size_t kz = 0; kz < kd; ++kz) {
                  const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z * stride + kz) -
                                            static_cast<std::ptrdiff_t>(pad);
                  if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(dd)) continue;
                  for (std::size_t ky = 0; ky < kh; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                      const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * stride + kx) -
                                                static_cast<std::ptrdiff_t>(pad);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(ww)) continue;
                      const std::size_t xi = ((ic * dd + iz) * h + iy) * ww + ix;
                      const std::size_t wi = (((oc * ci + ic) * kd + kz) * kh + ky) * kw + kx;
                      if (!dx.empty()) dx[xi] += gv * pw[wi];
                      if (!dw.empty()) dw[wi] += gv * px[xi];
                    }
                  }
                }
              }
            }
          }
        }
      }
      if (!dx.empty()) x.accumulate_grad(dx);
      if (!dw.empty()) w.accumulate_grad(dw);
      if (!db.empty()) b.accumulate_grad(db);
    });
  }
  return out;
}

// ---- linear -----------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape) {
  if (x.rank() != 1 || w.rank() != 2 || b.rank() != 1 || w.shape()[1] != x.shape()[0] ||
      w.shape()[0] != b.shape()[0]) {
    throw std::invalid_argument("linear: shape mismatch x" + shape_str(x.shape()) + ", w" +
                                shape_str(w.shape()) + ", b" + shape_str(b.shape()));
  }
  const std::size_t m = w.shape()[0], n = w.shape()[1];
  Tensor out = Tensor::zeros({m});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = b.values()[i];
    const double* wrow = w.values().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += wrow[j] * x.values()[j];
    out.values_mut()[i] = acc;
  }
  if (recording(tape, x, w, b)) {
    out.set_requires_grad(true);
    tape->record([x, w, b, out, m, n]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      if (x.requires_grad()) {
        std::vector<double> dx(n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          const double* wrow = w.values().data() + i * n;
          for (std::size_t j = 0; j < n; ++j) dx[j] += g[i] * wrow[j];
        }
        x.accumulate_grad(dx);
      }
      if (w.requires_grad()) {
        std::vector<double> dw(m * n);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dw[i * n + j] = g[i] * x.values()[j];
        w.accumulate_grad(dw);
      }
      if (b.requires_grad()) b.accumulate_grad(g);
    });
  }
  return out;
}

Tensor linear_rows(const Tensor& x, const Tensor& w, const Tensor& b, Tape* tape) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || w.shape()[1] != x.shape()[1] ||
      w.shape()[0] != b.shape()[0]) {
    throw std::invalid_argument("linear_rows: shape mismatch x" + shape_str(x.shape()) + ", w" +
                                shape_str(w.shape()) + ", b" + shape_str(b.shape()));
  }
  const std::size_t r = x.shape()[0], n = x.shape()[1], m = w.shape()[0];
  Tensor out = Tensor::zeros({r, m});
  for (std::size_t i = 0; i < r; ++i) {
    const double* xrow = x.values().data() + i * n;
    double* orow = out.values_mut().data() + i * m;
    for (std::size_t o = 0; o < m; ++o) {
      double acc = b.values()[o];
      const double* wrow = w.values().data() + o * n;
      for (std::size_t j = 0; j < n; ++j) acc += wrow[j] * xrow[j];
      orow[o] = acc;
    }
  }
  if (recording(tape, x, w, b)) {
    out.set_requires_grad(true);
    tape->record([x, w, b, out, r, n, m]() {
      if (!out.has_grad()) return;
      const std::vector<double>& g = out.grad();
      if (x.requires_grad()) {
        std::vector<double> dx(r * n, 0.0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t o = 0; o < m; ++o) {
            const double gv = g[i * m + o];
            const double* wrow = w.values().data() + o * n;
            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += gv * wrow[j];
          }
        x.accumulate_grad(dx);
      }
      if (w.requires_grad()) {
        std::vector<double> dw(m * n, 0.0);
        for (std::size_t i = 0; i < r; ++i) {
          const double* xrow = x.values().data() + i * n;
          for (std::size_t o = 0; o < m; ++o) {
            const double gv = g[i * m + o];
            for (std::size_t j = 0; j < n; ++j) dw[o * n + j] += gv * xrow[j];
          }
        }
        w.accumulate_grad(dw);
      }
      if (b.requires_grad()) {
        std::vector<double> db(m, 0.0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t o = 0; o < m; ++o) db[o] += g[i * m + o];
        b.accumulate_grad(db);
      }
    });
  }
  return out;
}

// ---- shape & reduction ---------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape, Tape* tape) {
  if (shape_size(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor out = Tensor::from_data(std::move(shape), x.values());
  if (recording(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() {
      if (!out.has_grad()) return;
      x.accumulate_grad(out.grad());
    });
  }
  return out;
}

Tensor flatten(const Tensor& x, Tape* tape) { return reshape(x, {x.size()}, tape); }

Tensor sum(const Tensor& x, Tape* tape) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::from_data({1}, {acc});
  if (recording(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      std::vector<double> dx(x.size(), g);
      x.accumulate_grad(dx);
    });
  }
  return out;
}

// ---- finite differences ---------------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
  Tensor probe = x.clone();
  probe.set_requires_grad(false);
  Tensor g = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.values()[i];
    probe.values_mut()[i] = orig + h;
    const double fp = f(probe);
    probe.values_mut()[i] = orig - h;
    const double fm = f(probe);
    probe.values_mut()[i] = orig;
    g.values_mut()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace dcmnet
