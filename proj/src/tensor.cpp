#include "jigmark/tensor.hpp"

#include <Eigen/Dense>
#ifdef _OPENMP
#include <omp.h>
#else
static int omp_get_max_threads() { return 1; }
static int omp_get_thread_num() { return 0; }
#endif

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "jigmark/jigsaw.hpp"

namespace jigmark::ad {

using detail::Node;
using EMat = Eigen::MatrixXd;
using EMapRow =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ECMapRow = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

std::string Shape::str() const {
  std::ostringstream ss;
  ss << "[" << n << "," << c << "," << h << "," << w << "]";
  return ss.str();
}

namespace {

thread_local int g_no_grad_depth = 0;

std::shared_ptr<Node> make_node(const Shape& s) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->val.assign(static_cast<size_t>(s.numel()), 0.0);
  return n;
}

bool track(const std::initializer_list<Tensor>& parents) {
  if (g_no_grad_depth > 0) return false;
  for (const auto& p : parents)
    if (p.defined() && p.requires_grad()) return true;
  return false;
}

/// Result node wired to its differentiable parents.
std::shared_ptr<Node> make_result(const Shape& s,
                                  std::initializer_list<Tensor> parents,
                                  bool tracked) {
  auto n = make_node(s);
  if (tracked) {
    n->requires_grad = true;
    for (const auto& p : parents)
      if (p.defined()) n->parents.push_back(p.node());
  }
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.shape().str() + " vs " + b.shape().str());
}

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  auto n = make_node(s);
  n->requires_grad = requires_grad;
  return wrap(n);
}

Tensor Tensor::constant(const Shape& s, real v) {
  auto n = make_node(s);
  std::fill(n->val.begin(), n->val.end(), v);
  return wrap(n);
}

Tensor Tensor::from_vector(const Shape& s, std::vector<real> v,
                           bool requires_grad) {
  if (static_cast<int64_t>(v.size()) != s.numel())
    throw std::invalid_argument("from_vector: size mismatch");
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->val = std::move(v);
  n->requires_grad = requires_grad;
  return wrap(n);
}

Tensor Tensor::scalar(real v) { return constant(Shape{1, 1, 1, 1}, v); }

Tensor Tensor::randn(const Shape& s, Rng& rng, real std, bool requires_grad) {
  auto n = make_node(s);
  for (auto& v : n->val) v = rng.normal() * std;
  n->requires_grad = requires_grad;
  return wrap(n);
}

real Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item(): tensor is not scalar");
  return n_->val[0];
}

const std::vector<real>& Tensor::grad() const {
  if (!n_ || n_->grad.size() != n_->val.size())
    throw std::logic_error("grad(): no gradient available");
  return n_->grad;
}

std::vector<real>& Tensor::grad_mut() {
  n_->ensure_grad();
  return n_->grad;
}

void Tensor::zero_grad() {
  if (n_) n_->grad.assign(n_->val.size(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = n_->shape;
  n->val = n_->val;  // copy; detached view must not alias training buffers
  n->requires_grad = false;
  return wrap(n);
}

Tensor Tensor::clone() const {
  auto n = std::make_shared<Node>();
  n->shape = n_->shape;
  n->val = n_->val;
  n->requires_grad = n_->requires_grad;
  return wrap(n);
}

void backward(const Tensor& root) {
  if (root.numel() != 1)
    throw std::logic_error("backward: root must be a scalar");
  Node* rn = root.node().get();
  if (!rn->requires_grad)
    throw std::logic_error("backward: root does not require grad");

  // iterative post-order over parents
  std::vector<Node*> order;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(rn, 0);
  rn->topo_flag = 1;
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->topo_flag == 0 && p->requires_grad) {
        p->topo_flag = 1;
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  rn->ensure_grad();
  rn->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    n->topo_flag = 0;
    if (n->backfn) n->backfn();
  }
}

// ------------------------------ elementwise ------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, const char* /*name*/, Fwd fwd, Bwd dfdx) {
  bool tracked = track({x});
  auto out = make_result(x.shape(), {x}, tracked);
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) out->val[i] = fwd(xv[i]);
  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    out->backfn = [o, xn, dfdx]() {
      xn->ensure_grad();
      for (size_t i = 0; i < xn->val.size(); ++i)
        xn->grad[i] += o->grad[i] * dfdx(xn->val[i], o->val[i]);
    };
  }
  return Tensor::wrap(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  bool tracked = track({a, b});
  auto out = make_result(a.shape(), {a, b}, tracked);
  for (size_t i = 0; i < out->val.size(); ++i)
    out->val[i] = a.values()[i] + b.values()[i];
  if (tracked) {
    Node* o = out.get();
    auto an = a.node();
    auto bn = b.node();
    out->backfn = [o, an, bn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += o->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += o->grad[i];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  bool tracked = track({a, b});
  auto out = make_result(a.shape(), {a, b}, tracked);
  for (size_t i = 0; i < out->val.size(); ++i)
    out->val[i] = a.values()[i] - b.values()[i];
  if (tracked) {
    Node* o = out.get();
    auto an = a.node();
    auto bn = b.node();
    out->backfn = [o, an, bn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += o->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= o->grad[i];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  bool tracked = track({a, b});
  auto out = make_result(a.shape(), {a, b}, tracked);
  for (size_t i = 0; i < out->val.size(); ++i)
    out->val[i] = a.values()[i] * b.values()[i];
  if (tracked) {
    Node* o = out.get();
    auto an = a.node();
    auto bn = b.node();
    out->backfn = [o, an, bn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i)
          an->grad[i] += o->grad[i] * bn->val[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i)
          bn->grad[i] += o->grad[i] * an->val[i];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor affine(const Tensor& x, real scale, real shift) {
  return unary_op(
      x, "affine", [scale, shift](real v) { return scale * v + shift; },
      [scale](real, real) { return scale; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](real v) { return v > 0 ? v : 0.0; },
      [](real v, real) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      x, "gelu",
      [](real v) { return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865476)); },
      [](real v, real) {
        real cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
        real pdf = 0.3989422804014327 * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid",
      [](real v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        real e = std::exp(v);
        return e / (1.0 + e);
      },
      [](real, real y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      x, "softplus",
      [](real v) {
        if (v > 30.0) return v;
        if (v < -30.0) return std::exp(v);
        return std::log1p(std::exp(v));
      },
      [](real v, real) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        real e = std::exp(v);
        return e / (1.0 + e);
      });
}

Tensor clamp(const Tensor& x, real lo, real hi) {
  return unary_op(
      x, "clamp",
      [lo, hi](real v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](real v, real) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ------------------------------ conv ------------------------------

namespace {

struct ConvDims {
  int N, Cin, H, W, Cout, kh, kw, OH, OW;
};

ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int pad,
                   const char* op) {
  ConvDims d{x.n, x.c, x.h, x.w, w.n, w.h, w.w, 0, 0};
  d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
  d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
  if (d.OH <= 0 || d.OW <= 0)
    throw std::invalid_argument(std::string(op) + ": output would be empty");
  return d;
}

/// column buffer: [Cin*kh*kw, OH*OW], column-major
void im2col(const real* x, const ConvDims& d, int stride, int pad, EMat& col) {
  col.resize(static_cast<Eigen::Index>(d.Cin) * d.kh * d.kw,
             static_cast<Eigen::Index>(d.OH) * d.OW);
  for (int ci = 0; ci < d.Cin; ++ci)
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        Eigen::Index row =
            (static_cast<Eigen::Index>(ci) * d.kh + ky) * d.kw + kx;
        for (int oy = 0; oy < d.OH; ++oy) {
          int iy = oy * stride - pad + ky;
          Eigen::Index base = static_cast<Eigen::Index>(oy) * d.OW;
          if (iy < 0 || iy >= d.H) {
            for (int ox = 0; ox < d.OW; ++ox) col(row, base + ox) = 0.0;
            continue;
          }
          const real* xrow = x + (static_cast<size_t>(ci) * d.H + iy) * d.W;
          for (int ox = 0; ox < d.OW; ++ox) {
            int ix = ox * stride - pad + kx;
            col(row, base + ox) = (ix >= 0 && ix < d.W) ? xrow[ix] : 0.0;
          }
        }
      }
}

void col2im_add(const EMat& col, const ConvDims& d, int stride, int pad,
                real* dx) {
  for (int ci = 0; ci < d.Cin; ++ci)
    for (int ky = 0; ky < d.kh; ++ky)
      for (int kx = 0; kx < d.kw; ++kx) {
        Eigen::Index row =
            (static_cast<Eigen::Index>(ci) * d.kh + ky) * d.kw + kx;
        for (int oy = 0; oy < d.OH; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= d.H) continue;
          real* xrow = dx + (static_cast<size_t>(ci) * d.H + iy) * d.W;
          Eigen::Index base = static_cast<Eigen::Index>(oy) * d.OW;
          for (int ox = 0; ox < d.OW; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < d.W) xrow[ix] += col(row, base + ox);
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  if (x.shape().c != w.shape().c)
    throw std::invalid_argument("conv2d: channel mismatch");
  ConvDims d = conv_dims(x.shape(), w.shape(), stride, pad, "conv2d");
  bool tracked = track({x, w, b});
  auto out =
      make_result(Shape{d.N, d.Cout, d.OH, d.OW}, {x, w, b}, tracked);

  const Eigen::Index K = static_cast<Eigen::Index>(d.Cin) * d.kh * d.kw;
  const Eigen::Index P = static_cast<Eigen::Index>(d.OH) * d.OW;
  // pointwise convolutions read the input planes directly
  const bool pointwise = (d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0);
  ECMapRow wmat(w.values().data(), d.Cout, K);

#pragma omp parallel for schedule(static)
  for (int n = 0; n < d.N; ++n) {
    const real* xp = x.values().data() + static_cast<size_t>(n) * d.Cin * d.H * d.W;
    EMapRow y(out->val.data() + static_cast<size_t>(n) * d.Cout * d.OH * d.OW,
              d.Cout, P);
    EMat col;
    if (pointwise) {
      // aligned scratch keeps per-sample results independent of the
      // sample's position in the batch buffer
      col = ECMapRow(xp, d.Cin, P);
    } else {
      im2col(xp, d, stride, pad, col);
    }
    y.noalias() = wmat * col;
  }
  if (b.defined()) {
    for (int n = 0; n < d.N; ++n)
      for (int co = 0; co < d.Cout; ++co) {
        real bias = b.values()[static_cast<size_t>(co)];
        real* yp = out->val.data() +
                   (static_cast<size_t>(n) * d.Cout + co) * d.OH * d.OW;
        for (Eigen::Index i = 0; i < P; ++i) yp[i] += bias;
      }
  }

  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    out->backfn = [o, xn, wn, bn, d, stride, pad, K, P, pointwise]() {
      ECMapRow wmat(wn->val.data(), d.Cout, K);
      if (wn->requires_grad) wn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();

      const int threads = std::min(omp_get_max_threads(), d.N);
      // per-thread weight-gradient partials, reduced in fixed order below
      std::vector<EMat> dw_parts;
      if (wn->requires_grad)
        dw_parts.assign(static_cast<size_t>(std::max(threads, 1)),
                        EMat::Zero(d.Cout, K));

#pragma omp parallel num_threads(std::max(threads, 1))
      {
        const int tid = omp_get_thread_num();
        EMat col;
#pragma omp for schedule(static)
        for (int n = 0; n < d.N; ++n) {
          const real* xp =
              xn->val.data() + static_cast<size_t>(n) * d.Cin * d.H * d.W;
          // dy copied to aligned scratch for batch-position independence
          EMat dy = ECMapRow(o->grad.data() + static_cast<size_t>(n) * d.Cout * P,
                             d.Cout, P);
          if (pointwise) {
            if (wn->requires_grad) {
              EMat xm = ECMapRow(xp, d.Cin, P);
              dw_parts[static_cast<size_t>(tid)].noalias() +=
                  dy * xm.transpose();
            }
            if (xn->requires_grad) {
              EMat dcol = wmat.transpose() * dy;
              EMapRow dst(xn->grad.data() +
                              static_cast<size_t>(n) * d.Cin * d.H * d.W,
                          d.Cin, P);
              dst += dcol;
            }
          } else {
            if (wn->requires_grad || xn->requires_grad)
              im2col(xp, d, stride, pad, col);
            if (wn->requires_grad)
              dw_parts[static_cast<size_t>(tid)].noalias() +=
                  dy * col.transpose();
            if (xn->requires_grad) {
              EMat dcol = wmat.transpose() * dy;
              col2im_add(dcol, d, stride, pad,
                         xn->grad.data() +
                             static_cast<size_t>(n) * d.Cin * d.H * d.W);
            }
          }
        }
      }
      if (wn->requires_grad) {
        EMapRow dw(wn->grad.data(), d.Cout, K);
        for (const auto& part : dw_parts) dw.noalias() += part;
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int n = 0; n < d.N; ++n)
          for (int co = 0; co < d.Cout; ++co) {
            const real* gp =
                o->grad.data() + (static_cast<size_t>(n) * d.Cout + co) * P;
            real s = 0.0;
            for (Eigen::Index i = 0; i < P; ++i) s += gp[i];
            bn->grad[static_cast<size_t>(co)] += s;
          }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride, int pad) {
  if (w.shape().c != 1 || w.shape().n != x.shape().c)
    throw std::invalid_argument("depthwise_conv2d: weight must be [C,1,kh,kw]");
  ConvDims d = conv_dims(x.shape(), w.shape(), stride, pad, "depthwise");
  d.Cout = d.Cin;
  bool tracked = track({x, w, b});
  auto out = make_result(Shape{d.N, d.Cin, d.OH, d.OW}, {x, w, b}, tracked);

  auto fwd_one = [&](const real* xp, const real* wp, real bias, real* yp) {
    for (int oy = 0; oy < d.OH; ++oy)
      for (int ox = 0; ox < d.OW; ++ox) {
        real s = bias;
        for (int ky = 0; ky < d.kh; ++ky) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= d.H) continue;
          for (int kx = 0; kx < d.kw; ++kx) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= d.W) continue;
            s += wp[ky * d.kw + kx] * xp[static_cast<size_t>(iy) * d.W + ix];
          }
        }
        yp[static_cast<size_t>(oy) * d.OW + ox] = s;
      }
  };

#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < d.N; ++n)
    for (int c = 0; c < d.Cin; ++c)
      fwd_one(x.values().data() + (static_cast<size_t>(n) * d.Cin + c) * d.H * d.W,
              w.values().data() + static_cast<size_t>(c) * d.kh * d.kw,
              b.defined() ? b.values()[static_cast<size_t>(c)] : 0.0,
              out->val.data() +
                  (static_cast<size_t>(n) * d.Cin + c) * d.OH * d.OW);

  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    out->backfn = [o, xn, wn, bn, d, stride, pad]() {
      const size_t plane = static_cast<size_t>(d.H) * d.W;
      const size_t oplane = static_cast<size_t>(d.OH) * d.OW;
      if (xn->requires_grad) xn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      if (bn && bn->requires_grad) bn->ensure_grad();
      // per-channel accumulations are disjoint across c; sum over n serial
      for (int n = 0; n < d.N; ++n) {
#pragma omp parallel for schedule(static)
        for (int c = 0; c < d.Cin; ++c) {
          const real* gy =
              o->grad.data() + (static_cast<size_t>(n) * d.Cin + c) * oplane;
          const real* xp =
              xn->val.data() + (static_cast<size_t>(n) * d.Cin + c) * plane;
          const real* wp =
              wn->val.data() + static_cast<size_t>(c) * d.kh * d.kw;
          for (int oy = 0; oy < d.OH; ++oy)
            for (int ox = 0; ox < d.OW; ++ox) {
              real g = gy[static_cast<size_t>(oy) * d.OW + ox];
              if (g == 0.0) continue;
              for (int ky = 0; ky < d.kh; ++ky) {
                int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= d.H) continue;
                for (int kx = 0; kx < d.kw; ++kx) {
                  int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= d.W) continue;
                  if (xn->requires_grad)
                    xn->grad[(static_cast<size_t>(n) * d.Cin + c) * plane +
                             static_cast<size_t>(iy) * d.W + ix] +=
                        g * wp[ky * d.kw + kx];
                  if (wn->requires_grad)
                    wn->grad[static_cast<size_t>(c) * d.kh * d.kw +
                             static_cast<size_t>(ky) * d.kw + kx] +=
                        g * xp[static_cast<size_t>(iy) * d.W + ix];
                }
              }
              if (bn && bn->requires_grad)
                bn->grad[static_cast<size_t>(c)] += g;
            }
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.shape().h != 1 || x.shape().w != 1)
    throw std::invalid_argument("linear: input must be [N,C,1,1]");
  if (w.shape().c != x.shape().c)
    throw std::invalid_argument("linear: weight in-features mismatch");
  const int N = x.shape().n, in = x.shape().c, out_f = w.shape().n;
  bool tracked = track({x, w, b});
  auto out = make_result(Shape{N, out_f, 1, 1}, {x, w, b}, tracked);

  // per-sample products so a sample's output is independent of its
  // batch neighbours, bit for bit
  ECMapRow wm(w.values().data(), out_f, in);
  for (int n = 0; n < N; ++n) {
    Eigen::Map<const Eigen::VectorXd> xv(
        x.values().data() + static_cast<size_t>(n) * in, in);
    Eigen::Map<Eigen::VectorXd> yv(
        out->val.data() + static_cast<size_t>(n) * out_f, out_f);
    yv.noalias() = wm * xv;
  }
  if (b.defined())
    for (int n = 0; n < N; ++n)
      for (int f = 0; f < out_f; ++f)
        out->val[static_cast<size_t>(n) * out_f + f] +=
            b.values()[static_cast<size_t>(f)];

  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    out->backfn = [o, xn, wn, bn, N, in, out_f]() {
      ECMapRow wm(wn->val.data(), out_f, in);
      if (xn->requires_grad) xn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      for (int n = 0; n < N; ++n) {
        Eigen::Map<const Eigen::VectorXd> dy(
            o->grad.data() + static_cast<size_t>(n) * out_f, out_f);
        if (xn->requires_grad) {
          Eigen::Map<Eigen::VectorXd> dx(
              xn->grad.data() + static_cast<size_t>(n) * in, in);
          dx.noalias() += wm.transpose() * dy;
        }
        if (wn->requires_grad) {
          EMapRow dw(wn->grad.data(), out_f, in);
          Eigen::Map<const Eigen::VectorXd> xv(
              xn->val.data() + static_cast<size_t>(n) * in, in);
          dw.noalias() += dy * xv.transpose();
        }
      }
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int n = 0; n < N; ++n)
          for (int f = 0; f < out_f; ++f)
            bn->grad[static_cast<size_t>(f)] +=
                o->grad[static_cast<size_t>(n) * out_f + f];
      }
    };
  }
  return Tensor::wrap(out);
}

// ------------------------------ normalization ------------------------------

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, real eps) {
  const Shape s = x.shape();
  if (s.c % groups != 0)
    throw std::invalid_argument("group_norm: channels not divisible by groups");
  const int cpg = s.c / groups;
  const size_t m = static_cast<size_t>(cpg) * s.h * s.w;
  bool tracked = track({x, gamma, beta});
  auto out = make_result(s, {x, gamma, beta}, tracked);

  const size_t plane = static_cast<size_t>(s.h) * s.w;
  std::vector<real> mean_store(static_cast<size_t>(s.n) * groups);
  std::vector<real> inv_std_store(static_cast<size_t>(s.n) * groups);

  for (int n = 0; n < s.n; ++n)
    for (int g = 0; g < groups; ++g) {
      const size_t base = (static_cast<size_t>(n) * s.c + g * cpg) * plane;
      real mu = 0.0;
      for (size_t i = 0; i < m; ++i) mu += x.values()[base + i];
      mu /= static_cast<real>(m);
      real var = 0.0;
      for (size_t i = 0; i < m; ++i) {
        real dv = x.values()[base + i] - mu;
        var += dv * dv;
      }
      var /= static_cast<real>(m);
      real inv_std = 1.0 / std::sqrt(var + eps);
      mean_store[static_cast<size_t>(n) * groups + g] = mu;
      inv_std_store[static_cast<size_t>(n) * groups + g] = inv_std;
      for (int cc = 0; cc < cpg; ++cc) {
        int c = g * cpg + cc;
        real ga = gamma.values()[static_cast<size_t>(c)];
        real be = beta.values()[static_cast<size_t>(c)];
        const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
        for (size_t i = 0; i < plane; ++i)
          out->val[cb + i] =
              ga * (x.values()[cb + i] - mu) * inv_std + be;
      }
    }

  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    out->backfn = [o, xn, gn, bn, s, groups, cpg, m, plane, mean_store,
                   inv_std_store]() {
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (int n = 0; n < s.n; ++n)
        for (int g = 0; g < groups; ++g) {
          const real mu = mean_store[static_cast<size_t>(n) * groups + g];
          const real inv_std =
              inv_std_store[static_cast<size_t>(n) * groups + g];
          // gx = go * gamma ; need mean(gx) and mean(gx * xhat) over group
          real mean_gx = 0.0, mean_gx_xhat = 0.0;
          for (int cc = 0; cc < cpg; ++cc) {
            int c = g * cpg + cc;
            real ga = gn->val[static_cast<size_t>(c)];
            const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
            for (size_t i = 0; i < plane; ++i) {
              real gx = o->grad[cb + i] * ga;
              real xhat = (xn->val[cb + i] - mu) * inv_std;
              mean_gx += gx;
              mean_gx_xhat += gx * xhat;
            }
          }
          mean_gx /= static_cast<real>(m);
          mean_gx_xhat /= static_cast<real>(m);
          for (int cc = 0; cc < cpg; ++cc) {
            int c = g * cpg + cc;
            real ga = gn->val[static_cast<size_t>(c)];
            const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
            for (size_t i = 0; i < plane; ++i) {
              real xhat = (xn->val[cb + i] - mu) * inv_std;
              real gx = o->grad[cb + i] * ga;
              if (xn->requires_grad)
                xn->grad[cb + i] +=
                    inv_std * (gx - mean_gx - xhat * mean_gx_xhat);
              if (gn->requires_grad)
                gn->grad[static_cast<size_t>(c)] += o->grad[cb + i] * xhat;
              if (bn->requires_grad)
                bn->grad[static_cast<size_t>(c)] += o->grad[cb + i];
            }
          }
        }
    };
  }
  return Tensor::wrap(out);
}

Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma,
                           const Tensor& beta, real eps) {
  const Shape s = x.shape();
  bool tracked = track({x, gamma, beta});
  auto out = make_result(s, {x, gamma, beta}, tracked);
  const size_t plane = static_cast<size_t>(s.h) * s.w;
  const size_t cstride = plane;
  const real C = static_cast<real>(s.c);

  std::vector<real> inv_std_store(static_cast<size_t>(s.n) * plane);
  std::vector<real> mean_store(static_cast<size_t>(s.n) * plane);

  for (int n = 0; n < s.n; ++n) {
    const size_t nb = static_cast<size_t>(n) * s.c * plane;
    for (size_t p = 0; p < plane; ++p) {
      real mu = 0.0;
      for (int c = 0; c < s.c; ++c) mu += x.values()[nb + c * cstride + p];
      mu /= C;
      real var = 0.0;
      for (int c = 0; c < s.c; ++c) {
        real dv = x.values()[nb + c * cstride + p] - mu;
        var += dv * dv;
      }
      var /= C;
      real inv_std = 1.0 / std::sqrt(var + eps);
      mean_store[static_cast<size_t>(n) * plane + p] = mu;
      inv_std_store[static_cast<size_t>(n) * plane + p] = inv_std;
      for (int c = 0; c < s.c; ++c)
        out->val[nb + c * cstride + p] =
            gamma.values()[static_cast<size_t>(c)] *
                (x.values()[nb + c * cstride + p] - mu) * inv_std +
            beta.values()[static_cast<size_t>(c)];
    }
  }

  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    out->backfn = [o, xn, gn, bn, s, plane, cstride, C, mean_store,
                   inv_std_store]() {
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (int n = 0; n < s.n; ++n) {
        const size_t nb = static_cast<size_t>(n) * s.c * plane;
        for (size_t p = 0; p < plane; ++p) {
          const real mu = mean_store[static_cast<size_t>(n) * plane + p];
          const real inv_std = inv_std_store[static_cast<size_t>(n) * plane + p];
          real mean_gx = 0.0, mean_gx_xhat = 0.0;
          for (int c = 0; c < s.c; ++c) {
            real gx = o->grad[nb + c * cstride + p] *
                      gn->val[static_cast<size_t>(c)];
            real xhat = (xn->val[nb + c * cstride + p] - mu) * inv_std;
            mean_gx += gx;
            mean_gx_xhat += gx * xhat;
          }
          mean_gx /= C;
          mean_gx_xhat /= C;
          for (int c = 0; c < s.c; ++c) {
            real go = o->grad[nb + c * cstride + p];
            real gx = go * gn->val[static_cast<size_t>(c)];
            real xhat = (xn->val[nb + c * cstride + p] - mu) * inv_std;
            if (xn->requires_grad)
              xn->grad[nb + c * cstride + p] +=
                  inv_std * (gx - mean_gx - xhat * mean_gx_xhat);
            if (gn->requires_grad)
              gn->grad[static_cast<size_t>(c)] += go * xhat;
            if (bn->requires_grad) bn->grad[static_cast<size_t>(c)] += go;
          }
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor grn(const Tensor& x, const Tensor& gamma, const Tensor& beta,
           real eps) {
  const Shape s = x.shape();
  bool tracked = track({x, gamma, beta});
  auto out = make_result(s, {x, gamma, beta}, tracked);
  const size_t plane = static_cast<size_t>(s.h) * s.w;

  // per-sample channel norms g_c and their mean
  std::vector<real> gnorm(static_cast<size_t>(s.n) * s.c);
  std::vector<real> gmean(static_cast<size_t>(s.n));
  for (int n = 0; n < s.n; ++n) {
    real msum = 0.0;
    for (int c = 0; c < s.c; ++c) {
      const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
      real ss = 0.0;
      for (size_t i = 0; i < plane; ++i)
        ss += x.values()[cb + i] * x.values()[cb + i];
      real g = std::sqrt(ss);
      gnorm[static_cast<size_t>(n) * s.c + c] = g;
      msum += g;
    }
    gmean[static_cast<size_t>(n)] = msum / static_cast<real>(s.c);
  }
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
      real nx = gnorm[static_cast<size_t>(n) * s.c + c] /
                (gmean[static_cast<size_t>(n)] + eps);
      real ga = gamma.values()[static_cast<size_t>(c)];
      real be = beta.values()[static_cast<size_t>(c)];
      for (size_t i = 0; i < plane; ++i)
        out->val[cb + i] =
            ga * x.values()[cb + i] * nx + be + x.values()[cb + i];
    }

  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    out->backfn = [o, xn, gn, bn, s, plane, eps, gnorm, gmean]() {
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (int n = 0; n < s.n; ++n) {
        const real m_eps = gmean[static_cast<size_t>(n)] + eps;
        // A_c = sum_hw go * gamma_c * x ; S = sum_c A_c * g_c
        std::vector<real> A(static_cast<size_t>(s.c), 0.0);
        real S = 0.0;
        for (int c = 0; c < s.c; ++c) {
          const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
          real ga = gn->val[static_cast<size_t>(c)];
          real a = 0.0;
          for (size_t i = 0; i < plane; ++i)
            a += o->grad[cb + i] * xn->val[cb + i];
          A[static_cast<size_t>(c)] = a * ga;
          S += A[static_cast<size_t>(c)] * gnorm[static_cast<size_t>(n) * s.c + c];
        }
        for (int c = 0; c < s.c; ++c) {
          const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
          const real g = gnorm[static_cast<size_t>(n) * s.c + c];
          const real nx = g / m_eps;
          const real ga = gn->val[static_cast<size_t>(c)];
          const real coef =
              A[static_cast<size_t>(c)] / m_eps -
              S / (static_cast<real>(s.c) * m_eps * m_eps);
          for (size_t i = 0; i < plane; ++i) {
            real go = o->grad[cb + i];
            if (xn->requires_grad) {
              real through_g =
                  (g > 0.0) ? coef * xn->val[cb + i] / g : 0.0;
              xn->grad[cb + i] += go * (ga * nx + 1.0) + through_g;
            }
            if (gn->requires_grad)
              gn->grad[static_cast<size_t>(c)] += go * xn->val[cb + i] * nx;
            if (bn->requires_grad) bn->grad[static_cast<size_t>(c)] += go;
          }
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor channel_l2_normalize(const Tensor& x, real eps) {
  const Shape s = x.shape();
  bool tracked = track({x});
  auto out = make_result(s, {x}, tracked);
  const size_t plane = static_cast<size_t>(s.h) * s.w;
  std::vector<real> inv_r(static_cast<size_t>(s.n) * plane);

  for (int n = 0; n < s.n; ++n) {
    const size_t nb = static_cast<size_t>(n) * s.c * plane;
    for (size_t p = 0; p < plane; ++p) {
      real ss = 0.0;
      for (int c = 0; c < s.c; ++c) {
        real v = x.values()[nb + c * plane + p];
        ss += v * v;
      }
      real ir = 1.0 / std::sqrt(ss + eps);
      inv_r[static_cast<size_t>(n) * plane + p] = ir;
      for (int c = 0; c < s.c; ++c)
        out->val[nb + c * plane + p] = x.values()[nb + c * plane + p] * ir;
    }
  }

  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    out->backfn = [o, xn, s, plane, inv_r]() {
      xn->ensure_grad();
      for (int n = 0; n < s.n; ++n) {
        const size_t nb = static_cast<size_t>(n) * s.c * plane;
        for (size_t p = 0; p < plane; ++p) {
          real ir = inv_r[static_cast<size_t>(n) * plane + p];
          real dot = 0.0;
          for (int c = 0; c < s.c; ++c)
            dot += o->grad[nb + c * plane + p] * o->val[nb + c * plane + p];
          for (int c = 0; c < s.c; ++c)
            xn->grad[nb + c * plane + p] +=
                ir * (o->grad[nb + c * plane + p] -
                      o->val[nb + c * plane + p] * dot);
        }
      }
    };
  }
  return Tensor::wrap(out);
}

// ------------------------------ structure ------------------------------

Tensor upsample_nearest2x(const Tensor& x) {
  const Shape s = x.shape();
  Shape os{s.n, s.c, s.h * 2, s.w * 2};
  bool tracked = track({x});
  auto out = make_result(os, {x}, tracked);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const size_t ib = (static_cast<size_t>(n) * s.c + c) *
                        static_cast<size_t>(s.h) * s.w;
      const size_t ob = (static_cast<size_t>(n) * s.c + c) *
                        static_cast<size_t>(os.h) * os.w;
      for (int y = 0; y < os.h; ++y)
        for (int x2 = 0; x2 < os.w; ++x2)
          out->val[ob + static_cast<size_t>(y) * os.w + x2] =
              x.values()[ib + static_cast<size_t>(y / 2) * s.w + x2 / 2];
    }
  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    out->backfn = [o, xn, s, os]() {
      xn->ensure_grad();
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const size_t ib = (static_cast<size_t>(n) * s.c + c) *
                            static_cast<size_t>(s.h) * s.w;
          const size_t ob = (static_cast<size_t>(n) * s.c + c) *
                            static_cast<size_t>(os.h) * os.w;
          for (int y = 0; y < os.h; ++y)
            for (int x2 = 0; x2 < os.w; ++x2)
              xn->grad[ib + static_cast<size_t>(y / 2) * s.w + x2 / 2] +=
                  o->grad[ob + static_cast<size_t>(y) * os.w + x2];
        }
    };
  }
  return Tensor::wrap(out);
}

Tensor global_avg_pool(const Tensor& x) {
  const Shape s = x.shape();
  bool tracked = track({x});
  auto out = make_result(Shape{s.n, s.c, 1, 1}, {x}, tracked);
  const size_t plane = static_cast<size_t>(s.h) * s.w;
  const real inv = 1.0 / static_cast<real>(plane);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
      real sum = 0.0;
      for (size_t i = 0; i < plane; ++i) sum += x.values()[cb + i];
      out->val[static_cast<size_t>(n) * s.c + c] = sum * inv;
    }
  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    out->backfn = [o, xn, s, plane, inv]() {
      xn->ensure_grad();
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
          real g = o->grad[static_cast<size_t>(n) * s.c + c] * inv;
          for (size_t i = 0; i < plane; ++i) xn->grad[cb + i] += g;
        }
    };
  }
  return Tensor::wrap(out);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw std::invalid_argument("concat_channels: shape mismatch");
  Shape os{sa.n, sa.c + sb.c, sa.h, sa.w};
  bool tracked = track({a, b});
  auto out = make_result(os, {a, b}, tracked);
  const size_t plane = static_cast<size_t>(sa.h) * sa.w;
  for (int n = 0; n < sa.n; ++n) {
    std::copy(a.values().begin() + static_cast<long>(n) * sa.c * plane,
              a.values().begin() + static_cast<long>(n + 1) * sa.c * plane,
              out->val.begin() + static_cast<long>(n) * os.c * plane);
    std::copy(b.values().begin() + static_cast<long>(n) * sb.c * plane,
              b.values().begin() + static_cast<long>(n + 1) * sb.c * plane,
              out->val.begin() + static_cast<long>(n) * os.c * plane +
                  static_cast<long>(sa.c) * plane);
  }
  if (tracked) {
    Node* o = out.get();
    auto an = a.node();
    auto bn = b.node();
    out->backfn = [o, an, bn, sa, sb, os, plane]() {
      for (int n = 0; n < sa.n; ++n) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (size_t i = 0; i < static_cast<size_t>(sa.c) * plane; ++i)
            an->grad[static_cast<size_t>(n) * sa.c * plane + i] +=
                o->grad[static_cast<size_t>(n) * os.c * plane + i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (size_t i = 0; i < static_cast<size_t>(sb.c) * plane; ++i)
            bn->grad[static_cast<size_t>(n) * sb.c * plane + i] +=
                o->grad[static_cast<size_t>(n) * os.c * plane +
                        static_cast<size_t>(sa.c) * plane + i];
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor concat_batch(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_batch: empty");
  const Shape s0 = parts[0].shape();
  int total_n = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.c != s0.c || s.h != s0.h || s.w != s0.w)
      throw std::invalid_argument("concat_batch: inner shape mismatch");
    total_n += s.n;
  }
  bool tracked = false;
  if (g_no_grad_depth == 0)
    for (const auto& p : parts)
      if (p.requires_grad()) tracked = true;

  Shape os{total_n, s0.c, s0.h, s0.w};
  auto out = make_node(os);
  if (tracked) {
    out->requires_grad = true;
    for (const auto& p : parts) out->parents.push_back(p.node());
  }
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(),
              out->val.begin() + static_cast<long>(off));
    off += p.values().size();
  }
  if (tracked) {
    Node* o = out.get();
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    out->backfn = [o, nodes]() {
      size_t off = 0;
      for (const auto& n : nodes) {
        if (n->requires_grad) {
          n->ensure_grad();
          for (size_t i = 0; i < n->val.size(); ++i)
            n->grad[i] += o->grad[off + i];
        }
        off += n->val.size();
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor gather_batch(const Tensor& x, std::vector<int> indices) {
  const Shape s = x.shape();
  for (int i : indices)
    if (i < 0 || i >= s.n)
      throw std::invalid_argument("gather_batch: index out of range");
  Shape os{static_cast<int>(indices.size()), s.c, s.h, s.w};
  bool tracked = track({x});
  auto out = make_result(os, {x}, tracked);
  const size_t item = static_cast<size_t>(s.c) * s.h * s.w;
  for (size_t k = 0; k < indices.size(); ++k)
    std::copy(x.values().begin() + static_cast<long>(indices[k]) * item,
              x.values().begin() + static_cast<long>(indices[k] + 1) * item,
              out->val.begin() + static_cast<long>(k) * item);
  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    out->backfn = [o, xn, indices, item]() {
      xn->ensure_grad();
      for (size_t k = 0; k < indices.size(); ++k)
        for (size_t i = 0; i < item; ++i)
          xn->grad[static_cast<size_t>(indices[k]) * item + i] +=
              o->grad[k * item + i];
    };
  }
  return Tensor::wrap(out);
}

// ------------------------------ reductions ------------------------------

Tensor mean_all(const Tensor& x) {
  bool tracked = track({x});
  auto out = make_result(Shape{1, 1, 1, 1}, {x}, tracked);
  real s = 0.0;
  for (real v : x.values()) s += v;
  const real inv = 1.0 / static_cast<real>(x.numel());
  out->val[0] = s * inv;
  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    out->backfn = [o, xn, inv]() {
      xn->ensure_grad();
      real g = o->grad[0] * inv;
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    };
  }
  return Tensor::wrap(out);
}

Tensor sum_all(const Tensor& x) {
  bool tracked = track({x});
  auto out = make_result(Shape{1, 1, 1, 1}, {x}, tracked);
  real s = 0.0;
  for (real v : x.values()) s += v;
  out->val[0] = s;
  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    out->backfn = [o, xn]() {
      xn->ensure_grad();
      real g = o->grad[0];
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    };
  }
  return Tensor::wrap(out);
}

Tensor smooth_l1_mean(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "smooth_l1_mean");
  bool tracked = track({a, b});
  auto out = make_result(Shape{1, 1, 1, 1}, {a, b}, tracked);
  const real inv = 1.0 / static_cast<real>(a.numel());
  real s = 0.0;
  for (size_t i = 0; i < a.values().size(); ++i) {
    real d = a.values()[i] - b.values()[i];
    real ad = std::abs(d);
    s += (ad < 1.0) ? 0.5 * d * d : ad - 0.5;
  }
  out->val[0] = s * inv;
  if (tracked) {
    Node* o = out.get();
    auto an = a.node();
    auto bn = b.node();
    out->backfn = [o, an, bn, inv]() {
      real g = o->grad[0] * inv;
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (size_t i = 0; i < an->val.size(); ++i) {
        real d = an->val[i] - bn->val[i];
        real dd = (std::abs(d) < 1.0) ? d : (d > 0 ? 1.0 : -1.0);
        if (an->requires_grad) an->grad[i] += g * dd;
        if (bn->requires_grad) bn->grad[i] -= g * dd;
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor bce_mean(const Tensor& p, const std::vector<real>& y, real eps) {
  if (static_cast<int64_t>(y.size()) != p.numel())
    throw std::invalid_argument("bce_mean: label count mismatch");
  bool tracked = track({p});
  auto out = make_result(Shape{1, 1, 1, 1}, {p}, tracked);
  const real inv = 1.0 / static_cast<real>(y.size());
  real s = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    real pc = std::min(1.0 - eps, std::max(eps, p.values()[i]));
    s += -y[i] * std::log(pc) - (1.0 - y[i]) * std::log(1.0 - pc);
  }
  out->val[0] = s * inv;
  if (tracked) {
    Node* o = out.get();
    auto pn = p.node();
    out->backfn = [o, pn, y, eps, inv]() {
      pn->ensure_grad();
      real g = o->grad[0] * inv;
      for (size_t i = 0; i < y.size(); ++i) {
        real raw = pn->val[i];
        if (raw < eps || raw > 1.0 - eps) continue;  // clamped: zero slope
        pn->grad[i] += g * (-y[i] / raw + (1.0 - y[i]) / (1.0 - raw));
      }
    };
  }
  return Tensor::wrap(out);
}

// ------------------------------ domain ops ------------------------------

namespace {

/// Pixel permutation map for one key: dst plane index -> src plane index.
std::vector<int> shuffle_map(const JigsawKey& key, int H, int W, bool inverse) {
  const int bh = H / key.grid_rows;
  const int bw = W / key.grid_cols;
  std::vector<int> map(static_cast<size_t>(H) * W);
  for (int b = 0; b < key.blocks(); ++b) {
    const int sb = key.permutation[static_cast<size_t>(b)];
    const bool fh = key.flips[static_cast<size_t>(b)].first;
    const bool fv = key.flips[static_cast<size_t>(b)].second;
    const int dy0 = (b / key.grid_cols) * bh, dx0 = (b % key.grid_cols) * bw;
    const int sy0 = (sb / key.grid_cols) * bh, sx0 = (sb % key.grid_cols) * bw;
    for (int y = 0; y < bh; ++y)
      for (int x = 0; x < bw; ++x) {
        int yy = fv ? bh - 1 - y : y;
        int xx = fh ? bw - 1 - x : x;
        int dst = (dy0 + y) * W + (dx0 + x);
        int src = (sy0 + yy) * W + (sx0 + xx);
        if (!inverse)
          map[static_cast<size_t>(dst)] = src;
        else
          map[static_cast<size_t>(src)] = dst;
      }
  }
  return map;
}

}  // namespace

Tensor shuffle_batch(const Tensor& x, const std::vector<JigsawKey>& keys,
                     bool inverse) {
  const Shape s = x.shape();
  if (static_cast<int>(keys.size()) != s.n)
    throw std::invalid_argument("shuffle_batch: one key per sample required");
  for (const auto& k : keys) {
    k.validate();
    if (s.h % k.grid_rows != 0 || s.w % k.grid_cols != 0)
      throw std::invalid_argument(
          "shuffle_batch: dims must divide evenly by the key grid");
  }
  bool tracked = track({x});
  auto out = make_result(s, {x}, tracked);
  const size_t plane = static_cast<size_t>(s.h) * s.w;

  std::vector<std::vector<int>> maps;
  maps.reserve(keys.size());
  for (const auto& k : keys) maps.push_back(shuffle_map(k, s.h, s.w, inverse));

  for (int n = 0; n < s.n; ++n) {
    const auto& map = maps[static_cast<size_t>(n)];
    for (int c = 0; c < s.c; ++c) {
      const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
      for (size_t i = 0; i < plane; ++i)
        out->val[cb + i] = x.values()[cb + static_cast<size_t>(map[i])];
    }
  }
  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    out->backfn = [o, xn, s, plane, maps]() {
      xn->ensure_grad();
      for (int n = 0; n < s.n; ++n) {
        const auto& map = maps[static_cast<size_t>(n)];
        for (int c = 0; c < s.c; ++c) {
          const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
          for (size_t i = 0; i < plane; ++i)
            xn->grad[cb + static_cast<size_t>(map[i])] += o->grad[cb + i];
        }
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor blend_with_mask(const Tensor& x, const std::vector<real>& base,
                       const std::vector<real>& mask) {
  const Shape s = x.shape();
  const size_t plane = static_cast<size_t>(s.h) * s.w;
  if (mask.size() != plane)
    throw std::invalid_argument("blend_with_mask: mask size mismatch");
  if (base.size() != x.values().size())
    throw std::invalid_argument("blend_with_mask: base size mismatch");
  bool tracked = track({x});
  auto out = make_result(s, {x}, tracked);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
      for (size_t i = 0; i < plane; ++i)
        out->val[cb + i] =
            base[cb + i] * mask[i] + x.values()[cb + i] * (1.0 - mask[i]);
    }
  if (tracked) {
    Node* o = out.get();
    auto xn = x.node();
    out->backfn = [o, xn, s, plane, mask]() {
      xn->ensure_grad();
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const size_t cb = (static_cast<size_t>(n) * s.c + c) * plane;
          for (size_t i = 0; i < plane; ++i)
            xn->grad[cb + i] += o->grad[cb + i] * (1.0 - mask[i]);
        }
    };
  }
  return Tensor::wrap(out);
}

}  // namespace jigmark::ad
