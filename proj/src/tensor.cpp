#include "lilac/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <sstream>

#ifdef LILAC_USE_OPENBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace lilac::num {

namespace testing {
bool backward_sign_flip = false;
}

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeMismatch("negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != numel(shape_))
    throw ShapeMismatch("data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

Tensor Tensor::from(std::initializer_list<double> v, Shape shape) {
  return Tensor(std::move(shape), std::vector<double>(v));
}

double& Tensor::at(int r, int c) {
  if (rank() != 2 || r < 0 || r >= dim(0) || c < 0 || c >= dim(1))
    throw IndexOutOfRange("Tensor::at(" + std::to_string(r) + "," +
                          std::to_string(c) + ") on " + shape_str(shape_));
  return data_[static_cast<std::size_t>(r) * static_cast<std::size_t>(dim(1)) +
               static_cast<std::size_t>(c)];
}

double Tensor::at(int r, int c) const {
  return const_cast<Tensor*>(this)->at(r, c);
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// GEMM kernel. Row-major C = alpha * op(A) op(B) + beta * C.
// ---------------------------------------------------------------------------

namespace {

#ifdef LILAC_USE_OPENBLAS
void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}
#else
void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  // Portable fallback; transposed operands are materialized first.
  std::vector<double> abuf, bbuf;
  const double* ae = a;
  int ael = lda;
  if (ta) {
    abuf.resize(static_cast<std::size_t>(m) * k);
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p)
        abuf[static_cast<std::size_t>(i) * k + p] =
            a[static_cast<std::size_t>(p) * lda + i];
    ae = abuf.data();
    ael = k;
  }
  const double* be = b;
  int bel = ldb;
  if (tb) {
    bbuf.resize(static_cast<std::size_t>(k) * n);
    for (int p = 0; p < k; ++p)
      for (int j = 0; j < n; ++j)
        bbuf[static_cast<std::size_t>(p) * n + j] =
            b[static_cast<std::size_t>(j) * ldb + p];
    be = bbuf.data();
    bel = n;
  }
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * ldc;
    if (beta == 0.0)
      std::fill(ci, ci + n, 0.0);
    else if (beta != 1.0)
      for (int j = 0; j < n; ++j) ci[j] *= beta;
    for (int p = 0; p < k; ++p) {
      double aip = alpha * ae[static_cast<std::size_t>(i) * ael + p];
      const double* bp = be + static_cast<std::size_t>(p) * bel;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}
#endif

void check_2d(const Tensor& t, const char* who) {
  if (t.rank() != 2)
    throw ShapeMismatch(std::string(who) + ": expected 2-D, got " +
                        shape_str(t.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

void Graph::check(NodeId id) const {
  if (!id.valid() || static_cast<std::size_t>(id.v) >= nodes_.size())
    throw IndexOutOfRange("invalid NodeId");
}

const Tensor& Graph::val(NodeId id) const {
  check(id);
  const Node& n = nodes_[static_cast<std::size_t>(id.v)];
  return n.external ? *n.external : n.owned;
}

const Tensor& Graph::value(NodeId id) const { return val(id); }

Tensor& Graph::grad_buf(NodeId id) {
  check(id);
  Node& n = nodes_[static_cast<std::size_t>(id.v)];
  if (n.grad.empty() && numel(val(id).shape()) > 0) n.grad = Tensor(val(id).shape());
  return n.grad;
}

const Tensor& Graph::grad(NodeId id) const {
  check(id);
  const Node& n = nodes_[static_cast<std::size_t>(id.v)];
  if (n.grad.empty())
    throw Error("no gradient accumulated for node (op=" + std::string(n.op) +
                ")");
  return n.grad;
}

bool Graph::has_grad(NodeId id) const {
  check(id);
  return !nodes_[static_cast<std::size_t>(id.v)].grad.empty();
}

bool Graph::requires_grad(NodeId id) const {
  check(id);
  return nodes_[static_cast<std::size_t>(id.v)].requires_grad;
}

NodeId Graph::push(Tensor value, bool req, const char* op,
                   std::function<void(Graph&)> back) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = req;
  n.op = op;
  if (req) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::int32_t>(nodes_.size() - 1)};
}

NodeId Graph::input(Tensor t) { return push(std::move(t), false, "input", {}); }

NodeId Graph::leaf(const Tensor* external) {
  Node n;
  n.external = external;
  n.requires_grad = false;
  n.op = "leaf";
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::int32_t>(nodes_.size() - 1)};
}

NodeId Graph::param(const Tensor* external) {
  Node n;
  n.external = external;
  n.requires_grad = true;
  n.op = "param";
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::int32_t>(nodes_.size() - 1)};
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb))
    throw ShapeMismatch("add: " + shape_str(ta.shape()) + " vs " +
                        shape_str(tb.shape()));
  Tensor out(ta.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
  bool req = requires_grad(a) || requires_grad(b);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "add", [a, b, self](Graph& g) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buf(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb))
    throw ShapeMismatch("sub: " + shape_str(ta.shape()) + " vs " +
                        shape_str(tb.shape()));
  Tensor out(ta.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] - tb[i];
  bool req = requires_grad(a) || requires_grad(b);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "sub", [a, b, self](Graph& g) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buf(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb))
    throw ShapeMismatch("mul: " + shape_str(ta.shape()) + " vs " +
                        shape_str(tb.shape()));
  Tensor out(ta.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
  bool req = requires_grad(a) || requires_grad(b);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "mul", [a, b, self](Graph& g) {
    const Tensor& go = g.grad(self);
    const Tensor& ta2 = g.val(a);
    const Tensor& tb2 = g.val(b);
    if (g.requires_grad(a)) {
      Tensor& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * tb2[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_buf(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ta2[i];
    }
  });
}

NodeId Graph::scale(NodeId a, double c) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * c;
  bool req = requires_grad(a);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "scale", [a, c, self](Graph& g) {
    if (!g.requires_grad(a)) return;
    const Tensor& go = g.grad(self);
    Tensor& ga = g.grad_buf(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
  });
}

NodeId Graph::add_row(NodeId m, NodeId bias) {
  const Tensor& tm = val(m);
  const Tensor& tb = val(bias);
  check_2d(tm, "add_row");
  if (tb.rank() != 1 || tb.dim(0) != tm.dim(1))
    throw ShapeMismatch("add_row: matrix " + shape_str(tm.shape()) +
                        " with bias " + shape_str(tb.shape()));
  int r = tm.dim(0), c = tm.dim(1);
  Tensor out(tm.shape());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(i) * c + j] =
          tm[static_cast<std::size_t>(i) * c + j] + tb[static_cast<std::size_t>(j)];
  bool req = requires_grad(m) || requires_grad(bias);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "add_row", [m, bias, r, c, self](Graph& g) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(m)) {
      Tensor& gm = g.grad_buf(m);
      for (std::size_t i = 0; i < go.size(); ++i) gm[i] += go[i];
    }
    if (g.requires_grad(bias)) {
      Tensor& gb = g.grad_buf(bias);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          gb[static_cast<std::size_t>(j)] +=
              go[static_cast<std::size_t>(i) * c + j];
    }
  });
}

NodeId Graph::gelu(NodeId x) {
  const Tensor& tx = val(x);
  Tensor out(tx.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = tx[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  }
  bool req = requires_grad(x);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "gelu", [x, self](Graph& g) {
    if (!g.requires_grad(x)) return;
    const Tensor& go = g.grad(self);
    const Tensor& tx2 = g.val(x);
    Tensor& gx = g.grad_buf(x);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < go.size(); ++i) {
      double v = tx2[i];
      double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += go[i] * (cdf + v * pdf);
    }
  });
}

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId bias) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gain);
  const Tensor& tb = val(bias);
  check_2d(tx, "layer_norm");
  int r = tx.dim(0), c = tx.dim(1);
  if (tg.rank() != 1 || tg.dim(0) != c || tb.rank() != 1 || tb.dim(0) != c)
    throw ShapeMismatch("layer_norm: gain/bias must be [" + std::to_string(c) +
                        "]");
  constexpr double eps = 1e-5;
  Tensor out(tx.shape());
  auto xhat = std::make_shared<Tensor>(tx.shape());
  auto inv_sigma = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(r), 0.0);
  for (int i = 0; i < r; ++i) {
    const double* row = tx.data() + static_cast<std::size_t>(i) * c;
    double mu = 0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    double isg = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[static_cast<std::size_t>(i)] = isg;
    for (int j = 0; j < c; ++j) {
      double xh = (row[j] - mu) * isg;
      (*xhat)[static_cast<std::size_t>(i) * c + j] = xh;
      out[static_cast<std::size_t>(i) * c + j] =
          xh * tg[static_cast<std::size_t>(j)] + tb[static_cast<std::size_t>(j)];
    }
  }
  bool req = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "layer_norm",
              [x, gain, bias, xhat, inv_sigma, r, c, self](Graph& g) {
    const Tensor& go = g.grad(self);
    const Tensor& tg2 = g.val(gain);
    if (g.requires_grad(gain)) {
      Tensor& gg = g.grad_buf(gain);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          gg[static_cast<std::size_t>(j)] +=
              go[static_cast<std::size_t>(i) * c + j] *
              (*xhat)[static_cast<std::size_t>(i) * c + j];
    }
    if (g.requires_grad(bias)) {
      Tensor& gb = g.grad_buf(bias);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * c + j];
    }
    if (g.requires_grad(x)) {
      Tensor& gx = g.grad_buf(x);
      for (int i = 0; i < r; ++i) {
        double m1 = 0, m2 = 0;
        for (int j = 0; j < c; ++j) {
          std::size_t k = static_cast<std::size_t>(i) * c + j;
          double dxh = go[k] * tg2[static_cast<std::size_t>(j)];
          m1 += dxh;
          m2 += dxh * (*xhat)[k];
        }
        m1 /= c;
        m2 /= c;
        double isg = (*inv_sigma)[static_cast<std::size_t>(i)];
        for (int j = 0; j < c; ++j) {
          std::size_t k = static_cast<std::size_t>(i) * c + j;
          double dxh = go[k] * tg2[static_cast<std::size_t>(j)];
          gx[k] += (dxh - m1 - (*xhat)[k] * m2) * isg;
        }
      }
    }
  });
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  check_2d(ta, "matmul lhs");
  check_2d(tb, "matmul rhs");
  if (ta.dim(1) != tb.dim(0))
    throw ShapeMismatch("matmul: " + shape_str(ta.shape()) + " x " +
                        shape_str(tb.shape()));
  int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
  Tensor out({m, n});
  gemm(false, false, m, n, k, 1.0, ta.data(), k, tb.data(), n, 0.0, out.data(),
       n);
  bool req = requires_grad(a) || requires_grad(b);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "matmul", [a, b, m, k, n, self](Graph& g) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(a)) {
      double alpha = testing::backward_sign_flip ? -1.0 : 1.0;
      gemm(false, true, m, k, n, alpha, go.data(), n, g.val(b).data(), n, 1.0,
           g.grad_buf(a).data(), k);
    }
    if (g.requires_grad(b)) {
      gemm(true, false, k, n, m, 1.0, g.val(a).data(), k, go.data(), n, 1.0,
           g.grad_buf(b).data(), n);
    }
  });
}

NodeId Graph::attention(NodeId q, NodeId k, NodeId v, bool causal) {
  const Tensor& tq = val(q);
  const Tensor& tk = val(k);
  const Tensor& tv = val(v);
  check_2d(tq, "attention q");
  check_2d(tk, "attention k");
  check_2d(tv, "attention v");
  if (tq.dim(1) != tk.dim(1))
    throw ShapeMismatch("attention: q/k feature dims " +
                        shape_str(tq.shape()) + " vs " + shape_str(tk.shape()));
  if (tk.dim(0) != tv.dim(0))
    throw ShapeMismatch("attention: k/v sequence lengths " +
                        shape_str(tk.shape()) + " vs " + shape_str(tv.shape()));
  int sq = tq.dim(0), sk = tk.dim(0), d = tq.dim(1), dv = tv.dim(1);
  if (causal && sq != sk)
    throw ShapeMismatch("attention: causal mask needs square q/k lengths");
  double sc = 1.0 / std::sqrt(static_cast<double>(d));

  auto probs = std::make_shared<Tensor>(Shape{sq, sk});
  // scores
  gemm(false, true, sq, sk, d, sc, tq.data(), d, tk.data(), d, 0.0,
       probs->data(), sk);
  // row softmax; with causal mask only columns <= row enter the softmax
  for (int i = 0; i < sq; ++i) {
    double* row = probs->data() + static_cast<std::size_t>(i) * sk;
    int lim = causal ? i + 1 : sk;
    double mx = row[0];
    for (int j = 1; j < lim; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int j = 0; j < lim; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (int j = 0; j < lim; ++j) row[j] /= z;
    for (int j = lim; j < sk; ++j) row[j] = 0.0;
  }
  Tensor out({sq, dv});
  gemm(false, false, sq, dv, sk, 1.0, probs->data(), sk, tv.data(), dv, 0.0,
       out.data(), dv);

  bool req = requires_grad(q) || requires_grad(k) || requires_grad(v);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "attention",
              [q, k, v, probs, sq, sk, d, dv, sc, self](Graph& g) {
    const Tensor& go = g.grad(self);
    // dV += P^T dO
    if (g.requires_grad(v)) {
      gemm(true, false, sk, dv, sq, 1.0, probs->data(), sk, go.data(), dv, 1.0,
           g.grad_buf(v).data(), dv);
    }
    if (g.requires_grad(q) || g.requires_grad(k)) {
      // dP = dO V^T ; dS = P o (dP - rowsum(dP o P))
      Tensor ds({sq, sk});
      gemm(false, true, sq, sk, dv, 1.0, go.data(), dv, g.val(v).data(), dv,
           0.0, ds.data(), sk);
      for (int i = 0; i < sq; ++i) {
        double* dsr = ds.data() + static_cast<std::size_t>(i) * sk;
        const double* pr = probs->data() + static_cast<std::size_t>(i) * sk;
        double dot = 0;
        for (int j = 0; j < sk; ++j) dot += dsr[j] * pr[j];
        for (int j = 0; j < sk; ++j) dsr[j] = pr[j] * (dsr[j] - dot);
      }
      if (g.requires_grad(q))
        gemm(false, false, sq, d, sk, sc, ds.data(), sk, g.val(k).data(), d,
             1.0, g.grad_buf(q).data(), d);
      if (g.requires_grad(k))
        gemm(true, false, sk, d, sq, sc, ds.data(), sk, g.val(q).data(), d,
             1.0, g.grad_buf(k).data(), d);
    }
  });
}

NodeId Graph::reshape(NodeId x, Shape shape) {
  const Tensor& tx = val(x);
  if (numel(shape) != tx.size())
    throw ShapeMismatch("reshape: " + shape_str(tx.shape()) + " -> " +
                        shape_str(shape));
  Tensor out(std::move(shape), tx.vec());
  bool req = requires_grad(x);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "reshape", [x, self](Graph& g) {
    if (!g.requires_grad(x)) return;
    const Tensor& go = g.grad(self);
    Tensor& gx = g.grad_buf(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

NodeId Graph::slice_rows(NodeId x, int r0, int r1) {
  const Tensor& tx = val(x);
  check_2d(tx, "slice_rows");
  if (r0 < 0 || r1 > tx.dim(0) || r0 >= r1)
    throw IndexOutOfRange("slice_rows [" + std::to_string(r0) + "," +
                          std::to_string(r1) + ") of " + shape_str(tx.shape()));
  int c = tx.dim(1);
  Tensor out({r1 - r0, c});
  std::copy(tx.data() + static_cast<std::size_t>(r0) * c,
            tx.data() + static_cast<std::size_t>(r1) * c, out.data());
  bool req = requires_grad(x);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "slice_rows", [x, r0, c, self](Graph& g) {
    if (!g.requires_grad(x)) return;
    const Tensor& go = g.grad(self);
    Tensor& gx = g.grad_buf(x);
    double* dst = gx.data() + static_cast<std::size_t>(r0) * c;
    for (std::size_t i = 0; i < go.size(); ++i) dst[i] += go[i];
  });
}

NodeId Graph::slice_cols(NodeId x, int c0, int c1) {
  const Tensor& tx = val(x);
  check_2d(tx, "slice_cols");
  if (c0 < 0 || c1 > tx.dim(1) || c0 >= c1)
    throw IndexOutOfRange("slice_cols [" + std::to_string(c0) + "," +
                          std::to_string(c1) + ") of " + shape_str(tx.shape()));
  int r = tx.dim(0), c = tx.dim(1), w = c1 - c0;
  Tensor out({r, w});
  for (int i = 0; i < r; ++i)
    std::copy(tx.data() + static_cast<std::size_t>(i) * c + c0,
              tx.data() + static_cast<std::size_t>(i) * c + c1,
              out.data() + static_cast<std::size_t>(i) * w);
  bool req = requires_grad(x);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "slice_cols",
              [x, c0, r, c, w, self](Graph& g) {
    if (!g.requires_grad(x)) return;
    const Tensor& go = g.grad(self);
    Tensor& gx = g.grad_buf(x);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        gx[static_cast<std::size_t>(i) * c + c0 + j] +=
            go[static_cast<std::size_t>(i) * w + j];
  });
}

NodeId Graph::concat_rows(std::span<const NodeId> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no parts");
  int c = val(parts[0]).dim(1);
  int rt = 0;
  bool req = false;
  for (NodeId p : parts) {
    const Tensor& tp = val(p);
    check_2d(tp, "concat_rows");
    if (tp.dim(1) != c)
      throw ShapeMismatch("concat_rows: column mismatch " +
                          shape_str(tp.shape()));
    rt += tp.dim(0);
    req = req || requires_grad(p);
  }
  Tensor out({rt, c});
  int at = 0;
  for (NodeId p : parts) {
    const Tensor& tp = val(p);
    std::copy(tp.data(), tp.data() + tp.size(),
              out.data() + static_cast<std::size_t>(at) * c);
    at += tp.dim(0);
  }
  std::vector<NodeId> ps(parts.begin(), parts.end());
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "concat_rows", [ps, c, self](Graph& g) {
    const Tensor& go = g.grad(self);
    int at2 = 0;
    for (NodeId p : ps) {
      int rp = g.val(p).dim(0);
      if (g.requires_grad(p)) {
        Tensor& gp = g.grad_buf(p);
        const double* src = go.data() + static_cast<std::size_t>(at2) * c;
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
      }
      at2 += rp;
    }
  });
}

NodeId Graph::concat_cols(std::span<const NodeId> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no parts");
  int r = val(parts[0]).dim(0);
  int ct = 0;
  bool req = false;
  for (NodeId p : parts) {
    const Tensor& tp = val(p);
    check_2d(tp, "concat_cols");
    if (tp.dim(0) != r)
      throw ShapeMismatch("concat_cols: row mismatch " + shape_str(tp.shape()));
    ct += tp.dim(1);
    req = req || requires_grad(p);
  }
  Tensor out({r, ct});
  int at = 0;
  for (NodeId p : parts) {
    const Tensor& tp = val(p);
    int cp = tp.dim(1);
    for (int i = 0; i < r; ++i)
      std::copy(tp.data() + static_cast<std::size_t>(i) * cp,
                tp.data() + static_cast<std::size_t>(i + 1) * cp,
                out.data() + static_cast<std::size_t>(i) * ct + at);
    at += cp;
  }
  std::vector<NodeId> ps(parts.begin(), parts.end());
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "concat_cols", [ps, r, ct, self](Graph& g) {
    const Tensor& go = g.grad(self);
    int at2 = 0;
    for (NodeId p : ps) {
      int cp = g.val(p).dim(1);
      if (g.requires_grad(p)) {
        Tensor& gp = g.grad_buf(p);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < cp; ++j)
            gp[static_cast<std::size_t>(i) * cp + j] +=
                go[static_cast<std::size_t>(i) * ct + at2 + j];
      }
      at2 += cp;
    }
  });
}

NodeId Graph::gather_rows(NodeId table, std::vector<int> ids) {
  const Tensor& tt = val(table);
  check_2d(tt, "gather_rows");
  int v = tt.dim(0), d = tt.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw IndexOutOfRange("gather_rows: id " + std::to_string(id) +
                            " outside [0," + std::to_string(v) + ")");
  Tensor out({static_cast<int>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(tt.data() + static_cast<std::size_t>(ids[i]) * d,
              tt.data() + static_cast<std::size_t>(ids[i] + 1) * d,
              out.data() + i * static_cast<std::size_t>(d));
  bool req = requires_grad(table);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "gather_rows",
              [table, ids = std::move(ids), d, self](Graph& g) {
    if (!g.requires_grad(table)) return;
    const Tensor& go = g.grad(self);
    Tensor& gt = g.grad_buf(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const double* src = go.data() + i * static_cast<std::size_t>(d);
      double* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

NodeId Graph::sum_all(NodeId x) {
  const Tensor& tx = val(x);
  double s = 0;
  for (std::size_t i = 0; i < tx.size(); ++i) s += tx[i];
  bool req = requires_grad(x);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor({1}, {s}), req, "sum_all", [x, self](Graph& g) {
    if (!g.requires_grad(x)) return;
    double go = g.grad(self)[0];
    Tensor& gx = g.grad_buf(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
  });
}

NodeId Graph::mean_all(NodeId x) {
  const Tensor& tx = val(x);
  if (tx.size() == 0) throw ShapeMismatch("mean_all of empty tensor");
  double s = 0;
  for (std::size_t i = 0; i < tx.size(); ++i) s += tx[i];
  double inv = 1.0 / static_cast<double>(tx.size());
  bool req = requires_grad(x);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor({1}, {s * inv}), req, "mean_all", [x, inv, self](Graph& g) {
    if (!g.requires_grad(x)) return;
    double go = g.grad(self)[0] * inv;
    Tensor& gx = g.grad_buf(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
  });
}

NodeId Graph::mean_rows(NodeId x) {
  const Tensor& tx = val(x);
  check_2d(tx, "mean_rows");
  int r = tx.dim(0), c = tx.dim(1);
  if (r == 0) throw ShapeMismatch("mean_rows of zero rows");
  Tensor out({1, c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(j)] += tx[static_cast<std::size_t>(i) * c + j];
  for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j)] /= r;
  bool req = requires_grad(x);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "mean_rows", [x, r, c, self](Graph& g) {
    if (!g.requires_grad(x)) return;
    const Tensor& go = g.grad(self);
    Tensor& gx = g.grad_buf(x);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        gx[static_cast<std::size_t>(i) * c + j] +=
            go[static_cast<std::size_t>(j)] / r;
  });
}

NodeId Graph::softmax_rows(NodeId x) {
  const Tensor& tx = val(x);
  check_2d(tx, "softmax_rows");
  int r = tx.dim(0), c = tx.dim(1);
  Tensor out(tx.shape());
  for (int i = 0; i < r; ++i) {
    const double* row = tx.data() + static_cast<std::size_t>(i) * c;
    double* orow = out.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (int j = 0; j < c; ++j) orow[j] /= z;
  }
  bool req = requires_grad(x);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "softmax_rows", [x, r, c, self](Graph& g) {
    if (!g.requires_grad(x)) return;
    const Tensor& go = g.grad(self);
    const Tensor& p = g.val(self);
    Tensor& gx = g.grad_buf(x);
    for (int i = 0; i < r; ++i) {
      const double* pr = p.data() + static_cast<std::size_t>(i) * c;
      const double* gr = go.data() + static_cast<std::size_t>(i) * c;
      double dot = 0;
      for (int j = 0; j < c; ++j) dot += gr[j] * pr[j];
      for (int j = 0; j < c; ++j)
        gx[static_cast<std::size_t>(i) * c + j] += pr[j] * (gr[j] - dot);
    }
  });
}

NodeId Graph::softmax_cross_entropy(NodeId logits, int target) {
  const Tensor& tl = val(logits);
  if (tl.rank() != 1)
    throw ShapeMismatch("softmax_cross_entropy: logits must be 1-D, got " +
                        shape_str(tl.shape()));
  NodeId as_row = reshape(logits, {1, tl.dim(0)});
  return cross_entropy_rows(as_row, {target});
}

NodeId Graph::cross_entropy_rows(NodeId logits, std::vector<int> targets) {
  const Tensor& tl = val(logits);
  check_2d(tl, "cross_entropy_rows");
  int r = tl.dim(0), c = tl.dim(1);
  if (static_cast<int>(targets.size()) != r)
    throw ShapeMismatch("cross_entropy_rows: " + std::to_string(targets.size()) +
                        " targets for " + std::to_string(r) + " rows");
  for (int t : targets)
    if (t < 0 || t >= c)
      throw IndexOutOfRange("cross_entropy_rows: target " + std::to_string(t) +
                            " outside [0," + std::to_string(c) + ")");
  auto probs = std::make_shared<Tensor>(Shape{r, c});
  double loss = 0;
  for (int i = 0; i < r; ++i) {
    const double* row = tl.data() + static_cast<std::size_t>(i) * c;
    double* pr = probs->data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int j = 0; j < c; ++j) {
      pr[j] = std::exp(row[j] - mx);
      z += pr[j];
    }
    for (int j = 0; j < c; ++j) pr[j] /= z;
    loss += std::log(z) + mx - row[targets[static_cast<std::size_t>(i)]];
  }
  loss /= r;
  bool req = requires_grad(logits);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor({1}, {loss}), req, "cross_entropy_rows",
              [logits, targets = std::move(targets), probs, r, c,
               self](Graph& g) {
    if (!g.requires_grad(logits)) return;
    double go = g.grad(self)[0] / r;
    Tensor& gl = g.grad_buf(logits);
    for (int i = 0; i < r; ++i) {
      const double* pr = probs->data() + static_cast<std::size_t>(i) * c;
      double* gr = gl.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) gr[j] += go * pr[j];
      gr[targets[static_cast<std::size_t>(i)]] -= go;
    }
  });
}

NodeId Graph::l1_loss(NodeId pred, NodeId target) {
  const Tensor& tp = val(pred);
  const Tensor& tt = val(target);
  if (!tp.same_shape(tt))
    throw ShapeMismatch("l1_loss: " + shape_str(tp.shape()) + " vs " +
                        shape_str(tt.shape()));
  if (tp.size() == 0) throw ShapeMismatch("l1_loss of empty tensors");
  double s = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) s += std::abs(tp[i] - tt[i]);
  double inv = 1.0 / static_cast<double>(tp.size());
  bool req = requires_grad(pred) || requires_grad(target);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor({1}, {s * inv}), req, "l1_loss",
              [pred, target, inv, self](Graph& g) {
    double go = g.grad(self)[0] * inv;
    const Tensor& tp2 = g.val(pred);
    const Tensor& tt2 = g.val(target);
    auto sgn = [](double d) { return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0); };
    if (g.requires_grad(pred)) {
      Tensor& gp = g.grad_buf(pred);
      for (std::size_t i = 0; i < tp2.size(); ++i)
        gp[i] += go * sgn(tp2[i] - tt2[i]);
    }
    if (g.requires_grad(target)) {
      Tensor& gt = g.grad_buf(target);
      for (std::size_t i = 0; i < tp2.size(); ++i)
        gt[i] -= go * sgn(tp2[i] - tt2[i]);
    }
  });
}

NodeId Graph::quat_exp(NodeId w) {
  const Tensor& tw = val(w);
  if (tw.rank() != 1 || tw.dim(0) != 3)
    throw ShapeMismatch("quat_exp: expected [3], got " + shape_str(tw.shape()));
  double u = tw[0] * tw[0] + tw[1] * tw[1] + tw[2] * tw[2];
  double s, cw;
  if (u < 1e-8) {
    s = 0.5 - u / 48.0 + u * u / 3840.0;
    cw = 1.0 - u / 8.0 + u * u / 384.0;
  } else {
    double th = std::sqrt(u);
    s = std::sin(0.5 * th) / th;
    cw = std::cos(0.5 * th);
  }
  Tensor out({4}, {cw, s * tw[0], s * tw[1], s * tw[2]});
  bool req = requires_grad(w);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "quat_exp", [w, u, s, cw, self](Graph& g) {
    if (!g.requires_grad(w)) return;
    const Tensor& go = g.grad(self);
    const Tensor& tw2 = g.val(w);
    Tensor& gw = g.grad_buf(w);
    double gp = (u < 1e-8) ? (-1.0 / 48.0 + u / 1920.0)
                           : (cw / 4.0 - s / 2.0) / u;
    double du = go[0] * (-s / 4.0);
    for (int i = 0; i < 3; ++i) du += go[static_cast<std::size_t>(i) + 1] * tw2[static_cast<std::size_t>(i)] * gp;
    for (int i = 0; i < 3; ++i)
      gw[static_cast<std::size_t>(i)] +=
          go[static_cast<std::size_t>(i) + 1] * s + du * 2.0 * tw2[static_cast<std::size_t>(i)];
  });
}

NodeId Graph::quat_log(NodeId q) {
  const Tensor& tq = val(q);
  if (tq.rank() != 1 || tq.dim(0) != 4)
    throw ShapeMismatch("quat_log: expected [4], got " + shape_str(tq.shape()));
  double sign = tq[0] < 0 ? -1.0 : 1.0;
  double w = sign * tq[0];
  double v0 = sign * tq[1], v1 = sign * tq[2], v2 = sign * tq[3];
  double m2 = v0 * v0 + v1 * v1 + v2 * v2;
  double m = std::sqrt(m2);
  double h;
  if (m < 1e-3) {
    double w3 = w * w * w;
    h = 2.0 / w - 2.0 * m2 / (3.0 * w3) + 2.0 * m2 * m2 / (5.0 * w3 * w * w);
  } else {
    h = 2.0 * std::atan2(m, w) / m;
  }
  Tensor out({3}, {h * v0, h * v1, h * v2});
  bool req = requires_grad(q);
  NodeId self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), req, "quat_log",
              [q, sign, w, v0, v1, v2, m2, m, h, self](Graph& g) {
    if (!g.requires_grad(q)) return;
    const Tensor& go = g.grad(self);
    Tensor& gq = g.grad_buf(q);
    double n2 = w * w + m2;
    double p;
    if (m < 1e-3) {
      double w3 = w * w * w;
      p = -4.0 / (3.0 * w3) + 8.0 * m2 / (5.0 * w3 * w * w);
    } else {
      p = (2.0 * w / n2 - h) / m2;
    }
    double v[3] = {v0, v1, v2};
    double dv[3] = {0, 0, 0};
    double dw = 0;
    double gv = go[0] * v[0] + go[1] * v[1] + go[2] * v[2];
    for (int j = 0; j < 3; ++j) dv[j] = go[static_cast<std::size_t>(j)] * h + p * gv * v[j];
    dw = -2.0 * gv / n2;
    gq[0] += sign * dw;
    for (int j = 0; j < 3; ++j) gq[static_cast<std::size_t>(j) + 1] += sign * dv[j];
  });
}

NodeId Graph::stop_grad(NodeId x) {
  return push(val(x), false, "stop_grad", {});
}

void Graph::backward(NodeId loss) {
  check(loss);
  if (ran_backward_) throw Error("Graph::backward may run only once per graph");
  ran_backward_ = true;
  const Tensor& lv = val(loss);
  if (lv.size() != 1)
    throw ShapeMismatch("backward: loss must be scalar, got " +
                        shape_str(lv.shape()));
  grad_buf(loss)[0] = 1.0;
  for (std::int32_t i = loss.v; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.back || n.grad.empty()) continue;
    n.back(*this);
  }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

double gradient_check(const std::function<GradCheckSetup(Graph&)>& build,
                      std::span<Tensor* const> params, double h) {
  Graph g;
  GradCheckSetup setup = build(g);
  if (setup.params.size() != params.size())
    throw ShapeMismatch("gradient_check: node/storage count mismatch");
  const Tensor& lv = g.value(setup.loss);
  if (lv.size() != 1)
    throw ShapeMismatch("gradient_check: loss must be scalar");
  if (!std::isfinite(lv[0]))
    throw NonFiniteValue("gradient_check: loss is not finite");
  g.backward(setup.loss);

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (g.has_grad(setup.params[i])) {
      analytic.push_back(g.grad(setup.params[i]));
      if (!analytic.back().all_finite())
        throw NonFiniteValue("gradient_check: analytic gradient not finite");
    } else {
      analytic.push_back(Tensor(params[i]->shape()));
    }
  }

  auto eval_loss = [&]() -> double {
    Graph gf;
    GradCheckSetup s = build(gf);
    double v = gf.value(s.loss)[0];
    if (!std::isfinite(v))
      throw NonFiniteValue("gradient_check: perturbed loss is not finite");
    return v;
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    for (std::size_t e = 0; e < p.size(); ++e) {
      double orig = p[e];
      p[e] = orig + h;
      double fp = eval_loss();
      p[e] = orig - h;
      double fm = eval_loss();
      p[e] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = analytic[i][e];
      double err =
          std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace lilac::num
