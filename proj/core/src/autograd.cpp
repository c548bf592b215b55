#include "roboenv/autograd.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <unordered_set>

namespace roboenv::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

namespace {

std::shared_ptr<Var::Node> new_node(Tensor val) {
  auto n = std::make_shared<Var::Node>();
  n->val = std::move(val);
  return n;
}

bool any_requires(const std::vector<Var>& ps) {
  for (const auto& p : ps)
    if (p.requires_grad()) return true;
  return false;
}

Var make_op(Tensor val, std::vector<Var> parents, std::function<void(Var::Node&)> backfn) {
  auto n = new_node(std::move(val));
  n->requires_grad = any_requires(parents);
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
  }
  return Var(n);
}

void acc(Var& p, const Tensor& delta) {
  if (!p.requires_grad()) return;
  Tensor& g = p.grad();
  const long n = g.numel();
  double* gp = g.data();
  const double* dp = delta.data();
  for (long i = 0; i < n; ++i) gp[i] += dp[i];
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.val().same_shape(b.val()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.val().shape_str() + " vs " +
                                b.val().shape_str());
}

}  // namespace

Var leaf(Tensor t) {
  auto n = new_node(std::move(t));
  n->requires_grad = true;
  return Var(n);
}

Var cvar(Tensor t) { return Var(new_node(std::move(t))); }

void backward(const Var& root) {
  if (root.val().numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root.requires_grad()) return;

  // iterative post-order DFS
  std::vector<Var::Node*> order;
  std::unordered_set<Var::Node*> seen;
  struct Frame {
    Var::Node* n;
    size_t next = 0;
  };
  std::vector<Frame> stack{{root.node()}};
  seen.insert(root.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Var::Node* p = f.n->parents[f.next++].node();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  root.node()->g().v[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Var::Node* n = *it;
    if (n->backfn) {
      n->g();  // ensure allocated even if unreached (propagates zeros)
      n->backfn(*n);
    }
  }
}

// ===== elementwise =====

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a.val();
  const double* bp = b.val().data();
  for (long i = 0; i < out.numel(); ++i) out.v[i] += bp[i];
  return make_op(std::move(out), {a, b}, [](Var::Node& n) {
    acc(n.parents[0], n.grad);
    acc(n.parents[1], n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a.val();
  const double* bp = b.val().data();
  for (long i = 0; i < out.numel(); ++i) out.v[i] -= bp[i];
  return make_op(std::move(out), {a, b}, [](Var::Node& n) {
    acc(n.parents[0], n.grad);
    if (n.parents[1].requires_grad()) {
      Tensor& g = n.parents[1].grad();
      for (long i = 0; i < g.numel(); ++i) g.v[i] -= n.grad.v[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a.val();
  const double* bp = b.val().data();
  for (long i = 0; i < out.numel(); ++i) out.v[i] *= bp[i];
  return make_op(std::move(out), {a, b}, [av = a.val(), bv = b.val()](Var::Node& n) {
    if (n.parents[0].requires_grad()) {
      Tensor& g = n.parents[0].grad();
      for (long i = 0; i < g.numel(); ++i) g.v[i] += n.grad.v[i] * bv.v[i];
    }
    if (n.parents[1].requires_grad()) {
      Tensor& g = n.parents[1].grad();
      for (long i = 0; i < g.numel(); ++i) g.v[i] += n.grad.v[i] * av.v[i];
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out = a.val();
  for (auto& x : out.v) x *= c;
  return make_op(std::move(out), {a}, [c](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (long i = 0; i < g.numel(); ++i) g.v[i] += c * n.grad.v[i];
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a.val();
  for (auto& x : out.v) x += c;
  return make_op(std::move(out), {a}, [](Var::Node& n) { acc(n.parents[0], n.grad); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var badd(const Var& x, const Var& m) {
  const long mn = m.val().numel();
  const long xn = x.val().numel();
  if (mn == 0 || xn % mn != 0)
    throw std::invalid_argument("badd: trailing shape mismatch " + x.val().shape_str() + " vs " +
                                m.val().shape_str());
  Tensor out = x.val();
  const double* mp = m.val().data();
  for (long i = 0; i < xn; ++i) out.v[i] += mp[i % mn];
  return make_op(std::move(out), {x, m}, [mn](Var::Node& n) {
    acc(n.parents[0], n.grad);
    if (n.parents[1].requires_grad()) {
      Tensor& g = n.parents[1].grad();
      for (long i = 0; i < n.grad.numel(); ++i) g.v[i % mn] += n.grad.v[i];
    }
  });
}

// ===== matmul family =====

Var matmul(const Var& a, const Var& b) {
  const auto& A = a.val();
  const auto& B = b.val();
  if (A.ndim() != 2 || B.ndim() != 2 || A.shape[1] != B.shape[0])
    throw std::invalid_argument("matmul: bad shapes " + A.shape_str() + " x " + B.shape_str());
  const long M = A.shape[0], K = A.shape[1], N = B.shape[1];
  Tensor out({M, N});
  MapM(out.data(), M, N) = CMapM(A.data(), M, K) * CMapM(B.data(), K, N);
  return make_op(std::move(out), {a, b}, [M, K, N, av = a.val(), bv = b.val()](Var::Node& n) {
    CMapM G(n.grad.data(), M, N);
    if (n.parents[0].requires_grad())
      MapM(n.parents[0].grad().data(), M, K) += G * CMapM(bv.data(), K, N).transpose();
    if (n.parents[1].requires_grad())
      MapM(n.parents[1].grad().data(), K, N) += CMapM(av.data(), M, K).transpose() * G;
  });
}

Var bmm(const Var& a, const Var& b) {
  const auto& A = a.val();
  const auto& B = b.val();
  if (A.ndim() != 3 || B.ndim() != 3 || A.shape[0] != B.shape[0] || A.shape[2] != B.shape[1])
    throw std::invalid_argument("bmm: bad shapes " + A.shape_str() + " x " + B.shape_str());
  const long G = A.shape[0], M = A.shape[1], K = A.shape[2], N = B.shape[2];
  Tensor out({G, M, N});
  for (long g = 0; g < G; ++g)
    MapM(out.data() + g * M * N, M, N) =
        CMapM(A.data() + g * M * K, M, K) * CMapM(B.data() + g * K * N, K, N);
  return make_op(std::move(out), {a, b}, [G, M, K, N, av = a.val(), bv = b.val()](Var::Node& n) {
    for (long g = 0; g < G; ++g) {
      CMapM Gg(n.grad.data() + g * M * N, M, N);
      if (n.parents[0].requires_grad())
        MapM(n.parents[0].grad().data() + g * M * K, M, K) +=
            Gg * CMapM(bv.data() + g * K * N, K, N).transpose();
      if (n.parents[1].requires_grad())
        MapM(n.parents[1].grad().data() + g * K * N, K, N) +=
            CMapM(av.data() + g * M * K, M, K).transpose() * Gg;
    }
  });
}

Var bmm_nt(const Var& a, const Var& b) {
  const auto& A = a.val();
  const auto& B = b.val();
  if (A.ndim() != 3 || B.ndim() != 3 || A.shape[0] != B.shape[0] || A.shape[2] != B.shape[2])
    throw std::invalid_argument("bmm_nt: bad shapes " + A.shape_str() + " x " + B.shape_str());
  const long G = A.shape[0], M = A.shape[1], K = A.shape[2], N = B.shape[1];
  Tensor out({G, M, N});
  for (long g = 0; g < G; ++g)
    MapM(out.data() + g * M * N, M, N) =
        CMapM(A.data() + g * M * K, M, K) * CMapM(B.data() + g * N * K, N, K).transpose();
  return make_op(std::move(out), {a, b}, [G, M, K, N, av = a.val(), bv = b.val()](Var::Node& n) {
    for (long g = 0; g < G; ++g) {
      CMapM Gg(n.grad.data() + g * M * N, M, N);
      if (n.parents[0].requires_grad())
        MapM(n.parents[0].grad().data() + g * M * K, M, K) += Gg * CMapM(bv.data() + g * N * K, N, K);
      if (n.parents[1].requires_grad())
        MapM(n.parents[1].grad().data() + g * N * K, N, K) +=
            Gg.transpose() * CMapM(av.data() + g * M * K, M, K);
    }
  });
}

Var linear(const Var& x, const Var& W, const Var& b) {
  const auto& X = x.val();
  const auto& Wt = W.val();
  if (Wt.ndim() != 2 || X.shape.back() != Wt.shape[1])
    throw std::invalid_argument("linear: bad shapes " + X.shape_str() + " W " + Wt.shape_str());
  const long in = Wt.shape[1], out_dim = Wt.shape[0];
  const long rows = X.numel() / in;
  std::vector<long> oshape = X.shape;
  oshape.back() = out_dim;
  Tensor out(oshape);
  MapM(out.data(), rows, out_dim) =
      CMapM(X.data(), rows, in) * CMapM(Wt.data(), out_dim, in).transpose();
  if (b.defined()) {
    const double* bp = b.val().data();
    for (long r = 0; r < rows; ++r)
      for (long j = 0; j < out_dim; ++j) out.v[r * out_dim + j] += bp[j];
  }
  std::vector<Var> parents{x, W};
  if (b.defined()) parents.push_back(b);
  return make_op(std::move(out), std::move(parents),
                 [rows, in, out_dim, xv = x.val(), wv = W.val()](Var::Node& n) {
                   CMapM G(n.grad.data(), rows, out_dim);
                   if (n.parents[0].requires_grad())
                     MapM(n.parents[0].grad().data(), rows, in) += G * CMapM(wv.data(), out_dim, in);
                   if (n.parents[1].requires_grad())
                     MapM(n.parents[1].grad().data(), out_dim, in) +=
                         G.transpose() * CMapM(xv.data(), rows, in);
                   if (n.parents.size() > 2 && n.parents[2].requires_grad()) {
                     Tensor& gb = n.parents[2].grad();
                     for (long r = 0; r < rows; ++r)
                       for (long j = 0; j < out_dim; ++j) gb.v[j] += n.grad.v[r * out_dim + j];
                   }
                 });
}

// ===== shape ops =====

Var reshape(const Var& x, std::vector<long> shape) {
  Tensor out = x.val().reshaped(std::move(shape));
  return make_op(std::move(out), {x}, [](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (long i = 0; i < g.numel(); ++i) g.v[i] += n.grad.v[i];
  });
}

namespace {

Tensor permute_tensor(const Tensor& in, const std::vector<int>& axes) {
  const int nd = in.ndim();
  if (static_cast<int>(axes.size()) != nd) throw std::invalid_argument("permute: rank mismatch");
  std::vector<long> oshape(nd), istrides(nd, 1), ostrides_in(nd);
  for (int i = nd - 2; i >= 0; --i) istrides[i] = istrides[i + 1] * in.shape[i + 1];
  for (int i = 0; i < nd; ++i) oshape[i] = in.shape[axes[i]];
  for (int i = 0; i < nd; ++i) ostrides_in[i] = istrides[axes[i]];
  Tensor out(oshape);
  const long n = out.numel();
  std::vector<long> idx(nd, 0);
  long src = 0;
  for (long o = 0; o < n; ++o) {
    out.v[o] = in.v[src];
    for (int d = nd - 1; d >= 0; --d) {
      if (++idx[d] < oshape[d]) {
        src += ostrides_in[d];
        break;
      }
      src -= ostrides_in[d] * (oshape[d] - 1);
      idx[d] = 0;
    }
  }
  return out;
}

std::vector<int> inverse_axes(const std::vector<int>& axes) {
  std::vector<int> inv(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = static_cast<int>(i);
  return inv;
}

}  // namespace

Var permute(const Var& x, const std::vector<int>& axes) {
  Tensor out = permute_tensor(x.val(), axes);
  return make_op(std::move(out), {x}, [axes](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor back = permute_tensor(n.grad, inverse_axes(axes));
    acc(n.parents[0], back);
  });
}

namespace {
void axis_spans(const Tensor& t, int axis, long& outer, long& mid, long& inner) {
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= t.shape[i];
  mid = t.shape[axis];
  inner = 1;
  for (int i = axis + 1; i < t.ndim(); ++i) inner *= t.shape[i];
}
}  // namespace

Var slice(const Var& x, int axis, long start, long len) {
  const Tensor& in = x.val();
  if (axis < 0) axis += in.ndim();
  if (start < 0 || start + len > in.shape[axis]) throw std::invalid_argument("slice: out of range");
  long outer, mid, inner;
  axis_spans(in, axis, outer, mid, inner);
  std::vector<long> oshape = in.shape;
  oshape[axis] = len;
  Tensor out(oshape);
  for (long o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, in.data() + (o * mid + start) * inner,
                sizeof(double) * static_cast<size_t>(len * inner));
  return make_op(std::move(out), {x}, [axis, start, len, outer, mid, inner](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (long o = 0; o < outer; ++o) {
      double* gp = g.data() + (o * mid + start) * inner;
      const double* dp = n.grad.data() + o * len * inner;
      for (long i = 0; i < len * inner; ++i) gp[i] += dp[i];
    }
  });
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: empty");
  const Tensor& first = xs[0].val();
  int nd = first.ndim();
  if (axis < 0) axis += nd;
  long total = 0;
  for (const auto& x : xs) {
    if (x.val().ndim() != nd) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && x.val().shape[i] != first.shape[i])
        throw std::invalid_argument("concat: shape mismatch");
    total += x.val().shape[axis];
  }
  std::vector<long> oshape = first.shape;
  oshape[axis] = total;
  Tensor out(oshape);
  long outer, mid_out, inner;
  axis_spans(out, axis, outer, mid_out, inner);
  std::vector<long> offsets(xs.size());
  long off = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    offsets[i] = off;
    long mid = xs[i].val().shape[axis];
    for (long o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * mid_out + off) * inner, xs[i].val().data() + o * mid * inner,
                  sizeof(double) * static_cast<size_t>(mid * inner));
    off += mid;
  }
  std::vector<long> mids(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) mids[i] = xs[i].val().shape[axis];
  return make_op(std::move(out), xs, [outer, mid_out, inner, offsets, mids](Var::Node& n) {
    for (size_t i = 0; i < n.parents.size(); ++i) {
      if (!n.parents[i].requires_grad()) continue;
      Tensor& g = n.parents[i].grad();
      for (long o = 0; o < outer; ++o) {
        double* gp = g.data() + o * mids[i] * inner;
        const double* dp = n.grad.data() + (o * mid_out + offsets[i]) * inner;
        for (long j = 0; j < mids[i] * inner; ++j) gp[j] += dp[j];
      }
    }
  });
}

// ===== normalization / softmax =====

Var softmax_lastdim(const Var& x) {
  const Tensor& in = x.val();
  const long D = in.shape.back();
  const long rows = in.numel() / D;
  Tensor out(in.shape);
  for (long r = 0; r < rows; ++r) {
    const double* xp = in.data() + r * D;
    double* yp = out.data() + r * D;
    double mx = xp[0];
    for (long j = 1; j < D; ++j) mx = std::max(mx, xp[j]);
    double sum = 0.0;
    for (long j = 0; j < D; ++j) {
      yp[j] = std::exp(xp[j] - mx);
      sum += yp[j];
    }
    const double inv = 1.0 / sum;
    for (long j = 0; j < D; ++j) yp[j] *= inv;
  }
  return make_op(std::move(out), {x}, [D, rows, y = out](Var::Node& n) {
    // captured y is a copy of the forward output
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (long r = 0; r < rows; ++r) {
      const double* gp = n.grad.data() + r * D;
      const double* yp = y.data() + r * D;
      double dot = 0.0;
      for (long j = 0; j < D; ++j) dot += gp[j] * yp[j];
      double* out_g = g.data() + r * D;
      for (long j = 0; j < D; ++j) out_g[j] += yp[j] * (gp[j] - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& in = x.val();
  const long D = in.shape.back();
  const long rows = in.numel() / D;
  Tensor out(in.shape), xhat(in.shape), inv_std({rows});
  const double* gp = gain.val().data();
  const double* bp = bias.val().data();
  for (long r = 0; r < rows; ++r) {
    const double* xp = in.data() + r * D;
    double mu = 0.0;
    for (long j = 0; j < D; ++j) mu += xp[j];
    mu /= D;
    double var = 0.0;
    for (long j = 0; j < D; ++j) var += (xp[j] - mu) * (xp[j] - mu);
    var /= D;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std.v[r] = is;
    for (long j = 0; j < D; ++j) {
      double h = (xp[j] - mu) * is;
      xhat.v[r * D + j] = h;
      out.v[r * D + j] = gp[j] * h + bp[j];
    }
  }
  return make_op(std::move(out), {x, gain, bias},
                 [D, rows, xh = std::move(xhat), is = std::move(inv_std), gv = gain.val()](Var::Node& n) {
                   for (long r = 0; r < rows; ++r) {
                     const double* gr = n.grad.data() + r * D;
                     const double* xr = xh.data() + r * D;
                     if (n.parents[1].requires_grad() || n.parents[2].requires_grad()) {
                       Tensor& gg = n.parents[1].grad();
                       Tensor& gb = n.parents[2].grad();
                       for (long j = 0; j < D; ++j) {
                         gg.v[j] += gr[j] * xr[j];
                         gb.v[j] += gr[j];
                       }
                     }
                     if (n.parents[0].requires_grad()) {
                       double m1 = 0.0, m2 = 0.0;
                       for (long j = 0; j < D; ++j) {
                         const double dxh = gr[j] * gv.v[j];
                         m1 += dxh;
                         m2 += dxh * xr[j];
                       }
                       m1 /= D;
                       m2 /= D;
                       Tensor& gx = n.parents[0].grad();
                       for (long j = 0; j < D; ++j) {
                         const double dxh = gr[j] * gv.v[j];
                         gx.v[r * D + j] += (dxh - m1 - xr[j] * m2) * is.v[r];
                       }
                     }
                   }
                 });
}

Var group_norm(const Var& x, int groups, const Var& gain, const Var& bias, double eps) {
  const Tensor& in = x.val();
  if (in.ndim() != 4) throw std::invalid_argument("group_norm: expected (B,C,H,W)");
  const long B = in.shape[0], C = in.shape[1], HW = in.shape[2] * in.shape[3];
  if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
  const long cg = C / groups;
  const long gsz = cg * HW;
  Tensor out(in.shape), xhat(in.shape), inv_std({B * groups});
  const double* gp = gain.val().data();
  const double* bp = bias.val().data();
  for (long b = 0; b < B; ++b) {
    for (long g = 0; g < groups; ++g) {
      const double* xp = in.data() + (b * C + g * cg) * HW;
      double mu = 0.0;
      for (long i = 0; i < gsz; ++i) mu += xp[i];
      mu /= gsz;
      double var = 0.0;
      for (long i = 0; i < gsz; ++i) var += (xp[i] - mu) * (xp[i] - mu);
      var /= gsz;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std.v[b * groups + g] = is;
      double* hp = xhat.data() + (b * C + g * cg) * HW;
      double* op = out.data() + (b * C + g * cg) * HW;
      for (long c = 0; c < cg; ++c) {
        const double gamma = gp[g * cg + c], beta = bp[g * cg + c];
        for (long i = 0; i < HW; ++i) {
          const double h = (xp[c * HW + i] - mu) * is;
          hp[c * HW + i] = h;
          op[c * HW + i] = gamma * h + beta;
        }
      }
    }
  }
  return make_op(
      std::move(out), {x, gain, bias},
      [B, C, HW, groups, cg, gsz, xh = std::move(xhat), is = std::move(inv_std), gv = gain.val()](Var::Node& n) {
        for (long b = 0; b < B; ++b) {
          for (long g = 0; g < groups; ++g) {
            const double* gr = n.grad.data() + (b * C + g * cg) * HW;
            const double* xr = xh.data() + (b * C + g * cg) * HW;
            if (n.parents[1].requires_grad() || n.parents[2].requires_grad()) {
              Tensor& gg = n.parents[1].grad();
              Tensor& gb = n.parents[2].grad();
              for (long c = 0; c < cg; ++c)
                for (long i = 0; i < HW; ++i) {
                  gg.v[g * cg + c] += gr[c * HW + i] * xr[c * HW + i];
                  gb.v[g * cg + c] += gr[c * HW + i];
                }
            }
            if (n.parents[0].requires_grad()) {
              double m1 = 0.0, m2 = 0.0;
              for (long c = 0; c < cg; ++c) {
                const double gamma = gv.v[g * cg + c];
                for (long i = 0; i < HW; ++i) {
                  const double dxh = gr[c * HW + i] * gamma;
                  m1 += dxh;
                  m2 += dxh * xr[c * HW + i];
                }
              }
              m1 /= gsz;
              m2 /= gsz;
              Tensor& gx = n.parents[0].grad();
              double* gxp = gx.data() + (b * C + g * cg) * HW;
              const double isv = is.v[b * groups + g];
              for (long c = 0; c < cg; ++c) {
                const double gamma = gv.v[g * cg + c];
                for (long i = 0; i < HW; ++i) {
                  const double dxh = gr[c * HW + i] * gamma;
                  gxp[c * HW + i] += (dxh - m1 - xr[c * HW + i] * m2) * isv;
                }
              }
            }
          }
        }
      });
}

// ===== conv =====

namespace {

struct ConvDims {
  long B, Cin, H, W, Cout, kh, kw, Ho, Wo;
  int stride, pad;
};

void im2col(const double* x, const ConvDims& d, long b, double* col) {
  // col: (Ho*Wo, Cin*kh*kw)
  const long K = d.Cin * d.kh * d.kw;
  for (long ho = 0; ho < d.Ho; ++ho) {
    for (long wo = 0; wo < d.Wo; ++wo) {
      double* cp = col + (ho * d.Wo + wo) * K;
      for (long c = 0; c < d.Cin; ++c) {
        for (long i = 0; i < d.kh; ++i) {
          const long hi = ho * d.stride - d.pad + i;
          for (long j = 0; j < d.kw; ++j) {
            const long wi = wo * d.stride - d.pad + j;
            double vv = 0.0;
            if (hi >= 0 && hi < d.H && wi >= 0 && wi < d.W)
              vv = x[((b * d.Cin + c) * d.H + hi) * d.W + wi];
            cp[(c * d.kh + i) * d.kw + j] = vv;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, const ConvDims& d, long b, double* gx) {
  const long K = d.Cin * d.kh * d.kw;
  for (long ho = 0; ho < d.Ho; ++ho) {
    for (long wo = 0; wo < d.Wo; ++wo) {
      const double* cp = col + (ho * d.Wo + wo) * K;
      for (long c = 0; c < d.Cin; ++c) {
        for (long i = 0; i < d.kh; ++i) {
          const long hi = ho * d.stride - d.pad + i;
          if (hi < 0 || hi >= d.H) continue;
          for (long j = 0; j < d.kw; ++j) {
            const long wi = wo * d.stride - d.pad + j;
            if (wi < 0 || wi >= d.W) continue;
            gx[((b * d.Cin + c) * d.H + hi) * d.W + wi] += cp[(c * d.kh + i) * d.kw + j];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& W, const Var& b, int stride, int pad) {
  const Tensor& X = x.val();
  const Tensor& Wt = W.val();
  if (X.ndim() != 4 || Wt.ndim() != 4 || X.shape[1] != Wt.shape[1])
    throw std::invalid_argument("conv2d: bad shapes " + X.shape_str() + " W " + Wt.shape_str());
  ConvDims d;
  d.B = X.shape[0];
  d.Cin = X.shape[1];
  d.H = X.shape[2];
  d.W = X.shape[3];
  d.Cout = Wt.shape[0];
  d.kh = Wt.shape[2];
  d.kw = Wt.shape[3];
  d.stride = stride;
  d.pad = pad;
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  const long K = d.Cin * d.kh * d.kw;
  const long P = d.Ho * d.Wo;

  Tensor out({d.B, d.Cout, d.Ho, d.Wo});
  std::vector<double> col(static_cast<size_t>(P * K));
  std::vector<double> ymat(static_cast<size_t>(P * d.Cout));
  const double* bp = b.defined() ? b.val().data() : nullptr;
  for (long bb = 0; bb < d.B; ++bb) {
    im2col(X.data(), d, bb, col.data());
    MapM(ymat.data(), P, d.Cout) =
        CMapM(col.data(), P, K) * CMapM(Wt.data(), d.Cout, K).transpose();
    for (long co = 0; co < d.Cout; ++co) {
      double* op = out.data() + (bb * d.Cout + co) * P;
      const double bias_v = bp ? bp[co] : 0.0;
      for (long p = 0; p < P; ++p) op[p] = ymat[static_cast<size_t>(p * d.Cout + co)] + bias_v;
    }
  }
  std::vector<Var> parents{x, W};
  if (b.defined()) parents.push_back(b);
  return make_op(std::move(out), std::move(parents), [d, K, P, xv = x.val(), wv = W.val()](Var::Node& n) {
    std::vector<double> col(static_cast<size_t>(P * K));
    std::vector<double> gymat(static_cast<size_t>(P * d.Cout));
    std::vector<double> gcol(static_cast<size_t>(P * K));
    const bool need_x = n.parents[0].requires_grad();
    const bool need_w = n.parents[1].requires_grad();
    const bool need_b = n.parents.size() > 2 && n.parents[2].requires_grad();
    for (long bb = 0; bb < d.B; ++bb) {
      for (long co = 0; co < d.Cout; ++co) {
        const double* gp = n.grad.data() + (bb * d.Cout + co) * P;
        for (long p = 0; p < P; ++p) gymat[static_cast<size_t>(p * d.Cout + co)] = gp[p];
      }
      if (need_w || need_x) im2col(xv.data(), d, bb, col.data());
      if (need_w)
        MapM(n.parents[1].grad().data(), d.Cout, K) +=
            CMapM(gymat.data(), P, d.Cout).transpose() * CMapM(col.data(), P, K);
      if (need_x) {
        MapM(gcol.data(), P, K) = CMapM(gymat.data(), P, d.Cout) * CMapM(wv.data(), d.Cout, K);
        col2im_acc(gcol.data(), d, bb, n.parents[0].grad().data());
      }
      if (need_b) {
        Tensor& gb = n.parents[2].grad();
        for (long co = 0; co < d.Cout; ++co) {
          const double* gp = n.grad.data() + (bb * d.Cout + co) * P;
          double s = 0.0;
          for (long p = 0; p < P; ++p) s += gp[p];
          gb.v[co] += s;
        }
      }
    }
  });
}

Var upsample_nearest2(const Var& x) {
  const Tensor& X = x.val();
  if (X.ndim() != 4) throw std::invalid_argument("upsample_nearest2: expected (B,C,H,W)");
  const long B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  Tensor out({B, C, 2 * H, 2 * W});
  for (long bc = 0; bc < B * C; ++bc) {
    const double* xp = X.data() + bc * H * W;
    double* op = out.data() + bc * 4 * H * W;
    for (long i = 0; i < H; ++i)
      for (long j = 0; j < W; ++j) {
        const double vv = xp[i * W + j];
        op[(2 * i) * 2 * W + 2 * j] = vv;
        op[(2 * i) * 2 * W + 2 * j + 1] = vv;
        op[(2 * i + 1) * 2 * W + 2 * j] = vv;
        op[(2 * i + 1) * 2 * W + 2 * j + 1] = vv;
      }
  }
  return make_op(std::move(out), {x}, [B, C, H, W](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (long bc = 0; bc < B * C; ++bc) {
      double* gp = g.data() + bc * H * W;
      const double* dp = n.grad.data() + bc * 4 * H * W;
      for (long i = 0; i < H; ++i)
        for (long j = 0; j < W; ++j)
          gp[i * W + j] += dp[(2 * i) * 2 * W + 2 * j] + dp[(2 * i) * 2 * W + 2 * j + 1] +
                           dp[(2 * i + 1) * 2 * W + 2 * j] + dp[(2 * i + 1) * 2 * W + 2 * j + 1];
    }
  });
}

Var mean_hw(const Var& x) {
  const Tensor& X = x.val();
  if (X.ndim() != 4) throw std::invalid_argument("mean_hw: expected (B,C,H,W)");
  const long B = X.shape[0], C = X.shape[1], HW = X.shape[2] * X.shape[3];
  Tensor out({B, C});
  for (long bc = 0; bc < B * C; ++bc) {
    const double* xp = X.data() + bc * HW;
    double s = 0.0;
    for (long i = 0; i < HW; ++i) s += xp[i];
    out.v[bc] = s / HW;
  }
  return make_op(std::move(out), {x}, [B, C, HW](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (long bc = 0; bc < B * C; ++bc) {
      const double d = n.grad.v[bc] / HW;
      double* gp = g.data() + bc * HW;
      for (long i = 0; i < HW; ++i) gp[i] += d;
    }
  });
}

// ===== activations =====

Var silu(const Var& x) {
  Tensor out = x.val();
  for (auto& vv : out.v) {
    const double s = 1.0 / (1.0 + std::exp(-vv));
    vv = vv * s;
  }
  return make_op(std::move(out), {x}, [xv = x.val()](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (long i = 0; i < g.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv.v[i]));
      g.v[i] += n.grad.v[i] * s * (1.0 + xv.v[i] * (1.0 - s));
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.val();
  for (auto& vv : out.v) vv = vv > 0.0 ? vv : 0.0;
  return make_op(std::move(out), {x}, [xv = x.val()](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (long i = 0; i < g.numel(); ++i)
      if (xv.v[i] > 0.0) g.v[i] += n.grad.v[i];
  });
}

Var tanh_(const Var& x) {
  Tensor out = x.val();
  for (auto& vv : out.v) vv = std::tanh(vv);
  return make_op(std::move(out), {x}, [y = out](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (long i = 0; i < g.numel(); ++i) g.v[i] += n.grad.v[i] * (1.0 - y.v[i] * y.v[i]);
  });
}

Var sigmoid_(const Var& x) {
  Tensor out = x.val();
  for (auto& vv : out.v) vv = 1.0 / (1.0 + std::exp(-vv));
  return make_op(std::move(out), {x}, [y = out](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (long i = 0; i < g.numel(); ++i) g.v[i] += n.grad.v[i] * y.v[i] * (1.0 - y.v[i]);
  });
}

// ===== embedding / reductions / losses =====

Var embedding(const std::vector<long>& ids, const Var& table) {
  const Tensor& T = table.val();
  if (T.ndim() != 2) throw std::invalid_argument("embedding: table must be 2D");
  const long V = T.shape[0], D = T.shape[1];
  Tensor out({static_cast<long>(ids.size()), D});
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= V) throw std::out_of_range("embedding: id out of range");
    std::memcpy(out.data() + static_cast<long>(i) * D, T.data() + ids[i] * D,
                sizeof(double) * static_cast<size_t>(D));
  }
  return make_op(std::move(out), {table}, [ids, D](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      double* gp = g.data() + ids[i] * D;
      const double* dp = n.grad.data() + static_cast<long>(i) * D;
      for (long j = 0; j < D; ++j) gp[j] += dp[j];
    }
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double vv : x.val().v) s += vv;
  return make_op(Tensor::scalar(s), {x}, [](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    const double d = n.grad.v[0];
    for (auto& vv : g.v) vv += d;
  });
}

Var mean_all(const Var& x) {
  const long n_el = x.val().numel();
  double s = 0.0;
  for (double vv : x.val().v) s += vv;
  return make_op(Tensor::scalar(s / n_el), {x}, [n_el](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    const double d = n.grad.v[0] / n_el;
    for (auto& vv : g.v) vv += d;
  });
}

Var mse_loss(const Var& pred, const Tensor& target) {
  if (!pred.val().same_shape(target)) throw std::invalid_argument("mse_loss: shape mismatch");
  const long n_el = target.numel();
  double s = 0.0;
  for (long i = 0; i < n_el; ++i) {
    const double d = pred.val().v[i] - target.v[i];
    s += d * d;
  }
  return make_op(Tensor::scalar(s / n_el), {pred}, [t = target, n_el](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    const double c = 2.0 * n.grad.v[0] / n_el;
    const Tensor& pv = n.parents[0].val();
    for (long i = 0; i < n_el; ++i) g.v[i] += c * (pv.v[i] - t.v[i]);
  });
}

Var bce_logits_loss(const Var& logits, const Tensor& targets) {
  if (!logits.val().same_shape(targets)) throw std::invalid_argument("bce_logits_loss: shape mismatch");
  const long n_el = targets.numel();
  double s = 0.0;
  for (long i = 0; i < n_el; ++i) {
    const double z = logits.val().v[i], y = targets.v[i];
    s += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return make_op(Tensor::scalar(s / n_el), {logits}, [t = targets, n_el](Var::Node& n) {
    if (!n.parents[0].requires_grad()) return;
    Tensor& g = n.parents[0].grad();
    const double c = n.grad.v[0] / n_el;
    const Tensor& z = n.parents[0].val();
    for (long i = 0; i < n_el; ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-z.v[i]));
      g.v[i] += c * (sig - t.v[i]);
    }
  });
}

// ===== broadcast modulation =====

namespace {
void check_gtd(const Var& x, const Var& m, const char* op) {
  const auto& xs = x.val().shape;
  const auto& ms = m.val().shape;
  if (xs.size() != 3 || ms.size() != 2 || xs[0] != ms[0] || xs[2] != ms[1])
    throw std::invalid_argument(std::string(op) + ": need x (G,T,D), mod (G,D)");
}
}  // namespace

Var scale_shift(const Var& x, const Var& sc, const Var& sh) {
  check_gtd(x, sc, "scale_shift");
  check_gtd(x, sh, "scale_shift");
  const long G = x.val().shape[0], T = x.val().shape[1], D = x.val().shape[2];
  Tensor out(x.val().shape);
  for (long g = 0; g < G; ++g) {
    const double* scp = sc.val().data() + g * D;
    const double* shp = sh.val().data() + g * D;
    for (long t = 0; t < T; ++t) {
      const double* xp = x.val().data() + (g * T + t) * D;
      double* op = out.data() + (g * T + t) * D;
      for (long j = 0; j < D; ++j) op[j] = xp[j] * (1.0 + scp[j]) + shp[j];
    }
  }
  return make_op(std::move(out), {x, sc, sh}, [G, T, D, xv = x.val(), scv = sc.val()](Var::Node& n) {
    for (long g = 0; g < G; ++g) {
      for (long t = 0; t < T; ++t) {
        const double* gp = n.grad.data() + (g * T + t) * D;
        if (n.parents[0].requires_grad()) {
          double* gx = n.parents[0].grad().data() + (g * T + t) * D;
          const double* scp = scv.data() + g * D;
          for (long j = 0; j < D; ++j) gx[j] += gp[j] * (1.0 + scp[j]);
        }
        if (n.parents[1].requires_grad()) {
          double* gs = n.parents[1].grad().data() + g * D;
          const double* xp = xv.data() + (g * T + t) * D;
          for (long j = 0; j < D; ++j) gs[j] += gp[j] * xp[j];
        }
        if (n.parents[2].requires_grad()) {
          double* gh = n.parents[2].grad().data() + g * D;
          for (long j = 0; j < D; ++j) gh[j] += gp[j];
        }
      }
    }
  });
}

Var rowgate(const Var& x, const Var& gate) {
  check_gtd(x, gate, "rowgate");
  const long G = x.val().shape[0], T = x.val().shape[1], D = x.val().shape[2];
  Tensor out(x.val().shape);
  for (long g = 0; g < G; ++g) {
    const double* gp = gate.val().data() + g * D;
    for (long t = 0; t < T; ++t) {
      const double* xp = x.val().data() + (g * T + t) * D;
      double* op = out.data() + (g * T + t) * D;
      for (long j = 0; j < D; ++j) op[j] = xp[j] * gp[j];
    }
  }
  return make_op(std::move(out), {x, gate}, [G, T, D, xv = x.val(), gv = gate.val()](Var::Node& n) {
    for (long g = 0; g < G; ++g) {
      for (long t = 0; t < T; ++t) {
        const double* gp = n.grad.data() + (g * T + t) * D;
        if (n.parents[0].requires_grad()) {
          double* gx = n.parents[0].grad().data() + (g * T + t) * D;
          const double* gtv = gv.data() + g * D;
          for (long j = 0; j < D; ++j) gx[j] += gp[j] * gtv[j];
        }
        if (n.parents[1].requires_grad()) {
          double* gg = n.parents[1].grad().data() + g * D;
          const double* xp = xv.data() + (g * T + t) * D;
          for (long j = 0; j < D; ++j) gg[j] += gp[j] * xp[j];
        }
      }
    }
  });
}

Var stopgrad(const Var& x) { return cvar(x.val()); }

Var attention(const Var& q, const Var& k, const Var& v, int heads, const Var& mask) {
  const long G = q.val().shape[0], Tq = q.val().shape[1], D = q.val().shape[2];
  const long Tk = k.val().shape[1], Dv = v.val().shape[2];
  if (D % heads != 0 || Dv % heads != 0) throw std::invalid_argument("attention: D % heads != 0");
  const long dh = D / heads, dvh = Dv / heads;
  auto split = [&](const Var& x, long T, long dm) {
    Var r = reshape(x, {G, T, heads, dm});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {G * heads, T, dm});
  };
  Var qh = split(q, Tq, dh);
  Var kh = split(k, Tk, dh);
  Var vh = split(v, Tk, dvh);
  Var scores = scale(bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask.defined()) scores = badd(scores, mask);
  Var w = softmax_lastdim(scores);
  Var o = bmm(w, vh);
  o = reshape(o, {G, heads, Tq, dvh});
  o = permute(o, {0, 2, 1, 3});
  return reshape(o, {G, Tq, Dv});
}

}  // namespace roboenv::nn
