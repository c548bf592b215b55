#pragma once

#include <functional>
#include <memory>

#include "roboenv/tensor.hpp"

namespace roboenv::nn {

// Reverse-mode autodiff over dense double tensors. Each op returns a Var
// holding the forward value plus a closure that pulls the node's gradient
// into its parents. Graphs are built per forward call and freed when the
// last Var handle drops; nothing here is shared across threads, so
// concurrent graphs on worker threads are safe.
class Var {
 public:
  struct Node {
    Tensor val;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backfn;

    Tensor& g() {
      if (!grad_alloc) {
        grad = Tensor(val.shape);
        grad_alloc = true;
      }
      return grad;
    }
  };

  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(n_); }
  Tensor& val() { return n_->val; }
  const Tensor& val() const { return n_->val; }
  Tensor& grad() { return n_->g(); }
  bool has_grad() const { return n_->grad_alloc; }
  bool requires_grad() const { return n_->requires_grad; }
  Node* node() const { return n_.get(); }
  void zero_grad() {
    if (n_->grad_alloc) std::fill(n_->grad.v.begin(), n_->grad.v.end(), 0.0);
  }

  const std::vector<long>& shape() const { return n_->val.shape; }

 private:
  std::shared_ptr<Node> n_;
};

// leaf with gradient tracking (parameters)
Var leaf(Tensor t);
// constant without gradient tracking (inputs, masks, targets)
Var cvar(Tensor t);

// Runs backpropagation from a scalar root (numel()==1).
void backward(const Var& root);

// ===== primitive ops =====
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);            // elementwise, same shape
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);

// broadcast add of m over the leading dims of x (x.shape ends with m.shape)
Var badd(const Var& x, const Var& m);

Var matmul(const Var& a, const Var& b);           // (M,K)x(K,N)
Var bmm(const Var& a, const Var& b);              // (G,M,K)x(G,K,N)
Var bmm_nt(const Var& a, const Var& b);           // (G,M,K)x(G,N,K)^T -> (G,M,N)

// y = x W^T + b, x: (...,in), W: (out,in), b: (out) or undefined
Var linear(const Var& x, const Var& W, const Var& b);

Var reshape(const Var& x, std::vector<long> shape);
Var permute(const Var& x, const std::vector<int>& axes);
Var slice(const Var& x, int axis, long start, long len);
Var concat(const std::vector<Var>& xs, int axis);

Var softmax_lastdim(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6);
// x: (B,C,H,W), per-group normalization, per-channel affine
Var group_norm(const Var& x, int groups, const Var& gain, const Var& bias, double eps = 1e-6);

Var conv2d(const Var& x, const Var& W, const Var& b, int stride, int pad);
Var upsample_nearest2(const Var& x);
Var mean_hw(const Var& x);  // (B,C,H,W) -> (B,C)

Var silu(const Var& x);
Var relu(const Var& x);
Var tanh_(const Var& x);
Var sigmoid_(const Var& x);

// rows of table selected by ids -> (ids.size(), D)
Var embedding(const std::vector<long>& ids, const Var& table);

Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var mse_loss(const Var& pred, const Tensor& target);
Var bce_logits_loss(const Var& logits, const Tensor& targets);

// x: (G,T,D); scale,shift: (G,D); y[g,t,:] = x[g,t,:]*(1+scale[g,:])+shift[g,:]
Var scale_shift(const Var& x, const Var& sc, const Var& sh);
// x: (G,T,D); gate: (G,D); y[g,t,:] = x[g,t,:]*gate[g,:]
Var rowgate(const Var& x, const Var& gate);

Var stopgrad(const Var& x);

// multi-head attention built from the primitives above.
// q: (G,Tq,D), k/v: (G,Tk,D); mask (optional): (Tq,Tk) additive, broadcast over G and heads.
Var attention(const Var& q, const Var& k, const Var& v, int heads, const Var& mask = Var());

}  // namespace roboenv::nn
