#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cvid/rng.hpp"
#include "cvid/tensor.hpp"

namespace cvid {

// ===== named parameters =====

struct Param {
    std::string name;
    Tensor value{std::vector<int64_t>{0}};
    Tensor grad{std::vector<int64_t>{0}};
    bool trainable = true;
};

// Owns parameters; registration order fixes both the init draw order and the
// serialization layout, so construction is fully deterministic for one seed.
struct ParamSet {
    std::vector<std::unique_ptr<Param>> items;
    std::map<std::string, Param*> index;

    Param& add_normal(const std::string& name, std::vector<int64_t> shape, double stddev,
                      Rng& rng);
    Param& add_const(const std::string& name, std::vector<int64_t> shape, double fill);

    Param* find(const std::string& name);
    const Param* find(const std::string& name) const;
    Param& at(const std::string& name);

    void zero_grads();
    int64_t count_trainable_scalars() const;
};

// ===== reverse-mode tape =====

// Invoked with the post-softmax attention weights [B, heads, Nq, Nk]. The
// tensor may be mutated only on a graph built with gradients disabled; ops
// reject hooks on a grad-enabled graph.
using AttnHook = std::function<void(Tensor& weights)>;

class Graph {
  public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    int leaf(Tensor v, bool requires_grad = false);
    int param(Param& p);

    int add(int a, int b);
    int mul(int a, int b);
    int scale(int a, double s);
    // y[..., j] = x[..., j] + v[j]; v length matches the trailing dim of x
    int add_rowvec(int x, int v);
    // rank-2 product c = op(a) op(b); flags transpose the physical layouts
    int matmul(int a, int b, bool ta = false, bool tb = false);
    // x [N,k] * w[d,k]^T (+ bias [d]); bias = -1 for none
    int linear(int x, int w, int bias = -1);
    // normalizes the trailing dim; gamma/beta length match it
    int layernorm(int x, int gamma, int beta);
    int gelu(int x);
    int reshape(int x, std::vector<int64_t> shape);
    // y[i, ...] = x[idx[i], ...] over the leading dim
    int gather_rows(int x, std::vector<int64_t> idx);
    // y = x with row i replaced by row (rank-2 x; row numel == columns)
    int set_row(int x, int row, int64_t i);
    // y[b, ...] = x[...] for b in 0..B-1
    int expand_batch(int x, int64_t B);
    // x [F,Cin,H,W], w [Cout,Cin,kh,kw], bias [Cout] or -1, valid padding
    int conv2d(int x, int w, int bias, int64_t stride);
    // q [B,Nq,D], k/v [B,Nk,D]; per-head softmax(scale Q K^T) V
    int attention(int q, int k, int v, int nheads, double scale, const AttnHook& hook = {});
    // mean squared error, scalar output
    int mse(int pred, int target);

    void backward(int loss);
    // adds node grads of param leaves into their Param::grad
    void accumulate_param_grads();

    const Tensor& value(int i) const { return nodes_[i].value; }
    const Tensor& grad(int i) const;
    int size() const { return (int)nodes_.size(); }

  private:
    struct Node {
        Tensor value{std::vector<int64_t>{0}};
        Tensor grad{std::vector<int64_t>{0}};
        bool requires_grad = false;
        std::vector<int> parents;
        std::function<void()> backprop;
    };

    int push(Tensor value, std::vector<int> parents, bool requires_grad);
    Node& node(int i) { return nodes_[i]; }
    bool any_grad(std::initializer_list<int> ids) const;

    std::vector<Node> nodes_;
    std::vector<std::pair<int, Param*>> param_nodes_;
    bool grad_enabled_;
};

}  // namespace cvid
