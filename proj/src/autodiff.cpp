#include "cvid/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "cvid/kernels.hpp"

namespace cvid {

// ===== ParamSet =====

Param& ParamSet::add_normal(const std::string& name, std::vector<int64_t> shape, double stddev,
                            Rng& rng) {
    if (index.count(name)) throw std::invalid_argument("ParamSet: duplicate name " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = rng.randn(shape, stddev);
    p->grad = Tensor::zeros(shape);
    Param* raw = p.get();
    items.push_back(std::move(p));
    index[name] = raw;
    return *raw;
}

Param& ParamSet::add_const(const std::string& name, std::vector<int64_t> shape, double fill) {
    if (index.count(name)) throw std::invalid_argument("ParamSet: duplicate name " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = Tensor::full(shape, fill);
    p->grad = Tensor::zeros(shape);
    Param* raw = p.get();
    items.push_back(std::move(p));
    index[name] = raw;
    return *raw;
}

Param* ParamSet::find(const std::string& name) {
    auto it = index.find(name);
    return it == index.end() ? nullptr : it->second;
}

const Param* ParamSet::find(const std::string& name) const {
    auto it = index.find(name);
    return it == index.end() ? nullptr : it->second;
}

Param& ParamSet::at(const std::string& name) {
    Param* p = find(name);
    if (!p) throw std::out_of_range("ParamSet: no parameter named " + name);
    return *p;
}

void ParamSet::zero_grads() {
    for (auto& p : items) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
}

int64_t ParamSet::count_trainable_scalars() const {
    int64_t n = 0;
    for (auto& p : items)
        if (p->trainable) n += p->value.numel();
    return n;
}

// ===== Graph plumbing =====

int Graph::push(Tensor value, std::vector<int> parents, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) n.grad = Tensor::zeros(n.value.shape);
    n.parents = std::move(parents);
    nodes_.push_back(std::move(n));
    return (int)nodes_.size() - 1;
}

bool Graph::any_grad(std::initializer_list<int> ids) const {
    for (int i : ids)
        if (i >= 0 && nodes_[i].requires_grad) return true;
    return false;
}

const Tensor& Graph::grad(int i) const {
    if (!nodes_[i].requires_grad)
        throw std::logic_error("Graph::grad: node does not track gradients");
    return nodes_[i].grad;
}

int Graph::leaf(Tensor v, bool requires_grad) { return push(std::move(v), {}, requires_grad); }

int Graph::param(Param& p) {
    int id = push(p.value, {}, p.trainable);
    param_nodes_.emplace_back(id, &p);
    return id;
}

void Graph::accumulate_param_grads() {
    for (auto& [id, p] : param_nodes_) {
        if (!nodes_[id].requires_grad) continue;
        const Tensor& g = nodes_[id].grad;
        for (int64_t i = 0; i < g.numel(); ++i) p->grad.data[i] += g.data[i];
    }
}

void Graph::backward(int loss) {
    if (!grad_enabled_) throw std::logic_error("Graph::backward: gradients are disabled");
    Node& L = nodes_[loss];
    if (L.value.numel() != 1) throw std::invalid_argument("Graph::backward: loss must be scalar");
    if (!L.requires_grad)
        throw std::invalid_argument("Graph::backward: loss does not depend on any gradient leaf");

    std::vector<char> needed(nodes_.size(), 0);
    needed[loss] = 1;
    for (int i = loss; i >= 0; --i)
        if (needed[i])
            for (int p : nodes_[i].parents) needed[p] = 1;

    L.grad.data[0] = 1.0;
    for (int i = loss; i >= 0; --i)
        if (needed[i] && nodes_[i].requires_grad && nodes_[i].backprop) nodes_[i].backprop();
}

// ===== elementwise / affine ops =====

int Graph::add(int a, int b) {
    require_same_shape(nodes_[a].value, nodes_[b].value, "Graph::add");
    Tensor y(nodes_[a].value.shape);
    kernels::add(nodes_[a].value.data.data(), nodes_[b].value.data.data(), y.data.data(),
                 y.numel());
    int id = push(std::move(y), {a, b}, any_grad({a, b}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, a, b] {
            const Tensor& dy = nodes_[id].grad;
            if (nodes_[a].requires_grad)
                kernels::axpy(1.0, dy.data.data(), nodes_[a].grad.data.data(), dy.numel());
            if (nodes_[b].requires_grad)
                kernels::axpy(1.0, dy.data.data(), nodes_[b].grad.data.data(), dy.numel());
        };
    return id;
}

int Graph::mul(int a, int b) {
    require_same_shape(nodes_[a].value, nodes_[b].value, "Graph::mul");
    Tensor y(nodes_[a].value.shape);
    kernels::mul(nodes_[a].value.data.data(), nodes_[b].value.data.data(), y.data.data(),
                 y.numel());
    int id = push(std::move(y), {a, b}, any_grad({a, b}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, a, b] {
            const Tensor& dy = nodes_[id].grad;
            int64_t n = dy.numel();
            if (nodes_[a].requires_grad) {
                const double* bv = nodes_[b].value.data.data();
                double* da = nodes_[a].grad.data.data();
                const double* d = dy.data.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
                for (int64_t i = 0; i < n; ++i) da[i] += d[i] * bv[i];
            }
            if (nodes_[b].requires_grad) {
                const double* av = nodes_[a].value.data.data();
                double* db = nodes_[b].grad.data.data();
                const double* d = dy.data.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
                for (int64_t i = 0; i < n; ++i) db[i] += d[i] * av[i];
            }
        };
    return id;
}

int Graph::scale(int a, double s) {
    Tensor y(nodes_[a].value.shape);
    kernels::scale(nodes_[a].value.data.data(), s, y.data.data(), y.numel());
    int id = push(std::move(y), {a}, any_grad({a}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, a, s] {
            kernels::axpy(s, nodes_[id].grad.data.data(), nodes_[a].grad.data.data(),
                          nodes_[id].grad.numel());
        };
    return id;
}

int Graph::add_rowvec(int x, int v) {
    const Tensor& xv = nodes_[x].value;
    const Tensor& vv = nodes_[v].value;
    int64_t cols = xv.dim(xv.ndim() - 1);
    if (vv.numel() != cols)
        throw std::invalid_argument("Graph::add_rowvec: vector length must match trailing dim");
    int64_t rows = xv.numel() / cols;
    Tensor y(xv.shape);
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < cols; ++j)
            y.data[r * cols + j] = xv.data[r * cols + j] + vv.data[j];
    int id = push(std::move(y), {x, v}, any_grad({x, v}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, x, v, rows, cols] {
            const Tensor& dy = nodes_[id].grad;
            if (nodes_[x].requires_grad)
                kernels::axpy(1.0, dy.data.data(), nodes_[x].grad.data.data(), dy.numel());
            if (nodes_[v].requires_grad) {
                double* dv = nodes_[v].grad.data.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
                for (int64_t j = 0; j < cols; ++j) {
                    double s = 0.0;
                    for (int64_t r = 0; r < rows; ++r) s += dy.data[r * cols + j];
                    dv[j] += s;
                }
            }
        };
    return id;
}

int Graph::matmul(int a, int b, bool ta, bool tb) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    if (av.ndim() != 2 || bv.ndim() != 2)
        throw std::invalid_argument("Graph::matmul: rank-2 operands required");
    int64_t m = ta ? av.dim(1) : av.dim(0);
    int64_t k = ta ? av.dim(0) : av.dim(1);
    int64_t kb = tb ? bv.dim(1) : bv.dim(0);
    int64_t n = tb ? bv.dim(0) : bv.dim(1);
    if (k != kb)
        throw std::invalid_argument("Graph::matmul: inner dims disagree (" + av.shape_str() +
                                    " vs " + bv.shape_str() + ")");
    Tensor y({m, n});
    kernels::matmul(av.data.data(), bv.data.data(), y.data.data(), m, k, n, ta, tb, false);
    int id = push(std::move(y), {a, b}, any_grad({a, b}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, a, b, ta, tb, m, k, n] {
            const double* dy = nodes_[id].grad.data.data();
            const double* avp = nodes_[a].value.data.data();
            const double* bvp = nodes_[b].value.data.data();
            if (nodes_[a].requires_grad) {
                double* da = nodes_[a].grad.data.data();
                if (!ta) {
                    // dA = dy op(B)^T
                    kernels::matmul(dy, bvp, da, m, n, k, false, !tb, true);
                } else {
                    // physical a is A^T: da = op(B) dy^T
                    kernels::matmul(bvp, dy, da, k, n, m, tb, true, true);
                }
            }
            if (nodes_[b].requires_grad) {
                double* db = nodes_[b].grad.data.data();
                if (!tb) {
                    // dB = op(A)^T dy
                    kernels::matmul(avp, dy, db, k, m, n, !ta, false, true);
                } else {
                    // physical b is B^T: db = dy^T op(A)
                    kernels::matmul(dy, avp, db, n, m, k, true, ta, true);
                }
            }
        };
    return id;
}

int Graph::linear(int x, int w, int bias) {
    int y = matmul(x, w, false, true);
    if (bias >= 0) y = add_rowvec(y, bias);
    return y;
}

int Graph::layernorm(int x, int gamma, int beta) {
    const Tensor& xv = nodes_[x].value;
    int64_t cols = xv.dim(xv.ndim() - 1);
    if (nodes_[gamma].value.numel() != cols || nodes_[beta].value.numel() != cols)
        throw std::invalid_argument("Graph::layernorm: gamma/beta must match trailing dim");
    int64_t rows = xv.numel() / cols;
    Tensor y(xv.shape);
    auto mean = std::make_shared<Tensor>(Tensor::zeros({rows}));
    auto rstd = std::make_shared<Tensor>(Tensor::zeros({rows}));
    kernels::layernorm_forward(xv.data.data(), nodes_[gamma].value.data.data(),
                               nodes_[beta].value.data.data(), y.data.data(), mean->data.data(),
                               rstd->data.data(), rows, cols);
    int id = push(std::move(y), {x, gamma, beta}, any_grad({x, gamma, beta}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, x, gamma, beta, rows, cols, mean, rstd] {
            const Tensor& dy = nodes_[id].grad;
            double* dx = nodes_[x].requires_grad ? nodes_[x].grad.data.data() : nullptr;
            double* dg = nodes_[gamma].requires_grad ? nodes_[gamma].grad.data.data() : nullptr;
            double* db = nodes_[beta].requires_grad ? nodes_[beta].grad.data.data() : nullptr;
            kernels::layernorm_backward(nodes_[x].value.data.data(),
                                        nodes_[gamma].value.data.data(), mean->data.data(),
                                        rstd->data.data(), dy.data.data(), dx, dg, db, rows, cols);
        };
    return id;
}

int Graph::gelu(int x) {
    Tensor y(nodes_[x].value.shape);
    kernels::gelu_forward(nodes_[x].value.data.data(), y.data.data(), y.numel());
    int id = push(std::move(y), {x}, any_grad({x}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, x] {
            kernels::gelu_backward(nodes_[x].value.data.data(), nodes_[id].grad.data.data(),
                                   nodes_[x].grad.data.data(), nodes_[id].grad.numel());
        };
    return id;
}

int Graph::reshape(int x, std::vector<int64_t> shape) {
    Tensor y = nodes_[x].value.reshaped(shape);
    int id = push(std::move(y), {x}, any_grad({x}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, x] {
            kernels::axpy(1.0, nodes_[id].grad.data.data(), nodes_[x].grad.data.data(),
                          nodes_[id].grad.numel());
        };
    return id;
}

int Graph::gather_rows(int x, std::vector<int64_t> idx) {
    const Tensor& xv = nodes_[x].value;
    int64_t src_rows = xv.dim(0);
    int64_t cols = xv.numel() / src_rows;
    for (int64_t i : idx)
        if (i < 0 || i >= src_rows)
            throw std::invalid_argument("Graph::gather_rows: index out of range");
    std::vector<int64_t> yshape = xv.shape;
    yshape[0] = (int64_t)idx.size();
    Tensor y(yshape);
    kernels::gather_rows(xv.data.data(), idx.data(), y.data.data(), (int64_t)idx.size(), cols);
    int id = push(std::move(y), {x}, any_grad({x}));
    if (nodes_[id].requires_grad) {
        // inverse map: for each source row, the fixed list of output rows that
        // read it, so the scatter in backward is race-free and deterministic
        auto readers = std::make_shared<std::vector<std::vector<int64_t>>>(src_rows);
        for (int64_t i = 0; i < (int64_t)idx.size(); ++i) (*readers)[idx[i]].push_back(i);
        nodes_[id].backprop = [this, id, x, cols, src_rows, readers] {
            const double* dy = nodes_[id].grad.data.data();
            double* dx = nodes_[x].grad.data.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
            for (int64_t s = 0; s < src_rows; ++s)
                for (int64_t r : (*readers)[s])
                    for (int64_t j = 0; j < cols; ++j) dx[s * cols + j] += dy[r * cols + j];
        };
    }
    return id;
}

int Graph::set_row(int x, int row, int64_t i) {
    const Tensor& xv = nodes_[x].value;
    if (xv.ndim() != 2) throw std::invalid_argument("Graph::set_row: rank-2 input required");
    int64_t cols = xv.dim(1);
    if (nodes_[row].value.numel() != cols)
        throw std::invalid_argument("Graph::set_row: row length must match columns");
    if (i < 0 || i >= xv.dim(0)) throw std::invalid_argument("Graph::set_row: row index range");
    Tensor y = xv;
    for (int64_t j = 0; j < cols; ++j) y.data[i * cols + j] = nodes_[row].value.data[j];
    int id = push(std::move(y), {x, row}, any_grad({x, row}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, x, row, i, cols] {
            const Tensor& dy = nodes_[id].grad;
            if (nodes_[row].requires_grad) {
                double* dr = nodes_[row].grad.data.data();
                for (int64_t j = 0; j < cols; ++j) dr[j] += dy.data[i * cols + j];
            }
            if (nodes_[x].requires_grad) {
                double* dx = nodes_[x].grad.data.data();
                int64_t rows = dy.numel() / cols;
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
                for (int64_t r = 0; r < rows; ++r) {
                    if (r == i) continue;
                    for (int64_t j = 0; j < cols; ++j) dx[r * cols + j] += dy.data[r * cols + j];
                }
            }
        };
    return id;
}

int Graph::expand_batch(int x, int64_t B) {
    if (B < 1) throw std::invalid_argument("Graph::expand_batch: B must be positive");
    const Tensor& xv = nodes_[x].value;
    std::vector<int64_t> yshape;
    yshape.push_back(B);
    for (auto d : xv.shape) yshape.push_back(d);
    Tensor y(yshape);
    int64_t n = xv.numel();
    for (int64_t b = 0; b < B; ++b)
        std::memcpy(y.data.data() + b * n, xv.data.data(), n * sizeof(double));
    int id = push(std::move(y), {x}, any_grad({x}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, x, B, n] {
            const double* dy = nodes_[id].grad.data.data();
            double* dx = nodes_[x].grad.data.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
            for (int64_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (int64_t b = 0; b < B; ++b) s += dy[b * n + j];
                dx[j] += s;
            }
        };
    return id;
}

int Graph::conv2d(int x, int w, int bias, int64_t stride) {
    const Tensor& xv = nodes_[x].value;
    const Tensor& wv = nodes_[w].value;
    if (xv.ndim() != 4 || wv.ndim() != 4)
        throw std::invalid_argument("Graph::conv2d: rank-4 input and weight required");
    if (xv.dim(1) != wv.dim(1))
        throw std::invalid_argument("Graph::conv2d: channel mismatch");
    if (stride < 1) throw std::invalid_argument("Graph::conv2d: stride must be positive");
    int64_t F = xv.dim(0), cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int64_t cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (H < kh || W < kw) throw std::invalid_argument("Graph::conv2d: kernel larger than input");
    if (bias >= 0 && nodes_[bias].value.numel() != cout)
        throw std::invalid_argument("Graph::conv2d: bias length must equal out channels");
    int64_t how = (H - kh) / stride + 1, wow = (W - kw) / stride + 1;
    Tensor y({F, cout, how, wow});
    kernels::conv2d_forward(xv.data.data(), wv.data.data(),
                            bias >= 0 ? nodes_[bias].value.data.data() : nullptr, y.data.data(),
                            F, cin, H, W, cout, kh, kw, stride);
    int id = push(std::move(y), bias >= 0 ? std::vector<int>{x, w, bias} : std::vector<int>{x, w},
                  any_grad({x, w, bias}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, x, w, bias, F, cin, H, W, cout, kh, kw, stride] {
            const double* dy = nodes_[id].grad.data.data();
            if (nodes_[x].requires_grad)
                kernels::conv2d_backward_input(nodes_[w].value.data.data(), dy,
                                               nodes_[x].grad.data.data(), F, cin, H, W, cout, kh,
                                               kw, stride);
            bool need_db = bias >= 0 && nodes_[bias].requires_grad;
            if (nodes_[w].requires_grad || need_db) {
                Tensor dwbuf = Tensor::zeros(nodes_[w].value.shape);
                Tensor dbbuf = Tensor::zeros({cout});
                kernels::conv2d_backward_weight(nodes_[x].value.data.data(), dy,
                                                dwbuf.data.data(), dbbuf.data.data(), F, cin, H,
                                                W, cout, kh, kw, stride);
                if (nodes_[w].requires_grad)
                    kernels::axpy(1.0, dwbuf.data.data(), nodes_[w].grad.data.data(),
                                  dwbuf.numel());
                if (need_db)
                    kernels::axpy(1.0, dbbuf.data.data(), nodes_[bias].grad.data.data(), cout);
            }
        };
    return id;
}

int Graph::attention(int q, int k, int v, int nheads, double scale, const AttnHook& hook) {
    const Tensor& qv = nodes_[q].value;
    const Tensor& kv = nodes_[k].value;
    const Tensor& vv = nodes_[v].value;
    if (qv.ndim() != 3 || kv.ndim() != 3 || vv.ndim() != 3)
        throw std::invalid_argument("Graph::attention: rank-3 operands [B,N,D] required");
    int64_t B = qv.dim(0), Nq = qv.dim(1), D = qv.dim(2);
    int64_t Nk = kv.dim(1);
    if (kv.dim(0) != B || vv.dim(0) != B || vv.dim(1) != Nk || kv.dim(2) != D || vv.dim(2) != D)
        throw std::invalid_argument("Graph::attention: shape mismatch between q/k/v");
    if (nheads < 1 || D % nheads != 0)
        throw std::invalid_argument("Graph::attention: D must divide by nheads");
    if (hook && grad_enabled_)
        throw std::logic_error("Graph::attention: hooks only permitted with gradients disabled");
    int64_t dh = D / nheads;

    auto weights = std::make_shared<Tensor>(Tensor({B, (int64_t)nheads, Nq, Nk}));
    // pass 1: per-head softmax weights
#pragma omp parallel for collapse(2) schedule(static) if (kernels::parallel_enabled())
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < nheads; ++h) {
            std::vector<double> Qh(Nq * dh), Kh(Nk * dh), S(Nq * Nk);
            for (int64_t i = 0; i < Nq; ++i)
                for (int64_t c = 0; c < dh; ++c)
                    Qh[i * dh + c] = qv.data[(b * Nq + i) * D + h * dh + c];
            for (int64_t i = 0; i < Nk; ++i)
                for (int64_t c = 0; c < dh; ++c)
                    Kh[i * dh + c] = kv.data[(b * Nk + i) * D + h * dh + c];
            kernels::ref::matmul(Qh.data(), Kh.data(), S.data(), Nq, dh, Nk, false, true, false);
            for (auto& s : S) s *= scale;
            kernels::ref::softmax_rows(S.data(), Nq, Nk);
            std::memcpy(weights->data.data() + ((b * nheads + h) * Nq) * Nk, S.data(),
                        S.size() * sizeof(double));
        }
    if (hook) hook(*weights);

    // pass 2: weighted values (uses possibly hook-adjusted weights)
    Tensor y({B, Nq, D});
#pragma omp parallel for collapse(2) schedule(static) if (kernels::parallel_enabled())
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < nheads; ++h) {
            std::vector<double> Vh(Nk * dh), Oh(Nq * dh);
            for (int64_t i = 0; i < Nk; ++i)
                for (int64_t c = 0; c < dh; ++c)
                    Vh[i * dh + c] = vv.data[(b * Nk + i) * D + h * dh + c];
            const double* Wh = weights->data.data() + ((b * nheads + h) * Nq) * Nk;
            kernels::ref::matmul(Wh, Vh.data(), Oh.data(), Nq, Nk, dh, false, false, false);
            for (int64_t i = 0; i < Nq; ++i)
                for (int64_t c = 0; c < dh; ++c)
                    y.data[(b * Nq + i) * D + h * dh + c] = Oh[i * dh + c];
        }

    int id = push(std::move(y), {q, k, v}, any_grad({q, k, v}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, q, k, v, nheads, scale, B, Nq, Nk, D, dh, weights] {
            const Tensor& dy = nodes_[id].grad;
            const Tensor& qval = nodes_[q].value;
            const Tensor& kval = nodes_[k].value;
            const Tensor& vval = nodes_[v].value;
            bool nq = nodes_[q].requires_grad, nk = nodes_[k].requires_grad,
                 nv = nodes_[v].requires_grad;
#pragma omp parallel for collapse(2) schedule(static) if (kernels::parallel_enabled())
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < nheads; ++h) {
                    std::vector<double> Qh(Nq * dh), Kh(Nk * dh), Vh(Nk * dh), dYh(Nq * dh);
                    for (int64_t i = 0; i < Nq; ++i)
                        for (int64_t c = 0; c < dh; ++c) {
                            Qh[i * dh + c] = qval.data[(b * Nq + i) * D + h * dh + c];
                            dYh[i * dh + c] = dy.data[(b * Nq + i) * D + h * dh + c];
                        }
                    for (int64_t i = 0; i < Nk; ++i)
                        for (int64_t c = 0; c < dh; ++c) {
                            Kh[i * dh + c] = kval.data[(b * Nk + i) * D + h * dh + c];
                            Vh[i * dh + c] = vval.data[(b * Nk + i) * D + h * dh + c];
                        }
                    const double* Wh = weights->data.data() + ((b * nheads + h) * Nq) * Nk;
                    std::vector<double> dW(Nq * Nk), dS(Nq * Nk);
                    kernels::ref::matmul(dYh.data(), Vh.data(), dW.data(), Nq, dh, Nk, false,
                                         true, false);
                    kernels::ref::softmax_backward_rows(Wh, dW.data(), dS.data(), Nq, Nk);
                    if (nv) {
                        std::vector<double> dVh(Nk * dh);
                        kernels::ref::matmul(Wh, dYh.data(), dVh.data(), Nk, Nq, dh, true, false,
                                             false);
                        double* dst = nodes_[v].grad.data.data();
                        for (int64_t i = 0; i < Nk; ++i)
                            for (int64_t c = 0; c < dh; ++c)
                                dst[(b * Nk + i) * D + h * dh + c] += dVh[i * dh + c];
                    }
                    if (nq) {
                        std::vector<double> dQh(Nq * dh);
                        kernels::ref::matmul(dS.data(), Kh.data(), dQh.data(), Nq, Nk, dh, false,
                                             false, false);
                        double* dst = nodes_[q].grad.data.data();
                        for (int64_t i = 0; i < Nq; ++i)
                            for (int64_t c = 0; c < dh; ++c)
                                dst[(b * Nq + i) * D + h * dh + c] += scale * dQh[i * dh + c];
                    }
                    if (nk) {
                        std::vector<double> dKh(Nk * dh);
                        kernels::ref::matmul(dS.data(), Qh.data(), dKh.data(), Nk, Nq, dh, true,
                                             false, false);
                        double* dst = nodes_[k].grad.data.data();
                        for (int64_t i = 0; i < Nk; ++i)
                            for (int64_t c = 0; c < dh; ++c)
                                dst[(b * Nk + i) * D + h * dh + c] += scale * dKh[i * dh + c];
                    }
                }
        };
    return id;
}

int Graph::mse(int pred, int target) {
    require_same_shape(nodes_[pred].value, nodes_[target].value, "Graph::mse");
    const Tensor& p = nodes_[pred].value;
    const Tensor& t = nodes_[target].value;
    int64_t n = p.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = p.data[i] - t.data[i];
        s += d * d;
    }
    Tensor y({1}, {s / double(n)});
    int id = push(std::move(y), {pred, target}, any_grad({pred, target}));
    if (nodes_[id].requires_grad)
        nodes_[id].backprop = [this, id, pred, target, n] {
            double g = nodes_[id].grad.data[0] * 2.0 / double(n);
            const double* pv = nodes_[pred].value.data.data();
            const double* tv = nodes_[target].value.data.data();
            if (nodes_[pred].requires_grad) {
                double* dp = nodes_[pred].grad.data.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
                for (int64_t i = 0; i < n; ++i) dp[i] += g * (pv[i] - tv[i]);
            }
            if (nodes_[target].requires_grad) {
                double* dt = nodes_[target].grad.data.data();
#pragma omp parallel for schedule(static) if (kernels::parallel_enabled())
                for (int64_t i = 0; i < n; ++i) dt[i] -= g * (pv[i] - tv[i]);
            }
        };
    return id;
}

}  // namespace cvid
