#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "latentbank/tensor.hpp"

namespace latentbank {

template <typename S>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    int id = -1;

    const Tensor<S>& value() const { return tape->value(id); }
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape. One tape per forward segment; single-owner, not shared
// across threads. Frozen leaves are constants and never get gradient storage.
template <typename S>
class Tape {
  public:
    Var<S> leaf(Tensor<S> value, bool trainable = true) {
        value.check_finite("leaf");
        return push(std::move(value), trainable, nullptr);
    }
    Var<S> constant(Tensor<S> value) { return leaf(std::move(value), false); }

    const Tensor<S>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    size_t node_count() const { return nodes_.size(); }

    // Gradient of the last backward() w.r.t. `v`. Zero tensor when the loss
    // does not depend on it; contract error for non-trainable leaves.
    Tensor<S> grad(Var<S> v) const {
        const Node& n = nodes_[static_cast<size_t>(v.id)];
        if (!n.requires_grad)
            throw ContractError("grad requested for a frozen/constant node");
        const Tensor<S>& g = grads_[static_cast<size_t>(v.id)];
        if (g.size() == 0) return Tensor<S>(n.value.rows(), n.value.cols());
        return g;
    }

    void backward(Var<S> loss) {
        const Node& ln = nodes_[static_cast<size_t>(loss.id)];
        if (!ln.value.is_scalar()) throw ContractError("backward: loss must be scalar");
        grads_.assign(nodes_.size(), Tensor<S>());
        accum(loss.id, Tensor<S>::full(1, 1, S(1)));
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.requires_grad || !n.backprop) continue;
            Tensor<S>& g = grads_[static_cast<size_t>(i)];
            if (g.size() == 0) continue;
            n.backprop(*this, g);
        }
    }

    void accum(int id, const Tensor<S>& g) {
        if (!nodes_[static_cast<size_t>(id)].requires_grad) return;
        Tensor<S>& slot = grads_[static_cast<size_t>(id)];
        if (slot.size() == 0)
            slot = g;
        else
            slot = ops::add(slot, g);
    }

    using Backprop = std::function<void(Tape&, const Tensor<S>&)>;

    Var<S> push(Tensor<S> value, bool requires_grad, Backprop bp) {
        nodes_.push_back(Node{std::move(value), requires_grad, std::move(bp)});
        return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
    }

    // for ops whose closure needs the output node id
    void set_backprop(int id, Backprop bp) {
        nodes_[static_cast<size_t>(id)].backprop = std::move(bp);
    }

  private:
    struct Node {
        Tensor<S> value;
        bool requires_grad = false;
        Backprop backprop;
    };
    std::vector<Node> nodes_;
    std::vector<Tensor<S>> grads_;
};

// ---------------------------------------------------------------------------
// taped ops: forward via ops::*, backward closures capture node ids
// ---------------------------------------------------------------------------
namespace ad {

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    Tensor<S> out = ops::matmul(a.value(), b.value());
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int ai = a.id, bi = b.id;
    return t.push(std::move(out), rg, [ai, bi](Tape<S>& tp, const Tensor<S>& g) {
        if (tp.requires_grad(ai)) tp.accum(ai, ops::matmul(g, ops::transpose(tp.value(bi))));
        if (tp.requires_grad(bi)) tp.accum(bi, ops::matmul(ops::transpose(tp.value(ai)), g));
    });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    Tensor<S> out = ops::add(a.value(), b.value());
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int ai = a.id, bi = b.id;
    return t.push(std::move(out), rg, [ai, bi](Tape<S>& tp, const Tensor<S>& g) {
        tp.accum(ai, g);
        tp.accum(bi, g);
    });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    Tensor<S> out = ops::sub(a.value(), b.value());
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int ai = a.id, bi = b.id;
    return t.push(std::move(out), rg, [ai, bi](Tape<S>& tp, const Tensor<S>& g) {
        tp.accum(ai, g);
        tp.accum(bi, ops::scale(g, S(-1)));
    });
}

template <typename S>
Var<S> hadamard(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    Tensor<S> out = ops::hadamard(a.value(), b.value());
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int ai = a.id, bi = b.id;
    return t.push(std::move(out), rg, [ai, bi](Tape<S>& tp, const Tensor<S>& g) {
        if (tp.requires_grad(ai)) tp.accum(ai, ops::hadamard(g, tp.value(bi)));
        if (tp.requires_grad(bi)) tp.accum(bi, ops::hadamard(g, tp.value(ai)));
    });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
    Tape<S>& t = *a.tape;
    int ai = a.id;
    return t.push(ops::scale(a.value(), c), t.requires_grad(ai),
                  [ai, c](Tape<S>& tp, const Tensor<S>& g) { tp.accum(ai, ops::scale(g, c)); });
}

// multiply by a 1x1 node (used for the mean-beta blend)
template <typename S>
Var<S> scale_by(Var<S> a, Var<S> s) {
    Tape<S>& t = *a.tape;
    S sv = s.value().scalar();
    bool rg = t.requires_grad(a.id) || t.requires_grad(s.id);
    int ai = a.id, si = s.id;
    return t.push(ops::scale(a.value(), sv), rg, [ai, si](Tape<S>& tp, const Tensor<S>& g) {
        S sv2 = tp.value(si).scalar();
        if (tp.requires_grad(ai)) tp.accum(ai, ops::scale(g, sv2));
        if (tp.requires_grad(si)) {
            double dot = 0.0;
            const auto& av = tp.value(ai).data();
            for (size_t i = 0; i < av.size(); ++i)
                dot += static_cast<double>(g.data()[i]) * static_cast<double>(av[i]);
            tp.accum(si, Tensor<S>::full(1, 1, static_cast<S>(dot)));
        }
    });
}

template <typename S>
Var<S> transpose(Var<S> a) {
    Tape<S>& t = *a.tape;
    int ai = a.id;
    return t.push(ops::transpose(a.value()), t.requires_grad(ai),
                  [ai](Tape<S>& tp, const Tensor<S>& g) { tp.accum(ai, ops::transpose(g)); });
}

template <typename S>
Var<S> add_rowvec(Var<S> a, Var<S> v) {
    Tape<S>& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(v.id);
    int ai = a.id, vi = v.id;
    return t.push(ops::add_rowvec(a.value(), v.value()), rg,
                  [ai, vi](Tape<S>& tp, const Tensor<S>& g) {
                      tp.accum(ai, g);
                      if (tp.requires_grad(vi)) {
                          Tensor<S> colsum(1, g.cols());
                          for (int i = 0; i < g.rows(); ++i)
                              for (int j = 0; j < g.cols(); ++j) colsum(0, j) += g(i, j);
                          tp.accum(vi, colsum);
                      }
                  });
}

template <typename S>
Var<S> mul_rowvec(Var<S> a, Var<S> v) {
    Tape<S>& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(v.id);
    int ai = a.id, vi = v.id;
    return t.push(ops::mul_rowvec(a.value(), v.value()), rg,
                  [ai, vi](Tape<S>& tp, const Tensor<S>& g) {
                      if (tp.requires_grad(ai)) tp.accum(ai, ops::mul_rowvec(g, tp.value(vi)));
                      if (tp.requires_grad(vi)) {
                          const Tensor<S>& av = tp.value(ai);
                          Tensor<S> colsum(1, g.cols());
                          for (int i = 0; i < g.rows(); ++i)
                              for (int j = 0; j < g.cols(); ++j)
                                  colsum(0, j) += g(i, j) * av(i, j);
                          tp.accum(vi, colsum);
                      }
                  });
}

template <typename S>
Var<S> scale_rows(Var<S> a, Var<S> gate) {
    Tape<S>& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(gate.id);
    int ai = a.id, gi = gate.id;
    return t.push(ops::scale_rows(a.value(), gate.value()), rg,
                  [ai, gi](Tape<S>& tp, const Tensor<S>& g) {
                      if (tp.requires_grad(ai)) tp.accum(ai, ops::scale_rows(g, tp.value(gi)));
                      if (tp.requires_grad(gi)) {
                          const Tensor<S>& av = tp.value(ai);
                          Tensor<S> d(av.rows(), 1);
                          for (int i = 0; i < av.rows(); ++i) {
                              S s = S(0);
                              for (int j = 0; j < av.cols(); ++j) s += g(i, j) * av(i, j);
                              d(i, 0) = s;
                          }
                          tp.accum(gi, d);
                      }
                  });
}

template <typename S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int ai = a.id, bi = b.id;
    int p = a.value().rows();
    return t.push(ops::concat_rows(a.value(), b.value()), rg,
                  [ai, bi, p](Tape<S>& tp, const Tensor<S>& g) {
                      if (tp.requires_grad(ai)) tp.accum(ai, ops::slice_rows(g, 0, p));
                      if (tp.requires_grad(bi)) tp.accum(bi, ops::slice_rows(g, p, g.rows()));
                  });
}

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
    Tape<S>& t = *a.tape;
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int ai = a.id, bi = b.id;
    int c = a.value().cols();
    return t.push(ops::concat_cols(a.value(), b.value()), rg,
                  [ai, bi, c](Tape<S>& tp, const Tensor<S>& g) {
                      if (tp.requires_grad(ai)) tp.accum(ai, ops::slice_cols(g, 0, c));
                      if (tp.requires_grad(bi)) tp.accum(bi, ops::slice_cols(g, c, g.cols()));
                  });
}

template <typename S>
Var<S> slice_rows(Var<S> a, int r0, int r1) {
    Tape<S>& t = *a.tape;
    int ai = a.id;
    int rows = a.value().rows(), cols = a.value().cols();
    return t.push(ops::slice_rows(a.value(), r0, r1), t.requires_grad(ai),
                  [ai, r0, rows, cols](Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S> full(rows, cols);
                      for (int i = 0; i < g.rows(); ++i)
                          std::copy(g.row_ptr(i), g.row_ptr(i) + cols, full.row_ptr(r0 + i));
                      tp.accum(ai, full);
                  });
}

template <typename S>
Var<S> softmax_rows(Var<S> a) {
    Tape<S>& t = *a.tape;
    a.value().check_finite("softmax_rows input");
    Tensor<S> out = ops::softmax_rows(a.value());
    int ai = a.id;
    Var<S> o = t.push(std::move(out), t.requires_grad(ai), nullptr);
    int oi = o.id;
    if (t.requires_grad(ai)) {
        t.set_backprop(oi, [ai, oi](Tape<S>& tp, const Tensor<S>& g) {
            const Tensor<S>& y = tp.value(oi);
            Tensor<S> dx(y.rows(), y.cols());
            for (int i = 0; i < y.rows(); ++i) {
                S dot = S(0);
                for (int j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
                for (int j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (g(i, j) - dot);
            }
            tp.accum(ai, dx);
        });
    }
    return o;
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
    Tape<S>& t = *a.tape;
    a.value().check_finite("sigmoid input");
    int ai = a.id;
    Var<S> o = t.push(ops::sigmoid(a.value()), t.requires_grad(ai), nullptr);
    int oi = o.id;
    if (t.requires_grad(ai)) {
        t.set_backprop(oi, [ai, oi](Tape<S>& tp, const Tensor<S>& g) {
            const Tensor<S>& y = tp.value(oi);
            Tensor<S> dx = g;
            for (size_t k = 0; k < dx.size(); ++k)
                dx.data()[k] *= y.data()[k] * (S(1) - y.data()[k]);
            tp.accum(ai, dx);
        });
    }
    return o;
}

template <typename S>
Var<S> relu(Var<S> a) {
    Tape<S>& t = *a.tape;
    int ai = a.id;
    return t.push(ops::relu(a.value()), t.requires_grad(ai),
                  [ai](Tape<S>& tp, const Tensor<S>& g) {
                      const Tensor<S>& x = tp.value(ai);
                      Tensor<S> dx = g;
                      for (size_t k = 0; k < dx.size(); ++k)
                          if (x.data()[k] <= S(0)) dx.data()[k] = S(0);
                      tp.accum(ai, dx);
                  });
}

template <typename S>
Var<S> rmsnorm_rows(Var<S> a, S eps) {
    Tape<S>& t = *a.tape;
    int ai = a.id;
    Var<S> o = t.push(ops::rmsnorm_rows(a.value(), eps), t.requires_grad(ai), nullptr);
    int oi = o.id;
    if (t.requires_grad(ai)) {
        t.set_backprop(oi, [ai, oi, eps](Tape<S>& tp, const Tensor<S>& g) {
            const Tensor<S>& x = tp.value(ai);
            const Tensor<S>& y = tp.value(oi);
            Tensor<S> dx(x.rows(), x.cols());
            const int d = x.cols();
            for (int i = 0; i < x.rows(); ++i) {
                S ss = S(0);
                for (int j = 0; j < d; ++j) ss += x(i, j) * x(i, j);
                S r = std::sqrt(ss / static_cast<S>(d) + eps);
                S dot = S(0);
                for (int j = 0; j < d; ++j) dot += g(i, j) * y(i, j);
                for (int j = 0; j < d; ++j)
                    dx(i, j) = (g(i, j) - y(i, j) * dot / static_cast<S>(d)) / r;
            }
            tp.accum(ai, dx);
        });
    }
    return o;
}

template <typename S>
Var<S> row_mean(Var<S> a) {
    Tape<S>& t = *a.tape;
    int ai = a.id;
    int rows = a.value().rows();
    return t.push(ops::row_mean(a.value()), t.requires_grad(ai),
                  [ai, rows](Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S> dx(rows, g.cols());
                      for (int i = 0; i < rows; ++i)
                          for (int j = 0; j < g.cols(); ++j)
                              dx(i, j) = g(0, j) / static_cast<S>(rows);
                      tp.accum(ai, dx);
                  });
}

template <typename S>
Var<S> sum_all(Var<S> a) {
    Tape<S>& t = *a.tape;
    int ai = a.id;
    S s = S(0);
    for (S v : a.value().data()) s += v;
    int rows = a.value().rows(), cols = a.value().cols();
    return t.push(Tensor<S>::full(1, 1, s), t.requires_grad(ai),
                  [ai, rows, cols](Tape<S>& tp, const Tensor<S>& g) {
                      tp.accum(ai, Tensor<S>::full(rows, cols, g.scalar()));
                  });
}

template <typename S>
Var<S> mean_all(Var<S> a) {
    Tape<S>& t = *a.tape;
    size_t n = a.value().size();
    Var<S> s = sum_all(a);
    return scale(s, S(1) / static_cast<S>(n));
}

// mean token cross-entropy over rows of `logits` against integer targets;
// backward is (softmax - onehot) / n_rows
template <typename S>
Var<S> cross_entropy_rows(Var<S> logits, std::vector<int> targets) {
    Tape<S>& t = *logits.tape;
    const Tensor<S>& x = logits.value();
    if (static_cast<int>(targets.size()) != x.rows())
        throw DimensionError("cross_entropy_rows: target count mismatch");
    for (int tid : targets)
        if (tid < 0 || tid >= x.cols())
            throw ContractError("cross_entropy_rows: target id out of range");
    double total = 0.0;
    for (int i = 0; i < x.rows(); ++i) {
        const S* row = x.row_ptr(i);
        S m = row[0];
        for (int j = 1; j < x.cols(); ++j) m = std::max(m, row[j]);
        double lse = 0.0;
        for (int j = 0; j < x.cols(); ++j) lse += std::exp(static_cast<double>(row[j] - m));
        lse = std::log(lse) + static_cast<double>(m);
        total += lse - static_cast<double>(row[targets[static_cast<size_t>(i)]]);
    }
    total /= x.rows();
    int li = logits.id;
    return t.push(Tensor<S>::full(1, 1, static_cast<S>(total)), t.requires_grad(li),
                  [li, targets = std::move(targets)](Tape<S>& tp, const Tensor<S>& g) {
                      const Tensor<S>& x2 = tp.value(li);
                      Tensor<S> dx = ops::softmax_rows(x2);
                      const S inv = g.scalar() / static_cast<S>(x2.rows());
                      for (int i = 0; i < x2.rows(); ++i) {
                          dx(i, targets[static_cast<size_t>(i)]) -= S(1);
                          for (int j = 0; j < x2.cols(); ++j) dx(i, j) *= inv;
                      }
                      tp.accum(li, dx);
                  });
}

// Detach marker: value flows, gradient stops.
template <typename S>
Var<S> detach(Var<S> a) {
    return a.tape->push(a.value(), false, nullptr);
}

} // namespace ad

// ---------------------------------------------------------------------------
// gradient checking: analytic backward vs central finite differences.
// relative error per component: |a - fd| / max(|a|, |fd|, 1e-8)
// ---------------------------------------------------------------------------

// BuildFn: (Tape<S>&, const std::vector<Var<S>>&) -> Var<S> scalar
template <typename S, typename BuildFn>
S grad_check(BuildFn&& build, const std::vector<Tensor<S>>& leaves, S h) {
    auto eval = [&](const std::vector<Tensor<S>>& inputs) -> S {
        Tape<S> tape;
        std::vector<Var<S>> vars;
        vars.reserve(inputs.size());
        for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
        Var<S> out = build(tape, vars);
        S v = out.value().scalar();
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError("grad_check: non-finite function value");
        return v;
    };

    // analytic gradients
    Tape<S> tape;
    std::vector<Var<S>> vars;
    vars.reserve(leaves.size());
    for (const auto& t : leaves) vars.push_back(tape.leaf(t, true));
    Var<S> out = build(tape, vars);
    if (!out.value().is_scalar()) throw ContractError("grad_check: function is not scalar");
    tape.backward(out);
    std::vector<Tensor<S>> analytic;
    analytic.reserve(vars.size());
    for (auto v : vars) analytic.push_back(tape.grad(v));

    S max_rel = S(0);
    std::vector<Tensor<S>> work = leaves;
    for (size_t li = 0; li < leaves.size(); ++li) {
        for (size_t k = 0; k < leaves[li].size(); ++k) {
            const S orig = work[li].data()[k];
            work[li].data()[k] = orig + h;
            S fp = eval(work);
            work[li].data()[k] = orig - h;
            S fm = eval(work);
            work[li].data()[k] = orig;
            S fd = (fp - fm) / (S(2) * h);
            S an = analytic[li].data()[k];
            S denom = std::max({std::abs(an), std::abs(fd), S(1e-8)});
            max_rel = std::max(max_rel, std::abs(an - fd) / denom);
        }
    }
    return max_rel;
}

} // namespace latentbank
