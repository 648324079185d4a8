#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ratt/mat.hpp"

namespace ratt::ad {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape over matrices. Forward values are computed eagerly at op
// creation; each recorded node stores a closure that scatters its adjoint to
// its parents. A tape built with grad_enabled=false skips all recording and
// acts as a plain evaluator (used for inference passes and the first pass of
// gradient-cache training).
class Tape {
  public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    // Frees every node at or above `mark`. Only meaningful on no-grad tapes
    // (or between steps) where dropped values are no longer referenced.
    void truncate(std::size_t mark) { nodes_.resize(mark); }

    Var leaf(Mat value, bool requires_grad = true) {
        return push(std::move(value), requires_grad && grad_enabled_, nullptr);
    }

    Var constant(Mat value) { return leaf(std::move(value), false); }

    const Mat& val(Var v) const { return nodes_[check(v)].value; }

    const Mat& grad(Var v) const {
        const Node& n = nodes_[check(v)];
        if (n.grad.empty()) {
            static const Mat empty;
            return empty;
        }
        return n.grad;
    }

    Mat grad_or_zero(Var v) const {
        const Node& n = nodes_[check(v)];
        if (!n.grad.empty()) return n.grad;
        return Mat(n.value.rows(), n.value.cols());
    }

    // ------------------------------------------------------------------
    // Elementwise / linear ops
    // ------------------------------------------------------------------
    Var add(Var a, Var b) {
        const Mat& av = val(a);
        const Mat& bv = val(b);
        Mat out = av;
        for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] += bv.vec()[i];
        return push(std::move(out), wants(a) || wants(b), [a, b](Tape& t, const Mat& g) {
            t.acc(a, g);
            t.acc(b, g);
        });
    }

    Var add_n(const std::vector<Var>& parts) {
        Mat out = val(parts.front());
        for (std::size_t p = 1; p < parts.size(); ++p) {
            const Mat& pv = val(parts[p]);
            for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] += pv.vec()[i];
        }
        bool rg = false;
        for (Var p : parts) rg = rg || wants(p);
        return push(std::move(out), rg, [parts](Tape& t, const Mat& g) {
            for (Var p : parts) t.acc(p, g);
        });
    }

    Var sub(Var a, Var b) {
        const Mat& av = val(a);
        const Mat& bv = val(b);
        Mat out = av;
        for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] -= bv.vec()[i];
        return push(std::move(out), wants(a) || wants(b), [a, b](Tape& t, const Mat& g) {
            t.acc(a, g);
            Mat neg = g;
            for (double& x : neg.vec()) x = -x;
            t.acc(b, neg);
        });
    }

    Var mul(Var a, Var b) {
        const Mat& av = val(a);
        const Mat& bv = val(b);
        Mat out = av;
        for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] *= bv.vec()[i];
        return push(std::move(out), wants(a) || wants(b), [a, b](Tape& t, const Mat& g) {
            Mat ga = g, gb = g;
            const Mat& avv = t.val(a);
            const Mat& bvv = t.val(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga.vec()[i] *= bvv.vec()[i];
                gb.vec()[i] *= avv.vec()[i];
            }
            t.acc(a, ga);
            t.acc(b, gb);
        });
    }

    Var scale(Var a, double c) {
        Mat out = val(a);
        for (double& x : out.vec()) x *= c;
        return push(std::move(out), wants(a), [a, c](Tape& t, const Mat& g) {
            Mat ga = g;
            for (double& x : ga.vec()) x *= c;
            t.acc(a, ga);
        });
    }

    Var relu(Var a) {
        Mat out = val(a);
        for (double& x : out.vec())
            if (x < 0.0) x = 0.0;
        return push(std::move(out), wants(a), [a, self = next_id()](Tape& t, const Mat& g) {
            Mat ga = g;
            const Mat& y = t.nodes_[self].value;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (y.vec()[i] <= 0.0) ga.vec()[i] = 0.0;
            t.acc(a, ga);
        });
    }

    // ------------------------------------------------------------------
    // Matrix products
    // ------------------------------------------------------------------
    Var matmul(Var a, Var b) {
        Mat out;
        matmul_into(val(a), val(b), out);
        return push(std::move(out), wants(a) || wants(b), [a, b](Tape& t, const Mat& g) {
            if (t.wants(a)) matmul_nt_acc(g, t.val(b), t.ensure_grad(a)); // dA += g * B^T
            if (t.wants(b)) matmul_tn_acc(t.val(a), g, t.ensure_grad(b)); // dB += A^T * g
        });
    }

    // a * b^T
    Var matmul_nt(Var a, Var b) {
        Mat out;
        matmul_nt_into(val(a), val(b), out);
        return push(std::move(out), wants(a) || wants(b), [a, b](Tape& t, const Mat& g) {
            if (t.wants(a)) matmul_acc(g, t.val(b), t.ensure_grad(a));    // dA += g * B
            if (t.wants(b)) matmul_tn_acc(g, t.val(a), t.ensure_grad(b)); // dB += g^T * A
        });
    }

    // ------------------------------------------------------------------
    // Normalization / softmax
    // ------------------------------------------------------------------

    // Per-row RMS normalization with a learned gain (1 x cols).
    Var rmsnorm(Var x, Var gain) {
        const Mat& xv = val(x);
        const Mat& gv = val(gain);
        const std::size_t n = xv.cols();
        Mat out(xv.rows(), n);
        Mat inv(xv.rows(), 1);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            double ss = dot(xv.row(r), xv.row(r), n);
            double iv = 1.0 / std::sqrt(ss / static_cast<double>(n) + kRmsEps);
            inv(r, 0) = iv;
            for (std::size_t c = 0; c < n; ++c) out(r, c) = xv(r, c) * iv * gv(0, c);
        }
        auto inv_shared = std::make_shared<Mat>(std::move(inv));
        return push(std::move(out), wants(x) || wants(gain),
                    [x, gain, inv_shared](Tape& t, const Mat& g) {
                        const Mat& xv = t.val(x);
                        const Mat& gv = t.val(gain);
                        const std::size_t n = xv.cols();
                        Mat* gx = t.wants(x) ? &t.ensure_grad(x) : nullptr;
                        Mat* gg = t.wants(gain) ? &t.ensure_grad(gain) : nullptr;
                        for (std::size_t r = 0; r < xv.rows(); ++r) {
                            double iv = (*inv_shared)(r, 0);
                            double s = 0.0; // sum_j dy_j * g_j * x_j
                            for (std::size_t c = 0; c < n; ++c) s += g(r, c) * gv(0, c) * xv(r, c);
                            double coef = s * iv * iv * iv / static_cast<double>(n);
                            for (std::size_t c = 0; c < n; ++c) {
                                if (gx) (*gx)(r, c) += g(r, c) * gv(0, c) * iv - coef * xv(r, c);
                                if (gg) (*gg)(0, c) += g(r, c) * xv(r, c) * iv;
                            }
                        }
                    });
    }

    // Softmax over each full row (log-sum-exp stabilized).
    Var softmax_rows(Var a) { return softmax_impl(a, false); }

    // Softmax where row i only sees columns 0..i (decoder self-attention).
    Var softmax_rows_causal(Var a) { return softmax_impl(a, true); }

    // Row softmax restricted to unmasked columns; masked columns get exactly
    // zero probability and zero input gradient.
    Var softmax_rows_masked(Var a, const std::vector<char>& col_mask) {
        const Mat& av = val(a);
        Mat out(av.rows(), av.cols());
        for (std::size_t r = 0; r < av.rows(); ++r) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < av.cols(); ++c)
                if (col_mask[c]) mx = std::max(mx, av(r, c));
            if (mx == -std::numeric_limits<double>::infinity())
                throw NumericError("softmax_rows_masked: all columns masked");
            double se = 0.0;
            for (std::size_t c = 0; c < av.cols(); ++c) {
                if (!col_mask[c]) continue;
                double e = std::exp(av(r, c) - mx);
                out(r, c) = e;
                se += e;
            }
            double inv = 1.0 / se;
            for (std::size_t c = 0; c < av.cols(); ++c)
                if (col_mask[c]) out(r, c) *= inv;
        }
        auto mask = std::make_shared<std::vector<char>>(col_mask);
        return push(std::move(out), wants(a), [a, mask, self = next_id()](Tape& t, const Mat& g) {
            const Mat& p = t.nodes_[self].value;
            Mat ga(p.rows(), p.cols());
            for (std::size_t r = 0; r < p.rows(); ++r) {
                double gs = 0.0;
                for (std::size_t c = 0; c < p.cols(); ++c)
                    if ((*mask)[c]) gs += g(r, c) * p(r, c);
                for (std::size_t c = 0; c < p.cols(); ++c)
                    if ((*mask)[c]) ga(r, c) = p(r, c) * (g(r, c) - gs);
            }
            t.acc(a, ga);
        });
    }

    Var log_softmax_rows(Var a) {
        const Mat& av = val(a);
        Mat out(av.rows(), av.cols());
        for (std::size_t r = 0; r < av.rows(); ++r) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < av.cols(); ++c) mx = std::max(mx, av(r, c));
            double se = 0.0;
            for (std::size_t c = 0; c < av.cols(); ++c) se += std::exp(av(r, c) - mx);
            double lse = mx + std::log(se);
            for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) = av(r, c) - lse;
        }
        return push(std::move(out), wants(a), [a, self = next_id()](Tape& t, const Mat& g) {
            const Mat& y = t.nodes_[self].value;
            Mat ga = g;
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double gs = 0.0;
                for (std::size_t c = 0; c < y.cols(); ++c) gs += g(r, c);
                for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) -= std::exp(y(r, c)) * gs;
            }
            t.acc(a, ga);
        });
    }

    // ------------------------------------------------------------------
    // Gather / reshape
    // ------------------------------------------------------------------

    // Row gather: out[i] = table[ids[i]].
    Var embed(Var table, std::vector<int> ids) {
        const Mat& tv = val(table);
        Mat out(ids.size(), tv.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows())
                throw DataError("embed: id " + std::to_string(ids[i]) + " outside table of " +
                                std::to_string(tv.rows()) + " rows");
            for (std::size_t c = 0; c < tv.cols(); ++c) out(i, c) = tv(static_cast<std::size_t>(ids[i]), c);
        }
        return push(std::move(out), wants(table),
                    [table, ids = std::move(ids)](Tape& t, const Mat& g) {
                        Mat& gt = t.ensure_grad(table);
                        for (std::size_t i = 0; i < ids.size(); ++i)
                            for (std::size_t c = 0; c < g.cols(); ++c)
                                gt(static_cast<std::size_t>(ids[i]), c) += g(i, c);
                    });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        std::size_t rows = 0;
        const std::size_t cols = val(parts.front()).cols();
        for (Var p : parts) rows += val(p).rows();
        Mat out(rows, cols);
        std::size_t r = 0;
        for (Var p : parts) {
            const Mat& pv = val(p);
            for (std::size_t i = 0; i < pv.rows(); ++i, ++r)
                for (std::size_t c = 0; c < cols; ++c) out(r, c) = pv(i, c);
        }
        bool rg = false;
        for (Var p : parts) rg = rg || wants(p);
        return push(std::move(out), rg, [parts](Tape& t, const Mat& g) {
            std::size_t r = 0;
            for (Var p : parts) {
                const Mat& pv = t.val(p);
                if (t.wants(p)) {
                    Mat& gp = t.ensure_grad(p);
                    for (std::size_t i = 0; i < pv.rows(); ++i)
                        for (std::size_t c = 0; c < g.cols(); ++c) gp(i, c) += g(r + i, c);
                }
                r += pv.rows();
            }
        });
    }

    Var rows(Var a, std::size_t r0, std::size_t nrows) {
        const Mat& av = val(a);
        Mat out(nrows, av.cols());
        for (std::size_t i = 0; i < nrows; ++i)
            for (std::size_t c = 0; c < av.cols(); ++c) out(i, c) = av(r0 + i, c);
        return push(std::move(out), wants(a), [a, r0](Tape& t, const Mat& g) {
            Mat& ga = t.ensure_grad(a);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t c = 0; c < g.cols(); ++c) ga(r0 + i, c) += g(i, c);
        });
    }

    // ------------------------------------------------------------------
    // Reductions used by scoring and losses
    // ------------------------------------------------------------------

    // Mean over unmasked rows of (max over unmasked cols). Ties in the max
    // take the first (lowest-index) column. Yields a 1x1 matrix.
    Var avg_max(Var a, const std::vector<char>& row_mask, const std::vector<char>& col_mask) {
        const Mat& av = val(a);
        std::size_t nrows = 0;
        auto argmax = std::make_shared<std::vector<int>>(av.rows(), -1);
        double total = 0.0;
        for (std::size_t r = 0; r < av.rows(); ++r) {
            if (!row_mask.empty() && !row_mask[r]) continue;
            double best = -std::numeric_limits<double>::infinity();
            int bj = -1;
            for (std::size_t c = 0; c < av.cols(); ++c) {
                if (!col_mask.empty() && !col_mask[c]) continue;
                if (av(r, c) > best) {
                    best = av(r, c);
                    bj = static_cast<int>(c);
                }
            }
            if (bj < 0) throw NumericError("avg_max: no unmasked column");
            (*argmax)[r] = bj;
            total += best;
            ++nrows;
        }
        if (nrows == 0) throw NumericError("avg_max: no unmasked row");
        Mat out(1, 1);
        out(0, 0) = total / static_cast<double>(nrows);
        double invn = 1.0 / static_cast<double>(nrows);
        return push(std::move(out), wants(a), [a, argmax, invn](Tape& t, const Mat& g) {
            Mat& ga = t.ensure_grad(a);
            for (std::size_t r = 0; r < ga.rows(); ++r)
                if ((*argmax)[r] >= 0) ga(r, static_cast<std::size_t>((*argmax)[r])) += g(0, 0) * invn;
        });
    }

    // Stacks 1x1 scalars into an n x 1 column.
    Var stack_scalars(const std::vector<Var>& xs) {
        Mat out(xs.size(), 1);
        for (std::size_t i = 0; i < xs.size(); ++i) out(i, 0) = val(xs[i])(0, 0);
        bool rg = false;
        for (Var x : xs) rg = rg || wants(x);
        return push(std::move(out), rg, [xs](Tape& t, const Mat& g) {
            for (std::size_t i = 0; i < xs.size(); ++i) {
                Mat gi(1, 1);
                gi(0, 0) = g(i, 0);
                t.acc(xs[i], gi);
            }
        });
    }

    // Stacks 1x1 scalars into a 1 x n row.
    Var stack_scalars_row(const std::vector<Var>& xs) {
        Mat out(1, xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) out(0, i) = val(xs[i])(0, 0);
        bool rg = false;
        for (Var x : xs) rg = rg || wants(x);
        return push(std::move(out), rg, [xs](Tape& t, const Mat& g) {
            for (std::size_t i = 0; i < xs.size(); ++i) {
                Mat gi(1, 1);
                gi(0, 0) = g(0, i);
                t.acc(xs[i], gi);
            }
        });
    }

    // sum_i a_i * w_i over all elements -> 1x1 (w is a plain constant).
    Var dot_const(Var a, Mat w) {
        const Mat& av = val(a);
        Mat out(1, 1);
        for (std::size_t i = 0; i < av.size(); ++i) out(0, 0) += av.vec()[i] * w.vec()[i];
        auto ws = std::make_shared<Mat>(std::move(w));
        return push(std::move(out), wants(a), [a, ws](Tape& t, const Mat& g) {
            Mat ga = *ws;
            for (double& x : ga.vec()) x *= g(0, 0);
            t.acc(a, ga);
        });
    }

    // Negative log likelihood: -sum_t logprob[t][targets[t]] -> 1x1.
    Var nll(Var logprob_rows, std::vector<int> targets) {
        const Mat& lp = val(logprob_rows);
        Mat out(1, 1);
        for (std::size_t t = 0; t < targets.size(); ++t)
            out(0, 0) -= lp(t, static_cast<std::size_t>(targets[t]));
        return push(std::move(out), wants(logprob_rows),
                    [logprob_rows, targets = std::move(targets)](Tape& t, const Mat& g) {
                        Mat& gl = t.ensure_grad(logprob_rows);
                        for (std::size_t i = 0; i < targets.size(); ++i)
                            gl(i, static_cast<std::size_t>(targets[i])) -= g(0, 0);
                    });
    }

    Var sum_scalars(const std::vector<Var>& xs) {
        Mat out(1, 1);
        for (Var x : xs) out(0, 0) += val(x)(0, 0);
        bool rg = false;
        for (Var x : xs) rg = rg || wants(x);
        return push(std::move(out), rg, [xs](Tape& t, const Mat& g) {
            for (Var x : xs) t.acc(x, g);
        });
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    // Seeds adjoints (adding each seed matrix into its node) then sweeps the
    // tape in reverse creation order. A second sweep without new recorded
    // work is a misuse of the forward/backward contract.
    void backward(const std::vector<std::pair<Var, Mat>>& seeds) {
        if (!grad_enabled_) throw std::logic_error("backward on a no-grad tape");
        if (backward_done_) throw std::logic_error("backward called twice without a new forward");
        backward_done_ = true;
        for (const auto& [v, g] : seeds) acc(v, g);
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty() || !n.backprop) continue;
            n.backprop(*this, n.grad);
        }
    }

    void backward(Var scalar_loss, double weight = 1.0) {
        Mat seed(1, 1);
        seed(0, 0) = weight;
        backward({{scalar_loss, seed}});
    }

    Mat& ensure_grad(Var v) {
        Node& n = nodes_[check(v)];
        if (n.grad.empty()) n.grad = Mat(n.value.rows(), n.value.cols());
        return n.grad;
    }

  private:
    static constexpr double kRmsEps = 1e-6;

    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
        std::function<void(Tape&, const Mat&)> backprop;
    };

    int next_id() const { return static_cast<int>(nodes_.size()); }

    std::size_t check(Var v) const {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw std::logic_error("invalid tape var");
        return static_cast<std::size_t>(v.id);
    }

    bool wants(Var v) const { return nodes_[check(v)].requires_grad; }

    void acc(Var v, const Mat& g) {
        Node& n = nodes_[check(v)];
        if (!n.requires_grad) return;
        if (n.grad.empty()) n.grad = Mat(n.value.rows(), n.value.cols());
        for (std::size_t i = 0; i < g.size(); ++i) n.grad.vec()[i] += g.vec()[i];
    }

    Var push(Mat value, bool requires_grad, std::function<void(Tape&, const Mat&)> backprop) {
        backward_done_ = false;
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad && grad_enabled_;
        if (n.requires_grad) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size() - 1)};
    }

    Var softmax_impl(Var a, bool causal) {
        const Mat& av = val(a);
        Mat out(av.rows(), av.cols());
        for (std::size_t r = 0; r < av.rows(); ++r) {
            std::size_t lim = causal ? std::min(r + 1, av.cols()) : av.cols();
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < lim; ++c) mx = std::max(mx, av(r, c));
            double se = 0.0;
            for (std::size_t c = 0; c < lim; ++c) {
                double e = std::exp(av(r, c) - mx);
                out(r, c) = e;
                se += e;
            }
            double inv = 1.0 / se;
            for (std::size_t c = 0; c < lim; ++c) out(r, c) *= inv;
        }
        return push(std::move(out), wants(a),
                    [a, causal, self = next_id()](Tape& t, const Mat& g) {
                        const Mat& p = t.nodes_[self].value;
                        Mat ga(p.rows(), p.cols());
                        for (std::size_t r = 0; r < p.rows(); ++r) {
                            std::size_t lim = causal ? std::min(r + 1, p.cols()) : p.cols();
                            double gs = 0.0;
                            for (std::size_t c = 0; c < lim; ++c) gs += g(r, c) * p(r, c);
                            for (std::size_t c = 0; c < lim; ++c) ga(r, c) = p(r, c) * (g(r, c) - gs);
                        }
                        t.acc(a, ga);
                    });
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
    bool backward_done_ = false;
};

} // namespace ratt::ad
