// Reverse-mode autodiff tape over Mat<Real>. Every forward pass (training
// or inference) builds one Graph; backward walks the tape in reverse
// creation order, which is a valid topological order and gives a fixed,
// reproducible accumulation order.
//
// Parameters are not nodes: ops that consume a parameter take a PRef
// holding the value and an optional gradient sink, so per-thread gradient
// buffers fall out naturally and inference can simply pass no sink.
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "sycoca/errors.hpp"
#include "sycoca/mat.hpp"

namespace sycoca {

template <class Real>
struct PRef {
    const Mat<Real>* v = nullptr;
    Mat<Real>* g = nullptr;
};

template <class Real>
PRef<Real> pref(const Mat<Real>& v) {
    return {&v, nullptr};
}
template <class Real>
PRef<Real> pref(const Mat<Real>& v, Mat<Real>& g) {
    return {&v, &g};
}

template <class Real>
class Graph {
public:
    using Id = int;

    explicit Graph(bool recording = true) : recording_(recording) { nodes_.reserve(256); }

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return recording_; }

    const Mat<Real>& val(Id id) const { return nodes_[static_cast<std::size_t>(id)].val; }

    Mat<Real>& grad(Id id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) n.grad = Mat<Real>(n.val.rows, n.val.cols);
        return n.grad;
    }

    void seed(Id id, Real value) {
        Mat<Real>& g = grad(id);
        for (auto& x : g.a) x += value;
    }

    void backward() {
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.size() == 0 || !n.back) continue;
            n.back(*this, n.grad);
        }
    }

    // ----- ops -----

    Id leaf(Mat<Real> v) { return push_(std::move(v), nullptr); }

    // y = x W (+ b broadcast over rows); b.v may be null.
    Id linear(Id x, PRef<Real> W, PRef<Real> b) {
        const Mat<Real>& xv = val(x);
        Mat<Real> y = matmul_nn(xv, *W.v);
        if (b.v) {
            for (int r = 0; r < y.rows; ++r) {
                Real* yr = y.row(r);
                const Real* bv = b.v->row(0);
                for (int c = 0; c < y.cols; ++c) yr[c] += bv[c];
            }
        }
        return push_(std::move(y), [x, W, b](Graph& g, const Mat<Real>& dy) {
            gemm_nt_acc(dy, *W.v, g.grad(x));          // dx += dy W^T
            if (W.g) gemm_tn_acc(g.val(x), dy, *W.g);  // dW += x^T dy
            if (b.v && b.g) {
                Real* bg = b.g->row(0);
                for (int r = 0; r < dy.rows; ++r) {
                    const Real* dr = dy.row(r);
                    for (int c = 0; c < dy.cols; ++c) bg[c] += dr[c];
                }
            }
        });
    }

    Id matmul(Id a, Id b) {
        Mat<Real> y = matmul_nn(val(a), val(b));
        return push_(std::move(y), [a, b](Graph& g, const Mat<Real>& dy) {
            gemm_nt_acc(dy, g.val(b), g.grad(a));
            gemm_tn_acc(g.val(a), dy, g.grad(b));
        });
    }

    // y = a b^T
    Id matmul_nt_op(Id a, Id b) {
        Mat<Real> y = matmul_nt(val(a), val(b));
        return push_(std::move(y), [a, b](Graph& g, const Mat<Real>& dy) {
            gemm_nn_acc(dy, g.val(b), g.grad(a));
            gemm_tn_acc(dy, g.val(a), g.grad(b));
        });
    }

    Id add(Id a, Id b) {
        Mat<Real> y = val(a);
        y.add_inplace(val(b));
        return push_(std::move(y), [a, b](Graph& g, const Mat<Real>& dy) {
            g.grad(a).add_inplace(dy);
            g.grad(b).add_inplace(dy);
        });
    }

    Id add_param(Id x, PRef<Real> p) {
        Mat<Real> y = val(x);
        y.add_inplace(*p.v);
        return push_(std::move(y), [x, p](Graph& g, const Mat<Real>& dy) {
            g.grad(x).add_inplace(dy);
            if (p.g) p.g->add_inplace(dy);
        });
    }

    Id scale(Id x, Real c) {
        Mat<Real> y = val(x);
        for (auto& v : y.a) v *= c;
        return push_(std::move(y), [x, c](Graph& g, const Mat<Real>& dy) {
            Mat<Real>& dx = g.grad(x);
            for (std::size_t i = 0; i < dy.a.size(); ++i) dx.a[i] += c * dy.a[i];
        });
    }

    Id rows(Id x, int r0, int r1) {
        const Mat<Real>& xv = val(x);
        assert(0 <= r0 && r0 < r1 && r1 <= xv.rows);
        Mat<Real> y(r1 - r0, xv.cols);
        for (int r = r0; r < r1; ++r)
            for (int c = 0; c < xv.cols; ++c) y.at(r - r0, c) = xv.at(r, c);
        return push_(std::move(y), [x, r0](Graph& g, const Mat<Real>& dy) {
            Mat<Real>& dx = g.grad(x);
            for (int r = 0; r < dy.rows; ++r)
                for (int c = 0; c < dy.cols; ++c) dx.at(r0 + r, c) += dy.at(r, c);
        });
    }

    Id cols(Id x, int c0, int c1) {
        const Mat<Real>& xv = val(x);
        assert(0 <= c0 && c0 < c1 && c1 <= xv.cols);
        Mat<Real> y(xv.rows, c1 - c0);
        for (int r = 0; r < xv.rows; ++r)
            for (int c = c0; c < c1; ++c) y.at(r, c - c0) = xv.at(r, c);
        return push_(std::move(y), [x, c0](Graph& g, const Mat<Real>& dy) {
            Mat<Real>& dx = g.grad(x);
            for (int r = 0; r < dy.rows; ++r)
                for (int c = 0; c < dy.cols; ++c) dx.at(r, c0 + c) += dy.at(r, c);
        });
    }

    Id concat_cols(const std::vector<Id>& parts) {
        assert(!parts.empty());
        int total = 0;
        const int nrows = val(parts[0]).rows;
        for (Id p : parts) total += val(p).cols;
        Mat<Real> y(nrows, total);
        int off = 0;
        for (Id p : parts) {
            const Mat<Real>& pv = val(p);
            for (int r = 0; r < nrows; ++r)
                for (int c = 0; c < pv.cols; ++c) y.at(r, off + c) = pv.at(r, c);
            off += pv.cols;
        }
        return push_(std::move(y), [parts](Graph& g, const Mat<Real>& dy) {
            int off = 0;
            for (Id p : parts) {
                Mat<Real>& dp = g.grad(p);
                for (int r = 0; r < dy.rows; ++r)
                    for (int c = 0; c < dp.cols; ++c) dp.at(r, c) += dy.at(r, off + c);
                off += dp.cols;
            }
        });
    }

    // y = [p; x] with p a learned 1 x d row (CLS slot).
    Id prepend_row_param(PRef<Real> p, Id x) {
        const Mat<Real>& xv = val(x);
        Mat<Real> y(xv.rows + 1, xv.cols);
        for (int c = 0; c < xv.cols; ++c) y.at(0, c) = p.v->at(0, c);
        for (int r = 0; r < xv.rows; ++r)
            for (int c = 0; c < xv.cols; ++c) y.at(r + 1, c) = xv.at(r, c);
        return push_(std::move(y), [p, x](Graph& g, const Mat<Real>& dy) {
            if (p.g)
                for (int c = 0; c < dy.cols; ++c) p.g->at(0, c) += dy.at(0, c);
            Mat<Real>& dx = g.grad(x);
            for (int r = 0; r < dx.rows; ++r)
                for (int c = 0; c < dy.cols; ++c) dx.at(r, c) += dy.at(r + 1, c);
        });
    }

    // Row i becomes the learned mask token where bits[i] is set.
    Id mask_rows(Id x, PRef<Real> token, std::vector<std::uint8_t> bits) {
        const Mat<Real>& xv = val(x);
        assert(static_cast<int>(bits.size()) == xv.rows);
        Mat<Real> y = xv;
        for (int r = 0; r < y.rows; ++r)
            if (bits[r])
                for (int c = 0; c < y.cols; ++c) y.at(r, c) = token.v->at(0, c);
        return push_(std::move(y), [x, token, bits = std::move(bits)](Graph& g, const Mat<Real>& dy) {
            Mat<Real>& dx = g.grad(x);
            for (int r = 0; r < dy.rows; ++r) {
                if (bits[r]) {
                    if (token.g)
                        for (int c = 0; c < dy.cols; ++c) token.g->at(0, c) += dy.at(r, c);
                } else {
                    for (int c = 0; c < dy.cols; ++c) dx.at(r, c) += dy.at(r, c);
                }
            }
        });
    }

    Id layernorm(Id x, PRef<Real> gain, PRef<Real> bias, Real eps = Real(1e-5)) {
        const Mat<Real>& xv = val(x);
        const int n = xv.cols;
        Mat<Real> y(xv.rows, n);
        Mat<Real> xhat(xv.rows, n);
        std::vector<Real> inv_std(static_cast<std::size_t>(xv.rows));
        for (int r = 0; r < xv.rows; ++r) {
            const Real* xr = xv.row(r);
            Real mean = 0;
            for (int c = 0; c < n; ++c) mean += xr[c];
            mean /= Real(n);
            Real var = 0;
            for (int c = 0; c < n; ++c) {
                const Real d = xr[c] - mean;
                var += d * d;
            }
            var /= Real(n);
            const Real istd = Real(1) / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(r)] = istd;
            Real* hr = xhat.row(r);
            Real* yr = y.row(r);
            for (int c = 0; c < n; ++c) {
                hr[c] = (xr[c] - mean) * istd;
                yr[c] = hr[c] * gain.v->at(0, c) + bias.v->at(0, c);
            }
        }
        return push_(std::move(y), [x, gain, bias, xhat = std::move(xhat),
                                    inv_std = std::move(inv_std)](Graph& g, const Mat<Real>& dy) {
            Mat<Real>& dx = g.grad(x);
            const int n = dy.cols;
            for (int r = 0; r < dy.rows; ++r) {
                const Real* dyr = dy.row(r);
                const Real* hr = xhat.row(r);
                Real sum_dh = 0, sum_dh_h = 0;
                for (int c = 0; c < n; ++c) {
                    const Real dh = dyr[c] * gain.v->at(0, c);
                    sum_dh += dh;
                    sum_dh_h += dh * hr[c];
                }
                const Real istd = inv_std[static_cast<std::size_t>(r)];
                Real* dxr = dx.row(r);
                for (int c = 0; c < n; ++c) {
                    const Real dh = dyr[c] * gain.v->at(0, c);
                    dxr[c] += istd * (dh - (sum_dh + hr[c] * sum_dh_h) / Real(n));
                }
                if (gain.g)
                    for (int c = 0; c < n; ++c) gain.g->at(0, c) += dyr[c] * hr[c];
                if (bias.g)
                    for (int c = 0; c < n; ++c) bias.g->at(0, c) += dyr[c];
            }
        });
    }

    Id gelu(Id x) {
        const Mat<Real>& xv = val(x);
        Mat<Real> y(xv.rows, xv.cols);
        for (std::size_t i = 0; i < xv.a.size(); ++i) {
            const Real v = xv.a[i];
            y.a[i] = v * Real(0.5) * (Real(1) + std::erf(v * Real(0.7071067811865475)));
        }
        return push_(std::move(y), [x](Graph& g, const Mat<Real>& dy) {
            const Mat<Real>& xv = g.val(x);
            Mat<Real>& dx = g.grad(x);
            constexpr Real inv_sqrt2 = Real(0.7071067811865475);
            constexpr Real inv_sqrt2pi = Real(0.3989422804014327);
            for (std::size_t i = 0; i < dy.a.size(); ++i) {
                const Real v = xv.a[i];
                const Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
                const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * v * v);
                dx.a[i] += dy.a[i] * (cdf + v * pdf);
            }
        });
    }

    // Row-wise softmax restricted to allowed entries (rows*cols bitmap;
    // empty bitmap = everything allowed). Disallowed outputs are exactly 0.
    // Every row must have at least one allowed entry.
    Id softmax_rows(Id x, std::vector<std::uint8_t> allowed) {
        const Mat<Real>& xv = val(x);
        assert(allowed.empty() || static_cast<int>(allowed.size()) == xv.rows * xv.cols);
        Mat<Real> y(xv.rows, xv.cols);
        const int n = xv.cols;
        for (int r = 0; r < xv.rows; ++r) {
            const Real* xr = xv.row(r);
            const std::uint8_t* ar = allowed.empty() ? nullptr : allowed.data() + r * n;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (int c = 0; c < n; ++c)
                if ((!ar || ar[c]) && xr[c] > mx) mx = xr[c];
            assert(mx > -std::numeric_limits<Real>::infinity());
            Real sum = 0;
            Real* yr = y.row(r);
            for (int c = 0; c < n; ++c) {
                yr[c] = (!ar || ar[c]) ? std::exp(xr[c] - mx) : Real(0);
                sum += yr[c];
            }
            const Real inv = Real(1) / sum;
            for (int c = 0; c < n; ++c) yr[c] *= inv;
        }
        return push_(std::move(y), [x, self = Id(nodes_.size())](Graph& g, const Mat<Real>& dy) {
            const Mat<Real>& yv = g.val(self);
            Mat<Real>& dx = g.grad(x);
            const int n = dy.cols;
            for (int r = 0; r < dy.rows; ++r) {
                const Real* yr = yv.row(r);
                const Real* dyr = dy.row(r);
                Real dot = 0;
                for (int c = 0; c < n; ++c) dot += yr[c] * dyr[c];
                Real* dxr = dx.row(r);
                for (int c = 0; c < n; ++c) dxr[c] += yr[c] * (dyr[c] - dot);
            }
        });
    }

    Id embed(PRef<Real> table, std::vector<int> ids) {
        Mat<Real> y(static_cast<int>(ids.size()), table.v->cols);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            const int id = ids[r];
            if (id < 0 || id >= table.v->rows)
                throw InputError("embed: token id " + std::to_string(id) + " out of range [0, " +
                                 std::to_string(table.v->rows) + ")");
            for (int c = 0; c < y.cols; ++c) y.at(static_cast<int>(r), c) = table.v->at(id, c);
        }
        return push_(std::move(y), [table, ids = std::move(ids)](Graph&, const Mat<Real>& dy) {
            if (!table.g) return;
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (int c = 0; c < dy.cols; ++c)
                    table.g->at(ids[r], c) += dy.at(static_cast<int>(r), c);
        });
    }

    // Row-wise v / (||v|| + eps).
    Id l2norm_rows(Id x, Real eps = Real(1e-8)) {
        const Mat<Real>& xv = val(x);
        Mat<Real> y(xv.rows, xv.cols);
        std::vector<Real> norms(static_cast<std::size_t>(xv.rows));
        for (int r = 0; r < xv.rows; ++r) {
            const Real* xr = xv.row(r);
            Real sq = 0;
            for (int c = 0; c < xv.cols; ++c) sq += xr[c] * xr[c];
            const Real n = std::sqrt(sq);
            norms[static_cast<std::size_t>(r)] = n;
            const Real inv = Real(1) / (n + eps);
            for (int c = 0; c < xv.cols; ++c) y.at(r, c) = xr[c] * inv;
        }
        return push_(std::move(y),
                     [x, eps, norms = std::move(norms)](Graph& g, const Mat<Real>& dy) {
                         const Mat<Real>& xv = g.val(x);
                         Mat<Real>& dx = g.grad(x);
                         for (int r = 0; r < dy.rows; ++r) {
                             const Real n = norms[static_cast<std::size_t>(r)];
                             const Real ne = n + eps;
                             const Real n_safe = n > Real(1e-30) ? n : Real(1e-30);
                             const Real* xr = xv.row(r);
                             const Real* dyr = dy.row(r);
                             Real dot = 0;
                             for (int c = 0; c < dy.cols; ++c) dot += xr[c] * dyr[c];
                             const Real coef = dot / (n_safe * ne * ne);
                             Real* dxr = dx.row(r);
                             for (int c = 0; c < dy.cols; ++c)
                                 dxr[c] += dyr[c] / ne - xr[c] * coef;
                         }
                     });
    }

    // Mean over masked rows of -log softmax(logits_r)[target_r]; 1x1 output.
    Id ce_rows(Id logits, std::vector<int> targets, std::vector<std::uint8_t> mask) {
        const Mat<Real>& lv = val(logits);
        assert(static_cast<int>(targets.size()) == lv.rows);
        assert(static_cast<int>(mask.size()) == lv.rows);
        int count = 0;
        for (auto m : mask) count += m ? 1 : 0;
        if (count == 0) throw InputError("ce_rows: empty loss mask");
        Real total = 0;
        for (int r = 0; r < lv.rows; ++r) {
            if (!mask[static_cast<std::size_t>(r)]) continue;
            const Real* xr = lv.row(r);
            Real mx = xr[0];
            for (int c = 1; c < lv.cols; ++c) mx = std::max(mx, xr[c]);
            Real sum = 0;
            for (int c = 0; c < lv.cols; ++c) sum += std::exp(xr[c] - mx);
            total += (mx + std::log(sum)) - xr[targets[static_cast<std::size_t>(r)]];
        }
        Mat<Real> y(1, 1);
        y.at(0, 0) = total / Real(count);
        return push_(std::move(y), [logits, targets = std::move(targets), mask = std::move(mask),
                                    count](Graph& g, const Mat<Real>& dy) {
            const Real go = dy.at(0, 0) / Real(count);
            const Mat<Real>& lv = g.val(logits);
            Mat<Real>& dl = g.grad(logits);
            for (int r = 0; r < lv.rows; ++r) {
                if (!mask[static_cast<std::size_t>(r)]) continue;
                const Real* xr = lv.row(r);
                Real mx = xr[0];
                for (int c = 1; c < lv.cols; ++c) mx = std::max(mx, xr[c]);
                Real sum = 0;
                for (int c = 0; c < lv.cols; ++c) sum += std::exp(xr[c] - mx);
                const Real inv = Real(1) / sum;
                Real* dr = dl.row(r);
                for (int c = 0; c < lv.cols; ++c) dr[c] += go * std::exp(xr[c] - mx) * inv;
                dr[targets[static_cast<std::size_t>(r)]] -= go;
            }
        });
    }

    // Masked L1 against a constant target; normalized divides by
    // (#masked rows * row dim) so the value is a per-element mean.
    Id l1_masked(Id pred, Mat<Real> target, std::vector<std::uint8_t> bits, bool normalize) {
        const Mat<Real>& pv = val(pred);
        assert(pv.same_shape(target));
        assert(static_cast<int>(bits.size()) == pv.rows);
        long long count = 0;
        for (auto b : bits) count += b ? 1 : 0;
        if (count == 0) throw InputError("l1_masked: empty mask");
        const Real denom = normalize ? Real(count) * Real(pv.cols) : Real(1);
        Real total = 0;
        for (int r = 0; r < pv.rows; ++r) {
            if (!bits[static_cast<std::size_t>(r)]) continue;
            const Real* pr = pv.row(r);
            const Real* tr = target.row(r);
            for (int c = 0; c < pv.cols; ++c) total += std::abs(pr[c] - tr[c]);
        }
        Mat<Real> y(1, 1);
        y.at(0, 0) = total / denom;
        return push_(std::move(y), [pred, target = std::move(target), bits = std::move(bits),
                                    denom](Graph& g, const Mat<Real>& dy) {
            const Real go = dy.at(0, 0) / denom;
            const Mat<Real>& pv = g.val(pred);
            Mat<Real>& dp = g.grad(pred);
            for (int r = 0; r < pv.rows; ++r) {
                if (!bits[static_cast<std::size_t>(r)]) continue;
                const Real* pr = pv.row(r);
                const Real* tr = target.row(r);
                Real* dr = dp.row(r);
                for (int c = 0; c < pv.cols; ++c) {
                    const Real d = pr[c] - tr[c];
                    dr[c] += go * (d > 0 ? Real(1) : (d < 0 ? Real(-1) : Real(0)));
                }
            }
        });
    }

    // y = s * x with s = min(exp(p), cap); the clamp zeroes dp beyond cap.
    Id scale_by_exp_param(Id x, PRef<Real> p, Real cap) {
        const Real raw = std::exp(p.v->at(0, 0));
        const bool clamped = raw > cap;
        const Real s = clamped ? cap : raw;
        Mat<Real> y = val(x);
        for (auto& v : y.a) v *= s;
        return push_(std::move(y), [x, p, s, clamped](Graph& g, const Mat<Real>& dy) {
            const Mat<Real>& xv = g.val(x);
            Mat<Real>& dx = g.grad(x);
            Real dot = 0;
            for (std::size_t i = 0; i < dy.a.size(); ++i) {
                dx.a[i] += s * dy.a[i];
                dot += dy.a[i] * xv.a[i];
            }
            if (p.g && !clamped) p.g->at(0, 0) += dot * s;
        });
    }

    Id transpose_node(Id x) {
        Mat<Real> y = transposed(val(x));
        return push_(std::move(y), [x](Graph& g, const Mat<Real>& dy) {
            Mat<Real>& dx = g.grad(x);
            for (int r = 0; r < dy.rows; ++r)
                for (int c = 0; c < dy.cols; ++c) dx.at(c, r) += dy.at(r, c);
        });
    }

private:
    struct Node {
        Mat<Real> val;
        Mat<Real> grad;
        std::function<void(Graph&, const Mat<Real>&)> back;
    };

    Id push_(Mat<Real> v, std::function<void(Graph&, const Mat<Real>&)> back) {
        Node n;
        n.val = std::move(v);
        if (recording_) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    bool recording_;
    std::vector<Node> nodes_;
};

}  // namespace sycoca
