#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "memorykt/tape.hpp"

// Differentiable primitives. Each op validates shapes up front (errors name
// the operation and the offending shapes), computes the forward value, and
// records a closure implementing its exact vector-Jacobian product.
//
// Conventions:
//   - matrices are [rows x cols]; matmul is [m x k] * [k x n]
//   - sigmoid outputs are clamped to [1e-7, 1 - 1e-7]
//   - relu gradient at exactly 0 is 0
//   - standard deviations entering the KL are floored at 1e-6

namespace memorykt::ad {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kSigmaFloor = 1e-6;

namespace detail {

template <typename S>
[[noreturn]] inline void op_fail(const char* op, const std::string& msg) {
    throw std::invalid_argument(std::string(op) + ": " + msg);
}

template <typename S>
inline void require_rank2(const char* op, const Tensor<S>& t) {
    if (t.rank() != 2) op_fail<S>(op, "expected rank-2 tensor, got " + t.shape_str());
}

template <typename S>
inline void require_same_tape(const char* op, Var<S> a, Var<S> b) {
    if (a.tape != b.tape || a.tape == nullptr) op_fail<S>(op, "operands on different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: [m x k] * [k x n] -> [m x n]
// ---------------------------------------------------------------------------
template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    detail::require_same_tape("matmul", a, b);
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    detail::require_rank2("matmul", av);
    detail::require_rank2("matmul", bv);
    if (av.cols() != bv.rows()) {
        detail::op_fail<S>("matmul", "inner dimensions differ: " + av.shape_str() + " * " +
                                         bv.shape_str());
    }
    const int m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor<S> out({m, n});
    {
        const S* A = av.data();
        const S* B = bv.data();
        S* O = out.data();
        for (int i = 0; i < m; ++i) {
            const S* arow = A + static_cast<long>(i) * k;
            S* orow = O + static_cast<long>(i) * n;
            for (int p = 0; p < k; ++p) {
                const S apv = arow[p];
                if (apv == S(0)) continue;
                const S* brow = B + static_cast<long>(p) * n;
                for (int j = 0; j < n; ++j) orow[j] += apv * brow[j];
            }
        }
    }
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    const int aid = a.id, bid = b.id;
    return t.push(std::move(out), rg, [aid, bid, m, k, n](Tape<S>& tp, const Tensor<S>& g) {
        const Tensor<S>& av2 = tp.value(aid);
        const Tensor<S>& bv2 = tp.value(bid);
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            // ga[i,p] += sum_j g[i,j] * b[p,j]
            for (int i = 0; i < m; ++i) {
                const S* grow = g.data() + static_cast<long>(i) * n;
                S* garow = ga->data() + static_cast<long>(i) * k;
                for (int p = 0; p < k; ++p) {
                    const S* brow = bv2.data() + static_cast<long>(p) * n;
                    S acc = S(0);
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    garow[p] += acc;
                }
            }
        }
        if (Tensor<S>* gb = tp.grad_if_needed(bid)) {
            // gb[p,j] += sum_i a[i,p] * g[i,j]
            for (int i = 0; i < m; ++i) {
                const S* arow = av2.data() + static_cast<long>(i) * k;
                const S* grow = g.data() + static_cast<long>(i) * n;
                for (int p = 0; p < k; ++p) {
                    const S apv = arow[p];
                    if (apv == S(0)) continue;
                    S* gbrow = gb->data() + static_cast<long>(p) * n;
                    for (int j = 0; j < n; ++j) gbrow[j] += apv * grow[j];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// add: same shape, or row-vector broadcast [m x n] + [n] / [1 x n]
// ---------------------------------------------------------------------------
template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    detail::require_same_tape("add", a, b);
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    const bool same = av.same_shape(bv);
    const bool rowvec = !same && av.rank() == 2 &&
                        ((bv.rank() == 1 && bv.dim(0) == av.cols()) ||
                         (bv.rank() == 2 && bv.rows() == 1 && bv.cols() == av.cols()));
    if (!same && !rowvec) {
        detail::op_fail<S>("add", "incompatible shapes " + av.shape_str() + " + " + bv.shape_str());
    }
    Tensor<S> out(av.shape());
    if (same) {
        for (long i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
    } else {
        const int m = av.rows(), n = av.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at(i, j) = av.at(i, j) + bv[j];
    }
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    const int aid = a.id, bid = b.id;
    return t.push(std::move(out), rg, [aid, bid, same](Tape<S>& tp, const Tensor<S>& g) {
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            for (long i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
        }
        if (Tensor<S>* gb = tp.grad_if_needed(bid)) {
            if (same) {
                for (long i = 0; i < g.numel(); ++i) (*gb)[i] += g[i];
            } else {
                const int m = g.rows(), n = g.cols();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) (*gb)[j] += g.at(i, j);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// mul: elementwise, same shape
// ---------------------------------------------------------------------------
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
    detail::require_same_tape("mul", a, b);
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    if (!av.same_shape(bv)) {
        detail::op_fail<S>("mul", "shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    }
    Tensor<S> out(av.shape());
    for (long i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    const int aid = a.id, bid = b.id;
    return t.push(std::move(out), rg, [aid, bid](Tape<S>& tp, const Tensor<S>& g) {
        const Tensor<S>& av2 = tp.value(aid);
        const Tensor<S>& bv2 = tp.value(bid);
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            for (long i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv2[i];
        }
        if (Tensor<S>* gb = tp.grad_if_needed(bid)) {
            for (long i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av2[i];
        }
    });
}

// ---------------------------------------------------------------------------
// scale by a compile-time constant
// ---------------------------------------------------------------------------
template <typename S>
Var<S> scale(Var<S> a, S c) {
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    Tensor<S> out(av.shape());
    for (long i = 0; i < av.numel(); ++i) out[i] = c * av[i];
    const int aid = a.id;
    return t.push(std::move(out), t.requires_grad(aid), [aid, c](Tape<S>& tp, const Tensor<S>& g) {
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            for (long i = 0; i < g.numel(); ++i) (*ga)[i] += c * g[i];
        }
    });
}

// ---------------------------------------------------------------------------
// elementwise activations
// ---------------------------------------------------------------------------
template <typename S>
Var<S> relu(Var<S> a) {
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    Tensor<S> out(av.shape());
    for (long i = 0; i < av.numel(); ++i) out[i] = av[i] > S(0) ? av[i] : S(0);
    const int aid = a.id;
    const int oid = t.next_id();
    return t.push(std::move(out), t.requires_grad(aid), [aid, oid](Tape<S>& tp, const Tensor<S>& g) {
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            const Tensor<S>& y = tp.value(oid);
            for (long i = 0; i < g.numel(); ++i) {
                if (y[i] > S(0)) (*ga)[i] += g[i];
            }
        }
    });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    Tensor<S> out(av.shape());
    const S lo = static_cast<S>(kProbClamp), hi = static_cast<S>(1.0 - kProbClamp);
    for (long i = 0; i < av.numel(); ++i) {
        const double x = static_cast<double>(av[i]);
        double y = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        out[i] = std::clamp(static_cast<S>(y), lo, hi);
    }
    const int aid = a.id;
    const int oid = t.next_id();
    return t.push(std::move(out), t.requires_grad(aid), [aid, oid](Tape<S>& tp, const Tensor<S>& g) {
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            const Tensor<S>& y = tp.value(oid);
            for (long i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * y[i] * (S(1) - y[i]);
        }
    });
}

template <typename S>
Var<S> softplus(Var<S> a) {
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    Tensor<S> out(av.shape());
    for (long i = 0; i < av.numel(); ++i) {
        const double x = static_cast<double>(av[i]);
        // stable: ln(1 + e^x)
        const double y = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        out[i] = static_cast<S>(y);
    }
    const int aid = a.id;
    const int oid = t.next_id();
    return t.push(std::move(out), t.requires_grad(aid), [aid, oid](Tape<S>& tp, const Tensor<S>& g) {
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            // d/dx softplus(x) = sigmoid(x) = 1 - e^{-y}
            const Tensor<S>& y = tp.value(oid);
            for (long i = 0; i < g.numel(); ++i) {
                const double d = 1.0 - std::exp(-static_cast<double>(y[i]));
                (*ga)[i] += g[i] * static_cast<S>(d);
            }
        }
    });
}

template <typename S>
Var<S> tanh_op(Var<S> a) {
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    Tensor<S> out(av.shape());
    for (long i = 0; i < av.numel(); ++i) out[i] = static_cast<S>(std::tanh(static_cast<double>(av[i])));
    const int aid = a.id;
    const int oid = t.next_id();
    return t.push(std::move(out), t.requires_grad(aid), [aid, oid](Tape<S>& tp, const Tensor<S>& g) {
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            const Tensor<S>& y = tp.value(oid);
            for (long i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * (S(1) - y[i] * y[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// concat along the last axis (rank-2, equal row counts)
// ---------------------------------------------------------------------------
template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    Tape<S>& t = *parts[0].tape;
    int rows = -1, total = 0;
    bool rg = false;
    std::vector<int> widths;
    widths.reserve(parts.size());
    for (const Var<S>& p : parts) {
        detail::require_same_tape("concat_cols", parts[0], p);
        const Tensor<S>& v = t.value(p);
        detail::require_rank2("concat_cols", v);
        if (rows < 0) rows = v.rows();
        if (v.rows() != rows) {
            detail::op_fail<S>("concat_cols", "row counts differ: " + v.shape_str());
        }
        widths.push_back(v.cols());
        total += v.cols();
        rg = rg || t.requires_grad(p.id);
    }
    Tensor<S> out({rows, total});
    int off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor<S>& v = t.value(parts[k]);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < widths[k]; ++j) out.at(i, off + j) = v.at(i, j);
        off += widths[k];
    }
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (const Var<S>& p : parts) ids.push_back(p.id);
    return t.push(std::move(out), rg, [ids, widths, rows](Tape<S>& tp, const Tensor<S>& g) {
        int off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (Tensor<S>* gp = tp.grad_if_needed(ids[k])) {
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < widths[k]; ++j) gp->at(i, j) += g.at(i, off + j);
            }
            off += widths[k];
        }
    });
}

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
    return concat_cols<S>({a, b});
}

// ---------------------------------------------------------------------------
// slice_cols: columns [start, start+len) of a rank-2 tensor
// ---------------------------------------------------------------------------
template <typename S>
Var<S> slice_cols(Var<S> a, int start, int len) {
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    detail::require_rank2("slice_cols", av);
    if (start < 0 || len <= 0 || start + len > av.cols()) {
        detail::op_fail<S>("slice_cols", "range [" + std::to_string(start) + ", " +
                                             std::to_string(start + len) + ") out of " +
                                             av.shape_str());
    }
    const int m = av.rows();
    Tensor<S> out({m, len});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j) out.at(i, j) = av.at(i, start + j);
    const int aid = a.id;
    return t.push(std::move(out), t.requires_grad(aid),
                  [aid, start, len, m](Tape<S>& tp, const Tensor<S>& g) {
                      if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
                          for (int i = 0; i < m; ++i)
                              for (int j = 0; j < len; ++j) ga->at(i, start + j) += g.at(i, j);
                      }
                  });
}

// ---------------------------------------------------------------------------
// gather_rows: out[b, :] = table[idx[b], :]
// ---------------------------------------------------------------------------
template <typename S>
Var<S> gather_rows(Var<S> table, std::vector<int> idx) {
    Tape<S>& t = *table.tape;
    const Tensor<S>& tv = t.value(table);
    detail::require_rank2("gather_rows", tv);
    const int n = tv.rows(), d = tv.cols();
    for (int i : idx) {
        if (i < 0 || i >= n) {
            detail::op_fail<S>("gather_rows", "row index " + std::to_string(i) +
                                                  " out of table " + tv.shape_str());
        }
    }
    const int b = static_cast<int>(idx.size());
    Tensor<S> out({b, d});
    for (int r = 0; r < b; ++r)
        for (int j = 0; j < d; ++j) out.at(r, j) = tv.at(idx[static_cast<std::size_t>(r)], j);
    const int tid = table.id;
    return t.push(std::move(out), t.requires_grad(tid),
                  [tid, idx = std::move(idx), b, d](Tape<S>& tp, const Tensor<S>& g) {
                      if (Tensor<S>* gt = tp.grad_if_needed(tid)) {
                          for (int r = 0; r < b; ++r)
                              for (int j = 0; j < d; ++j)
                                  gt->at(idx[static_cast<std::size_t>(r)], j) += g.at(r, j);
                      }
                  });
}

// ---------------------------------------------------------------------------
// select_per_row: out[b] = p[b, idx[b]]   ([B x K], idx[B] -> [B])
// ---------------------------------------------------------------------------
template <typename S>
Var<S> select_per_row(Var<S> p, std::vector<int> idx) {
    Tape<S>& t = *p.tape;
    const Tensor<S>& pv = t.value(p);
    detail::require_rank2("select_per_row", pv);
    const int b = pv.rows(), k = pv.cols();
    if (static_cast<int>(idx.size()) != b) {
        detail::op_fail<S>("select_per_row", "index count " + std::to_string(idx.size()) +
                                                 " != rows of " + pv.shape_str());
    }
    for (int i : idx) {
        if (i < 0 || i >= k) {
            detail::op_fail<S>("select_per_row",
                               "column index " + std::to_string(i) + " out of " + pv.shape_str());
        }
    }
    Tensor<S> out({b});
    for (int r = 0; r < b; ++r) out[r] = pv.at(r, idx[static_cast<std::size_t>(r)]);
    const int pid = p.id;
    return t.push(std::move(out), t.requires_grad(pid),
                  [pid, idx = std::move(idx), b](Tape<S>& tp, const Tensor<S>& g) {
                      if (Tensor<S>* gp = tp.grad_if_needed(pid)) {
                          for (int r = 0; r < b; ++r)
                              gp->at(r, idx[static_cast<std::size_t>(r)]) += g[r];
                      }
                  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------
template <typename S>
Var<S> row_sum(Var<S> a) {
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    detail::require_rank2("row_sum", av);
    const int m = av.rows(), n = av.cols();
    Tensor<S> out({m});
    for (int i = 0; i < m; ++i) {
        S acc = S(0);
        for (int j = 0; j < n; ++j) acc += av.at(i, j);
        out[i] = acc;
    }
    const int aid = a.id;
    return t.push(std::move(out), t.requires_grad(aid),
                  [aid, m, n](Tape<S>& tp, const Tensor<S>& g) {
                      if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
                          for (int i = 0; i < m; ++i)
                              for (int j = 0; j < n; ++j) ga->at(i, j) += g[i];
                      }
                  });
}

template <typename S>
Var<S> sum_all(Var<S> a) {
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    S acc = S(0);
    for (long i = 0; i < av.numel(); ++i) acc += av[i];
    Tensor<S> out({1});
    out[0] = acc;
    const int aid = a.id;
    return t.push(std::move(out), t.requires_grad(aid), [aid](Tape<S>& tp, const Tensor<S>& g) {
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            for (long i = 0; i < ga->numel(); ++i) (*ga)[i] += g[0];
        }
    });
}

template <typename S>
Var<S> mean_all(Var<S> a) {
    const long n = a.tape->value(a).numel();
    if (n == 0) detail::op_fail<S>("mean_all", "empty input");
    return scale(sum_all(a), static_cast<S>(1.0 / static_cast<double>(n)));
}

// ---------------------------------------------------------------------------
// mse: mean over all elements of (a - b)^2 -> scalar
// ---------------------------------------------------------------------------
template <typename S>
Var<S> mse(Var<S> a, Var<S> b) {
    detail::require_same_tape("mse", a, b);
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    if (!av.same_shape(bv)) {
        detail::op_fail<S>("mse", "shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    }
    const long n = av.numel();
    if (n == 0) detail::op_fail<S>("mse", "empty input");
    double acc = 0;
    for (long i = 0; i < n; ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        acc += d * d;
    }
    Tensor<S> out({1});
    out[0] = static_cast<S>(acc / static_cast<double>(n));
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    const int aid = a.id, bid = b.id;
    return t.push(std::move(out), rg, [aid, bid, n](Tape<S>& tp, const Tensor<S>& g) {
        const Tensor<S>& av2 = tp.value(aid);
        const Tensor<S>& bv2 = tp.value(bid);
        const S c = g[0] * S(2) / static_cast<S>(n);
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            for (long i = 0; i < n; ++i) (*ga)[i] += c * (av2[i] - bv2[i]);
        }
        if (Tensor<S>* gb = tp.grad_if_needed(bid)) {
            for (long i = 0; i < n; ++i) (*gb)[i] -= c * (av2[i] - bv2[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// sq_l2_rows: out[b] = sum_d (a[b,d] - b[b,d])^2
// ---------------------------------------------------------------------------
template <typename S>
Var<S> sq_l2_rows(Var<S> a, Var<S> b) {
    detail::require_same_tape("sq_l2_rows", a, b);
    Tape<S>& t = *a.tape;
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    detail::require_rank2("sq_l2_rows", av);
    if (!av.same_shape(bv)) {
        detail::op_fail<S>("sq_l2_rows",
                           "shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    }
    const int m = av.rows(), n = av.cols();
    Tensor<S> out({m});
    for (int i = 0; i < m; ++i) {
        double acc = 0;
        for (int j = 0; j < n; ++j) {
            const double d = static_cast<double>(av.at(i, j)) - static_cast<double>(bv.at(i, j));
            acc += d * d;
        }
        out[i] = static_cast<S>(acc);
    }
    const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    const int aid = a.id, bid = b.id;
    return t.push(std::move(out), rg, [aid, bid, m, n](Tape<S>& tp, const Tensor<S>& g) {
        const Tensor<S>& av2 = tp.value(aid);
        const Tensor<S>& bv2 = tp.value(bid);
        if (Tensor<S>* ga = tp.grad_if_needed(aid)) {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    ga->at(i, j) += S(2) * g[i] * (av2.at(i, j) - bv2.at(i, j));
        }
        if (Tensor<S>* gb = tp.grad_if_needed(bid)) {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    gb->at(i, j) -= S(2) * g[i] * (av2.at(i, j) - bv2.at(i, j));
        }
    });
}

// ---------------------------------------------------------------------------
// kl_rows: per-row KL of diagonal Gaussians, summed over the last axis.
//   KL(q||p) per dim = ln(sp/se) + (se^2 + (mu_e - mu_p)^2) / (2 sp^2) - 1/2
// Negative standard deviations are a caller bug; values below the floor
// (softplus underflow) are clamped to kSigmaFloor with zero gradient there.
// ---------------------------------------------------------------------------
template <typename S>
Var<S> kl_rows(Var<S> mu_e, Var<S> sig_e, Var<S> mu_p, Var<S> sig_p) {
    detail::require_same_tape("kl_rows", mu_e, sig_e);
    detail::require_same_tape("kl_rows", mu_e, mu_p);
    detail::require_same_tape("kl_rows", mu_e, sig_p);
    Tape<S>& t = *mu_e.tape;
    const Tensor<S>& me = t.value(mu_e);
    const Tensor<S>& se = t.value(sig_e);
    const Tensor<S>& mp = t.value(mu_p);
    const Tensor<S>& sp = t.value(sig_p);
    detail::require_rank2("kl_rows", me);
    if (!me.same_shape(se) || !me.same_shape(mp) || !me.same_shape(sp)) {
        detail::op_fail<S>("kl_rows", "shape mismatch among " + me.shape_str() + ", " +
                                          se.shape_str() + ", " + mp.shape_str() + ", " +
                                          sp.shape_str());
    }
    const S floor_v = static_cast<S>(kSigmaFloor);
    for (long i = 0; i < se.numel(); ++i) {
        if (se[i] < S(0) || sp[i] < S(0)) {
            detail::op_fail<S>("kl_rows", "negative standard deviation");
        }
    }
    const int m = me.rows(), n = me.cols();
    Tensor<S> out({m});
    for (int i = 0; i < m; ++i) {
        double acc = 0;
        for (int j = 0; j < n; ++j) {
            const double sev = std::max(static_cast<double>(se.at(i, j)), static_cast<double>(floor_v));
            const double spv = std::max(static_cast<double>(sp.at(i, j)), static_cast<double>(floor_v));
            const double dmu = static_cast<double>(me.at(i, j)) - static_cast<double>(mp.at(i, j));
            acc += std::log(spv / sev) + (sev * sev + dmu * dmu) / (2.0 * spv * spv) - 0.5;
        }
        out[i] = static_cast<S>(acc);
    }
    const bool rg = t.requires_grad(mu_e.id) || t.requires_grad(sig_e.id) ||
                    t.requires_grad(mu_p.id) || t.requires_grad(sig_p.id);
    const int mei = mu_e.id, sei = sig_e.id, mpi = mu_p.id, spi = sig_p.id;
    return t.push(std::move(out), rg, [mei, sei, mpi, spi, m, n, floor_v](Tape<S>& tp,
                                                                          const Tensor<S>& g) {
        const Tensor<S>& me2 = tp.value(mei);
        const Tensor<S>& se2 = tp.value(sei);
        const Tensor<S>& mp2 = tp.value(mpi);
        const Tensor<S>& sp2 = tp.value(spi);
        Tensor<S>* gme = tp.grad_if_needed(mei);
        Tensor<S>* gse = tp.grad_if_needed(sei);
        Tensor<S>* gmp = tp.grad_if_needed(mpi);
        Tensor<S>* gsp = tp.grad_if_needed(spi);
        for (int i = 0; i < m; ++i) {
            const S gi = g[i];
            if (gi == S(0)) continue;
            for (int j = 0; j < n; ++j) {
                const bool se_floored = se2.at(i, j) < floor_v;
                const bool sp_floored = sp2.at(i, j) < floor_v;
                const double sev = se_floored ? static_cast<double>(floor_v)
                                              : static_cast<double>(se2.at(i, j));
                const double spv = sp_floored ? static_cast<double>(floor_v)
                                              : static_cast<double>(sp2.at(i, j));
                const double dmu =
                    static_cast<double>(me2.at(i, j)) - static_cast<double>(mp2.at(i, j));
                const double inv_sp2 = 1.0 / (spv * spv);
                if (gme) gme->at(i, j) += gi * static_cast<S>(dmu * inv_sp2);
                if (gmp) gmp->at(i, j) -= gi * static_cast<S>(dmu * inv_sp2);
                if (gse && !se_floored) {
                    gse->at(i, j) += gi * static_cast<S>(-1.0 / sev + sev * inv_sp2);
                }
                if (gsp && !sp_floored) {
                    gsp->at(i, j) += gi * static_cast<S>(1.0 / spv -
                                                         (sev * sev + dmu * dmu) * inv_sp2 / spv);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// masked_bce_sum: sum_b mask[b] * BCE(clamp(p[b]), y[b]) -> scalar
// y and mask are data, not tape nodes.
// ---------------------------------------------------------------------------
template <typename S>
Var<S> masked_bce_sum(Var<S> p, std::vector<S> y, std::vector<S> mask) {
    Tape<S>& t = *p.tape;
    const Tensor<S>& pv = t.value(p);
    if (pv.rank() != 1) {
        detail::op_fail<S>("masked_bce_sum", "expected rank-1 probabilities, got " + pv.shape_str());
    }
    const int b = static_cast<int>(pv.numel());
    if (static_cast<int>(y.size()) != b || static_cast<int>(mask.size()) != b) {
        detail::op_fail<S>("masked_bce_sum", "label/mask length mismatch with " + pv.shape_str());
    }
    const double lo = kProbClamp, hi = 1.0 - kProbClamp;
    double acc = 0;
    for (int i = 0; i < b; ++i) {
        if (mask[static_cast<std::size_t>(i)] == S(0)) continue;
        const double pm = std::clamp(static_cast<double>(pv[i]), lo, hi);
        const double yv = static_cast<double>(y[static_cast<std::size_t>(i)]);
        acc += static_cast<double>(mask[static_cast<std::size_t>(i)]) *
               -(yv * std::log(pm) + (1.0 - yv) * std::log(1.0 - pm));
    }
    Tensor<S> out({1});
    out[0] = static_cast<S>(acc);
    const int pid = p.id;
    return t.push(std::move(out), t.requires_grad(pid),
                  [pid, y = std::move(y), mask = std::move(mask), b, lo,
                   hi](Tape<S>& tp, const Tensor<S>& g) {
                      if (Tensor<S>* gp = tp.grad_if_needed(pid)) {
                          const Tensor<S>& pv2 = tp.value(pid);
                          for (int i = 0; i < b; ++i) {
                              const S mk = mask[static_cast<std::size_t>(i)];
                              if (mk == S(0)) continue;
                              const double praw = static_cast<double>(pv2[i]);
                              if (praw <= lo || praw >= hi) continue;  // clamped: zero gradient
                              const double yv = static_cast<double>(y[static_cast<std::size_t>(i)]);
                              (*gp)[i] += g[0] * mk *
                                          static_cast<S>((praw - yv) / (praw * (1.0 - praw)));
                          }
                      }
                  });
}

}  // namespace memorykt::ad
