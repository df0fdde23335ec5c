#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "voidkit/core/tensor.hpp"

namespace voidkit::ad {

/// Handle into a Tape. Cheap to copy; valid only for the tape that made it.
struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

/// Define-by-run reverse-mode tape over Tensor<Real>. Model weights enter as
/// constants; only the data path (image / latent) is differentiated, which is
/// all a frozen-victim attack needs. Nodes are created in topological order,
/// so reverse index order is a valid backward schedule.
template <typename Real>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

    Var input(Tensor<Real> value) { return make(std::move(value), {}); }

    const Tensor<Real>& value(Var v) const { return nodes_[check(v)].value; }
    const Tensor<Real>& grad(Var v) const { return nodes_[check(v)].grad; }

    Real scalar(Var v) const {
        const auto& t = nodes_[check(v)].value;
        if (t.numel() != 1) throw ShapeError("scalar() on non-scalar node");
        return t.data[0];
    }

    /// Seed d(from)/d(from) = 1 and sweep the tape backwards.
    void backward(Var from) {
        size_t seed = check(from);
        if (nodes_[seed].value.numel() != 1)
            throw ShapeError("backward() must start from a scalar node");
        for (auto& n : nodes_) {
            n.grad = Tensor<Real>(n.value.shape, Real(0));
        }
        nodes_[seed].grad.data[0] = Real(1);
        for (size_t i = seed + 1; i-- > 0;) {
            if (nodes_[i].back) nodes_[i].back();
        }
    }

    // ---- elementwise -------------------------------------------------------

    Var add(Var a, Var b) {
        auto& ta = val(a);
        auto& tb = val(b);
        ta.require_same(tb, "add");
        Tensor<Real> out = ta;
        out += tb;
        Var r = make(std::move(out), [this, a, b](Var self) {
            accumulate(a, nodes_[self.idx].grad);
            accumulate(b, nodes_[self.idx].grad);
        });
        return r;
    }

    Var sub(Var a, Var b) {
        auto& ta = val(a);
        auto& tb = val(b);
        ta.require_same(tb, "sub");
        Tensor<Real> out = ta;
        out -= tb;
        return make(std::move(out), [this, a, b](Var self) {
            accumulate(a, nodes_[self.idx].grad);
            auto neg = nodes_[self.idx].grad;
            neg *= Real(-1);
            accumulate(b, neg);
        });
    }

    Var mul(Var a, Var b) {
        auto& ta = val(a);
        auto& tb = val(b);
        ta.require_same(tb, "mul");
        Tensor<Real> out = hadamard(ta, tb);
        return make(std::move(out), [this, a, b](Var self) {
            accumulate(a, hadamard(nodes_[self.idx].grad, val(b)));
            accumulate(b, hadamard(nodes_[self.idx].grad, val(a)));
        });
    }

    Var sub_const(Var a, Tensor<Real> c) {
        auto& ta = val(a);
        ta.require_same(c, "sub_const");
        Tensor<Real> out = ta;
        out -= c;
        return make(std::move(out), [this, a](Var self) {
            accumulate(a, nodes_[self.idx].grad);
        });
    }

    Var add_const(Var a, Tensor<Real> c) {
        auto& ta = val(a);
        ta.require_same(c, "add_const");
        Tensor<Real> out = ta;
        out += c;
        return make(std::move(out), [this, a](Var self) {
            accumulate(a, nodes_[self.idx].grad);
        });
    }

    Var scale(Var a, Real s) {
        Tensor<Real> out = val(a);
        out *= s;
        return make(std::move(out), [this, a, s](Var self) {
            auto g = nodes_[self.idx].grad;
            g *= s;
            accumulate(a, g);
        });
    }

    Var neg(Var a) { return scale(a, Real(-1)); }

    Var offset(Var a, Real s) {
        Tensor<Real> out = val(a);
        for (auto& v : out.data) v += s;
        return make(std::move(out), [this, a](Var self) {
            accumulate(a, nodes_[self.idx].grad);
        });
    }

    /// x .* m with m constant. m may match x's shape, or x's shape minus the
    /// trailing dimension (broadcast across it): (H,W,C).*(H,W), (J,4).*(J).
    Var mul_mask(Var a, Tensor<Real> m) {
        const auto& ta = val(a);
        bool bcast;
        if (m.shape == ta.shape) {
            bcast = false;
        } else {
            std::vector<int> lead(ta.shape.begin(), ta.shape.end() - 1);
            if (m.shape != lead) throw ShapeError("mul_mask: mask shape incompatible");
            bcast = true;
        }
        int last = ta.dim(ta.rank() - 1);
        Tensor<Real> out = ta;
        if (bcast) {
            for (long i = 0; i < m.numel(); ++i)
                for (int c = 0; c < last; ++c) out.data[static_cast<size_t>(i) * last + c] *= m.data[static_cast<size_t>(i)];
        } else {
            for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= m.data[i];
        }
        return make(std::move(out), [this, a, m = std::move(m), bcast, last](Var self) {
            const auto& g = nodes_[self.idx].grad;
            Tensor<Real> dx = g;
            if (bcast) {
                for (long i = 0; i < m.numel(); ++i)
                    for (int c = 0; c < last; ++c) dx.data[static_cast<size_t>(i) * last + c] *= m.data[static_cast<size_t>(i)];
            } else {
                for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= m.data[i];
            }
            accumulate(a, dx);
        });
    }

    Var tanh_(Var a) {
        Tensor<Real> out = val(a);
        for (auto& v : out.data) v = std::tanh(v);
        return make(std::move(out), [this, a](Var self) {
            const auto& y = nodes_[self.idx].value;
            Tensor<Real> dx = nodes_[self.idx].grad;
            for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= (Real(1) - y.data[i] * y.data[i]);
            accumulate(a, dx);
        });
    }

    Var sigmoid_(Var a) {
        Tensor<Real> out = val(a);
        for (auto& v : out.data) v = Real(1) / (Real(1) + std::exp(-v));
        return make(std::move(out), [this, a](Var self) {
            const auto& y = nodes_[self.idx].value;
            Tensor<Real> dx = nodes_[self.idx].grad;
            for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= y.data[i] * (Real(1) - y.data[i]);
            accumulate(a, dx);
        });
    }

    Var relu(Var a) {
        Tensor<Real> out = val(a);
        for (auto& v : out.data) v = v > Real(0) ? v : Real(0);
        return make(std::move(out), [this, a](Var self) {
            const auto& x = val(a);
            Tensor<Real> dx = nodes_[self.idx].grad;
            for (size_t i = 0; i < dx.data.size(); ++i)
                if (!(x.data[i] > Real(0))) dx.data[i] = Real(0);
            accumulate(a, dx);
        });
    }

    Var exp_(Var a) {
        Tensor<Real> out = val(a);
        for (auto& v : out.data) v = std::exp(v);
        return make(std::move(out), [this, a](Var self) {
            Tensor<Real> dx = hadamard(nodes_[self.idx].grad, nodes_[self.idx].value);
            accumulate(a, dx);
        });
    }

    Var square(Var a) {
        Tensor<Real> out = val(a);
        for (auto& v : out.data) v = v * v;
        return make(std::move(out), [this, a](Var self) {
            const auto& x = val(a);
            Tensor<Real> dx = nodes_[self.idx].grad;
            for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= Real(2) * x.data[i];
            accumulate(a, dx);
        });
    }

    /// sqrt of a strictly positive input (callers add an epsilon first).
    Var sqrt_(Var a) {
        Tensor<Real> out = val(a);
        for (auto& v : out.data) v = std::sqrt(v);
        return make(std::move(out), [this, a](Var self) {
            const auto& y = nodes_[self.idx].value;
            Tensor<Real> dx = nodes_[self.idx].grad;
            for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= Real(0.5) / y.data[i];
            accumulate(a, dx);
        });
    }

    /// Hard clamp into [0,1]; gradient passes only where not clipped.
    Var clamp01(Var a) {
        Tensor<Real> out = val(a);
        for (auto& v : out.data) v = std::min(std::max(v, Real(0)), Real(1));
        return make(std::move(out), [this, a](Var self) {
            const auto& x = val(a);
            Tensor<Real> dx = nodes_[self.idx].grad;
            for (size_t i = 0; i < dx.data.size(); ++i)
                if (x.data[i] < Real(0) || x.data[i] > Real(1)) dx.data[i] = Real(0);
            accumulate(a, dx);
        });
    }

    /// Box clamp with straight-through backward (identity gradient). Used for
    /// the pixel-space budget projection inside the optimization loop.
    Var clamp_box_st(Var a, Tensor<Real> lo, Tensor<Real> hi) {
        auto& ta = val(a);
        ta.require_same(lo, "clamp_box_st lo");
        ta.require_same(hi, "clamp_box_st hi");
        Tensor<Real> out = ta;
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = std::min(std::max(out.data[i], lo.data[i]), hi.data[i]);
        return make(std::move(out), [this, a](Var self) {
            accumulate(a, nodes_[self.idx].grad);
        });
    }

    // ---- linear algebra ----------------------------------------------------

    Var matmul(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
            throw ShapeError("matmul: need (N,K)x(K,M)");
        int N = A.dim(0), K = A.dim(1), M = B.dim(1);
        Tensor<Real> out({N, M});
        gemm(A.data.data(), B.data.data(), out.data.data(), N, K, M);
        return make(std::move(out), [this, a, b, N, K, M](Var self) {
            const auto& g = nodes_[self.idx].grad;
            const auto& A2 = val(a);
            const auto& B2 = val(b);
            Tensor<Real> dA({N, K});
            Tensor<Real> dB({K, M});
            // dA = g * B^T ; dB = A^T * g
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < M; ++j) {
                    Real gij = g.data[static_cast<size_t>(i) * M + j];
                    if (gij == Real(0)) continue;
                    for (int k = 0; k < K; ++k) {
                        dA.data[static_cast<size_t>(i) * K + k] += gij * B2.data[static_cast<size_t>(k) * M + j];
                        dB.data[static_cast<size_t>(k) * M + j] += A2.data[static_cast<size_t>(i) * K + k] * gij;
                    }
                }
            accumulate(a, dA);
            accumulate(b, dB);
        });
    }

    /// A * B^T for (N,d) x (M,d) -> (N,M); the attention score shape.
    Var matmul_nt(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1))
            throw ShapeError("matmul_nt: need (N,d)x(M,d)");
        int N = A.dim(0), d = A.dim(1), M = B.dim(0);
        Tensor<Real> out({N, M});
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < M; ++j) {
                Real s = 0;
                for (int k = 0; k < d; ++k)
                    s += A.data[static_cast<size_t>(i) * d + k] * B.data[static_cast<size_t>(j) * d + k];
                out.data[static_cast<size_t>(i) * M + j] = s;
            }
        return make(std::move(out), [this, a, b, N, d, M](Var self) {
            const auto& g = nodes_[self.idx].grad;
            const auto& A2 = val(a);
            const auto& B2 = val(b);
            Tensor<Real> dA({N, d});
            Tensor<Real> dB({M, d});
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < M; ++j) {
                    Real gij = g.data[static_cast<size_t>(i) * M + j];
                    if (gij == Real(0)) continue;
                    for (int k = 0; k < d; ++k) {
                        dA.data[static_cast<size_t>(i) * d + k] += gij * B2.data[static_cast<size_t>(j) * d + k];
                        dB.data[static_cast<size_t>(j) * d + k] += gij * A2.data[static_cast<size_t>(i) * d + k];
                    }
                }
            accumulate(a, dA);
            accumulate(b, dB);
        });
    }

    /// W * x with constant W (m,n); x rank-1 (n) -> (m), or rank-2 (n,p) -> (m,p).
    Var matmul_const_l(Tensor<Real> W, Var x) {
        const auto& X = val(x);
        int m = W.dim(0), n = W.dim(1);
        if (X.dim(0) != n) throw ShapeError("matmul_const_l: inner dim mismatch");
        int p = X.rank() == 2 ? X.dim(1) : 1;
        Tensor<Real> out(X.rank() == 2 ? std::vector<int>{m, p} : std::vector<int>{m});
        gemm(W.data.data(), X.data.data(), out.data.data(), m, n, p);
        return make(std::move(out), [this, x, W = std::move(W), m, n, p](Var self) {
            const auto& g = nodes_[self.idx].grad;
            Tensor<Real> dx(val(x).shape, Real(0));
            // dx = W^T * g
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < p; ++j) {
                    Real gij = g.data[static_cast<size_t>(i) * p + j];
                    if (gij == Real(0)) continue;
                    for (int k = 0; k < n; ++k)
                        dx.data[static_cast<size_t>(k) * p + j] += W.data[static_cast<size_t>(i) * n + k] * gij;
                }
            accumulate(x, dx);
        });
    }

    /// x * W with constant W (K,M); x (N,K) -> (N,M).
    Var matmul_const_r(Var x, Tensor<Real> W) {
        const auto& X = val(x);
        if (X.rank() != 2 || X.dim(1) != W.dim(0))
            throw ShapeError("matmul_const_r: need (N,K)x(K,M)");
        int N = X.dim(0), K = X.dim(1), M = W.dim(1);
        Tensor<Real> out({N, M});
        gemm(X.data.data(), W.data.data(), out.data.data(), N, K, M);
        return make(std::move(out), [this, x, W = std::move(W), N, K, M](Var self) {
            const auto& g = nodes_[self.idx].grad;
            Tensor<Real> dx({N, K});
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < M; ++j) {
                    Real gij = g.data[static_cast<size_t>(i) * M + j];
                    if (gij == Real(0)) continue;
                    for (int k = 0; k < K; ++k)
                        dx.data[static_cast<size_t>(i) * K + k] += gij * W.data[static_cast<size_t>(k) * M + j];
                }
            accumulate(x, dx);
        });
    }

    // ---- convolution and pooling -------------------------------------------

    /// 2-D convolution, NHWC single image: x (H,W,Cin), kernel (kh,kw,Cin,Cout),
    /// bias (Cout) or empty, zero padding.
    Var conv2d(Var x, Tensor<Real> kernel, Tensor<Real> bias, int stride, int pad) {
        const auto& X = val(x);
        if (X.rank() != 3 || kernel.rank() != 4) throw ShapeError("conv2d: bad ranks");
        int H = X.dim(0), W = X.dim(1), Cin = X.dim(2);
        int kh = kernel.dim(0), kw = kernel.dim(1);
        if (kernel.dim(2) != Cin) throw ShapeError("conv2d: channel mismatch");
        int Cout = kernel.dim(3);
        int OH = (H + 2 * pad - kh) / stride + 1;
        int OW = (W + 2 * pad - kw) / stride + 1;
        Tensor<Real> out({OH, OW, Cout});
        const bool has_bias = bias.numel() > 0;
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                Real* op = &out.data[(static_cast<size_t>(oy) * OW + ox) * Cout];
                if (has_bias)
                    for (int oc = 0; oc < Cout; ++oc) op[oc] = bias.data[static_cast<size_t>(oc)];
                for (int ky = 0; ky < kh; ++ky) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        const Real* xp = &X.data[(static_cast<size_t>(iy) * W + ix) * Cin];
                        const Real* kp = &kernel.data[((static_cast<size_t>(ky) * kw + kx) * Cin) * Cout];
                        for (int ic = 0; ic < Cin; ++ic) {
                            Real xv = xp[ic];
                            if (xv == Real(0)) continue;
                            const Real* kpc = kp + static_cast<size_t>(ic) * Cout;
                            for (int oc = 0; oc < Cout; ++oc) op[oc] += xv * kpc[oc];
                        }
                    }
                }
            }
        return make(std::move(out),
                    [this, x, kernel = std::move(kernel), stride, pad, H, W, Cin, kh, kw, OH, OW](Var self) {
                        const auto& g = nodes_[self.idx].grad;
                        int Cout = kernel.dim(3);
                        Tensor<Real> dx({H, W, Cin});
                        for (int oy = 0; oy < OH; ++oy)
                            for (int ox = 0; ox < OW; ++ox) {
                                const Real* gp = &g.data[(static_cast<size_t>(oy) * OW + ox) * Cout];
                                for (int ky = 0; ky < kh; ++ky) {
                                    int iy = oy * stride + ky - pad;
                                    if (iy < 0 || iy >= H) continue;
                                    for (int kx = 0; kx < kw; ++kx) {
                                        int ix = ox * stride + kx - pad;
                                        if (ix < 0 || ix >= W) continue;
                                        Real* dxp = &dx.data[(static_cast<size_t>(iy) * W + ix) * Cin];
                                        const Real* kp = &kernel.data[((static_cast<size_t>(ky) * kw + kx) * Cin) * Cout];
                                        for (int ic = 0; ic < Cin; ++ic) {
                                            const Real* kpc = kp + static_cast<size_t>(ic) * Cout;
                                            Real acc = 0;
                                            for (int oc = 0; oc < Cout; ++oc) acc += gp[oc] * kpc[oc];
                                            dxp[ic] += acc;
                                        }
                                    }
                                }
                            }
                        accumulate(x, dx);
                    });
    }

    /// Non-overlapping k x k mean pooling on (H,W,C).
    Var avgpool(Var x, int k) {
        const auto& X = val(x);
        if (X.rank() != 3 || X.dim(0) % k != 0 || X.dim(1) % k != 0)
            throw ShapeError("avgpool: dims must divide by k");
        int H = X.dim(0), W = X.dim(1), C = X.dim(2);
        int OH = H / k, OW = W / k;
        Tensor<Real> out({OH, OW, C});
        Real inv = Real(1) / Real(k * k);
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox)
                for (int c = 0; c < C; ++c) {
                    Real s = 0;
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) s += X.at(oy * k + dy, ox * k + dx, c);
                    out.at(oy, ox, c) = s * inv;
                }
        return make(std::move(out), [this, x, k, inv](Var self) {
            const auto& g = nodes_[self.idx].grad;
            const auto& X2 = val(x);
            Tensor<Real> dx(X2.shape, Real(0));
            int OH = g.dim(0), OW = g.dim(1), C = g.dim(2);
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox)
                    for (int c = 0; c < C; ++c) {
                        Real gv = g.at(oy, ox, c) * inv;
                        for (int dy = 0; dy < k; ++dy)
                            for (int dxx = 0; dxx < k; ++dxx) dx.at(oy * k + dy, ox * k + dxx, c) += gv;
                    }
            accumulate(x, dx);
        });
    }

    /// Bilinear upsample by integer factor, half-pixel centers (same sampling
    /// as resample_bilinear).
    Var upsample_bilinear(Var x, int factor) {
        const auto& X = val(x);
        if (X.rank() != 3) throw ShapeError("upsample_bilinear: need (H,W,C)");
        int H = X.dim(0), W = X.dim(1), C = X.dim(2);
        int OH = H * factor, OW = W * factor;
        auto coeff = [factor](int o, int n) {
            double f = (o + 0.5) / factor - 0.5;
            int i0 = static_cast<int>(std::floor(f));
            double w = f - i0;
            int a = std::clamp(i0, 0, n - 1), b = std::clamp(i0 + 1, 0, n - 1);
            return std::tuple<int, int, Real>(a, b, Real(w));
        };
        Tensor<Real> out({OH, OW, C});
        for (int oy = 0; oy < OH; ++oy) {
            auto [ya, yb, wy] = coeff(oy, H);
            for (int ox = 0; ox < OW; ++ox) {
                auto [xa, xb, wx] = coeff(ox, W);
                for (int c = 0; c < C; ++c) {
                    Real top = X.at(ya, xa, c) * (Real(1) - wx) + X.at(ya, xb, c) * wx;
                    Real bot = X.at(yb, xa, c) * (Real(1) - wx) + X.at(yb, xb, c) * wx;
                    out.at(oy, ox, c) = top * (Real(1) - wy) + bot * wy;
                }
            }
        }
        return make(std::move(out), [this, x, factor, H, W, C, coeff](Var self) {
            const auto& g = nodes_[self.idx].grad;
            Tensor<Real> dx({H, W, C});
            int OH = H * factor, OW = W * factor;
            for (int oy = 0; oy < OH; ++oy) {
                auto [ya, yb, wy] = coeff(oy, H);
                for (int ox = 0; ox < OW; ++ox) {
                    auto [xa, xb, wx] = coeff(ox, W);
                    for (int c = 0; c < C; ++c) {
                        Real gv = g.at(oy, ox, c);
                        dx.at(ya, xa, c) += gv * (Real(1) - wy) * (Real(1) - wx);
                        dx.at(ya, xb, c) += gv * (Real(1) - wy) * wx;
                        dx.at(yb, xa, c) += gv * wy * (Real(1) - wx);
                        dx.at(yb, xb, c) += gv * wy * wx;
                    }
                }
            }
            accumulate(x, dx);
        });
    }

    // ---- reductions and reshapes --------------------------------------------

    Var reshape(Var x, std::vector<int> shape) {
        const auto& X = val(x);
        if (Tensor<Real>::count(shape) != X.numel()) throw ShapeError("reshape: element count mismatch");
        Tensor<Real> out(shape);
        out.data = X.data;
        return make(std::move(out), [this, x](Var self) {
            Tensor<Real> dx(val(x).shape, Real(0));
            dx.data = nodes_[self.idx].grad.data;
            accumulate(x, dx);
        });
    }

    Var sum(Var x) {
        Tensor<Real> out({1});
        out.data[0] = val(x).sum();
        return make(std::move(out), [this, x](Var self) {
            Real g = nodes_[self.idx].grad.data[0];
            Tensor<Real> dx(val(x).shape, g);
            accumulate(x, dx);
        });
    }

    Var mean(Var x) {
        Tensor<Real> out({1});
        out.data[0] = val(x).mean();
        return make(std::move(out), [this, x](Var self) {
            Real g = nodes_[self.idx].grad.data[0] / Real(val(x).numel());
            Tensor<Real> dx(val(x).shape, g);
            accumulate(x, dx);
        });
    }

    Var sum_sq(Var x) {
        Tensor<Real> out({1});
        Real s = 0;
        for (Real v : val(x).data) s += v * v;
        out.data[0] = s;
        return make(std::move(out), [this, x](Var self) {
            Real g = nodes_[self.idx].grad.data[0];
            Tensor<Real> dx = val(x);
            dx *= Real(2) * g;
            accumulate(x, dx);
        });
    }

    /// Frobenius norm over all elements; gradient guarded at the origin.
    Var l2norm(Var x) {
        Tensor<Real> out({1});
        Real s = 0;
        for (Real v : val(x).data) s += v * v;
        out.data[0] = std::sqrt(s);
        return make(std::move(out), [this, x](Var self) {
            Real n = nodes_[self.idx].value.data[0];
            Real g = nodes_[self.idx].grad.data[0];
            Real inv = g / std::max(n, Real(1e-12));
            Tensor<Real> dx = val(x);
            dx *= inv;
            accumulate(x, dx);
        });
    }

    Var dot(Var a, Var b) {
        Tensor<Real> out({1});
        out.data[0] = dot_flat(val(a), val(b));
        return make(std::move(out), [this, a, b](Var self) {
            Real g = nodes_[self.idx].grad.data[0];
            Tensor<Real> da = val(b);
            da *= g;
            accumulate(a, da);
            Tensor<Real> db = val(a);
            db *= g;
            accumulate(b, db);
        });
    }

    Var dot_const(Var a, Tensor<Real> c) {
        Tensor<Real> out({1});
        out.data[0] = dot_flat(val(a), c);
        return make(std::move(out), [this, a, c = std::move(c)](Var self) {
            Real g = nodes_[self.idx].grad.data[0];
            Tensor<Real> da = c;
            da *= g;
            accumulate(a, da);
        });
    }

    /// Scalar division a/b.
    Var div(Var a, Var b) {
        if (val(a).numel() != 1 || val(b).numel() != 1) throw ShapeError("div: scalars only");
        Tensor<Real> out({1});
        out.data[0] = val(a).data[0] / val(b).data[0];
        return make(std::move(out), [this, a, b](Var self) {
            Real g = nodes_[self.idx].grad.data[0];
            Real av = val(a).data[0], bv = val(b).data[0];
            Tensor<Real> da({1});
            da.data[0] = g / bv;
            accumulate(a, da);
            Tensor<Real> db({1});
            db.data[0] = -g * av / (bv * bv);
            accumulate(b, db);
        });
    }

    Var mul_scalar(Var a, Var b) {
        if (val(a).numel() != 1 || val(b).numel() != 1) throw ShapeError("mul_scalar: scalars only");
        Tensor<Real> out({1});
        out.data[0] = val(a).data[0] * val(b).data[0];
        return make(std::move(out), [this, a, b](Var self) {
            Real g = nodes_[self.idx].grad.data[0];
            Tensor<Real> da({1});
            da.data[0] = g * val(b).data[0];
            accumulate(a, da);
            Tensor<Real> db({1});
            db.data[0] = g * val(a).data[0];
            accumulate(b, db);
        });
    }

    /// sum_i coeff[i] * scalars[i] -> scalar.
    Var weighted_sum(const std::vector<Var>& scalars, const std::vector<Real>& coeffs) {
        if (scalars.size() != coeffs.size()) throw ShapeError("weighted_sum: size mismatch");
        Tensor<Real> out({1});
        Real s = 0;
        for (size_t i = 0; i < scalars.size(); ++i) {
            if (val(scalars[i]).numel() != 1) throw ShapeError("weighted_sum: scalars only");
            s += coeffs[i] * val(scalars[i]).data[0];
        }
        out.data[0] = s;
        return make(std::move(out), [this, scalars, coeffs](Var self) {
            Real g = nodes_[self.idx].grad.data[0];
            for (size_t i = 0; i < scalars.size(); ++i) {
                Tensor<Real> d({1});
                d.data[0] = g * coeffs[i];
                accumulate(scalars[i], d);
            }
        });
    }

    /// Row-wise softmax on (N,M).
    Var softmax_rows(Var x) {
        const auto& X = val(x);
        if (X.rank() != 2) throw ShapeError("softmax_rows: need (N,M)");
        int N = X.dim(0), M = X.dim(1);
        Tensor<Real> out({N, M});
        for (int i = 0; i < N; ++i) {
            Real mx = X.data[static_cast<size_t>(i) * M];
            for (int j = 1; j < M; ++j) mx = std::max(mx, X.data[static_cast<size_t>(i) * M + j]);
            Real denom = 0;
            for (int j = 0; j < M; ++j) {
                Real e = std::exp(X.data[static_cast<size_t>(i) * M + j] - mx);
                out.data[static_cast<size_t>(i) * M + j] = e;
                denom += e;
            }
            for (int j = 0; j < M; ++j) out.data[static_cast<size_t>(i) * M + j] /= denom;
        }
        return make(std::move(out), [this, x, N, M](Var self) {
            const auto& y = nodes_[self.idx].value;
            const auto& g = nodes_[self.idx].grad;
            Tensor<Real> dx({N, M});
            for (int i = 0; i < N; ++i) {
                Real dotv = 0;
                for (int j = 0; j < M; ++j)
                    dotv += g.data[static_cast<size_t>(i) * M + j] * y.data[static_cast<size_t>(i) * M + j];
                for (int j = 0; j < M; ++j)
                    dx.data[static_cast<size_t>(i) * M + j] =
                        y.data[static_cast<size_t>(i) * M + j] * (g.data[static_cast<size_t>(i) * M + j] - dotv);
            }
            accumulate(x, dx);
        });
    }

    /// (H,W,C) -> (C) spatial mean per channel.
    Var global_avg_channels(Var x) {
        const auto& X = val(x);
        if (X.rank() != 3) throw ShapeError("global_avg_channels: need (H,W,C)");
        int H = X.dim(0), W = X.dim(1), C = X.dim(2);
        Tensor<Real> out({C});
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx)
                for (int c = 0; c < C; ++c) out.data[static_cast<size_t>(c)] += X.at(y, xx, c);
        out *= Real(1) / Real(H * W);
        return make(std::move(out), [this, x, H, W, C](Var self) {
            const auto& g = nodes_[self.idx].grad;
            Real inv = Real(1) / Real(H * W);
            Tensor<Real> dx({H, W, C});
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    for (int c = 0; c < C; ++c) dx.at(y, xx, c) = g.data[static_cast<size_t>(c)] * inv;
            accumulate(x, dx);
        });
    }

    /// (H,W,C) -> (H,W) mean over channels.
    Var channel_mean(Var x) {
        const auto& X = val(x);
        if (X.rank() != 3) throw ShapeError("channel_mean: need (H,W,C)");
        int H = X.dim(0), W = X.dim(1), C = X.dim(2);
        Tensor<Real> out({H, W});
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                Real s = 0;
                for (int c = 0; c < C; ++c) s += X.at(y, xx, c);
                out.at(y, xx) = s / Real(C);
            }
        return make(std::move(out), [this, x, H, W, C](Var self) {
            const auto& g = nodes_[self.idx].grad;
            Tensor<Real> dx({H, W, C});
            Real inv = Real(1) / Real(C);
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    for (int c = 0; c < C; ++c) dx.at(y, xx, c) = g.at(y, xx) * inv;
            accumulate(x, dx);
        });
    }

    /// Reinterpret an (H,W) plane as (H,W,1).
    Var expand_plane(Var x) {
        const auto& X = val(x);
        if (X.rank() != 2) throw ShapeError("expand_plane: need (H,W)");
        return reshape(x, {X.dim(0), X.dim(1), 1});
    }

private:
    struct Node {
        Tensor<Real> value;
        Tensor<Real> grad;
        std::function<void()> back;
    };

    std::vector<Node> nodes_;

    size_t check(Var v) const {
        if (!v.valid() || static_cast<size_t>(v.idx) >= nodes_.size())
            throw ShapeError("invalid tape variable");
        return static_cast<size_t>(v.idx);
    }

    const Tensor<Real>& val(Var v) { return nodes_[check(v)].value; }

    Var make(Tensor<Real> value, std::function<void(Var)> back) {
        Var v{static_cast<int>(nodes_.size())};
        Node n;
        n.value = std::move(value);
        if (back) n.back = [fn = std::move(back), v]() { fn(v); };
        nodes_.push_back(std::move(n));
        return v;
    }

    void accumulate(Var v, const Tensor<Real>& g) {
        auto& node = nodes_[check(v)];
        node.grad += g;
    }

    static void gemm(const Real* A, const Real* B, Real* C, int N, int K, int M) {
        for (int i = 0; i < N; ++i) {
            Real* cp = C + static_cast<size_t>(i) * M;
            for (int k = 0; k < K; ++k) {
                Real a = A[static_cast<size_t>(i) * K + k];
                if (a == Real(0)) continue;
                const Real* bp = B + static_cast<size_t>(k) * M;
                for (int j = 0; j < M; ++j) cp[j] += a * bp[j];
            }
        }
    }
};

/// Cosine distance 1 - <e,v>/(|e||v|) against a constant reference vector.
/// Throws if either side has zero norm.
template <typename Real>
Var cosine_distance_const(Tape<Real>& t, Var e, const Tensor<Real>& ref) {
    Real rn = frobenius_norm(ref);
    if (!(rn > Real(0))) throw NumericError("cosine distance: reference embedding has zero norm");
    if (!(frobenius_norm(t.value(e)) > Real(0)))
        throw NumericError("cosine distance: embedding has zero norm");
    Var d = t.dot_const(e, ref);
    Var n = t.l2norm(e);
    Var cosv = t.div(d, t.scale(n, rn));
    return t.offset(t.neg(cosv), Real(1));
}

}  // namespace voidkit::ad
