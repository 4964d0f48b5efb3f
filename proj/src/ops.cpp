#include "dcac/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dcac {

namespace {

// C[m,n] = alpha*op(A)op(B) + beta*C, row-major.
void gemm(bool ta, bool tb, int m, int n, int k, const float* A, int lda, const float* B, int ldb,
          float beta, float* C, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, 1.f, A, lda, B, ldb, beta, C, ldc);
}

struct ConvGeom {
    int in[3], out[3], k[3], s[3], p[3];
    int cin = 0, cout = 0;
    std::int64_t in_sp = 1, out_sp = 1;
    int krows = 1;  // k0*k1*k2
};

// Spatial dims as a 3-array with a leading singleton for 2D tensors.
void spatial3(const Tensor& t, int d[3]) {
    d[0] = d[1] = d[2] = 1;
    int r = t.rank() - 2;
    for (int i = 0; i < r; ++i) d[3 - r + i] = t.dim(2 + i);
}

ConvGeom conv_geom(const Tensor& x, const Tensor& w, int stride, bool transposed) {
    ConvGeom g;
    spatial3(x, g.in);
    int r = x.rank() - 2;
    if (w.rank() != r + 2) throw ShapeError("conv: weight rank does not match input rank");
    int kern = w.dim(2);
    for (int i = 0; i < 3; ++i) {
        bool real = i >= 3 - r;
        g.k[i] = real ? kern : 1;
        g.s[i] = real ? stride : 1;
        g.p[i] = real ? (transposed ? 0 : kern / 2) : 0;
        g.out[i] = transposed ? g.in[i] * stride : (g.in[i] + 2 * g.p[i] - g.k[i]) / g.s[i] + 1;
        if (g.out[i] < 1) throw ShapeError("conv: output dimension collapsed");
    }
    g.cin = transposed ? w.dim(0) : w.dim(1);
    g.cout = transposed ? w.dim(1) : w.dim(0);
    if (x.channels() != g.cin) throw ShapeError("conv: channel mismatch");
    g.in_sp = std::int64_t(g.in[0]) * g.in[1] * g.in[2];
    g.out_sp = std::int64_t(g.out[0]) * g.out[1] * g.out[2];
    g.krows = g.k[0] * g.k[1] * g.k[2];
    return g;
}

// col[(c,kd,kh,kw), (od,oh,ow)] for one sample. `in`/`out` describe the dense
// image geometry the columns are gathered from / scattered to.
void im2col(const float* x, int C, const int in[3], const int k[3], const int s[3], const int p[3],
            const int out[3], float* col) {
    const std::int64_t in12 = std::int64_t(in[1]) * in[2];
    const std::int64_t in_sp = in12 * in[0];
    const std::int64_t out_sp = std::int64_t(out[0]) * out[1] * out[2];
    float* c = col;
    for (int ch = 0; ch < C; ++ch) {
        const float* xc = x + ch * in_sp;
        for (int kd = 0; kd < k[0]; ++kd)
            for (int kh = 0; kh < k[1]; ++kh)
                for (int kw = 0; kw < k[2]; ++kw) {
                    for (int od = 0; od < out[0]; ++od) {
                        int id = od * s[0] + kd - p[0];
                        bool din = id >= 0 && id < in[0];
                        for (int oh = 0; oh < out[1]; ++oh) {
                            int ih = oh * s[1] + kh - p[1];
                            if (!din || ih < 0 || ih >= in[1]) {
                                std::memset(c, 0, sizeof(float) * out[2]);
                                c += out[2];
                                continue;
                            }
                            const float* row = xc + id * in12 + std::int64_t(ih) * in[2];
                            int iw = kw - p[2];
                            for (int ow = 0; ow < out[2]; ++ow, iw += s[2])
                                *c++ = (iw >= 0 && iw < in[2]) ? row[iw] : 0.f;
                        }
                    }
                }
    }
    (void)out_sp;
}

// Adjoint of im2col: scatter-add columns back into the image.
void col2im_add(const float* col, int C, const int in[3], const int k[3], const int s[3],
                const int p[3], const int out[3], float* x) {
    const std::int64_t in12 = std::int64_t(in[1]) * in[2];
    const std::int64_t in_sp = in12 * in[0];
    const float* c = col;
    for (int ch = 0; ch < C; ++ch) {
        float* xc = x + ch * in_sp;
        for (int kd = 0; kd < k[0]; ++kd)
            for (int kh = 0; kh < k[1]; ++kh)
                for (int kw = 0; kw < k[2]; ++kw) {
                    for (int od = 0; od < out[0]; ++od) {
                        int id = od * s[0] + kd - p[0];
                        bool din = id >= 0 && id < in[0];
                        for (int oh = 0; oh < out[1]; ++oh) {
                            int ih = oh * s[1] + kh - p[1];
                            if (!din || ih < 0 || ih >= in[1]) {
                                c += out[2];
                                continue;
                            }
                            float* row = xc + id * in12 + std::int64_t(ih) * in[2];
                            int iw = kw - p[2];
                            for (int ow = 0; ow < out[2]; ++ow, iw += s[2]) {
                                if (iw >= 0 && iw < in[2]) row[iw] += *c;
                                ++c;
                            }
                        }
                    }
                }
    }
}

std::vector<float>& scratch(int which, std::int64_t n) {
    static thread_local std::vector<float> bufs[2];
    auto& b = bufs[which];
    if (static_cast<std::int64_t>(b.size()) < n) b.resize(n);
    return b;
}

std::vector<int> out_shape(const Tensor& x, const ConvGeom& g) {
    std::vector<int> s = {x.batch(), g.cout};
    int r = x.rank() - 2;
    for (int i = 3 - r; i < 3; ++i) s.push_back(g.out[i]);
    return s;
}

bool wants_grad(std::initializer_list<const VarPtr*> ps) {
    if (!grad_enabled()) return false;
    for (auto* p : ps)
        if (*p && (*p)->requires_grad) return true;
    return false;
}

void accum(Var& parent, const float* g, std::int64_t n, std::int64_t offset = 0) {
    parent.ensure_grad();
    float* dst = parent.grad.ptr() + offset;
    for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

}  // namespace

VarPtr conv(const VarPtr& x, const VarPtr& w, const VarPtr& b, int stride) {
    ConvGeom g = conv_geom(x->value, w->value, stride, false);
    const int B = x->value.batch();
    const int rows = g.cin * g.krows;
    Tensor out(out_shape(x->value, g));
    auto& col = scratch(0, std::int64_t(rows) * g.out_sp);
    for (int n = 0; n < B; ++n) {
        im2col(x->value.ptr() + n * g.cin * g.in_sp, g.cin, g.in, g.k, g.s, g.p, g.out, col.data());
        float* y = out.ptr() + n * g.cout * g.out_sp;
        gemm(false, false, g.cout, static_cast<int>(g.out_sp), rows, w->value.ptr(), rows, col.data(),
             static_cast<int>(g.out_sp), 0.f, y, static_cast<int>(g.out_sp));
        for (int co = 0; co < g.cout; ++co) {
            float bias = b->value.data[co];
            float* yc = y + co * g.out_sp;
            for (std::int64_t i = 0; i < g.out_sp; ++i) yc[i] += bias;
        }
    }
    auto res = make_leaf(std::move(out), wants_grad({&x, &w, &b}));
    if (res->requires_grad) {
        res->parents = {x, w, b};
        int str = stride;
        res->backward_fn = [x, w, b, g, str](Var& self) {
            const int B = x->value.batch();
            const int rows = g.cin * g.krows;
            const int osp = static_cast<int>(g.out_sp);
            auto& col = scratch(0, std::int64_t(rows) * g.out_sp);
            auto& dcol = scratch(1, std::int64_t(rows) * g.out_sp);
            if (w->requires_grad) w->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (int n = 0; n < B; ++n) {
                const float* dy = self.grad.ptr() + n * g.cout * g.out_sp;
                if (w->requires_grad) {
                    im2col(x->value.ptr() + n * g.cin * g.in_sp, g.cin, g.in, g.k, g.s, g.p, g.out,
                           col.data());
                    gemm(false, true, g.cout, rows, osp, dy, osp, col.data(), osp, 1.f,
                         w->grad.ptr(), rows);
                }
                if (b->requires_grad) {
                    for (int co = 0; co < g.cout; ++co) {
                        const float* dyc = dy + co * g.out_sp;
                        float s = 0.f;
                        for (std::int64_t i = 0; i < g.out_sp; ++i) s += dyc[i];
                        b->grad.data[co] += s;
                    }
                }
                if (x->requires_grad) {
                    gemm(true, false, rows, osp, g.cout, w->value.ptr(), rows, dy, osp, 0.f,
                         dcol.data(), osp);
                    col2im_add(dcol.data(), g.cin, g.in, g.k, g.s, g.p, g.out,
                               x->grad.ptr() + n * g.cin * g.in_sp);
                }
            }
            (void)str;
        };
    }
    return res;
}

VarPtr conv_transpose(const VarPtr& x, const VarPtr& w, const VarPtr& b) {
    // Kernel 2 stride 2: the adjoint of a k2/s2 conv from the doubled grid.
    ConvGeom g = conv_geom(x->value, w->value, 2, true);
    const int B = x->value.batch();
    const int rows = g.cout * g.krows;      // columns live on the doubled grid
    const std::int64_t small_sp = g.in_sp;  // input positions == adjoint-conv outputs
    Tensor out(out_shape(x->value, g));
    auto& coly = scratch(0, std::int64_t(rows) * small_sp);
    for (int n = 0; n < B; ++n) {
        // col_y = W^T x   ([Cout*K, Cin] x [Cin, S_in])
        gemm(true, false, rows, static_cast<int>(small_sp), g.cin, w->value.ptr(), rows,
             x->value.ptr() + n * g.cin * small_sp, static_cast<int>(small_sp), 0.f, coly.data(),
             static_cast<int>(small_sp));
        float* y = out.ptr() + n * g.cout * g.out_sp;
        std::memset(y, 0, sizeof(float) * g.cout * g.out_sp);
        col2im_add(coly.data(), g.cout, g.out, g.k, g.s, g.p, g.in, y);
        for (int co = 0; co < g.cout; ++co) {
            float bias = b->value.data[co];
            float* yc = y + co * g.out_sp;
            for (std::int64_t i = 0; i < g.out_sp; ++i) yc[i] += bias;
        }
    }
    auto res = make_leaf(std::move(out), wants_grad({&x, &w, &b}));
    if (res->requires_grad) {
        res->parents = {x, w, b};
        res->backward_fn = [x, w, b, g](Var& self) {
            const int B = x->value.batch();
            const int rows = g.cout * g.krows;
            const int ssp = static_cast<int>(g.in_sp);
            auto& dcol = scratch(1, std::int64_t(rows) * g.in_sp);
            if (w->requires_grad) w->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (int n = 0; n < B; ++n) {
                const float* dy = self.grad.ptr() + n * g.cout * g.out_sp;
                im2col(dy, g.cout, g.out, g.k, g.s, g.p, g.in, dcol.data());
                if (x->requires_grad)
                    gemm(false, false, g.cin, ssp, rows, w->value.ptr(), rows, dcol.data(), ssp, 1.f,
                         x->grad.ptr() + n * g.cin * g.in_sp, ssp);
                if (w->requires_grad)
                    gemm(false, true, g.cin, rows, ssp, x->value.ptr() + n * g.cin * g.in_sp, ssp,
                         dcol.data(), ssp, 1.f, w->grad.ptr(), rows);
                if (b->requires_grad) {
                    for (int co = 0; co < g.cout; ++co) {
                        const float* dyc = dy + co * g.out_sp;
                        float s = 0.f;
                        for (std::int64_t i = 0; i < g.out_sp; ++i) s += dyc[i];
                        b->grad.data[co] += s;
                    }
                }
            }
        };
    }
    return res;
}

VarPtr instance_norm(const VarPtr& x, const VarPtr& gamma, const VarPtr& beta, float eps) {
    const int B = x->value.batch(), C = x->value.channels();
    const std::int64_t S = x->value.spatial_numel();
    Tensor out(x->value.shape);
    auto xhat = std::make_shared<Tensor>(x->value.shape);
    auto inv = std::make_shared<Tensor>(std::vector<int>{B, C});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const float* xs = x->value.ptr() + (std::int64_t(n) * C + c) * S;
            float* hs = xhat->ptr() + (std::int64_t(n) * C + c) * S;
            float* ys = out.ptr() + (std::int64_t(n) * C + c) * S;
            double mu = 0;
            for (std::int64_t i = 0; i < S; ++i) mu += xs[i];
            mu /= double(S);
            double var = 0;
            for (std::int64_t i = 0; i < S; ++i) {
                double d = xs[i] - mu;
                var += d * d;
            }
            var /= double(S);
            float iv = static_cast<float>(1.0 / std::sqrt(var + eps));
            inv->data[n * C + c] = iv;
            float g = gamma->value.data[c], bta = beta->value.data[c], m = static_cast<float>(mu);
            for (std::int64_t i = 0; i < S; ++i) {
                hs[i] = (xs[i] - m) * iv;
                ys[i] = g * hs[i] + bta;
            }
        }
    auto res = make_leaf(std::move(out), wants_grad({&x, &gamma, &beta}));
    if (res->requires_grad) {
        res->parents = {x, gamma, beta};
        res->backward_fn = [x, gamma, beta, xhat, inv, B, C, S](Var& self) {
            if (gamma->requires_grad) gamma->ensure_grad();
            if (beta->requires_grad) beta->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::int64_t off = (std::int64_t(n) * C + c) * S;
                    const float* dy = self.grad.ptr() + off;
                    const float* h = xhat->ptr() + off;
                    double sdy = 0, sdyh = 0;
                    for (std::int64_t i = 0; i < S; ++i) {
                        sdy += dy[i];
                        sdyh += dy[i] * h[i];
                    }
                    if (gamma->requires_grad) gamma->grad.data[c] += static_cast<float>(sdyh);
                    if (beta->requires_grad) beta->grad.data[c] += static_cast<float>(sdy);
                    if (x->requires_grad) {
                        float* dx = x->grad.ptr() + off;
                        float giv = gamma->value.data[c] * inv->data[n * C + c];
                        float mdy = static_cast<float>(sdy / double(S));
                        float mdyh = static_cast<float>(sdyh / double(S));
                        for (std::int64_t i = 0; i < S; ++i)
                            dx[i] += giv * (dy[i] - mdy - h[i] * mdyh);
                    }
                }
        };
    }
    return res;
}

VarPtr leaky_relu(const VarPtr& x, float slope) {
    Tensor out(x->value.shape);
    const std::int64_t n = x->value.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        float v = x->value.data[i];
        out.data[i] = v > 0.f ? v : slope * v;
    }
    auto res = make_leaf(std::move(out), wants_grad({&x}));
    if (res->requires_grad) {
        res->parents = {x};
        res->backward_fn = [x, slope](Var& self) {
            x->ensure_grad();
            const std::int64_t n = x->value.numel();
            for (std::int64_t i = 0; i < n; ++i)
                x->grad.data[i] += self.grad.data[i] * (x->value.data[i] > 0.f ? 1.f : slope);
        };
    }
    return res;
}

VarPtr concat_channels(const VarPtr& a, const VarPtr& b) {
    if (a->value.rank() != b->value.rank() || a->value.batch() != b->value.batch() ||
        a->value.spatial_dims() != b->value.spatial_dims())
        throw ShapeError("concat_channels: incompatible shapes " + a->value.shape_str() + " vs " +
                         b->value.shape_str());
    const int B = a->value.batch(), Ca = a->value.channels(), Cb = b->value.channels();
    const std::int64_t S = a->value.spatial_numel();
    std::vector<int> shape = a->value.shape;
    shape[1] = Ca + Cb;
    Tensor out(shape);
    for (int n = 0; n < B; ++n) {
        std::memcpy(out.ptr() + std::int64_t(n) * (Ca + Cb) * S, a->value.ptr() + std::int64_t(n) * Ca * S,
                    sizeof(float) * Ca * S);
        std::memcpy(out.ptr() + (std::int64_t(n) * (Ca + Cb) + Ca) * S,
                    b->value.ptr() + std::int64_t(n) * Cb * S, sizeof(float) * Cb * S);
    }
    auto res = make_leaf(std::move(out), wants_grad({&a, &b}));
    if (res->requires_grad) {
        res->parents = {a, b};
        res->backward_fn = [a, b, B, Ca, Cb, S](Var& self) {
            for (int n = 0; n < B; ++n) {
                if (a->requires_grad)
                    accum(*a, self.grad.ptr() + std::int64_t(n) * (Ca + Cb) * S, Ca * S,
                          std::int64_t(n) * Ca * S);
                if (b->requires_grad)
                    accum(*b, self.grad.ptr() + (std::int64_t(n) * (Ca + Cb) + Ca) * S, Cb * S,
                          std::int64_t(n) * Cb * S);
            }
        };
    }
    return res;
}

VarPtr global_avg_pool(const VarPtr& x) {
    const int B = x->value.batch(), C = x->value.channels();
    const std::int64_t S = x->value.spatial_numel();
    Tensor out({B, C});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const float* xs = x->value.ptr() + (std::int64_t(n) * C + c) * S;
            double s = 0;
            for (std::int64_t i = 0; i < S; ++i) s += xs[i];
            out.data[n * C + c] = static_cast<float>(s / double(S));
        }
    auto res = make_leaf(std::move(out), wants_grad({&x}));
    if (res->requires_grad) {
        res->parents = {x};
        res->backward_fn = [x, B, C, S](Var& self) {
            x->ensure_grad();
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c) {
                    float g = self.grad.data[n * C + c] / static_cast<float>(S);
                    float* dx = x->grad.ptr() + (std::int64_t(n) * C + c) * S;
                    for (std::int64_t i = 0; i < S; ++i) dx[i] += g;
                }
        };
    }
    return res;
}

VarPtr linear(const VarPtr& x, const VarPtr& w, const VarPtr& b) {
    const int B = x->value.dim(0), I = x->value.dim(1), O = w->value.dim(0);
    if (w->value.dim(1) != I)
        throw ConfigError("linear: input width " + std::to_string(I) + " does not match weight fan-in " +
                          std::to_string(w->value.dim(1)));
    Tensor out({B, O});
    gemm(false, true, B, O, I, x->value.ptr(), I, w->value.ptr(), I, 0.f, out.ptr(), O);
    for (int n = 0; n < B; ++n)
        for (int o = 0; o < O; ++o) out.data[n * O + o] += b->value.data[o];
    auto res = make_leaf(std::move(out), wants_grad({&x, &w, &b}));
    if (res->requires_grad) {
        res->parents = {x, w, b};
        res->backward_fn = [x, w, b, B, I, O](Var& self) {
            if (x->requires_grad) {
                x->ensure_grad();
                gemm(false, false, B, I, O, self.grad.ptr(), O, w->value.ptr(), I, 1.f, x->grad.ptr(), I);
            }
            if (w->requires_grad) {
                w->ensure_grad();
                gemm(true, false, O, I, B, self.grad.ptr(), O, x->value.ptr(), I, 1.f, w->grad.ptr(), I);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int n = 0; n < B; ++n)
                    for (int o = 0; o < O; ++o) b->grad.data[o] += self.grad.data[n * O + o];
            }
        };
    }
    return res;
}

VarPtr concat_features(const std::vector<VarPtr>& xs) {
    if (xs.empty()) throw ShapeError("concat_features: empty input list");
    const int B = xs[0]->value.dim(0);
    int F = 0;
    for (auto& v : xs) {
        if (v->value.rank() != 2 || v->value.dim(0) != B) throw ShapeError("concat_features: bad shapes");
        F += v->value.dim(1);
    }
    Tensor out({B, F});
    int off = 0;
    for (auto& v : xs) {
        int f = v->value.dim(1);
        for (int n = 0; n < B; ++n)
            std::memcpy(out.ptr() + std::int64_t(n) * F + off, v->value.ptr() + std::int64_t(n) * f,
                        sizeof(float) * f);
        off += f;
    }
    bool rg = false;
    for (auto& v : xs) rg = rg || v->requires_grad;
    auto res = make_leaf(std::move(out), rg && grad_enabled());
    if (res->requires_grad) {
        res->parents = xs;
        res->backward_fn = [xs, B, F](Var& self) {
            int off = 0;
            for (auto& v : xs) {
                int f = v->value.dim(1);
                if (v->requires_grad) {
                    v->ensure_grad();
                    for (int n = 0; n < B; ++n) {
                        const float* g = self.grad.ptr() + std::int64_t(n) * F + off;
                        float* dst = v->grad.ptr() + std::int64_t(n) * f;
                        for (int i = 0; i < f; ++i) dst[i] += g[i];
                    }
                }
                off += f;
            }
        };
    }
    return res;
}

namespace {
// Shared softmax backward: dx = p * (dy - sum(dy*p)) per group.
void softmax_rows(const float* x, float* p, int n, std::int64_t stride) {
    float mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i * stride]);
    double den = 0;
    for (int i = 0; i < n; ++i) den += std::exp(double(x[i * stride]) - mx);
    for (int i = 0; i < n; ++i)
        p[i * stride] = static_cast<float>(std::exp(double(x[i * stride]) - mx) / den);
}
}  // namespace

VarPtr softmax_vec(const VarPtr& x) {
    const int B = x->value.dim(0), K = x->value.dim(1);
    Tensor out({B, K});
    for (int n = 0; n < B; ++n) softmax_rows(x->value.ptr() + n * K, out.ptr() + n * K, K, 1);
    auto res = make_leaf(std::move(out), wants_grad({&x}));
    if (res->requires_grad) {
        res->parents = {x};
        res->backward_fn = [x, B, K](Var& self) {
            x->ensure_grad();
            for (int n = 0; n < B; ++n) {
                const float* p = self.value.ptr() + n * K;
                const float* dy = self.grad.ptr() + n * K;
                double dot = 0;
                for (int i = 0; i < K; ++i) dot += double(dy[i]) * p[i];
                float* dx = x->grad.ptr() + n * K;
                for (int i = 0; i < K; ++i) dx[i] += p[i] * (dy[i] - static_cast<float>(dot));
            }
        };
    }
    return res;
}

VarPtr softmax_channels(const VarPtr& x) {
    const int B = x->value.batch(), C = x->value.channels();
    const std::int64_t S = x->value.spatial_numel();
    Tensor out(x->value.shape);
    for (int n = 0; n < B; ++n) {
        const float* xs = x->value.ptr() + std::int64_t(n) * C * S;
        float* ps = out.ptr() + std::int64_t(n) * C * S;
        for (std::int64_t v = 0; v < S; ++v) softmax_rows(xs + v, ps + v, C, S);
    }
    auto res = make_leaf(std::move(out), wants_grad({&x}));
    if (res->requires_grad) {
        res->parents = {x};
        res->backward_fn = [x, B, C, S](Var& self) {
            x->ensure_grad();
            for (int n = 0; n < B; ++n) {
                const float* p = self.value.ptr() + std::int64_t(n) * C * S;
                const float* dy = self.grad.ptr() + std::int64_t(n) * C * S;
                float* dx = x->grad.ptr() + std::int64_t(n) * C * S;
                for (std::int64_t v = 0; v < S; ++v) {
                    double dot = 0;
                    for (int c = 0; c < C; ++c) dot += double(dy[c * S + v]) * p[c * S + v];
                    for (int c = 0; c < C; ++c)
                        dx[c * S + v] += p[c * S + v] * (dy[c * S + v] - static_cast<float>(dot));
                }
            }
        };
    }
    return res;
}

VarPtr detach(const VarPtr& x) {
    return make_const(x->value);
}

VarPtr slice_cols(const VarPtr& x, int from, int len) {
    const int B = x->value.dim(0), L = x->value.dim(1);
    if (from < 0 || from + len > L) throw ShapeError("slice_cols: out of range");
    Tensor out({B, len});
    for (int n = 0; n < B; ++n)
        std::memcpy(out.ptr() + std::int64_t(n) * len, x->value.ptr() + std::int64_t(n) * L + from,
                    sizeof(float) * len);
    auto res = make_leaf(std::move(out), wants_grad({&x}));
    if (res->requires_grad) {
        res->parents = {x};
        res->backward_fn = [x, from, len, B, L](Var& self) {
            x->ensure_grad();
            for (int n = 0; n < B; ++n) {
                const float* g = self.grad.ptr() + std::int64_t(n) * len;
                float* dst = x->grad.ptr() + std::int64_t(n) * L + from;
                for (int i = 0; i < len; ++i) dst[i] += g[i];
            }
        };
    }
    return res;
}

VarPtr dynamic_affine(const VarPtr& x, const VarPtr& wb, int out_channels) {
    const int B = x->value.batch(), Cin = x->value.channels(), Cout = out_channels;
    const std::int64_t S = x->value.spatial_numel();
    const int L = Cout * Cin + Cout;
    if (wb->value.rank() != 2 || wb->value.dim(0) != B || wb->value.dim(1) != L)
        throw ShapeError("dynamic_affine: filter bank length " +
                         std::to_string(wb->value.rank() == 2 ? wb->value.dim(1) : -1) +
                         " does not match expected " + std::to_string(L));
    std::vector<int> shape = x->value.shape;
    shape[1] = Cout;
    Tensor out(shape);
    for (int n = 0; n < B; ++n) {
        const float* W = wb->value.ptr() + std::int64_t(n) * L;
        const float* bias = W + Cout * Cin;
        float* y = out.ptr() + std::int64_t(n) * Cout * S;
        gemm(false, false, Cout, static_cast<int>(S), Cin, W, Cin,
             x->value.ptr() + std::int64_t(n) * Cin * S, static_cast<int>(S), 0.f, y,
             static_cast<int>(S));
        for (int co = 0; co < Cout; ++co) {
            float bv = bias[co];
            float* yc = y + co * S;
            for (std::int64_t i = 0; i < S; ++i) yc[i] += bv;
        }
    }
    auto res = make_leaf(std::move(out), wants_grad({&x, &wb}));
    if (res->requires_grad) {
        res->parents = {x, wb};
        res->backward_fn = [x, wb, B, Cin, Cout, S, L](Var& self) {
            if (x->requires_grad) x->ensure_grad();
            if (wb->requires_grad) wb->ensure_grad();
            for (int n = 0; n < B; ++n) {
                const float* dy = self.grad.ptr() + std::int64_t(n) * Cout * S;
                const float* W = wb->value.ptr() + std::int64_t(n) * L;
                if (x->requires_grad)
                    gemm(true, false, Cin, static_cast<int>(S), Cout, W, Cin, dy,
                         static_cast<int>(S), 1.f, x->grad.ptr() + std::int64_t(n) * Cin * S,
                         static_cast<int>(S));
                if (wb->requires_grad) {
                    float* dW = wb->grad.ptr() + std::int64_t(n) * L;
                    gemm(false, true, Cout, Cin, static_cast<int>(S), dy, static_cast<int>(S),
                         x->value.ptr() + std::int64_t(n) * Cin * S, static_cast<int>(S), 1.f, dW,
                         Cin);
                    float* db = dW + Cout * Cin;
                    for (int co = 0; co < Cout; ++co) {
                        const float* dyc = dy + co * S;
                        float s = 0.f;
                        for (std::int64_t i = 0; i < S; ++i) s += dyc[i];
                        db[co] += s;
                    }
                }
            }
        };
    }
    return res;
}

namespace {
VarPtr elementwise2(const VarPtr& a, const VarPtr& b, float sign_b) {
    if (!a->value.same_shape(b->value)) throw ShapeError("elementwise: shape mismatch");
    Tensor out(a->value.shape);
    const std::int64_t n = a->value.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data[i] = a->value.data[i] + sign_b * b->value.data[i];
    auto res = make_leaf(std::move(out), wants_grad({&a, &b}));
    if (res->requires_grad) {
        res->parents = {a, b};
        res->backward_fn = [a, b, sign_b](Var& self) {
            const std::int64_t n = self.value.numel();
            if (a->requires_grad) accum(*a, self.grad.ptr(), n);
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) b->grad.data[i] += sign_b * self.grad.data[i];
            }
        };
    }
    return res;
}
}  // namespace

VarPtr add(const VarPtr& a, const VarPtr& b) { return elementwise2(a, b, 1.f); }
VarPtr sub(const VarPtr& a, const VarPtr& b) { return elementwise2(a, b, -1.f); }

VarPtr scale(const VarPtr& x, float s) {
    Tensor out(x->value.shape);
    const std::int64_t n = x->value.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data[i] = x->value.data[i] * s;
    auto res = make_leaf(std::move(out), wants_grad({&x}));
    if (res->requires_grad) {
        res->parents = {x};
        res->backward_fn = [x, s](Var& self) {
            x->ensure_grad();
            const std::int64_t n = x->value.numel();
            for (std::int64_t i = 0; i < n; ++i) x->grad.data[i] += s * self.grad.data[i];
        };
    }
    return res;
}

VarPtr add_weighted(const std::vector<VarPtr>& scalars, const std::vector<double>& weights) {
    if (scalars.size() != weights.size() || scalars.empty())
        throw ConfigError("add_weighted: size mismatch");
    double total = 0;
    for (size_t i = 0; i < scalars.size(); ++i) {
        if (scalars[i]->value.numel() != 1) throw ShapeError("add_weighted: non-scalar term");
        total += weights[i] * scalars[i]->value.data[0];
    }
    Tensor out({1});
    out.data[0] = static_cast<float>(total);
    bool rg = false;
    for (auto& v : scalars) rg = rg || v->requires_grad;
    auto res = make_leaf(std::move(out), rg && grad_enabled());
    if (res->requires_grad) {
        res->parents = scalars;
        auto w = weights;
        res->backward_fn = [scalars, w](Var& self) {
            for (size_t i = 0; i < scalars.size(); ++i)
                if (scalars[i]->requires_grad) {
                    scalars[i]->ensure_grad();
                    scalars[i]->grad.data[0] += static_cast<float>(w[i]) * self.grad.data[0];
                }
        };
    }
    return res;
}

// ---- plain tensor utilities -------------------------------------------------

Tensor pad_spatial_to_multiple(const Tensor& x, int multiple, std::vector<int>& pad_lo) {
    const int r = x.rank() - 2;
    std::vector<int> in = x.spatial_dims(), target(r), lo(r);
    bool noop = true;
    for (int i = 0; i < r; ++i) {
        target[i] = ((in[i] + multiple - 1) / multiple) * multiple;
        lo[i] = (target[i] - in[i]) / 2;
        noop = noop && target[i] == in[i];
    }
    pad_lo = lo;
    if (noop) return x;
    std::vector<int> shape = {x.dim(0), x.dim(1)};
    shape.insert(shape.end(), target.begin(), target.end());
    Tensor out(shape);
    const int B = x.dim(0), C = x.dim(1);
    int id[3], od[3], plo[3] = {0, 0, 0};
    spatial3(x, id);
    spatial3(out, od);
    for (int i = 0; i < r; ++i) plo[3 - r + i] = lo[i];
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const float* src = x.ptr() + (std::int64_t(n) * C + c) * x.spatial_numel();
            float* dst = out.ptr() + (std::int64_t(n) * C + c) * out.spatial_numel();
            for (int d = 0; d < id[0]; ++d)
                for (int h = 0; h < id[1]; ++h)
                    std::memcpy(dst + ((std::int64_t(d) + plo[0]) * od[1] + h + plo[1]) * od[2] + plo[2],
                                src + (std::int64_t(d) * id[1] + h) * id[2], sizeof(float) * id[2]);
        }
    return out;
}

Tensor crop_spatial(const Tensor& x, const std::vector<int>& pad_lo, const std::vector<int>& target_spatial) {
    const int r = x.rank() - 2;
    std::vector<int> shape = {x.dim(0), x.dim(1)};
    shape.insert(shape.end(), target_spatial.begin(), target_spatial.end());
    if (shape == x.shape) return x;
    Tensor out(shape);
    const int B = x.dim(0), C = x.dim(1);
    int id[3], od[3], plo[3] = {0, 0, 0};
    spatial3(x, id);
    spatial3(out, od);
    for (int i = 0; i < r; ++i) plo[3 - r + i] = pad_lo[i];
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const float* src = x.ptr() + (std::int64_t(n) * C + c) * x.spatial_numel();
            float* dst = out.ptr() + (std::int64_t(n) * C + c) * out.spatial_numel();
            for (int d = 0; d < od[0]; ++d)
                for (int h = 0; h < od[1]; ++h)
                    std::memcpy(dst + (std::int64_t(d) * od[1] + h) * od[2],
                                src + ((std::int64_t(d) + plo[0]) * id[1] + h + plo[1]) * id[2] + plo[2],
                                sizeof(float) * od[2]);
        }
    return out;
}

Tensor nn_downsample(const Tensor& mask, int factor) {
    if (factor == 1) return mask;
    const int B = mask.dim(0);
    const int r = mask.rank() - 1;
    std::vector<int> in(mask.shape.begin() + 1, mask.shape.end()), out_sp(r);
    for (int i = 0; i < r; ++i) out_sp[i] = in[i] / factor;
    std::vector<int> shape = {B};
    shape.insert(shape.end(), out_sp.begin(), out_sp.end());
    Tensor out(shape);
    int id[3] = {1, 1, 1}, od[3] = {1, 1, 1};
    for (int i = 0; i < r; ++i) {
        id[3 - r + i] = in[i];
        od[3 - r + i] = out_sp[i];
    }
    const std::int64_t in_sp = std::int64_t(id[0]) * id[1] * id[2];
    const std::int64_t o_sp = std::int64_t(od[0]) * od[1] * od[2];
    for (int n = 0; n < B; ++n) {
        const float* src = mask.ptr() + n * in_sp;
        float* dst = out.ptr() + n * o_sp;
        for (int d = 0; d < od[0]; ++d)
            for (int h = 0; h < od[1]; ++h)
                for (int w = 0; w < od[2]; ++w)
                    dst[(std::int64_t(d) * od[1] + h) * od[2] + w] =
                        src[((std::int64_t(d) * (id[0] > 1 ? factor : 1)) * id[1] +
                             std::int64_t(h) * factor) * id[2] +
                            std::int64_t(w) * factor];
    }
    return out;
}

Tensor one_hot_channels(const Tensor& mask, int num_classes) {
    const int B = mask.dim(0);
    const std::int64_t S = mask.numel() / B;
    std::vector<int> shape = {B, num_classes};
    shape.insert(shape.end(), mask.shape.begin() + 1, mask.shape.end());
    Tensor out(shape);
    for (int n = 0; n < B; ++n)
        for (std::int64_t v = 0; v < S; ++v) {
            int cls = static_cast<int>(mask.data[n * S + v] + 0.5f);
            if (cls < 0 || cls >= num_classes) throw DataError("label value outside class range");
            out.data[(std::int64_t(n) * num_classes + cls) * S + v] = 1.f;
        }
    return out;
}

}  // namespace dcac
