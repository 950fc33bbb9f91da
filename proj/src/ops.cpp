#include "cag/ops.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace cag::ad {

namespace {

Index rows_of(const Tensor& t) { return t.rank() == 0 ? 1 : t.dim(0); }
Index cols_of(const Tensor& t) { return rows_of(t) == 0 ? 0 : t.size() / rows_of(t); }

void require_same_size(const Tensor& a, const Tensor& b, const char* op) {
    if (a.size() != b.size())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                    shape_to_string(b.shape()));
}

void require_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank)
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                    shape_to_string(t.shape()));
}

template <class F>
Var unary(Graph& g, Var a, F&& f_and_df) {
    const Tensor& x = g.value(a);
    Tensor y = Tensor::like(x);
    auto dydx = std::make_shared<Tensor>(Tensor::like(x));
    for (Index i = 0; i < x.size(); ++i) f_and_df(x[i], y[i], (*dydx)[i]);
    return g.record(std::move(y), {a}, [a, dydx](Graph& gr, const Tensor& go) {
        Tensor& ga = gr.grad_buffer(a);
        for (Index i = 0; i < go.size(); ++i) ga[i] += go[i] * (*dydx)[i];
    });
}

// Interpolation matrix [out, in] for half-pixel bilinear sampling.
RowMatrix interpolation_matrix(Index out, Index in) {
    RowMatrix r = RowMatrix::Zero(out, in);
    const double step = static_cast<double>(in) / static_cast<double>(out);
    for (Index o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * step - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const Index i0 = static_cast<Index>(std::floor(src));
        const Index i1 = std::min(i0 + 1, in - 1);
        const double frac = src - static_cast<double>(i0);
        r(o, i0) += 1.0 - frac;
        r(o, i1) += frac;
    }
    return r;
}

}  // namespace

Var add(Graph& g, Var a, Var b) {
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    require_same_size(x, y, "add");
    Tensor out = x;
    for (Index i = 0; i < out.size(); ++i) out[i] += y[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
        gr.accumulate(a, go);
        gr.accumulate(b, go);
    });
}

Var sub(Graph& g, Var a, Var b) {
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    require_same_size(x, y, "sub");
    Tensor out = x;
    for (Index i = 0; i < out.size(); ++i) out[i] -= y[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
        gr.accumulate(a, go);
        if (gr.requires_grad(b)) {
            Tensor& gb = gr.grad_buffer(b);
            for (Index i = 0; i < go.size(); ++i) gb[i] -= go[i];
        }
    });
}

Var mul(Graph& g, Var a, Var b) {
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    require_same_size(x, y, "mul");
    Tensor out = x;
    for (Index i = 0; i < out.size(); ++i) out[i] *= y[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
        const Tensor& xa = gr.value(a);
        const Tensor& xb = gr.value(b);
        if (gr.requires_grad(a)) {
            Tensor& ga = gr.grad_buffer(a);
            for (Index i = 0; i < go.size(); ++i) ga[i] += go[i] * xb[i];
        }
        if (gr.requires_grad(b)) {
            Tensor& gb = gr.grad_buffer(b);
            for (Index i = 0; i < go.size(); ++i) gb[i] += go[i] * xa[i];
        }
    });
}

Var scale(Graph& g, Var a, double s) {
    Tensor out = g.value(a);
    for (double& v : out.values()) v *= s;
    return g.record(std::move(out), {a}, [a, s](Graph& gr, const Tensor& go) {
        Tensor& ga = gr.grad_buffer(a);
        for (Index i = 0; i < go.size(); ++i) ga[i] += s * go[i];
    });
}

Var square(Graph& g, Var a) {
    return unary(g, a, [](double x, double& y, double& d) {
        y = x * x;
        d = 2.0 * x;
    });
}

Var mul_const(Graph& g, Var a, const Tensor& c) {
    const Tensor& x = g.value(a);
    require_same_size(x, c, "mul_const");
    Tensor out = x;
    for (Index i = 0; i < out.size(); ++i) out[i] *= c[i];
    auto cc = std::make_shared<Tensor>(c);
    return g.record(std::move(out), {a}, [a, cc](Graph& gr, const Tensor& go) {
        Tensor& ga = gr.grad_buffer(a);
        for (Index i = 0; i < go.size(); ++i) ga[i] += go[i] * (*cc)[i];
    });
}

Var sub_const(Graph& g, Var a, const Tensor& c) {
    const Tensor& x = g.value(a);
    require_same_size(x, c, "sub_const");
    Tensor out = x;
    for (Index i = 0; i < out.size(); ++i) out[i] -= c[i];
    return g.record(std::move(out), {a}, [a](Graph& gr, const Tensor& go) { gr.accumulate(a, go); });
}

Var add_const(Graph& g, Var a, const Tensor& c) {
    const Tensor& x = g.value(a);
    require_same_size(x, c, "add_const");
    Tensor out = x;
    for (Index i = 0; i < out.size(); ++i) out[i] += c[i];
    return g.record(std::move(out), {a}, [a](Graph& gr, const Tensor& go) { gr.accumulate(a, go); });
}

Var silu(Graph& g, Var a) {
    return unary(g, a, [](double x, double& y, double& d) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        y = x * s;
        d = s * (1.0 + x * (1.0 - s));
    });
}

Var sigmoid(Graph& g, Var a) {
    return unary(g, a, [](double x, double& y, double& d) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        y = s;
        d = s * (1.0 - s);
    });
}

Var tanh(Graph& g, Var a) {
    return unary(g, a, [](double x, double& y, double& d) {
        y = std::tanh(x);
        d = 1.0 - y * y;
    });
}

Var sum(Graph& g, Var a) {
    const double s = g.value(a).sum();
    return g.record(Tensor::scalar(s), {a}, [a](Graph& gr, const Tensor& go) {
        Tensor& ga = gr.grad_buffer(a);
        for (double& v : ga.values()) v += go[0];
    });
}

Var mean(Graph& g, Var a) {
    const Index n = g.value(a).size();
    if (n == 0) throw std::invalid_argument("mean of empty tensor");
    return scale(g, sum(g, a), 1.0 / static_cast<double>(n));
}

Var reshape(Graph& g, Var a, Shape shape) {
    Tensor out = g.value(a).reshaped(std::move(shape));
    return g.record(std::move(out), {a}, [a](Graph& gr, const Tensor& go) {
        Tensor& ga = gr.grad_buffer(a);
        for (Index i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
}

Var matmul(Graph& g, Var a, Var b) {
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    const Index n = rows_of(ta), k = cols_of(ta), m = cols_of(tb);
    if (rows_of(tb) != k)
        throw std::invalid_argument("matmul: inner dimensions differ, " + shape_to_string(ta.shape()) + " x " +
                                    shape_to_string(tb.shape()));
    Tensor out({n, m});
    out.matrix(n, m).noalias() = ta.matrix(n, k) * tb.matrix(k, m);
    return g.record(std::move(out), {a, b}, [a, b, n, k, m](Graph& gr, const Tensor& go) {
        const auto dout = go.matrix(n, m);
        if (gr.requires_grad(a)) gr.grad_buffer(a).matrix(n, k).noalias() += dout * gr.value(b).matrix(k, m).transpose();
        if (gr.requires_grad(b)) gr.grad_buffer(b).matrix(k, m).noalias() += gr.value(a).matrix(n, k).transpose() * dout;
    });
}

Var matmul_nt(Graph& g, Var a, Var b) {
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    const Index n = rows_of(ta), k = cols_of(ta), m = rows_of(tb);
    if (cols_of(tb) != k)
        throw std::invalid_argument("matmul_nt: inner dimensions differ, " + shape_to_string(ta.shape()) + " x " +
                                    shape_to_string(tb.shape()) + "^T");
    Tensor out({n, m});
    out.matrix(n, m).noalias() = ta.matrix(n, k) * tb.matrix(m, k).transpose();
    return g.record(std::move(out), {a, b}, [a, b, n, k, m](Graph& gr, const Tensor& go) {
        const auto dout = go.matrix(n, m);
        if (gr.requires_grad(a)) gr.grad_buffer(a).matrix(n, k).noalias() += dout * gr.value(b).matrix(m, k);
        if (gr.requires_grad(b)) gr.grad_buffer(b).matrix(m, k).noalias() += dout.transpose() * gr.value(a).matrix(n, k);
    });
}

Var linear(Graph& g, Var x, Var w, Var bias) {
    const Tensor& tx = g.value(x);
    const Tensor& tw = g.value(w);
    const Index n = rows_of(tx), k = cols_of(tx);
    require_rank(tw, 2, "linear");
    if (tw.dim(0) != k)
        throw std::invalid_argument("linear: input width " + std::to_string(k) + " does not match weight " +
                                    shape_to_string(tw.shape()));
    const Index m = tw.dim(1);
    Tensor out({n, m});
    auto om = out.matrix(n, m);
    om.noalias() = tx.matrix(n, k) * tw.matrix(k, m);
    if (bias.valid()) {
        const Tensor& tb = g.value(bias);
        if (tb.size() != m) throw std::invalid_argument("linear: bias size mismatch");
        om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(tb.data(), m);
    }
    return g.record(std::move(out), {x, w, bias}, [x, w, bias, n, k, m](Graph& gr, const Tensor& go) {
        const auto dout = go.matrix(n, m);
        if (gr.requires_grad(x)) gr.grad_buffer(x).matrix(n, k).noalias() += dout * gr.value(w).matrix(k, m).transpose();
        if (gr.requires_grad(w)) gr.grad_buffer(w).matrix(k, m).noalias() += gr.value(x).matrix(n, k).transpose() * dout;
        if (bias.valid() && gr.requires_grad(bias))
            gr.grad_buffer(bias).matrix(1, m) += dout.colwise().sum();
    });
}

Var conv2d(Graph& g, Var x, Var w, Var bias, int pad) {
    const Tensor& tx = g.value(x);
    const Tensor& tw = g.value(w);
    require_rank(tx, 4, "conv2d input");
    require_rank(tw, 4, "conv2d weight");
    const Index N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    const Index O = tw.dim(0), K = tw.dim(2);
    if (tw.dim(1) != C || tw.dim(3) != K)
        throw std::invalid_argument("conv2d: weight " + shape_to_string(tw.shape()) + " incompatible with input " +
                                    shape_to_string(tx.shape()));
    const Index OH = H + 2 * pad - K + 1, OW = W + 2 * pad - K + 1;
    if (OH <= 0 || OW <= 0) throw std::invalid_argument("conv2d: kernel larger than padded input");
    const Index CKK = C * K * K, P = OH * OW;

    auto cols = std::make_shared<Tensor>(Shape{N, CKK, P});
    for (Index n = 0; n < N; ++n) {
        double* col = cols->data() + n * CKK * P;
        const double* img = tx.data() + n * C * H * W;
        for (Index c = 0; c < C; ++c)
            for (Index ky = 0; ky < K; ++ky)
                for (Index kx = 0; kx < K; ++kx) {
                    double* row = col + ((c * K + ky) * K + kx) * P;
                    for (Index oy = 0; oy < OH; ++oy) {
                        const Index iy = oy + ky - pad;
                        for (Index ox = 0; ox < OW; ++ox) {
                            const Index ix = ox + kx - pad;
                            row[oy * OW + ox] =
                                (iy >= 0 && iy < H && ix >= 0 && ix < W) ? img[(c * H + iy) * W + ix] : 0.0;
                        }
                    }
                }
    }

    Tensor out({N, O, OH, OW});
    const auto wm = tw.matrix(O, CKK);
    for (Index n = 0; n < N; ++n) {
        MatrixMap on(out.data() + n * O * P, O, P);
        on.noalias() = wm * ConstMatrixMap(cols->data() + n * CKK * P, CKK, P);
        if (bias.valid()) {
            const Tensor& tb = g.value(bias);
            on.colwise() += Eigen::Map<const Eigen::VectorXd>(tb.data(), O);
        }
    }

    return g.record(std::move(out), {x, w, bias}, [=](Graph& gr, const Tensor& go) {
        const auto wmat = gr.value(w).matrix(O, CKK);
        const bool need_x = gr.requires_grad(x);
        const bool need_w = gr.requires_grad(w);
        const bool need_b = bias.valid() && gr.requires_grad(bias);
        RowMatrix dcol(CKK, P);
        for (Index n = 0; n < N; ++n) {
            ConstMatrixMap dout(go.data() + n * O * P, O, P);
            ConstMatrixMap col(cols->data() + n * CKK * P, CKK, P);
            if (need_w) gr.grad_buffer(w).matrix(O, CKK).noalias() += dout * col.transpose();
            if (need_b) gr.grad_buffer(bias).matrix(O, 1) += dout.rowwise().sum();
            if (!need_x) continue;
            dcol.noalias() = wmat.transpose() * dout;
            double* dimg = gr.grad_buffer(x).data() + n * C * H * W;
            for (Index c = 0; c < C; ++c)
                for (Index ky = 0; ky < K; ++ky)
                    for (Index kx = 0; kx < K; ++kx) {
                        const double* row = dcol.data() + ((c * K + ky) * K + kx) * P;
                        for (Index oy = 0; oy < OH; ++oy) {
                            const Index iy = oy + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (Index ox = 0; ox < OW; ++ox) {
                                const Index ix = ox + kx - pad;
                                if (ix >= 0 && ix < W) dimg[(c * H + iy) * W + ix] += row[oy * OW + ox];
                            }
                        }
                    }
        }
    });
}

Var avg_pool2(Graph& g, Var x) {
    const Tensor& tx = g.value(x);
    require_rank(tx, 4, "avg_pool2");
    const Index N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    if (H % 2 || W % 2) throw std::invalid_argument("avg_pool2: spatial dims must be even, got " + shape_to_string(tx.shape()));
    const Index OH = H / 2, OW = W / 2;
    Tensor out({N, C, OH, OW});
    for (Index p = 0; p < N * C; ++p) {
        const double* src = tx.data() + p * H * W;
        double* dst = out.data() + p * OH * OW;
        for (Index i = 0; i < OH; ++i)
            for (Index j = 0; j < OW; ++j)
                dst[i * OW + j] = 0.25 * (src[2 * i * W + 2 * j] + src[2 * i * W + 2 * j + 1] +
                                          src[(2 * i + 1) * W + 2 * j] + src[(2 * i + 1) * W + 2 * j + 1]);
    }
    return g.record(std::move(out), {x}, [=](Graph& gr, const Tensor& go) {
        Tensor& gx = gr.grad_buffer(x);
        for (Index p = 0; p < N * C; ++p) {
            double* dst = gx.data() + p * H * W;
            const double* src = go.data() + p * OH * OW;
            for (Index i = 0; i < OH; ++i)
                for (Index j = 0; j < OW; ++j) {
                    const double v = 0.25 * src[i * OW + j];
                    dst[2 * i * W + 2 * j] += v;
                    dst[2 * i * W + 2 * j + 1] += v;
                    dst[(2 * i + 1) * W + 2 * j] += v;
                    dst[(2 * i + 1) * W + 2 * j + 1] += v;
                }
        }
    });
}

Var resize_bilinear(Graph& g, Var x, Index out_h, Index out_w) {
    const Tensor& tx = g.value(x);
    require_rank(tx, 4, "resize_bilinear");
    const Index N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: output size must be positive");
    if (out_h == H && out_w == W) return x;
    auto rh = std::make_shared<RowMatrix>(interpolation_matrix(out_h, H));
    auto rw = std::make_shared<RowMatrix>(interpolation_matrix(out_w, W));
    Tensor out({N, C, out_h, out_w});
    for (Index p = 0; p < N * C; ++p) {
        MatrixMap(out.data() + p * out_h * out_w, out_h, out_w).noalias() =
            (*rh) * ConstMatrixMap(tx.data() + p * H * W, H, W) * rw->transpose();
    }
    return g.record(std::move(out), {x}, [=](Graph& gr, const Tensor& go) {
        Tensor& gx = gr.grad_buffer(x);
        for (Index p = 0; p < N * C; ++p) {
            MatrixMap(gx.data() + p * H * W, H, W).noalias() +=
                rh->transpose() * ConstMatrixMap(go.data() + p * out_h * out_w, out_h, out_w) * (*rw);
        }
    });
}

Var patchify(Graph& g, Var x, int patch) {
    const Tensor& tx = g.value(x);
    require_rank(tx, 4, "patchify");
    const Index N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
    if (patch <= 0 || H % patch || W % patch)
        throw std::invalid_argument("patchify: image " + shape_to_string(tx.shape()) + " not divisible by patch " +
                                    std::to_string(patch));
    const Index gh = H / patch, gw = W / patch, T = gh * gw, D = C * patch * patch;
    // Index map from token feature to pixel; shared by both directions.
    auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(N * T * D));
    Tensor out({N * T, D});
    Index k = 0;
    for (Index n = 0; n < N; ++n)
        for (Index ty = 0; ty < gh; ++ty)
            for (Index tx_ = 0; tx_ < gw; ++tx_)
                for (Index c = 0; c < C; ++c)
                    for (Index dy = 0; dy < patch; ++dy)
                        for (Index dx = 0; dx < patch; ++dx, ++k) {
                            const Index src = ((n * C + c) * H + ty * patch + dy) * W + tx_ * patch + dx;
                            (*index)[static_cast<std::size_t>(k)] = src;
                            out[k] = tx[src];
                        }
    return g.record(std::move(out), {x}, [x, index](Graph& gr, const Tensor& go) {
        Tensor& gx = gr.grad_buffer(x);
        for (Index i = 0; i < go.size(); ++i) gx[(*index)[static_cast<std::size_t>(i)]] += go[i];
    });
}

Var add_rows_periodic(Graph& g, Var x, Var pe) {
    const Tensor& tx = g.value(x);
    const Tensor& tp = g.value(pe);
    const Index T = rows_of(tp), D = cols_of(tp);
    if (cols_of(tx) != D || rows_of(tx) % T)
        throw std::invalid_argument("add_rows_periodic: " + shape_to_string(tx.shape()) + " vs " +
                                    shape_to_string(tp.shape()));
    const Index R = rows_of(tx);
    Tensor out = tx;
    for (Index r = 0; r < R; ++r)
        for (Index d = 0; d < D; ++d) out[r * D + d] += tp[(r % T) * D + d];
    return g.record(std::move(out), {x, pe}, [x, pe, T, D, R](Graph& gr, const Tensor& go) {
        gr.accumulate(x, go);
        if (gr.requires_grad(pe)) {
            Tensor& gp = gr.grad_buffer(pe);
            for (Index r = 0; r < R; ++r)
                for (Index d = 0; d < D; ++d) gp[(r % T) * D + d] += go[r * D + d];
        }
    });
}

Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps) {
    const Tensor& tx = g.value(x);
    const Index R = rows_of(tx), D = cols_of(tx);
    const Tensor& tg = g.value(gamma);
    const Tensor& tb = g.value(beta);
    if (tg.size() != D || tb.size() != D) throw std::invalid_argument("layer_norm: affine size mismatch");
    auto xhat = std::make_shared<Tensor>(Shape{R, D});
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(R));
    Tensor out({R, D});
    for (Index r = 0; r < R; ++r) {
        const double* row = tx.data() + r * D;
        double mu = 0.0;
        for (Index d = 0; d < D; ++d) mu += row[d];
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (Index d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
        var /= static_cast<double>(D);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = is;
        for (Index d = 0; d < D; ++d) {
            const double h = (row[d] - mu) * is;
            (*xhat)[r * D + d] = h;
            out[r * D + d] = tg[d] * h + tb[d];
        }
    }
    return g.record(std::move(out), {x, gamma, beta}, [=](Graph& gr, const Tensor& go) {
        const Tensor& gam = gr.value(gamma);
        if (gr.requires_grad(gamma) || gr.requires_grad(beta)) {
            Tensor dg = Tensor::like(gam), db = Tensor::like(gam);
            for (Index r = 0; r < R; ++r)
                for (Index d = 0; d < D; ++d) {
                    dg[d] += go[r * D + d] * (*xhat)[r * D + d];
                    db[d] += go[r * D + d];
                }
            gr.accumulate(gamma, dg);
            gr.accumulate(beta, db);
        }
        if (!gr.requires_grad(x)) return;
        Tensor& gx = gr.grad_buffer(x);
        for (Index r = 0; r < R; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (Index d = 0; d < D; ++d) {
                const double dh = go[r * D + d] * gam[d];
                m1 += dh;
                m2 += dh * (*xhat)[r * D + d];
            }
            m1 /= static_cast<double>(D);
            m2 /= static_cast<double>(D);
            const double is = (*inv_std)[static_cast<std::size_t>(r)];
            for (Index d = 0; d < D; ++d) {
                const double dh = go[r * D + d] * gam[d];
                gx[r * D + d] += is * (dh - m1 - (*xhat)[r * D + d] * m2);
            }
        }
    });
}

Var self_attention(Graph& g, Var q, Var k, Var v, Index tokens) {
    const Tensor& tq = g.value(q);
    const Tensor& tk = g.value(k);
    const Tensor& tv = g.value(v);
    require_same_size(tq, tk, "self_attention");
    require_same_size(tq, tv, "self_attention");
    const Index R = rows_of(tq), D = cols_of(tq), T = tokens;
    if (T <= 0 || R % T) throw std::invalid_argument("self_attention: rows not divisible by token count");
    const Index N = R / T;
    const double s = 1.0 / std::sqrt(static_cast<double>(D));
    auto probs = std::make_shared<Tensor>(Shape{N, T, T});
    Tensor out({R, D});
    for (Index n = 0; n < N; ++n) {
        ConstMatrixMap Q(tq.data() + n * T * D, T, D), K(tk.data() + n * T * D, T, D), V(tv.data() + n * T * D, T, D);
        MatrixMap P(probs->data() + n * T * T, T, T);
        P.noalias() = (Q * K.transpose()) * s;
        for (Index i = 0; i < T; ++i) {
            const double mx = P.row(i).maxCoeff();
            P.row(i) = (P.row(i).array() - mx).exp();
            P.row(i) /= P.row(i).sum();
        }
        MatrixMap(out.data() + n * T * D, T, D).noalias() = P * V;
    }
    return g.record(std::move(out), {q, k, v}, [=](Graph& gr, const Tensor& go) {
        const Tensor& vq = gr.value(q);
        const Tensor& vk = gr.value(k);
        const Tensor& vv = gr.value(v);
        RowMatrix dP(T, T), dS(T, T);
        for (Index n = 0; n < N; ++n) {
            ConstMatrixMap Q(vq.data() + n * T * D, T, D), K(vk.data() + n * T * D, T, D), V(vv.data() + n * T * D, T, D);
            ConstMatrixMap P(probs->data() + n * T * T, T, T);
            ConstMatrixMap dO(go.data() + n * T * D, T, D);
            if (gr.requires_grad(v)) MatrixMap(gr.grad_buffer(v).data() + n * T * D, T, D).noalias() += P.transpose() * dO;
            dP.noalias() = dO * V.transpose();
            for (Index i = 0; i < T; ++i) {
                const double dot = dP.row(i).dot(P.row(i));
                dS.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
            }
            if (gr.requires_grad(q)) MatrixMap(gr.grad_buffer(q).data() + n * T * D, T, D).noalias() += (dS * K) * s;
            if (gr.requires_grad(k))
                MatrixMap(gr.grad_buffer(k).data() + n * T * D, T, D).noalias() += (dS.transpose() * Q) * s;
        }
    });
}

Var mean_pool_tokens(Graph& g, Var x, Index tokens) {
    const Tensor& tx = g.value(x);
    const Index R = rows_of(tx), D = cols_of(tx), T = tokens;
    if (T <= 0 || R % T) throw std::invalid_argument("mean_pool_tokens: rows not divisible by token count");
    const Index N = R / T;
    Tensor out({N, D});
    for (Index r = 0; r < R; ++r)
        for (Index d = 0; d < D; ++d) out[(r / T) * D + d] += tx[r * D + d] / static_cast<double>(T);
    return g.record(std::move(out), {x}, [x, R, D, T](Graph& gr, const Tensor& go) {
        Tensor& gx = gr.grad_buffer(x);
        for (Index r = 0; r < R; ++r)
            for (Index d = 0; d < D; ++d) gx[r * D + d] += go[(r / T) * D + d] / static_cast<double>(T);
    });
}

Var concat_cols(Graph& g, const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const Index R = rows_of(g.value(parts[0]));
    std::vector<Index> widths;
    Index total = 0;
    for (Var p : parts) {
        const Tensor& t = g.value(p);
        if (rows_of(t) != R) throw std::invalid_argument("concat_cols: row counts differ");
        widths.push_back(cols_of(t));
        total += widths.back();
    }
    Tensor out({R, total});
    Index offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        out.matrix(R, total).middleCols(offset, widths[i]) = g.value(parts[i]).matrix(R, widths[i]);
        offset += widths[i];
    }
    return g.record(std::move(out), parts, [parts, widths, R, total](Graph& gr, const Tensor& go) {
        Index off = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (gr.requires_grad(parts[i]))
                gr.grad_buffer(parts[i]).matrix(R, widths[i]) += go.matrix(R, total).middleCols(off, widths[i]);
            off += widths[i];
        }
    });
}

Var slice_cols(Graph& g, Var x, Index begin, Index count) {
    const Tensor& tx = g.value(x);
    const Index R = rows_of(tx), D = cols_of(tx);
    if (begin < 0 || count < 0 || begin + count > D) throw std::out_of_range("slice_cols: range outside columns");
    Tensor out({R, count});
    out.matrix(R, count) = tx.matrix(R, D).middleCols(begin, count);
    return g.record(std::move(out), {x}, [x, R, D, begin, count](Graph& gr, const Tensor& go) {
        gr.grad_buffer(x).matrix(R, D).middleCols(begin, count) += go.matrix(R, count);
    });
}

Var l2_normalize_rows(Graph& g, Var x, double eps) {
    const Tensor& tx = g.value(x);
    const Index R = rows_of(tx), D = cols_of(tx);
    auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(R));
    Tensor out({R, D});
    for (Index r = 0; r < R; ++r) {
        double ss = 0.0;
        for (Index d = 0; d < D; ++d) ss += tx[r * D + d] * tx[r * D + d];
        const double nrm = std::sqrt(ss + eps);
        (*norms)[static_cast<std::size_t>(r)] = nrm;
        for (Index d = 0; d < D; ++d) out[r * D + d] = tx[r * D + d] / nrm;
    }
    auto y = std::make_shared<Tensor>(out);
    return g.record(std::move(out), {x}, [x, norms, y, R, D](Graph& gr, const Tensor& go) {
        Tensor& gx = gr.grad_buffer(x);
        for (Index r = 0; r < R; ++r) {
            double dot = 0.0;
            for (Index d = 0; d < D; ++d) dot += (*y)[r * D + d] * go[r * D + d];
            const double nrm = (*norms)[static_cast<std::size_t>(r)];
            for (Index d = 0; d < D; ++d) gx[r * D + d] += (go[r * D + d] - (*y)[r * D + d] * dot) / nrm;
        }
    });
}

Var log_softmax(Graph& g, Var logits) {
    const Tensor& tx = g.value(logits);
    const Index R = rows_of(tx), K = cols_of(tx);
    Tensor out({R, K});
    for (Index r = 0; r < R; ++r) {
        const double* row = tx.data() + r * K;
        double mx = row[0];
        for (Index k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double se = 0.0;
        for (Index k = 0; k < K; ++k) se += std::exp(row[k] - mx);
        const double lse = mx + std::log(se);
        for (Index k = 0; k < K; ++k) out[r * K + k] = row[k] - lse;
    }
    auto y = std::make_shared<Tensor>(out);
    return g.record(std::move(out), {logits}, [logits, y, R, K](Graph& gr, const Tensor& go) {
        Tensor& gx = gr.grad_buffer(logits);
        for (Index r = 0; r < R; ++r) {
            double s = 0.0;
            for (Index k = 0; k < K; ++k) s += go[r * K + k];
            for (Index k = 0; k < K; ++k) gx[r * K + k] += go[r * K + k] - std::exp((*y)[r * K + k]) * s;
        }
    });
}

Var cross_entropy(Graph& g, Var logits, const std::vector<int>& targets) {
    const Tensor& tx = g.value(logits);
    const Index R = rows_of(tx), K = cols_of(tx);
    if (static_cast<Index>(targets.size()) != R)
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                    std::to_string(R) + " rows");
    auto probs = std::make_shared<Tensor>(Shape{R, K});
    Tensor out({R});
    for (Index r = 0; r < R; ++r) {
        const int t = targets[static_cast<std::size_t>(r)];
        if (t < 0 || t >= K)
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(K) + ")");
        const double* row = tx.data() + r * K;
        double mx = row[0];
        for (Index k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double se = 0.0;
        for (Index k = 0; k < K; ++k) se += std::exp(row[k] - mx);
        for (Index k = 0; k < K; ++k) (*probs)[r * K + k] = std::exp(row[k] - mx) / se;
        out[r] = mx + std::log(se) - row[t];
    }
    return g.record(std::move(out), {logits}, [logits, probs, targets, R, K](Graph& gr, const Tensor& go) {
        Tensor& gx = gr.grad_buffer(logits);
        for (Index r = 0; r < R; ++r) {
            for (Index k = 0; k < K; ++k) gx[r * K + k] += go[r] * (*probs)[r * K + k];
            gx[r * K + targets[static_cast<std::size_t>(r)]] -= go[r];
        }
    });
}

Var pairwise_inner_sum(Graph& g, Var x) {
    const Tensor& tx = g.value(x);
    const Index N = rows_of(tx), D = cols_of(tx);
    const auto z = tx.matrix(N, D);
    const Eigen::RowVectorXd total = z.colwise().sum();
    const double value = total.squaredNorm() - z.rowwise().squaredNorm().sum();
    return g.record(Tensor::scalar(value), {x}, [x, N, D](Graph& gr, const Tensor& go) {
        const auto zz = gr.value(x).matrix(N, D);
        const Eigen::RowVectorXd s = zz.colwise().sum();
        auto gx = gr.grad_buffer(x).matrix(N, D);
        for (Index i = 0; i < N; ++i) gx.row(i) += 2.0 * go[0] * (s - zz.row(i));
    });
}

Var column_mean(Graph& g, Var x) {
    const Tensor& tx = g.value(x);
    const Index N = rows_of(tx), D = cols_of(tx);
    if (N < 1) throw std::invalid_argument("column_mean: no rows");
    Tensor out({D});
    out.matrix(1, D) = tx.matrix(N, D).colwise().sum() / static_cast<double>(N);
    return g.record(std::move(out), {x}, [x, N, D](Graph& gr, const Tensor& go) {
        auto gx = gr.grad_buffer(x).matrix(N, D);
        gx.rowwise() += go.matrix(1, D).row(0) / static_cast<double>(N);
    });
}

Var column_variance(Graph& g, Var x) {
    const Tensor& tx = g.value(x);
    const Index N = rows_of(tx), D = cols_of(tx);
    if (N < 2) throw std::invalid_argument("column_variance: needs at least 2 rows, got " + std::to_string(N));
    const auto z = tx.matrix(N, D);
    const Eigen::RowVectorXd mu = z.colwise().sum() / static_cast<double>(N);
    Tensor out({D});
    out.matrix(1, D) = (z.rowwise() - mu).array().square().colwise().sum().matrix() / static_cast<double>(N - 1);
    return g.record(std::move(out), {x}, [x, N, D](Graph& gr, const Tensor& go) {
        const auto zz = gr.value(x).matrix(N, D);
        const Eigen::RowVectorXd m = zz.colwise().sum() / static_cast<double>(N);
        const Eigen::RowVectorXd w = go.matrix(1, D).row(0) * (2.0 / static_cast<double>(N - 1));
        auto gx = gr.grad_buffer(x).matrix(N, D);
        gx.array() += (zz.rowwise() - m).array().rowwise() * w.array();
    });
}

}  // namespace cag::ad
