#pragma once

#include <cblas.h>
#include <malloc.h>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <unordered_map>
#include <string>
#include <utility>
#include <vector>

#include "diffnet/grid.hpp"

namespace diffnet {

/// Dense row-major float64 array, rank <= 4 (batch, channel, height, width).
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
        data.assign(numel_of(shape), fill);
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeError("Tensor: dimensions must be positive");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static Tensor scalar(double v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor from_image(const Image& im) {
        Tensor t({1, 1, im.height, im.width});
        t.data = im.data;
        return t;
    }

    Image to_image() const {
        if (shape.size() != 4 || shape[0] != 1 || shape[1] != 1)
            throw ShapeError("Tensor::to_image: expected shape [1,1,H,W]");
        Image im(shape[3], shape[2]);
        im.data = data;
        return im;
    }

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

/// Named learnable array. Gradients accumulate additively; the caller zeroes
/// them at optimization-step boundaries.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    int index = -1;  ///< slot in the owning registry; used by gradient sinks

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor(value.shape, 0.0);
    }

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

namespace kern {

// Direct 3x3 same-padding cross-correlation kernels. Zero padding: the padded
// border contributes nothing (CNN convention), unlike the replicate boundary
// of the stencil shifts. Each row pass fuses the three horizontal taps, so
// every input row is read once per (output, input, ky) triple.

/// out_row += w0*in[x-1] + w1*in[x] + w2*in[x+1], zero beyond the row ends.
inline void row_taps_accum(double* out, const double* in, int w, double w0, double w1, double w2) {
    if (w == 1) {
        out[0] += w1 * in[0];
        return;
    }
    out[0] += w1 * in[0] + w2 * in[1];
    for (int x = 1; x < w - 1; ++x) out[x] += w0 * in[x - 1] + w1 * in[x] + w2 * in[x + 1];
    out[w - 1] += w0 * in[w - 2] + w1 * in[w - 1];
}

/// y[b,co,:,:] = bias[co] + sum_ci corr3x3(x[b,ci,:,:], k[co,ci,:,:])
inline void conv3x3_fwd(const double* x, int b, int ci, int h, int w, const double* k, int co,
                        const double* bias, double* y) {
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int bb = 0; bb < b; ++bb) {
        const double* xb = x + static_cast<std::size_t>(bb) * ci * hw;
        double* yb = y + static_cast<std::size_t>(bb) * co * hw;
        for (int c = 0; c < co; ++c) {
            double* yc = yb + static_cast<std::size_t>(c) * hw;
            std::fill(yc, yc + hw, bias ? bias[c] : 0.0);
            for (int cc = 0; cc < ci; ++cc) {
                const double* xc = xb + static_cast<std::size_t>(cc) * hw;
                const double* kw = k + (static_cast<std::size_t>(c) * ci + cc) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    const int dy = ky - 1;
                    const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    for (int yy = y0; yy < y1; ++yy)
                        row_taps_accum(yc + static_cast<std::size_t>(yy) * w,
                                       xc + static_cast<std::size_t>(yy + dy) * w, w, kw[ky * 3],
                                       kw[ky * 3 + 1], kw[ky * 3 + 2]);
                }
            }
        }
    }
}

/// gx += corr3x3 adjoint: the input gradient is a correlation of gy with the
/// kernel flipped in both spatial axes and transposed in the channel axes.
inline void conv3x3_bwd_input(const double* gy, int b, int ci, int h, int w, const double* k,
                              int co, double* gx, std::vector<double>& kflip_scratch) {
    kflip_scratch.resize(static_cast<std::size_t>(ci) * co * 9);
    for (int c = 0; c < co; ++c)
        for (int cc = 0; cc < ci; ++cc)
            for (int t = 0; t < 9; ++t)
                kflip_scratch[(static_cast<std::size_t>(cc) * co + c) * 9 + t] =
                    k[(static_cast<std::size_t>(c) * ci + cc) * 9 + (8 - t)];
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int bb = 0; bb < b; ++bb) {
        const double* gyb = gy + static_cast<std::size_t>(bb) * co * hw;
        double* gxb = gx + static_cast<std::size_t>(bb) * ci * hw;
        for (int cc = 0; cc < ci; ++cc) {
            double* gxc = gxb + static_cast<std::size_t>(cc) * hw;
            for (int c = 0; c < co; ++c) {
                const double* gyc = gyb + static_cast<std::size_t>(c) * hw;
                const double* kw = kflip_scratch.data() + (static_cast<std::size_t>(cc) * co + c) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    const int dy = ky - 1;
                    const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    for (int yy = y0; yy < y1; ++yy)
                        row_taps_accum(gxc + static_cast<std::size_t>(yy) * w,
                                       gyc + static_cast<std::size_t>(yy + dy) * w, w, kw[ky * 3],
                                       kw[ky * 3 + 1], kw[ky * 3 + 2]);
                }
            }
        }
    }
}

/// Writes the zero-padded tap views of one sample: cols is (ci*9) x (h*w),
/// row (c*9 + ky*3 + kx) holds x[c, y+ky-1, x+kx-1].
inline void im2col_3x3(const double* x, int ci, int h, int w, double* cols) {
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < ci; ++c) {
        const double* xc = x + static_cast<std::size_t>(c) * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                double* row = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
                const int dy = ky - 1, dx = kx - 1;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy;
                    double* out = row + static_cast<std::size_t>(y) * w;
                    if (sy < 0 || sy >= h) {
                        std::fill(out, out + w, 0.0);
                        continue;
                    }
                    const double* in = xc + static_cast<std::size_t>(sy) * w;
                    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    for (int xx = 0; xx < x0; ++xx) out[xx] = 0.0;
                    for (int xx = x0; xx < x1; ++xx) out[xx] = in[xx + dx];
                    for (int xx = x1; xx < w; ++xx) out[xx] = 0.0;
                }
            }
        }
    }
}

/// gk[co,ci,ky,kx] += sum over valid pixels of gy[b,co,y,x] * x[b,ci,y+ky-1,x+kx-1];
/// gb[co] += sum gy[b,co,:,:]. The tap correlation runs as one dgemm per
/// sample against the im2col views (measured faster than fused reductions).
inline void conv3x3_bwd_weights(const double* x, const double* gy, int b, int ci, int h, int w,
                                int co, double* gk, double* gb, std::vector<double>& cols_scratch) {
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    cols_scratch.resize(static_cast<std::size_t>(ci) * 9 * hw);
    for (int bb = 0; bb < b; ++bb) {
        const double* xb = x + static_cast<std::size_t>(bb) * ci * hw;
        const double* gyb = gy + static_cast<std::size_t>(bb) * co * hw;
        for (int c = 0; c < co; ++c) {
            const double* gyc = gyb + static_cast<std::size_t>(c) * hw;
            double acc = 0.0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t i = 0; i < hw; ++i) acc += gyc[i];
            gb[c] += acc;
        }
        im2col_3x3(xb, ci, h, w, cols_scratch.data());
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, co, ci * 9, static_cast<int>(hw),
                    1.0, gyb, static_cast<int>(hw), cols_scratch.data(), static_cast<int>(hw),
                    1.0, gk, ci * 9);
    }
}

/// Parallelism lives at the sample level; BLAS itself must stay single
/// threaded or results would depend on its scheduling. Large tensor buffers
/// churn fast, so keep them on the heap instead of per-allocation mmap.
inline void ensure_single_threaded_blas() {
    static const bool done = [] {
        openblas_set_num_threads(1);
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
#endif
        return true;
    }();
    (void)done;
}

}  // namespace kern

/// Reverse-mode tape over Tensors. Define-by-run: every primitive records one
/// node; backward() traverses the record in exact reverse and accumulates
/// gradients into every reachable Param (or into an external per-parameter
/// sink when set, which batch-parallel training uses). One tape per training
/// context; tapes are not shareable across concurrent steps.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated during backward
        std::vector<int> parents;
        std::function<void(Tape&, Node&)> backward;
        Param* param = nullptr;
    };

    /// Optional external gradient accumulation target, indexed by Param::index.
    void set_grad_sink(std::vector<Tensor>* sink) { grad_sink_ = sink; }

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    std::size_t node_count() const { return nodes_.size(); }

    /// Clears the record; freed buffers are kept for reuse, so a long-lived
    /// tape reaches a steady state with no allocation per pass.
    void reset() {
        for (Node& n : nodes_) {
            recycle(n.value);
            recycle(n.grad);
        }
        nodes_.clear();
    }

    int constant(Tensor t) {
        Node n;
        n.value = std::move(t);
        return push(std::move(n));
    }

    int param(Param& p) {
        Node n;
        n.value = make_tensor(p.value.shape);
        std::copy(p.value.data.begin(), p.value.data.end(), n.value.data.begin());
        n.param = &p;
        return push(std::move(n));
    }

    /// y = max(x, 0); NaN propagates so poisoned values surface in the loss
    int relu(int x) {
        Node n;
        n.value = make_tensor(nodes_[x].value.shape);
        for (std::size_t i = 0; i < n.value.numel(); ++i)
            n.value.data[i] = std::max(nodes_[x].value.data[i], 0.0);
        n.parents = {x};
        n.backward = [](Tape& t, Node& self) {
            Node& xn = t.nodes_[self.parents[0]];
            for (std::size_t i = 0; i < self.grad.numel(); ++i)
                if (xn.value.data[i] > 0.0) xn.grad.data[i] += self.grad.data[i];
        };
        return push(std::move(n));
    }

    int add(int a, int b) {
        check_same(a, b, "add");
        Node n;
        n.value = make_tensor(nodes_[a].value.shape);
        for (std::size_t i = 0; i < n.value.numel(); ++i)
            n.value.data[i] = nodes_[a].value.data[i] + nodes_[b].value.data[i];
        n.parents = {a, b};
        n.backward = [](Tape& t, Node& self) {
            Node& an = t.nodes_[self.parents[0]];
            Node& bn = t.nodes_[self.parents[1]];
            for (std::size_t i = 0; i < self.grad.numel(); ++i) {
                an.grad.data[i] += self.grad.data[i];
                bn.grad.data[i] += self.grad.data[i];
            }
        };
        return push(std::move(n));
    }

    int sub(int a, int b) {
        check_same(a, b, "sub");
        Node n;
        n.value = make_tensor(nodes_[a].value.shape);
        for (std::size_t i = 0; i < n.value.numel(); ++i)
            n.value.data[i] = nodes_[a].value.data[i] - nodes_[b].value.data[i];
        n.parents = {a, b};
        n.backward = [](Tape& t, Node& self) {
            Node& an = t.nodes_[self.parents[0]];
            Node& bn = t.nodes_[self.parents[1]];
            for (std::size_t i = 0; i < self.grad.numel(); ++i) {
                an.grad.data[i] += self.grad.data[i];
                bn.grad.data[i] -= self.grad.data[i];
            }
        };
        return push(std::move(n));
    }

    /// Elementwise product of equal-shape tensors.
    int pointwise_mul(int a, int b) {
        check_same(a, b, "pointwise_mul");
        Node n;
        n.value = make_tensor(nodes_[a].value.shape);
        for (std::size_t i = 0; i < n.value.numel(); ++i)
            n.value.data[i] = nodes_[a].value.data[i] * nodes_[b].value.data[i];
        n.parents = {a, b};
        n.backward = [](Tape& t, Node& self) {
            Node& an = t.nodes_[self.parents[0]];
            Node& bn = t.nodes_[self.parents[1]];
            for (std::size_t i = 0; i < self.grad.numel(); ++i) {
                an.grad.data[i] += self.grad.data[i] * bn.value.data[i];
                bn.grad.data[i] += self.grad.data[i] * an.value.data[i];
            }
        };
        return push(std::move(n));
    }

    /// Elementwise product of x[B,C,H,W] with a per-pixel plane p[H,W],
    /// broadcast over batch and channel; gradient of p sums over those dims.
    int mul_plane(int x, int p) {
        const Tensor& xv = nodes_[x].value;
        const Tensor& pv = nodes_[p].value;
        if (xv.rank() != 4 || pv.rank() != 2 || xv.shape[2] != pv.shape[0] ||
            xv.shape[3] != pv.shape[1])
            throw ShapeError("mul_plane: expected x[B,C,H,W], p[H,W]");
        Node n;
        n.value = make_tensor(xv.shape);
        const std::size_t hw = pv.numel(), bc = xv.numel() / hw;
        for (std::size_t j = 0; j < bc; ++j)
            for (std::size_t i = 0; i < hw; ++i)
                n.value.data[j * hw + i] = xv.data[j * hw + i] * pv.data[i];
        n.parents = {x, p};
        n.backward = [hw, bc](Tape& t, Node& self) {
            Node& xn = t.nodes_[self.parents[0]];
            Node& pn = t.nodes_[self.parents[1]];
            for (std::size_t j = 0; j < bc; ++j)
                for (std::size_t i = 0; i < hw; ++i) {
                    xn.grad.data[j * hw + i] += self.grad.data[j * hw + i] * pn.value.data[i];
                    pn.grad.data[i] += self.grad.data[j * hw + i] * xn.value.data[j * hw + i];
                }
        };
        return push(std::move(n));
    }

    /// Spatial shift toward a neighbor direction with Neumann replication on
    /// the [H,W] dims. Backward is the adjoint: reverse shift with boundary
    /// accumulation.
    int shift(int x, Dir d) {
        const Tensor& xv = nodes_[x].value;
        if (xv.rank() != 4) throw ShapeError("shift: expected rank-4 tensor");
        const int h = xv.shape[2], w = xv.shape[3];
        const std::size_t planes = xv.numel() / (static_cast<std::size_t>(h) * w);
        Node n;
        n.value = make_tensor(xv.shape);
        for (std::size_t pl = 0; pl < planes; ++pl) {
            const double* in = xv.data.data() + pl * h * w;
            double* out = n.value.data.data() + pl * h * w;
            shift_plane(in, out, h, w, d);
        }
        n.parents = {x};
        n.backward = [h, w, planes, d](Tape& t, Node& self) {
            Node& xn = t.nodes_[self.parents[0]];
            for (std::size_t pl = 0; pl < planes; ++pl) {
                const double* g = self.grad.data.data() + pl * h * w;
                double* gx = xn.grad.data.data() + pl * h * w;
                // scatter: out(y,x) read from src(y,x), so grad flows back to src
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        int sy = y, sx = xx;
                        source_index(y, xx, h, w, d, sy, sx);
                        gx[static_cast<std::size_t>(sy) * w + sx] +=
                            g[static_cast<std::size_t>(y) * w + xx];
                    }
            }
        };
        return push(std::move(n));
    }

    /// y = x * s with a learnable scalar s (one-element Param node).
    int scale(int x, int s) {
        const Tensor& sv = nodes_[s].value;
        if (sv.numel() != 1) throw ShapeError("scale: scalar operand must have one element");
        Node n;
        n.value = make_tensor(nodes_[x].value.shape);
        const double sval = sv.data[0];
        for (std::size_t i = 0; i < n.value.numel(); ++i)
            n.value.data[i] = nodes_[x].value.data[i] * sval;
        n.parents = {x, s};
        n.backward = [](Tape& t, Node& self) {
            Node& xn = t.nodes_[self.parents[0]];
            Node& sn = t.nodes_[self.parents[1]];
            const double sval = sn.value.data[0];
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.numel(); ++i) {
                xn.grad.data[i] += self.grad.data[i] * sval;
                acc += self.grad.data[i] * xn.value.data[i];
            }
            sn.grad.data[0] += acc;
        };
        return push(std::move(n));
    }

    /// y = c * x for a fixed (non-learnable) constant c.
    int scale_const(int x, double c) {
        Node n;
        n.value = make_tensor(nodes_[x].value.shape);
        for (std::size_t i = 0; i < n.value.numel(); ++i)
            n.value.data[i] = c * nodes_[x].value.data[i];
        n.parents = {x};
        n.backward = [c](Tape& t, Node& self) {
            Node& xn = t.nodes_[self.parents[0]];
            for (std::size_t i = 0; i < self.grad.numel(); ++i)
                xn.grad.data[i] += c * self.grad.data[i];
        };
        return push(std::move(n));
    }

    /// Extracts channel c of x[B,C,H,W] as [B,1,H,W].
    int channel(int x, int c) {
        const Tensor& xv = nodes_[x].value;
        if (xv.rank() != 4) throw ShapeError("channel: expected rank-4 tensor");
        const int b = xv.shape[0], ch = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
        if (c < 0 || c >= ch) throw ShapeError("channel: index out of range");
        const std::size_t hw = static_cast<std::size_t>(h) * w;
        Node n;
        n.value = make_tensor({b, 1, h, w});
        for (int bb = 0; bb < b; ++bb)
            std::copy_n(xv.data.data() + (static_cast<std::size_t>(bb) * ch + c) * hw, hw,
                        n.value.data.data() + static_cast<std::size_t>(bb) * hw);
        n.parents = {x};
        n.backward = [b, ch, c, hw](Tape& t, Node& self) {
            Node& xn = t.nodes_[self.parents[0]];
            for (int bb = 0; bb < b; ++bb) {
                const double* g = self.grad.data.data() + static_cast<std::size_t>(bb) * hw;
                double* gx = xn.grad.data.data() + (static_cast<std::size_t>(bb) * ch + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) gx[i] += g[i];
            }
        };
        return push(std::move(n));
    }

    /// Scalar sum of all elements.
    int sum(int x) {
        Node n;
        double acc = 0.0;
        for (double v : nodes_[x].value.data) acc += v;
        n.value = Tensor::scalar(acc);
        n.parents = {x};
        n.backward = [](Tape& t, Node& self) {
            Node& xn = t.nodes_[self.parents[0]];
            const double g = self.grad.data[0];
            for (std::size_t i = 0; i < xn.grad.numel(); ++i) xn.grad.data[i] += g;
        };
        return push(std::move(n));
    }

    /// Mean squared error over all elements, as a scalar node.
    int mse_loss(int pred, int target) {
        check_same(pred, target, "mse_loss");
        const Tensor& pv = nodes_[pred].value;
        const Tensor& tv = nodes_[target].value;
        double acc = 0.0;
        for (std::size_t i = 0; i < pv.numel(); ++i) {
            const double d = pv.data[i] - tv.data[i];
            acc += d * d;
        }
        const double inv_n = 1.0 / static_cast<double>(pv.numel());
        Node n;
        n.value = Tensor::scalar(acc * inv_n);
        n.parents = {pred, target};
        n.backward = [inv_n](Tape& t, Node& self) {
            Node& pn = t.nodes_[self.parents[0]];
            Node& tn = t.nodes_[self.parents[1]];
            const double g = self.grad.data[0] * 2.0 * inv_n;
            for (std::size_t i = 0; i < pn.grad.numel(); ++i) {
                const double d = pn.value.data[i] - tn.value.data[i];
                pn.grad.data[i] += g * d;
                tn.grad.data[i] -= g * d;
            }
        };
        return push(std::move(n));
    }

    /// 3x3 same-padding cross-correlation with per-output-channel bias.
    /// x[B,Cin,H,W], kernel[Cout,Cin,3,3], bias[Cout] -> [B,Cout,H,W].
    int conv3x3(int x, Param& kernel, Param& bias) {
        {
            const Tensor& xv = nodes_[x].value;
            if (xv.rank() != 4) throw ShapeError("conv3x3: expected rank-4 input");
            if (kernel.value.rank() != 4 || kernel.value.shape[2] != 3 ||
                kernel.value.shape[3] != 3)
                throw ShapeError("conv3x3: kernel must be [Cout,Cin,3,3]");
            if (kernel.value.shape[1] != xv.shape[1]) throw ShapeError("conv3x3: channel mismatch");
            if (bias.value.numel() != static_cast<std::size_t>(kernel.value.shape[0]))
                throw ShapeError("conv3x3: bias must have Cout elements");
        }
        kern::ensure_single_threaded_blas();
        const int kn = param(kernel);  // may reallocate nodes_
        const int bn = param(bias);
        const Tensor& xv = nodes_[x].value;  // re-take after the pushes
        const int b = xv.shape[0], ci = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
        const int co = kernel.value.shape[0];

        Node n;
        n.value = make_tensor({b, co, h, w});
        kern::conv3x3_fwd(xv.data.data(), b, ci, h, w, kernel.value.data.data(), co,
                          bias.value.data.data(), n.value.data.data());
        n.parents = {x, kn, bn};
        n.backward = [b, ci, co, h, w](Tape& t, Node& self) {
            Node& xn = t.nodes_[self.parents[0]];
            Node& knode = t.nodes_[self.parents[1]];
            Node& bnode = t.nodes_[self.parents[2]];
            kern::conv3x3_bwd_weights(xn.value.data.data(), self.grad.data.data(), b, ci, h, w, co,
                                      knode.grad.data.data(), bnode.grad.data.data(), t.scratch2_);
            kern::conv3x3_bwd_input(self.grad.data.data(), b, ci, h, w, knode.value.data.data(),
                                    co, xn.grad.data.data(), t.scratch_);
        };
        return push(std::move(n));
    }

    /// Reverse sweep from a scalar loss node. Gradients land in each reachable
    /// Param's grad (or the external sink). The tape is reset afterwards.
    void backward(int loss) {
        if (nodes_.empty()) throw ShapeError("backward: empty tape");
        if (nodes_[static_cast<std::size_t>(loss)].value.numel() != 1)
            throw ShapeError("backward: loss must be scalar");
        for (Node& n : nodes_) n.grad = make_zero_tensor(n.value.shape);
        nodes_[static_cast<std::size_t>(loss)].grad.data[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward) n.backward(*this, n);
        }
        for (Node& n : nodes_) {
            if (!n.param) continue;
            Tensor& dst = grad_sink_ ? (*grad_sink_)[static_cast<std::size_t>(n.param->index)]
                                     : n.param->grad;
            for (std::size_t i = 0; i < n.grad.numel(); ++i) dst.data[i] += n.grad.data[i];
        }
        reset();
    }

private:
    int push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    /// Pooled tensor with UNINITIALIZED contents; caller must overwrite fully.
    Tensor make_tensor(const std::vector<int>& shape) {
        Tensor t;
        t.shape = shape;
        const std::size_t n = Tensor::numel_of(shape);
        auto& bucket = pool_[n];
        if (!bucket.empty()) {
            t.data = std::move(bucket.back());
            bucket.pop_back();
        } else {
            t.data.resize(n);
        }
        return t;
    }

    Tensor make_zero_tensor(const std::vector<int>& shape) {
        Tensor t = make_tensor(shape);
        std::fill(t.data.begin(), t.data.end(), 0.0);
        return t;
    }

    void recycle(Tensor& t) {
        if (t.data.empty()) return;
        pool_[t.data.size()].push_back(std::move(t.data));
        t.data.clear();
        t.shape.clear();
    }

    void check_same(int a, int b, const char* what) {
        if (!nodes_[a].value.same_shape(nodes_[b].value))
            throw ShapeError(std::string(what) + ": shape mismatch");
    }

    static void source_index(int y, int x, int h, int w, Dir d, int& sy, int& sx) {
        sy = y;
        sx = x;
        switch (d) {
            case Dir::North: sy = y > 0 ? y - 1 : 0; break;
            case Dir::West: sx = x > 0 ? x - 1 : 0; break;
            case Dir::South: sy = y < h - 1 ? y + 1 : h - 1; break;
            case Dir::East: sx = x < w - 1 ? x + 1 : w - 1; break;
        }
    }

    static void shift_plane(const double* in, double* out, int h, int w, Dir d) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                int sy = y, sx = x;
                source_index(y, x, h, w, d, sy, sx);
                out[static_cast<std::size_t>(y) * w + x] = in[static_cast<std::size_t>(sy) * w + sx];
            }
    }

    std::vector<Node> nodes_;
    std::unordered_map<std::size_t, std::vector<std::vector<double>>> pool_;
    std::vector<double> scratch_, scratch2_;
    std::vector<Tensor>* grad_sink_ = nullptr;
};

}  // namespace diffnet
