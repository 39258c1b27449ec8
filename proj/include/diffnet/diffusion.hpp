#pragma once

#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "diffnet/grid.hpp"

namespace diffnet {

enum class DiffusionMode { Isotropic, PeronaMalik };
enum class Scheme { Explicit, Implicit };

struct DiffusionConfig {
    double dt = 0.1;
    int steps = 1;
    double lambda = 0.2;  ///< Perona-Malik contrast parameter
    DiffusionMode mode = DiffusionMode::Isotropic;

    void validate() const {
        if (!(dt > 0.0)) throw ShapeError("DiffusionConfig: dt must be positive");
        if (steps < 1) throw ShapeError("DiffusionConfig: steps must be >= 1");
        if (mode == DiffusionMode::PeronaMalik && !(lambda > 0.0))
            throw ShapeError("DiffusionConfig: lambda must be positive for Perona-Malik");
    }

    double total_time() const { return dt * steps; }
};

/// Perona-Malik diffusivity g(s^2) = 1 / (1 + s^2 / lambda^2).
inline double perona_malik_g(double grad_sq, double lambda) {
    return 1.0 / (1.0 + grad_sq / (lambda * lambda));
}

/// Edge-aware diffusivity field. Each directional plane holds g evaluated on
/// the squared one-sided difference toward that neighbor, so the coefficient
/// lives on the pixel-pair interface and the induced operator is symmetric.
/// Center plane is the derived zero-mean entry. All values in (0, 1].
inline FilterField perona_malik_diffusivity(const Image& u, double lambda) {
    if (!(lambda > 0.0)) throw ShapeError("perona_malik_diffusivity: lambda must be positive");
    FilterField f(u.width, u.height);
    for (int y = 0; y < u.height; ++y) {
        for (int x = 0; x < u.width; ++x) {
            for (Dir d : {Dir::North, Dir::West, Dir::South, Dir::East}) {
                const double diff = neighbor(u, y, x, d) - u.at(y, x);
                f.plane(d).at(y, x) = perona_malik_g(diff * diff, lambda);
            }
        }
    }
    f.derive_zero_mean_center();
    return f;
}

/// Stability bound for the explicit scheme with unit-bounded diffusivity:
/// dt <= 1/(2d) = 0.25 in two dimensions.
inline constexpr double explicit_cfl_limit = 0.25;

/// One explicit Euler step u + dt * L(gamma) u. Warns (does not refuse) when
/// dt exceeds the CFL bound; learned schemes may step adaptively.
inline Image explicit_step(const Image& u, const FilterField& gamma, double dt) {
    if (dt > explicit_cfl_limit)
        std::cerr << "warning: explicit_step dt=" << dt << " exceeds CFL bound "
                  << explicit_cfl_limit << "\n";
    Image lu = apply_stencil(u, gamma, StencilMode::ZeroMeanDiffusion, dt);
    Image out(u.width, u.height);
    for (std::size_t i = 0; i < u.size(); ++i) out[i] = u[i] + lu[i];
    return out;
}

/// One implicit Euler step: solves (Id - dt L(gamma)) v = u by matrix-free
/// conjugate gradients. Requires nonnegative directional planes (SPD system).
inline Image implicit_step(const Image& u, const FilterField& gamma, double dt,
                           double rel_tol = 1e-10) {
    require_field_shape(u, gamma, "implicit_step");

    auto apply_a = [&](const Image& v) {
        Image lv = apply_stencil(v, gamma, StencilMode::ZeroMeanDiffusion, dt);
        Image av(v.width, v.height);
        for (std::size_t i = 0; i < v.size(); ++i) av[i] = v[i] - lv[i];
        return av;
    };
    auto dot = [](const Image& a, const Image& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };

    const double unorm = std::sqrt(dot(u, u));
    if (unorm == 0.0) return Image(u.width, u.height, 0.0);

    Image x = u;  // warm start at the input
    Image r(u.width, u.height);
    {
        Image ax = apply_a(x);
        for (std::size_t i = 0; i < u.size(); ++i) r[i] = u[i] - ax[i];
    }
    Image p = r;
    double rs = dot(r, r);
    const long max_iter = 10L * static_cast<long>(u.size());
    for (long it = 0; it < max_iter; ++it) {
        if (std::sqrt(rs) < rel_tol * unorm) return x;
        Image ap = apply_a(p);
        const double alpha = rs / dot(p, ap);
        for (std::size_t i = 0; i < u.size(); ++i) {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        const double rs_next = dot(r, r);
        const double beta = rs_next / rs;
        for (std::size_t i = 0; i < u.size(); ++i) p[i] = r[i] + beta * p[i];
        rs = rs_next;
    }
    if (std::sqrt(rs) < rel_tol * unorm) return x;
    throw SolverError("implicit_step: CG failed to converge, final residual " +
                      std::to_string(std::sqrt(rs) / unorm));
}

/// Discrete Gaussian kernel for diffusion time T: taps proportional to
/// exp(-2T) I_m(2T) (modified Bessel), truncated at 4*sigma and renormalized.
/// This is the exact Green's function of the semi-discrete grid diffusion, has
/// standard deviation exactly sqrt(2T), and composes as a semigroup under
/// discrete convolution.
struct GaussianKernel {
    double sigma = 0.0;         ///< sqrt(2T), in pixels
    std::vector<double> taps;   ///< symmetric, length 2*radius+1, sums to 1

    int radius() const { return static_cast<int>(taps.size() / 2); }

    static GaussianKernel for_time(double T) {
        if (!(T > 0.0)) throw ShapeError("GaussianKernel: T must be positive");
        GaussianKernel k;
        k.sigma = std::sqrt(2.0 * T);
        const int radius = static_cast<int>(std::ceil(4.0 * k.sigma));
        k.taps.resize(2 * radius + 1);
        double sum = 0.0;
        for (int m = -radius; m <= radius; ++m) {
            const double t = std::exp(-2.0 * T) * std::cyl_bessel_i(std::abs(m), 2.0 * T);
            k.taps[m + radius] = t;
            sum += t;
        }
        for (double& t : k.taps) t /= sum;
        return k;
    }
};

enum class Boundary { Replicate, Mirror };

/// Separable 1-D convolution along rows then columns.
inline Image convolve_separable(const Image& u, const std::vector<double>& taps, Boundary bc) {
    const int r = static_cast<int>(taps.size() / 2);
    const int w = u.width, h = u.height;
    auto fold = [bc](int i, int n) {
        if (bc == Boundary::Replicate) return std::clamp(i, 0, n - 1);
        // half-sample mirror: ... u1 u0 | u0 u1 ... un-1 | un-1 un-2 ...
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - 1 - i;
        }
        return i;
    };

    Image tmp(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int t = -r; t <= r; ++t) acc += taps[t + r] * u.at(y, fold(x + t, w));
            tmp.at(y, x) = acc;
        }
    Image out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int t = -r; t <= r; ++t) acc += taps[t + r] * tmp.at(fold(y + t, h), x);
            out.at(y, x) = acc;
        }
    return out;
}

/// Solution of isotropic diffusion at time T by convolution with the discrete
/// Gaussian, replicate boundary. Constants are preserved exactly.
inline Image gaussian_convolve(const Image& u, double T) {
    const GaussianKernel k = GaussianKernel::for_time(T);
    return convolve_separable(u, k.taps, Boundary::Replicate);
}

struct EvolveResult {
    Image final;
    std::vector<Image> trajectory;  ///< u^(1) .. u^(N) when recorded
};

/// Runs the forward diffusion for cfg.steps steps. For Perona-Malik the
/// diffusivity is re-estimated from the current state before every step.
inline EvolveResult evolve(const Image& u0, const DiffusionConfig& cfg, Scheme scheme,
                           bool record_trajectory = false) {
    cfg.validate();
    EvolveResult res;
    res.final = u0;
    if (record_trajectory) res.trajectory.reserve(cfg.steps);

    FilterField gamma;
    if (cfg.mode == DiffusionMode::Isotropic) {
        gamma = FilterField(u0.width, u0.height, 1.0);
        gamma.derive_zero_mean_center();
    }
    for (int n = 0; n < cfg.steps; ++n) {
        if (cfg.mode == DiffusionMode::PeronaMalik)
            gamma = perona_malik_diffusivity(res.final, cfg.lambda);
        res.final = scheme == Scheme::Explicit ? explicit_step(res.final, gamma, cfg.dt)
                                               : implicit_step(res.final, gamma, cfg.dt);
        if (record_trajectory) res.trajectory.push_back(res.final);
    }
    return res;
}

}  // namespace diffnet
