#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "diffnet/diffusion.hpp"
#include "diffnet/grid.hpp"

namespace diffnet {

namespace detail {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// In-place radix-2 FFT for power-of-two lengths.
inline void fft_radix2(std::vector<std::complex<double>>& a, bool inverse) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const double pi = 3.141592653589793238462643383279503;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

/// Direct O(n^2) DFT for arbitrary lengths (test sizes are small).
inline void dft_direct(std::vector<std::complex<double>>& a, bool inverse) {
    const std::size_t n = a.size();
    const double pi = 3.141592653589793238462643383279503;
    std::vector<std::complex<double>> out(n);
    for (std::size_t k = 0; k < n; ++k) {
        std::complex<double> acc(0.0, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const double ang =
                2.0 * pi * static_cast<double>(k) * static_cast<double>(j) / static_cast<double>(n);
            acc += a[j] * std::complex<double>(std::cos(ang), (inverse ? 1.0 : -1.0) * std::sin(ang));
        }
        out[k] = acc;
    }
    if (inverse)
        for (auto& x : out) x /= static_cast<double>(n);
    a = std::move(out);
}

inline void fft1d(std::vector<std::complex<double>>& a, bool inverse) {
    if (is_pow2(a.size()))
        fft_radix2(a, inverse);
    else
        dft_direct(a, inverse);
}

using Spectrum = std::vector<std::complex<double>>;  // row-major height x width

inline Spectrum fft2d(const Image& u, bool inverse = false) {
    const int w = u.width, h = u.height;
    Spectrum s(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) s[i] = u.data[i];
    std::vector<std::complex<double>> line;
    for (int y = 0; y < h; ++y) {
        line.assign(s.begin() + static_cast<std::ptrdiff_t>(y) * w,
                    s.begin() + static_cast<std::ptrdiff_t>(y + 1) * w);
        fft1d(line, inverse);
        std::copy(line.begin(), line.end(), s.begin() + static_cast<std::ptrdiff_t>(y) * w);
    }
    for (int x = 0; x < w; ++x) {
        line.resize(h);
        for (int y = 0; y < h; ++y) line[y] = s[static_cast<std::size_t>(y) * w + x];
        fft1d(line, inverse);
        for (int y = 0; y < h; ++y) s[static_cast<std::size_t>(y) * w + x] = line[y];
    }
    return s;
}

inline Image ifft2d_real(Spectrum s, int width, int height) {
    std::vector<std::complex<double>> line;
    for (int y = 0; y < height; ++y) {
        line.assign(s.begin() + static_cast<std::ptrdiff_t>(y) * width,
                    s.begin() + static_cast<std::ptrdiff_t>(y + 1) * width);
        fft1d(line, true);
        std::copy(line.begin(), line.end(), s.begin() + static_cast<std::ptrdiff_t>(y) * width);
    }
    Image out(width, height);
    line.resize(height);
    for (int x = 0; x < width; ++x) {
        for (int y = 0; y < height; ++y) line[y] = s[static_cast<std::size_t>(y) * width + x];
        fft1d(line, true);
        for (int y = 0; y < height; ++y) out.at(y, x) = line[y].real();
    }
    return out;
}

/// Squared angular frequency k^2 = kx^2 + ky^2 on the periodic grid.
inline double freq_sq(int index, int n) {
    const double pi = 3.141592653589793238462643383279503;
    const int m = index <= n / 2 ? index : index - n;
    const double k = 2.0 * pi * static_cast<double>(m) / static_cast<double>(n);
    return k * k;
}

}  // namespace detail

/// Periodic isotropic diffusion to time T: spectral multiplication by
/// exp(-k^2 T). Diagnostic companion of fourier_deconvolve; the rest of the
/// library works on the Neumann domain.
inline Image periodic_gaussian_convolve(const Image& u, double T) {
    auto s = detail::fft2d(u);
    for (int y = 0; y < u.height; ++y) {
        const double ky2 = detail::freq_sq(y, u.height);
        for (int x = 0; x < u.width; ++x) {
            const double k2 = ky2 + detail::freq_sq(x, u.width);
            s[static_cast<std::size_t>(y) * u.width + x] *= std::exp(-k2 * T);
        }
    }
    return detail::ifft2d_real(std::move(s), u.width, u.height);
}

/// Deconvolution by spectral division: multiplies each mode by exp(+k^2 T),
/// clamped at 1/reg_eps when reg_eps > 0. With reg_eps = 0 this is the exact
/// inverse of periodic_gaussian_convolve on noise-free data; with any noise it
/// amplifies high frequencies without bound (that is the point of the clamp).
inline Image fourier_deconvolve(const Image& uT, double T, double reg_eps) {
    if (reg_eps < 0.0) throw ShapeError("fourier_deconvolve: reg_eps must be >= 0");
    auto s = detail::fft2d(uT);
    for (int y = 0; y < uT.height; ++y) {
        const double ky2 = detail::freq_sq(y, uT.height);
        for (int x = 0; x < uT.width; ++x) {
            const double k2 = ky2 + detail::freq_sq(x, uT.width);
            double mult = std::exp(k2 * T);
            if (reg_eps > 0.0) mult = std::min(mult, 1.0 / reg_eps);
            s[static_cast<std::size_t>(y) * uT.width + x] *= mult;
        }
    }
    return detail::ifft2d_real(std::move(s), uT.width, uT.height);
}

/// One inverse-diffusion step (Id - dt Laplacian) with Neumann boundary; the
/// algebraic inverse of the implicit forward step at unit diffusivity.
inline Image inverse_iso_step(const Image& u, double dt) {
    FilterField lap = FilterField::laplacian(u.width, u.height);
    Image lu = apply_stencil(u, lap, StencilMode::ZeroMeanDiffusion, dt);
    Image out(u.width, u.height);
    for (std::size_t i = 0; i < u.size(); ++i) out[i] = u[i] - lu[i];
    return out;
}

/// Unsharp masking u + eps*(u - G_sigma * u). The blur uses mirror boundary
/// handling, which keeps the total mass (and hence the mean) exact.
inline Image unsharp_mask(const Image& u, double sigma, double eps) {
    if (!(sigma > 0.0)) throw ShapeError("unsharp_mask: sigma must be positive");
    const GaussianKernel k = GaussianKernel::for_time(0.5 * sigma * sigma);
    Image blurred = convolve_separable(u, k.taps, Boundary::Mirror);
    Image out(u.width, u.height);
    for (std::size_t i = 0; i < u.size(); ++i) out[i] = u[i] + eps * (u[i] - blurred[i]);
    return out;
}

/// Split of a learned stencil into a zero-mean differentiating part and a
/// pixelwise smoothing residual. The residual is the row sum of the stencil,
/// i.e. its action on a constant image; it vanishes iff the stencil is
/// zero-mean. In the five-coefficient notation with diagonal filter z5 (center
/// plane = -z5), the residual is z1+z2+z3+z4 - z5.
struct FilterDecomposition {
    FilterField zero_mean_part;  ///< directional planes with derived center
    Image smoothing_part;        ///< s = directional sum + center
    double alpha = 0.0;          ///< mean absolute smoothing, mean|s|
};

inline FilterDecomposition decompose_filter(const FilterField& f) {
    if (!f.consistent()) throw ShapeError("decompose_filter: filter planes disagree in shape");
    FilterDecomposition d;
    d.zero_mean_part = f;
    d.zero_mean_part.derive_zero_mean_center();
    d.smoothing_part = Image(f.width(), f.height());
    double abs_sum = 0.0;
    for (std::size_t i = 0; i < d.smoothing_part.size(); ++i) {
        const double s = f.north[i] + f.west[i] + f.south[i] + f.east[i] + f.center[i];
        d.smoothing_part[i] = s;
        abs_sum += std::abs(s);
    }
    d.alpha = abs_sum / static_cast<double>(d.smoothing_part.size());
    return d;
}

/// Inverse of decompose_filter: center = zero-mean center + smoothing residual.
inline FilterField recompose_filter(const FilterDecomposition& d) {
    FilterField f = d.zero_mean_part;
    for (std::size_t i = 0; i < f.center.size(); ++i) f.center[i] += d.smoothing_part[i];
    return f;
}

}  // namespace diffnet
