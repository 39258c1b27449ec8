#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffnet {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Single-channel scalar field on a regular pixel grid, row-major float64.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, double fill = 0.0)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {
        if (w <= 0 || h <= 0) throw ShapeError("Image: dimensions must be positive");
    }

    std::size_t size() const { return data.size(); }
    double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Image& o) const { return width == o.width && height == o.height; }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.width) + "x" +
                         std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                         std::to_string(b.height) + ")");
}

inline bool all_finite(const Image& u) {
    for (double v : u.data)
        if (!std::isfinite(v)) return false;
    return true;
}

/// 4-connected neighbor directions of the 5-point stencil.
enum class Dir { North = 0, West = 1, South = 2, East = 3 };

/// Neighbor read with zero-Neumann (edge replication) boundary handling:
/// stepping off the grid returns the boundary pixel itself.
inline double neighbor(const Image& u, int y, int x, Dir d) {
    switch (d) {
        case Dir::North: return u.at(y > 0 ? y - 1 : 0, x);
        case Dir::West: return u.at(y, x > 0 ? x - 1 : 0);
        case Dir::South: return u.at(y < u.height - 1 ? y + 1 : u.height - 1, x);
        case Dir::East: return u.at(y, x < u.width - 1 ? x + 1 : u.width - 1);
    }
    return 0.0;  // unreachable
}

/// Image whose pixel (y,x) holds the d-neighbor of u at (y,x), replicated at edges.
inline Image shift(const Image& u, Dir d) {
    Image out(u.width, u.height);
    for (int y = 0; y < u.height; ++y)
        for (int x = 0; x < u.width; ++x) out.at(y, x) = neighbor(u, y, x, d);
    return out;
}

/// How the center plane of a 5-point stencil is interpreted on application.
enum class StencilMode {
    ZeroMeanDiffusion,  ///< center forced to the negated sum of the directional planes
    FreeCenter          ///< center plane used as stored
};

/// Non-stationary 5-point stencil: one coefficient per pixel and direction.
/// The center plane stores the diagonal entry of the induced matrix operator.
struct FilterField {
    Image north, west, south, east, center;

    FilterField() = default;
    explicit FilterField(int w, int h, double fill = 0.0)
        : north(w, h, fill), west(w, h, fill), south(w, h, fill), east(w, h, fill), center(w, h, fill) {}

    int width() const { return north.width; }
    int height() const { return north.height; }

    const Image& plane(Dir d) const {
        switch (d) {
            case Dir::North: return north;
            case Dir::West: return west;
            case Dir::South: return south;
            case Dir::East: return east;
        }
        return north;  // unreachable
    }
    Image& plane(Dir d) { return const_cast<Image&>(static_cast<const FilterField*>(this)->plane(d)); }

    bool consistent() const {
        return north.same_shape(west) && north.same_shape(south) && north.same_shape(east) &&
               north.same_shape(center);
    }

    /// Recomputes the center plane as the negated directional sum.
    void derive_zero_mean_center() {
        for (std::size_t i = 0; i < center.size(); ++i)
            center[i] = -(north[i] + west[i] + south[i] + east[i]);
    }

    /// Classic 5-point Laplacian: directional planes 1, center -4.
    static FilterField laplacian(int w, int h) {
        FilterField f(w, h, 1.0);
        f.center = Image(w, h, -4.0);
        return f;
    }
};

inline void require_field_shape(const Image& u, const FilterField& f, const char* what) {
    if (!f.consistent()) throw ShapeError(std::string(what) + ": filter planes disagree in shape");
    require_same_shape(u, f.north, what);
}

/// Applies the 5-point non-stationary stencil:
///   out = dt * (north.*u_N + west.*u_W + south.*u_S + east.*u_E + c.*u)
/// where u_D are edge-replicated neighbor reads and c is the center plane
/// (FreeCenter) or the negated directional sum (ZeroMeanDiffusion).
inline Image apply_stencil(const Image& u, const FilterField& f, StencilMode mode, double dt) {
    require_field_shape(u, f, "apply_stencil");
    if (!std::isfinite(dt)) throw ShapeError("apply_stencil: dt must be finite");

    const int w = u.width, h = u.height;
    Image out(w, h);
    for (int y = 0; y < h; ++y) {
        const int yn = y > 0 ? y - 1 : 0;
        const int ys = y < h - 1 ? y + 1 : h - 1;
        for (int x = 0; x < w; ++x) {
            const int xw = x > 0 ? x - 1 : 0;
            const int xe = x < w - 1 ? x + 1 : w - 1;
            const double cn = f.north.at(y, x);
            const double cw = f.west.at(y, x);
            const double cs = f.south.at(y, x);
            const double ce = f.east.at(y, x);
            const double cc =
                mode == StencilMode::ZeroMeanDiffusion ? -(cn + cw + cs + ce) : f.center.at(y, x);
            double acc = cn * u.at(yn, x);
            acc += cw * u.at(y, xw);
            acc += cs * u.at(ys, x);
            acc += ce * u.at(y, xe);
            acc += cc * u.at(y, x);
            out.at(y, x) = dt * acc;
        }
    }
    return out;
}

/// Dense matrix acting on vectorized images; testing oracle for apply_stencil.
struct DenseMatrix {
    int n = 0;  ///< number of pixels; matrix is n x n row-major
    std::vector<double> a;

    double& at(int i, int j) { return a[static_cast<std::size_t>(i) * n + j]; }
    double at(int i, int j) const { return a[static_cast<std::size_t>(i) * n + j]; }

    std::vector<double> apply(const std::vector<double>& v) const {
        std::vector<double> out(static_cast<std::size_t>(n), 0.0);
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += at(i, j) * v[j];
            out[i] = acc;
        }
        return out;
    }
};

/// Materializes the stencil operator as a dense matrix. The Neumann edge
/// replication folds off-grid neighbor weights into the nearest in-grid
/// column, so boundary rows pick up extra diagonal/edge mass exactly as the
/// pointwise application does. Guarded to small shapes; test use only.
inline DenseMatrix dense_oracle_matrix(const FilterField& f, StencilMode mode, double dt) {
    if (!f.consistent()) throw ShapeError("dense_oracle_matrix: filter planes disagree in shape");
    const int w = f.width(), h = f.height();
    if (w > 64 || h > 64)
        throw ShapeError("dense_oracle_matrix: refusing shapes beyond 64x64");

    const int n = w * h;
    DenseMatrix m;
    m.n = n;
    m.a.assign(static_cast<std::size_t>(n) * n, 0.0);
    auto idx = [w](int y, int x) { return y * w + x; };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int i = idx(y, x);
            const double cn = f.north.at(y, x);
            const double cw = f.west.at(y, x);
            const double cs = f.south.at(y, x);
            const double ce = f.east.at(y, x);
            const double cc =
                mode == StencilMode::ZeroMeanDiffusion ? -(cn + cw + cs + ce) : f.center.at(y, x);
            m.at(i, idx(y > 0 ? y - 1 : 0, x)) += dt * cn;
            m.at(i, idx(y, x > 0 ? x - 1 : 0)) += dt * cw;
            m.at(i, idx(y < h - 1 ? y + 1 : h - 1, x)) += dt * cs;
            m.at(i, idx(y, x < w - 1 ? x + 1 : w - 1)) += dt * ce;
            m.at(i, i) += dt * cc;
        }
    }
    return m;
}

struct ImageStats {
    double min = 0.0, max = 0.0, mean = 0.0, l2norm = 0.0;
};

inline ImageStats image_stats(const Image& u) {
    if (u.size() == 0) throw ShapeError("image_stats: empty image");
    ImageStats s;
    s.min = u.data[0];
    s.max = u.data[0];
    double sum = 0.0, sumsq = 0.0;
    for (double v : u.data) {
        s.min = std::min(s.min, v);
        s.max = std::max(s.max, v);
        sum += v;
        sumsq += v * v;
    }
    s.mean = sum / static_cast<double>(u.size());
    s.l2norm = std::sqrt(sumsq);
    return s;
}

inline double image_sum(const Image& u) {
    double s = 0.0;
    for (double v : u.data) s += v;
    return s;
}

}  // namespace diffnet
