#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "diffnet/diffusion.hpp"
#include "diffnet/grid.hpp"
#include "diffnet/rng.hpp"

namespace diffnet {

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Netpbm image I/O. Reads binary PGM (P5, 8- or 16-bit) normalized to [0,1]
// and binary PPM (P6) converted to grayscale by the BT.601 luma weights.
// Writes 16-bit PGM, clamped to [0,1] and scaled; multi-byte samples are
// big-endian per the format. Writes go through a temp file + rename.
// ---------------------------------------------------------------------------

namespace detail {

inline int pnm_read_token(std::istream& is, std::string& tok, std::size_t& offset) {
    tok.clear();
    int c = is.get();
    while (c != EOF) {
        ++offset;
        if (c == '#') {  // comment to end of line
            while (c != EOF && c != '\n') {
                c = is.get();
                ++offset;
            }
        } else if (!std::isspace(c)) {
            break;
        }
        c = is.get();
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = is.get();
        ++offset;
    }
    return c;
}

inline long pnm_parse_int(const std::string& tok, std::size_t offset, const char* what) {
    if (tok.empty()) throw ParseError(std::string("pnm: missing ") + what + " at byte " +
                                      std::to_string(offset));
    for (char ch : tok)
        if (!std::isdigit(static_cast<unsigned char>(ch)))
            throw ParseError(std::string("pnm: malformed ") + what + " '" + tok + "' at byte " +
                             std::to_string(offset));
    return std::stol(tok);
}

}  // namespace detail

inline Image load_image(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("pnm: cannot open " + path.string());
    std::size_t offset = 0;
    std::string tok;
    detail::pnm_read_token(is, tok, offset);
    const bool is_ppm = tok == "P6";
    if (tok != "P5" && !is_ppm)
        throw ParseError("pnm: unsupported magic '" + tok + "' at byte 0 in " + path.string());
    detail::pnm_read_token(is, tok, offset);
    const long width = detail::pnm_parse_int(tok, offset, "width");
    detail::pnm_read_token(is, tok, offset);
    const long height = detail::pnm_parse_int(tok, offset, "height");
    detail::pnm_read_token(is, tok, offset);
    const long maxval = detail::pnm_parse_int(tok, offset, "maxval");
    if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535)
        throw ParseError("pnm: bad header values at byte " + std::to_string(offset));
    // single whitespace after maxval already consumed by tokenizer

    const int bytes_per_sample = maxval > 255 ? 2 : 1;
    const int samples_per_pixel = is_ppm ? 3 : 1;
    const std::size_t payload =
        static_cast<std::size_t>(width) * height * samples_per_pixel * bytes_per_sample;
    std::vector<unsigned char> buf(payload);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(payload));
    if (static_cast<std::size_t>(is.gcount()) != payload)
        throw ParseError("pnm: truncated payload at byte " +
                         std::to_string(offset + static_cast<std::size_t>(is.gcount())) + " in " +
                         path.string());

    auto sample = [&](std::size_t idx) {
        if (bytes_per_sample == 1) return static_cast<double>(buf[idx]) / maxval;
        return static_cast<double>((static_cast<unsigned>(buf[2 * idx]) << 8) | buf[2 * idx + 1]) /
               maxval;
    };

    Image im(static_cast<int>(width), static_cast<int>(height));
    for (std::size_t i = 0; i < im.size(); ++i) {
        if (is_ppm) {
            const double r = sample(3 * i), g = sample(3 * i + 1), b = sample(3 * i + 2);
            im[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        } else {
            im[i] = sample(i);
        }
    }
    return im;
}

inline void save_image(const Image& im, const std::filesystem::path& path) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw ParseError("pnm: cannot open " + tmp.string() + " for writing");
        os << "P5\n" << im.width << " " << im.height << "\n65535\n";
        std::vector<unsigned char> buf(im.size() * 2);
        for (std::size_t i = 0; i < im.size(); ++i) {
            const double v = std::clamp(im[i], 0.0, 1.0);
            const unsigned q = static_cast<unsigned>(std::lround(v * 65535.0));
            buf[2 * i] = static_cast<unsigned char>(q >> 8);
            buf[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
        }
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!os) throw ParseError("pnm: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Synthetic sample generators. Every image is a pure function of its seed.
// ---------------------------------------------------------------------------

/// One anti-aliased disk on a black background. Radius ~ U[size/12, size/3],
/// contrast ~ U[0.2, 1.0], center placed so the disk (and its soft edge)
/// stays inside the frame.
inline Image gen_disk(int size, std::uint64_t seed) {
    if (size < 16) throw ShapeError("gen_disk: size must be >= 16");
    Rng rng(seed);
    const double radius = rng.uniform(size / 12.0, size / 3.0);
    const double contrast = rng.uniform(0.2, 1.0);
    const double margin = radius + 1.5;
    const double cx = rng.uniform(margin, size - margin);
    const double cy = rng.uniform(margin, size - margin);
    Image im(size, size, 0.0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double d = std::hypot(x - cx, y - cy);
            const double coverage = std::clamp(radius - d + 0.5, 0.0, 1.0);
            im.at(y, x) = contrast * coverage;
        }
    return im;
}

inline std::vector<Image> gen_disks(int count, int size, std::uint64_t seed) {
    std::vector<Image> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        out.push_back(gen_disk(size, derive_seed(seed, static_cast<std::uint64_t>(i))));
    return out;
}

/// Piecewise-smooth scene: a gentle background gradient with a handful of
/// anti-aliased ellipses and bars layered on top. Stands in for a photo
/// corpus in the nonlinear-diffusion experiments; edges are what matter.
inline Image gen_scene(int size, std::uint64_t seed) {
    if (size < 16) throw ShapeError("gen_scene: size must be >= 16");
    Rng rng(seed);
    Image im(size, size);
    const double base = rng.uniform(0.1, 0.5);
    const double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            im.at(y, x) = base + gx * (static_cast<double>(x) / size - 0.5) +
                          gy * (static_cast<double>(y) / size - 0.5);

    const int shapes = 4 + static_cast<int>(rng.below(6));
    for (int s = 0; s < shapes; ++s) {
        const bool bar = rng.uniform() < 0.3;
        const double cx = rng.uniform(0.1, 0.9) * size;
        const double cy = rng.uniform(0.1, 0.9) * size;
        const double a = bar ? rng.uniform(size / 3.0, size / 1.5) : rng.uniform(size / 10.0, size / 3.0);
        const double b = bar ? rng.uniform(size / 24.0, size / 10.0) : rng.uniform(size / 10.0, size / 3.0);
        const double theta = rng.uniform(0.0, 3.141592653589793);
        const double value = rng.uniform(0.05, 0.95);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                // 2x2 supersampled coverage of the (rotated) ellipse
                double cov = 0.0;
                for (int sy = 0; sy < 2; ++sy)
                    for (int sx = 0; sx < 2; ++sx) {
                        const double px = x + 0.25 + 0.5 * sx - cx;
                        const double py = y + 0.25 + 0.5 * sy - cy;
                        const double u = (ct * px + st * py) / a;
                        const double v = (-st * px + ct * py) / b;
                        if (u * u + v * v <= 1.0) cov += 0.25;
                    }
                if (cov > 0.0) im.at(y, x) = (1.0 - cov) * im.at(y, x) + cov * value;
            }
    }
    for (double& v : im.data) v = std::clamp(v, 0.0, 1.0);
    return im;
}

// ---------------------------------------------------------------------------
// Sample pairs and manifests.
// ---------------------------------------------------------------------------

/// One training/eval record: ground truth, its degraded version, and the
/// noise draw that produced it.
struct SamplePair {
    Image clean;
    Image degraded;
    double noise_pct = 0.0;
    std::uint64_t seed = 0;
};

/// degraded = evolve(clean) + eta, eta ~ N(0, sigma^2) with sigma equal to
/// noise_pct percent of the diffused image's dynamic range. Values are not
/// clipped; clipping happens only at image export.
inline SamplePair make_pair(const Image& clean, const DiffusionConfig& cfg, double noise_pct,
                            std::uint64_t seed) {
    if (noise_pct < 0.0) throw ShapeError("make_pair: noise_pct must be >= 0");
    SamplePair p;
    p.clean = clean;
    p.degraded = evolve(clean, cfg, Scheme::Explicit).final;
    p.noise_pct = noise_pct;
    p.seed = seed;
    if (noise_pct > 0.0) {
        const ImageStats st = image_stats(p.degraded);
        const double sigma = noise_pct / 100.0 * (st.max - st.min);
        Rng rng(derive_seed(seed, 0x6e6f697365ULL));  // independent noise stream
        for (double& v : p.degraded.data) v += rng.normal(0.0, sigma);
    }
    return p;
}

inline std::vector<SamplePair> make_pairs(const std::vector<Image>& images,
                                          const DiffusionConfig& cfg, double noise_pct,
                                          std::uint64_t seed) {
    std::vector<SamplePair> out;
    out.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i)
        out.push_back(make_pair(images[i], cfg, noise_pct, derive_seed(seed, i)));
    return out;
}

struct ManifestEntry {
    std::string path;  ///< exported PGM (informational for generated kinds)
    std::uint64_t seed = 0;
    double noise_pct = 0.0;
};

/// Flat-text dataset description sufficient to regenerate every sample
/// bit-for-bit: key=value header lines plus one sample record per line.
struct DatasetManifest {
    int version = 1;
    std::string kind = "disks";  ///< disks | scenes | files
    std::string split = "train";
    int image_size = 64;
    DiffusionConfig forward;
    double noise_pct = 0.0;
    std::uint64_t base_seed = 0;
    std::vector<ManifestEntry> entries;

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw ParseError("manifest: cannot open " + path.string() + " for writing");
        os << "version=" << version << "\n";
        os << "kind=" << kind << "\n";
        os << "split=" << split << "\n";
        os << "image_size=" << image_size << "\n";
        os << "forward.mode="
           << (forward.mode == DiffusionMode::Isotropic ? "isotropic" : "perona-malik") << "\n";
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", forward.dt);
        os << "forward.dt=" << buf << "\n";
        std::snprintf(buf, sizeof buf, "%.17g", forward.lambda);
        os << "forward.lambda=" << buf << "\n";
        os << "forward.steps=" << forward.steps << "\n";
        std::snprintf(buf, sizeof buf, "%.17g", noise_pct);
        os << "noise_pct=" << buf << "\n";
        os << "base_seed=" << base_seed << "\n";
        os << "count=" << entries.size() << "\n";
        for (const auto& e : entries) {
            std::snprintf(buf, sizeof buf, "%.17g", e.noise_pct);
            os << "sample=" << e.path << " " << e.seed << " " << buf << "\n";
        }
        if (!os) throw ParseError("manifest: write failed for " + path.string());
    }

    static DatasetManifest load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw ParseError("manifest: cannot open " + path.string());
        DatasetManifest m;
        std::string line;
        int lineno = 0;
        std::size_t declared_count = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty() || line[0] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ParseError("manifest: line " + std::to_string(lineno) + ": expected key=value");
            const std::string key = line.substr(0, eq);
            const std::string val = line.substr(eq + 1);
            if (key == "version") m.version = std::stoi(val);
            else if (key == "kind") m.kind = val;
            else if (key == "split") m.split = val;
            else if (key == "image_size") m.image_size = std::stoi(val);
            else if (key == "forward.mode")
                m.forward.mode = val == "isotropic" ? DiffusionMode::Isotropic
                                                    : DiffusionMode::PeronaMalik;
            else if (key == "forward.dt") m.forward.dt = std::stod(val);
            else if (key == "forward.lambda") m.forward.lambda = std::stod(val);
            else if (key == "forward.steps") m.forward.steps = std::stoi(val);
            else if (key == "noise_pct") m.noise_pct = std::stod(val);
            else if (key == "base_seed") m.base_seed = std::stoull(val);
            else if (key == "count") declared_count = std::stoull(val);
            else if (key == "sample") {
                std::istringstream ss(val);
                ManifestEntry e;
                if (!(ss >> e.path >> e.seed >> e.noise_pct))
                    throw ParseError("manifest: line " + std::to_string(lineno) +
                                     ": malformed sample record");
                m.entries.push_back(std::move(e));
            } else
                throw ParseError("manifest: line " + std::to_string(lineno) + ": unknown key '" +
                                 key + "'");
        }
        if (declared_count != m.entries.size())
            throw ParseError("manifest: declared count " + std::to_string(declared_count) +
                             " does not match " + std::to_string(m.entries.size()) + " records");
        return m;
    }
};

/// Regenerates the clean image of a manifest entry. Generated kinds come from
/// the per-sample seed; "files" kind loads the recorded path.
inline Image realize_clean(const DatasetManifest& m, const ManifestEntry& e,
                           const std::filesystem::path& base_dir) {
    if (m.kind == "disks") return gen_disk(m.image_size, e.seed);
    if (m.kind == "scenes") return gen_scene(m.image_size, e.seed);
    if (m.kind == "files") return load_image(base_dir / e.path);
    throw ParseError("manifest: unknown kind '" + m.kind + "'");
}

/// Materializes all sample pairs of a manifest, deterministically.
inline std::vector<SamplePair> realize_dataset(const DatasetManifest& m,
                                               const std::filesystem::path& base_dir = {}) {
    std::vector<SamplePair> out;
    out.reserve(m.entries.size());
    for (const auto& e : m.entries)
        out.push_back(make_pair(realize_clean(m, e, base_dir), m.forward, e.noise_pct, e.seed));
    return out;
}

/// Builds a generated-kind manifest (disks or scenes) with per-sample seeds
/// derived from the base seed; split names only affect the seed stream.
inline DatasetManifest build_manifest(const std::string& kind, const std::string& split, int count,
                                      int image_size, const DiffusionConfig& forward,
                                      double noise_pct, std::uint64_t base_seed) {
    DatasetManifest m;
    m.kind = kind;
    m.split = split;
    m.image_size = image_size;
    m.forward = forward;
    m.noise_pct = noise_pct;
    m.base_seed = base_seed;
    const std::uint64_t split_salt = split == "train" ? 0x747261696eULL : 0x74657374ULL;
    for (int i = 0; i < count; ++i) {
        ManifestEntry e;
        e.seed = derive_seed(base_seed ^ split_salt, static_cast<std::uint64_t>(i));
        e.noise_pct = noise_pct;
        char name[64];
        std::snprintf(name, sizeof name, "%s_%05d.pgm", split.c_str(), i);
        e.path = name;
        m.entries.push_back(std::move(e));
    }
    return m;
}

}  // namespace diffnet
