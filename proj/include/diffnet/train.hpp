#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "diffnet/data.hpp"
#include "diffnet/deconvolve.hpp"
#include "diffnet/model.hpp"
#include "diffnet/rng.hpp"

namespace diffnet {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

/// PSNR ceiling reported for identical images instead of infinity.
inline constexpr double psnr_cap_db = 300.0;

inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
    require_same_shape(a, b, "psnr");
    if (!(peak > 0.0)) throw ShapeError("psnr: peak must be positive");
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.size());
    if (mse == 0.0) return psnr_cap_db;
    return std::min(psnr_cap_db, 10.0 * std::log10(peak * peak / mse));
}

/// Relative l2 error ||a - b|| / ||b||; b is the reference.
inline double rel_l2(const Image& a, const Image& b) {
    require_same_shape(a, b, "rel_l2");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        num += d * d;
        den += b[i] * b[i];
    }
    return den == 0.0 ? std::sqrt(num) : std::sqrt(num / den);
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Tensor> m, v;
    long t = 0;

    static AdamState for_params(const std::vector<Param*>& params) {
        AdamState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const Param* p : params) {
            s.m.emplace_back(p->value.shape, 0.0);
            s.v.emplace_back(p->value.shape, 0.0);
        }
        return s;
    }
};

/// Standard Adam update with bias correction, reading Param::grad.
inline void adam_step(const std::vector<Param*>& params, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    if (state.m.size() != params.size())
        throw ShapeError("adam_step: state does not match parameter list");
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param& p = *params[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::size_t j = 0; j < p.value.numel(); ++j) {
            const double g = p.grad.data[j];
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * g;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m.data[j] / bc1;
            const double vhat = v.data[j] / bc2;
            p.value.data[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 18;
    int batch_size = 16;
    double lr_initial = 2e-3;
    double lr_final = 4e-6;
    AdamConfig adam;
    std::uint64_t seed = 0;
    int eval_divisions = 20;   ///< evaluate every total/20 steps, at least once per epoch
    int threads = 0;           ///< 0 = hardware concurrency
    bool zero_wall_time = false;  ///< write 0 in the wall_time_s column (bitwise-reproducible CSVs)

    void validate() const {
        if (batch_size < 1) throw ShapeError("TrainConfig: batch_size must be >= 1");
        if (epochs < 1) throw ShapeError("TrainConfig: epochs must be >= 1");
        if (lr_final > lr_initial) throw ShapeError("TrainConfig: lr_final must be <= lr_initial");
    }

    int thread_count() const {
        if (threads > 0) return threads;
        const unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(hc);
    }
};

struct MetricsRecord {
    long step = 0;
    int epoch = 0;
    double train_loss = 0.0;
    double test_psnr = 0.0;
    double test_rel_l2 = 0.0;
    double wall_time_s = 0.0;
};

struct EvalSummary {
    double mean_psnr = 0.0;
    double mean_rel_l2 = 0.0;
};

struct TrainResult {
    std::filesystem::path checkpoint_path;
    std::filesystem::path metrics_path;
    std::vector<MetricsRecord> metrics;
    double best_psnr = -1.0;
    long total_steps = 0;
};

namespace detail {

/// Runs fn(sample_index) over [0, n) on up to `threads` workers. Results must
/// be written to per-index slots; completion order does not matter.
template <typename Fn>
void parallel_for_samples(std::size_t n, int threads, Fn&& fn) {
    const int t = std::max(1, std::min<int>(threads, static_cast<int>(n)));
    if (t == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(t));
    for (int w = 0; w < t; ++w)
        pool.emplace_back([&, w]() {
            for (std::size_t i = static_cast<std::size_t>(w); i < n; i += static_cast<std::size_t>(t))
                fn(i);
        });
    for (auto& th : pool) th.join();
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<MetricsRecord>& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw TrainError("train: cannot open metrics file " + path.string());
    os << "step,epoch,train_loss,test_psnr,test_rel_l2,wall_time_s\n";
    char buf[256];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%ld,%d,%.12g,%.6f,%.12g,%.6f\n", r.step, r.epoch,
                      r.train_loss, r.test_psnr, r.test_rel_l2, r.wall_time_s);
        os << buf;
    }
}

}  // namespace detail

/// Mean test-set metrics of a model, evaluated sample-parallel with a fixed
/// reduction order.
template <typename Model>
EvalSummary evaluate(const Model& model, const std::vector<SamplePair>& test, int threads) {
    std::vector<double> psnrs(test.size()), rels(test.size());
    detail::parallel_for_samples(test.size(), threads, [&](std::size_t i) {
        Tape t;
        const int out = model.forward(t, t.constant(Tensor::from_image(test[i].degraded)));
        const Image rec = t.value(out).to_image();
        psnrs[i] = psnr(rec, test[i].clean);
        rels[i] = rel_l2(rec, test[i].clean);
    });
    EvalSummary s;
    for (std::size_t i = 0; i < test.size(); ++i) {
        s.mean_psnr += psnrs[i];
        s.mean_rel_l2 += rels[i];
    }
    s.mean_psnr /= static_cast<double>(test.size());
    s.mean_rel_l2 /= static_cast<double>(test.size());
    return s;
}

/// Mean PSNR of the degraded inputs themselves; the baseline a reconstruction
/// has to beat.
inline double mean_degraded_psnr(const std::vector<SamplePair>& samples) {
    double acc = 0.0;
    for (const auto& s : samples) acc += psnr(s.degraded, s.clean);
    return acc / static_cast<double>(samples.size());
}

/// Minimizes the l2 loss of model(degraded) against clean with Adam and a
/// per-step exponential learning-rate decay. Batches are seeded shuffles;
/// per-sample gradients are computed on worker tapes and reduced in sample
/// order, so results do not depend on the thread count. The best-test-PSNR
/// parameter snapshot is written as the checkpoint.
template <typename Model>
TrainResult train(Model& model, const std::vector<SamplePair>& train_set,
                  const std::vector<SamplePair>& test_set, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const std::string& run_name) {
    cfg.validate();
    if (train_set.empty()) throw TrainError("train: empty training set");
    for (const auto& s : train_set)
        if (!s.clean.same_shape(train_set[0].clean) || !s.degraded.same_shape(s.clean))
            throw TrainError("train: samples must share one shape");
    std::filesystem::create_directories(out_dir);

    const int batch = std::min<int>(cfg.batch_size, static_cast<int>(train_set.size()));
    const long steps_per_epoch =
        static_cast<long>((train_set.size() + static_cast<std::size_t>(batch) - 1) / batch);
    const long total_steps = steps_per_epoch * cfg.epochs;
    const long eval_every =
        std::max(1L, std::min(total_steps / std::max(1, cfg.eval_divisions), steps_per_epoch));

    std::vector<Param*> params = model.params.all();
    AdamState adam = AdamState::for_params(params);

    // Samples are processed in fixed-size groups, each on its own tape. The
    // grouping depends only on the batch order, never on the thread count, so
    // the reduced gradient is bitwise identical for any --threads value.
    constexpr std::size_t group_size = 4;
    const std::size_t max_groups = (static_cast<std::size_t>(batch) + group_size - 1) / group_size;
    std::vector<std::vector<Tensor>> grad_bufs(max_groups);
    for (auto& g : grad_bufs) g = model.params.make_grad_buffers();
    std::vector<double> group_losses(max_groups);
    std::vector<std::size_t> group_counts(max_groups);
    std::vector<Tape> tapes(max_groups);  // long-lived: buffer pools stay warm

    TrainResult result;
    result.total_steps = total_steps;
    result.checkpoint_path = out_dir / (run_name + ".ckpt");
    result.metrics_path = out_dir / (run_name + "_metrics.csv");

    std::vector<Tensor> best_values = model.params.snapshot_values();
    double best_psnr = -1.0;
    const auto t0 = std::chrono::steady_clock::now();
    double loss_accum = 0.0;
    long loss_count = 0;

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // seeded Fisher-Yates shuffle, fresh stream per epoch
        Rng shuffle_rng(derive_seed(cfg.seed, 0x73687566ULL + static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
            const std::size_t bsize = std::min<std::size_t>(batch, order.size() - start);
            const std::size_t groups = (bsize + group_size - 1) / group_size;
            ++step;

            for (std::size_t g = 0; g < groups; ++g)
                for (Tensor& t : grad_bufs[g]) std::fill(t.data.begin(), t.data.end(), 0.0);

            const int h = train_set[0].clean.height, w = train_set[0].clean.width;
            detail::parallel_for_samples(groups, cfg.thread_count(), [&](std::size_t g) {
                const std::size_t g0 = g * group_size;
                const std::size_t count = std::min(group_size, bsize - g0);
                Tensor in({static_cast<int>(count), 1, h, w});
                Tensor tgt({static_cast<int>(count), 1, h, w});
                const std::size_t hw = static_cast<std::size_t>(h) * w;
                for (std::size_t s = 0; s < count; ++s) {
                    const SamplePair& sample = train_set[order[start + g0 + s]];
                    std::copy(sample.degraded.data.begin(), sample.degraded.data.end(),
                              in.data.begin() + static_cast<std::ptrdiff_t>(s * hw));
                    std::copy(sample.clean.data.begin(), sample.clean.data.end(),
                              tgt.data.begin() + static_cast<std::ptrdiff_t>(s * hw));
                }
                Tape& tape = tapes[g];
                tape.reset();
                tape.set_grad_sink(&grad_bufs[g]);
                const int out = model.forward(tape, tape.constant(std::move(in)));
                const int loss = tape.mse_loss(out, tape.constant(std::move(tgt)));
                group_losses[g] = tape.value(loss).data[0];
                group_counts[g] = count;
                tape.backward(loss);
            });

            // batch loss = sample-count-weighted mean of group mse values
            double batch_loss = 0.0;
            for (std::size_t g = 0; g < groups; ++g)
                batch_loss += group_losses[g] * static_cast<double>(group_counts[g]);
            batch_loss /= static_cast<double>(bsize);
            if (!std::isfinite(batch_loss)) {
                std::string seeds;
                for (std::size_t s = 0; s < bsize; ++s)
                    seeds += (s ? "," : "") + std::to_string(train_set[order[start + s]].seed);
                throw TrainError("nan_loss: step " + std::to_string(step) + ", batch seeds [" +
                                 seeds + "]");
            }
            loss_accum += batch_loss;
            ++loss_count;

            // reduce per-group gradients in group order
            model.params.zero_grads();
            for (std::size_t g = 0; g < groups; ++g) {
                const double scale = static_cast<double>(group_counts[g]) / static_cast<double>(bsize);
                for (std::size_t pi = 0; pi < params.size(); ++pi) {
                    const Tensor& src = grad_bufs[g][pi];
                    Tensor& dst = params[pi]->grad;
                    for (std::size_t j = 0; j < src.numel(); ++j)
                        dst.data[j] += scale * src.data[j];
                }
            }

            const double frac =
                total_steps > 1 ? static_cast<double>(step - 1) / static_cast<double>(total_steps - 1)
                                : 0.0;
            const double lr = cfg.lr_initial * std::pow(cfg.lr_final / cfg.lr_initial, frac);
            adam_step(params, adam, lr, cfg.adam);

            if (step % eval_every == 0 || step == total_steps) {
                const EvalSummary ev = evaluate(model, test_set, cfg.thread_count());
                MetricsRecord rec;
                rec.step = step;
                rec.epoch = epoch;
                rec.train_loss = loss_count ? loss_accum / static_cast<double>(loss_count) : 0.0;
                rec.test_psnr = ev.mean_psnr;
                rec.test_rel_l2 = ev.mean_rel_l2;
                rec.wall_time_s =
                    cfg.zero_wall_time
                        ? 0.0
                        : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                              .count();
                result.metrics.push_back(rec);
                loss_accum = 0.0;
                loss_count = 0;
                if (ev.mean_psnr > best_psnr) {
                    best_psnr = ev.mean_psnr;
                    best_values = model.params.snapshot_values();
                }
            }
        }
    }

    result.best_psnr = best_psnr;
    // retained model = best test checkpoint
    model.params.restore_values(best_values);
    save_checkpoint(result.checkpoint_path, to_checkpoint(model));
    detail::write_metrics_csv(result.metrics_path, result.metrics);
    return result;
}

// ---------------------------------------------------------------------------
// Analysis sweeps and filter interpretation.
// ---------------------------------------------------------------------------

/// Mean absolute smoothing residual alpha of a trained model, averaged over
/// the per-layer filters produced on up to n_samples test inputs.
inline double smoothing_alpha(const DiffNetModel& model, const std::vector<SamplePair>& samples,
                              int n_samples = 32) {
    const std::size_t n = std::min<std::size_t>(samples.size(), static_cast<std::size_t>(n_samples));
    if (n == 0) throw TrainError("smoothing_alpha: no samples");
    double acc = 0.0;
    long terms = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<Tensor> filters;
        model.infer(Tensor::from_image(samples[i].degraded), &filters);
        for (const Tensor& zeta : filters) {
            acc += decompose_filter(filter_field_from_zeta(zeta)).alpha;
            ++terms;
        }
    }
    return acc / static_cast<double>(terms);
}

/// Writes one row per (label, psnr) pair as the sweep CSV format.
inline void write_sweep_csv(const std::filesystem::path& path,
                            const std::vector<std::pair<double, double>>& rows,
                            const char* value_name = "psnr") {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw TrainError("sweep: cannot open " + path.string());
    os << "size_or_noise," << value_name << "\n";
    char buf[128];
    for (const auto& [k, v] : rows) {
        std::snprintf(buf, sizeof buf, "%.12g,%.12g\n", k, v);
        os << buf;
    }
}

/// Trains one fresh model per training-set size with an identical protocol
/// and records the retained checkpoint's test PSNR per size.
template <typename MakeModel>
std::vector<std::pair<double, double>> sweep_training_size(
    const std::vector<int>& sizes, const std::vector<SamplePair>& full_train,
    const std::vector<SamplePair>& test_set, MakeModel&& make_model, const TrainConfig& cfg,
    const std::filesystem::path& out_dir) {
    for (std::size_t i = 1; i < sizes.size(); ++i)
        if (sizes[i] <= sizes[i - 1]) throw TrainError("sweep_training_size: sizes must ascend");
    std::vector<std::pair<double, double>> rows;
    for (int size : sizes) {
        if (size > static_cast<int>(full_train.size()))
            throw TrainError("sweep_training_size: size exceeds available samples");
        std::vector<SamplePair> subset(full_train.begin(), full_train.begin() + size);
        auto model = make_model();
        const TrainResult r = train(model, subset, test_set, cfg, out_dir,
                                    "sweep_size_" + std::to_string(size));
        rows.emplace_back(static_cast<double>(size), r.best_psnr);
    }
    write_sweep_csv(out_dir / "sweep_size.csv", rows);
    return rows;
}

/// Per-layer filter maps for one input image: the smoothing residual
/// sum(zeta_i) - zeta_5 and the diagonal filter zeta_5, each exported as a
/// min/max-normalized PGM with the scale recorded in a sidecar file.
inline std::vector<std::filesystem::path> export_filters(const DiffNetModel& model,
                                                         const Image& input,
                                                         const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<Tensor> filters;
    model.infer(Tensor::from_image(input), &filters);
    std::ofstream sidecar(out_dir / "scales.txt", std::ios::binary | std::ios::trunc);
    sidecar << "# layer quantity min max\n";
    std::vector<std::filesystem::path> written;
    auto emit = [&](const Image& im, const std::string& stem, int layer) {
        const ImageStats st = image_stats(im);
        Image norm(im.width, im.height, 0.5);
        if (st.max > st.min)
            for (std::size_t i = 0; i < im.size(); ++i) norm[i] = (im[i] - st.min) / (st.max - st.min);
        const std::filesystem::path p = out_dir / (stem + ".pgm");
        save_image(norm, p);
        char buf[160];
        std::snprintf(buf, sizeof buf, "layer%d %s %.12g %.12g\n", layer, stem.c_str(), st.min,
                      st.max);
        sidecar << buf;
        written.push_back(p);
    };
    for (std::size_t k = 0; k < filters.size(); ++k) {
        const FilterField f = filter_field_from_zeta(filters[k]);
        const FilterDecomposition d = decompose_filter(f);
        Image diag(f.width(), f.height());
        for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = -f.center[i];  // z5
        emit(d.smoothing_part, "layer" + std::to_string(k) + "_smoothing", static_cast<int>(k));
        emit(diag, "layer" + std::to_string(k) + "_diag", static_cast<int>(k));
    }
    return written;
}

}  // namespace diffnet
