#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mstgat/binio.hpp"
#include "mstgat/dataset.hpp"
#include "mstgat/models.hpp"
#include "mstgat/rng.hpp"
#include "mstgat/tape.hpp"

namespace mstgat {

struct TrainConfig {
    std::size_t epochs = 400;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 5.0;
    std::uint64_t seed = 0;
};

// The one-dimensional baselines converge faster and train for half as long.
inline std::size_t default_epochs(ModelKind kind) {
    return (kind == ModelKind::MStgat || kind == ModelKind::Stgat) ? 400 : 200;
}

// Training loss: mean absolute error in normalized units.
inline NodeId loss_node(Tape& tape, NodeId predictions, NodeId targets) {
    return tape.reduce_mean(tape.abs(tape.sub(predictions, targets)));
}

inline double mae_value(const Tensor& predictions, const Tensor& targets) {
    if (!predictions.same_shape(targets))
        throw std::invalid_argument("loss: shape mismatch " + shape_str(predictions.shape()) +
                                    " vs " + shape_str(targets.shape()));
    double acc = 0.0;
    for (std::size_t i = 0; i < predictions.numel(); ++i)
        acc += std::fabs(predictions[i] - targets[i]);
    return acc / static_cast<double>(predictions.numel());
}

// ---------------------------------------------------------------------------
// Adam with global-norm gradient clipping
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<std::pair<std::string, Tensor>> m;
    std::vector<std::pair<std::string, Tensor>> v;
    std::size_t step = 0;

    static AdamState init(const ParamSet& params) {
        AdamState s;
        for (const auto& [name, t] : params.items) {
            s.m.emplace_back(name, Tensor(t.shape(), 0.0));
            s.v.emplace_back(name, Tensor(t.shape(), 0.0));
        }
        return s;
    }
};

inline void adam_step(ParamSet& params, const Gradients& grads, AdamState& state,
                      const TrainConfig& cfg) {
    if (state.m.size() != params.items.size())
        throw std::invalid_argument("adam_step: state does not match parameter set");

    double sq_sum = 0.0;
    for (const auto& [name, p] : params.items) {
        const Tensor& g = grads.at(name);
        if (!g.same_shape(p))
            throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
        for (double v : g.values()) {
            if (!std::isfinite(v))
                throw std::domain_error("adam_step: non-finite gradient for parameter " + name);
            sq_sum += v * v;
        }
    }
    const double norm = std::sqrt(sq_sum);
    const double scale = (norm > cfg.clip_norm && norm > 0.0) ? cfg.clip_norm / norm : 1.0;

    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

    for (std::size_t i = 0; i < params.items.size(); ++i) {
        Tensor& p = params.items[i].second;
        Tensor& m = state.m[i].second;
        Tensor& v = state.v[i].second;
        const Tensor& g = grads.at(params.items[i].first);
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const double gj = g[j] * scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            p[j] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

namespace detail {

// Gathers window rows into a contiguous batch, slicing to the model's input
// channels (speed only for the one-dimensional models).
inline Tensor gather_inputs(const WindowedDataset& ds, const std::vector<std::size_t>& rows,
                            std::size_t channels) {
    const std::size_t n = ds.nodes, h = ds.spec.history;
    Tensor out({rows.size(), n, h, channels});
    for (std::size_t b = 0; b < rows.size(); ++b) {
        const double* src = ds.inputs.data() + rows[b] * n * h * kNumChannels;
        double* dst = out.data() + b * n * h * channels;
        if (channels == kNumChannels) {
            std::copy_n(src, n * h * kNumChannels, dst);
        } else {
            for (std::size_t cell = 0; cell < n * h; ++cell)
                dst[cell] = src[cell * kNumChannels + kChannelSpeed];
        }
    }
    return out;
}

inline Tensor gather_targets(const WindowedDataset& ds, const std::vector<std::size_t>& rows) {
    const std::size_t n = ds.nodes, t = ds.spec.horizon;
    Tensor out({rows.size(), n, t});
    for (std::size_t b = 0; b < rows.size(); ++b)
        std::copy_n(ds.targets.data() + rows[b] * n * t, n * t, out.data() + b * n * t);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

struct MetricsReport {
    double mae = 0.0;
    double rmse = 0.0;
    std::optional<double> mape;  // percent; absent when every cell fell under the floor
    std::size_t cells = 0;
    std::size_t mape_masked = 0;
};

// MAE/RMSE over all cells; MAPE only over cells whose true magnitude clears
// the floor (default 1 mph), so near-zero speeds cannot blow the percentage up.
inline MetricsReport compute_metrics(const Tensor& predicted, const Tensor& truth,
                                     double mape_floor = 1.0) {
    if (!predicted.same_shape(truth))
        throw std::invalid_argument("compute_metrics: shape mismatch " +
                                    shape_str(predicted.shape()) + " vs " +
                                    shape_str(truth.shape()));
    MetricsReport r;
    r.cells = truth.numel();
    double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
    std::size_t pct_count = 0;
    for (std::size_t i = 0; i < truth.numel(); ++i) {
        const double err = predicted[i] - truth[i];
        abs_sum += std::fabs(err);
        sq_sum += err * err;
        if (std::fabs(truth[i]) >= mape_floor) {
            pct_sum += std::fabs(err) / std::fabs(truth[i]);
            ++pct_count;
        }
    }
    const auto n = static_cast<double>(truth.numel());
    r.mae = abs_sum / n;
    r.rmse = std::sqrt(sq_sum / n);
    r.mape_masked = truth.numel() - pct_count;
    if (pct_count > 0) r.mape = 100.0 * pct_sum / static_cast<double>(pct_count);
    return r;
}

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["mae"] = r.mae;
    j["rmse"] = r.rmse;
    if (r.mape)
        j["mape"] = *r.mape;
    else
        j["mape"] = nullptr;
    j["cells"] = r.cells;
    j["mape_masked"] = r.mape_masked;
    return j;
}

// ---------------------------------------------------------------------------
// forward-only evaluation
// ---------------------------------------------------------------------------

// Runs the model over every window of the split in fixed order and collects
// denormalized predictions. Per-row results are independent of how windows
// are grouped into batches, so the report is bit-identical for any batch
// size. Parameters are never mutated.
inline MetricsReport evaluate(const ModelConfig& cfg, const ParamSet& params,
                              const WindowedDataset& split, const Tensor& neighborhood_mask,
                              std::size_t batch_size = 32, double mape_floor = 1.0) {
    if (!params.all_finite()) throw std::invalid_argument("evaluate: non-finite parameters");
    if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be >= 1");
    const std::size_t m = split.size();
    const std::size_t n = split.nodes;
    const std::size_t t = split.spec.horizon;

    Tensor predicted({std::max<std::size_t>(m, 1), n, t});
    Tensor truth({std::max<std::size_t>(m, 1), n, t});
    if (m == 0) throw std::invalid_argument("evaluate: empty split");

    for (std::size_t begin = 0; begin < m; begin += batch_size) {
        const std::size_t count = std::min(batch_size, m - begin);
        std::vector<std::size_t> rows(count);
        std::iota(rows.begin(), rows.end(), begin);
        const Tensor inputs = detail::gather_inputs(split, rows, cfg.input_channels());
        const Tensor preds = model_predict(cfg, params, inputs, neighborhood_mask);
        std::copy_n(preds.data(), count * n * t, predicted.data() + begin * n * t);
    }
    std::copy_n(split.targets.data(), m * n * t, truth.data());

    for (std::size_t i = 0; i < predicted.numel(); ++i) {
        predicted[i] = denormalize_speed(predicted[i], split.stats);
        truth[i] = denormalize_speed(truth[i], split.stats);
    }
    return compute_metrics(predicted, truth, mape_floor);
}

// Zero-shot transfer: windows are built with the training window spec and
// normalized with the training-set statistics; no weight ever changes.
inline MetricsReport transfer_evaluate(const ModelConfig& cfg, const ParamSet& params,
                                       const ObservationTensor& transfer_tensor,
                                       const NormStats& training_stats,
                                       const WindowSpec& spec, const Tensor& neighborhood_mask,
                                       std::size_t batch_size = 32, double mape_floor = 1.0) {
    if (transfer_tensor.values.rank() != 3 ||
        transfer_tensor.values.shape()[2] != kNumChannels) {
        throw std::invalid_argument("transfer_evaluate: tensor channels do not match training");
    }
    const ObservationTensor normalized = normalize(transfer_tensor, training_stats);
    const WindowedDataset windows = make_windows(normalized, spec, training_stats);
    return evaluate(cfg, params, windows, neighborhood_mask, batch_size, mape_floor);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainResult {
    ParamSet params;  // parameters with the best validation loss
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;  // 1-based
    double best_val_loss = std::numeric_limits<double>::infinity();
};

namespace detail {

inline double dataset_loss(const ModelConfig& cfg, const ParamSet& params,
                           const WindowedDataset& ds, const Tensor& mask,
                           std::size_t batch_size) {
    const std::size_t m = ds.size();
    double total = 0.0;
    for (std::size_t begin = 0; begin < m; begin += batch_size) {
        const std::size_t count = std::min(batch_size, m - begin);
        std::vector<std::size_t> rows(count);
        std::iota(rows.begin(), rows.end(), begin);
        const Tensor inputs = gather_inputs(ds, rows, cfg.input_channels());
        const Tensor targets = gather_targets(ds, rows);
        const Tensor preds = model_predict(cfg, params, inputs, mask);
        total += mae_value(preds, targets) * static_cast<double>(count);
    }
    return total / static_cast<double>(m);
}

}  // namespace detail

// Seeded mini-batch training. Windows are reshuffled every epoch from one
// generator, losses are recorded per epoch, and the parameters with the
// lowest validation loss are returned. Identical seed, config and data give
// bit-identical history and parameters.
inline TrainResult train(const ModelConfig& model_cfg, const WindowedDataset& train_split,
                         const WindowedDataset& val_split, const Tensor& neighborhood_mask,
                         const TrainConfig& cfg) {
    if (train_split.empty() || val_split.empty())
        throw std::invalid_argument("train: train and validation splits must be non-empty");
    if (cfg.epochs < 1 || cfg.batch_size < 1 || cfg.learning_rate <= 0.0)
        throw std::invalid_argument("train: bad TrainConfig");

    ParamSet params = init_params(model_cfg, cfg.seed);
    AdamState adam = AdamState::init(params);
    Rng shuffle_rng(cfg.seed ^ 0x5bd1e995u);

    TrainResult result;
    result.history.reserve(cfg.epochs);

    std::vector<std::size_t> order(train_split.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, order.size() - begin);
            const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                                order.begin() +
                                                    static_cast<std::ptrdiff_t>(begin + count));
            const Tensor inputs =
                detail::gather_inputs(train_split, rows, model_cfg.input_channels());
            const Tensor targets = detail::gather_targets(train_split, rows);

            Tape tape;
            const BoundParams bound = bind_params(tape, params);
            const NodeId pred =
                model_forward(tape, model_cfg, bound, tape.constant(inputs), neighborhood_mask);
            const NodeId loss = loss_node(tape, pred, tape.constant(targets));
            const double loss_value = tape.value(loss)[0];
            if (!std::isfinite(loss_value)) {
                throw std::runtime_error("train: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch " +
                                         std::to_string(begin / cfg.batch_size));
            }
            epoch_loss += loss_value * static_cast<double>(count);

            const Gradients grads = tape.backward(loss);
            adam_step(params, grads, adam, cfg);
        }
        EpochRecord rec;
        rec.train_loss = epoch_loss / static_cast<double>(order.size());
        rec.val_loss =
            detail::dataset_loss(model_cfg, params, val_split, neighborhood_mask, cfg.batch_size);
        result.history.push_back(rec);

        if (rec.val_loss < result.best_val_loss) {
            result.best_val_loss = rec.val_loss;
            result.best_epoch = epoch;
            result.params = params;
        }
    }
    return result;
}

inline void save_history_csv(const std::vector<EpochRecord>& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "epoch,train_loss,val_loss\n";
    char buf[80];
    for (std::size_t i = 0; i < history.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i + 1, history[i].train_loss,
                      history[i].val_loss);
        out << buf;
    }
}

// ---------------------------------------------------------------------------
// checkpoints: JSON manifest + little-endian binary tensor blocks
// ---------------------------------------------------------------------------

struct Checkpoint {
    ModelConfig model;
    WindowSpec spec;
    NormStats stats;
    ParamSet params;
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
    const std::string bin_path = prefix + ".bin";
    const std::string json_path = prefix + ".json";

    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + bin_path);
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : ckpt.params.items) {
        write_doubles_le(bin, t.data(), t.numel());
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel();
    }

    nlohmann::json j;
    j["format"] = "mstgat-checkpoint";
    j["version"] = 1;
    j["model"] = model_config_to_json(ckpt.model);
    j["window"] = {{"history", ckpt.spec.history}, {"horizon", ckpt.spec.horizon}};
    j["norm_stats"] = norm_stats_to_json(ckpt.stats);
    j["tensors"] = tensors;
    std::ofstream js(json_path);
    if (!js) throw std::runtime_error("cannot write " + json_path);
    js << j.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& prefix) {
    const std::string bin_path = prefix + ".bin";
    const std::string json_path = prefix + ".json";
    std::ifstream js(json_path);
    if (!js) throw std::runtime_error("cannot open " + json_path);
    nlohmann::json j;
    js >> j;
    if (j.value("format", "") != "mstgat-checkpoint")
        throw std::runtime_error(json_path + ": not a checkpoint manifest");

    Checkpoint ckpt;
    ckpt.model = model_config_from_json(j.at("model"));
    ckpt.spec.history = j.at("window").at("history").get<std::size_t>();
    ckpt.spec.horizon = j.at("window").at("horizon").get<std::size_t>();
    ckpt.stats = norm_stats_from_json(j.at("norm_stats"));

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + bin_path);
    for (const auto& entry : j.at("tensors")) {
        Tensor t(entry.at("shape").get<Shape>());
        read_doubles_le(bin, t.data(), t.numel());
        ckpt.params.add(entry.at("name").get<std::string>(), std::move(t));
    }
    if (!ckpt.params.all_finite())
        throw std::runtime_error(bin_path + ": checkpoint contains non-finite values");
    return ckpt;
}

// ---------------------------------------------------------------------------
// dataset statistics (summary tables)
// ---------------------------------------------------------------------------

struct SummaryStats {
    double min = 0.0, q1 = 0.0, q2 = 0.0, q3 = 0.0, max = 0.0;
    double mean = 0.0, std_dev = 0.0;
};

// Quartiles interpolate linearly between order statistics at p*(n-1);
// standard sample std with the n-1 denominator.
inline SummaryStats summary_stats(std::vector<double> series) {
    if (series.empty()) throw std::invalid_argument("summary_stats: empty series");
    std::sort(series.begin(), series.end());
    const std::size_t n = series.size();
    auto quantile = [&](double p) {
        const double pos = p * static_cast<double>(n - 1);
        const auto lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, n - 1);
        const double frac = pos - static_cast<double>(lo);
        return series[lo] + (series[hi] - series[lo]) * frac;
    };
    SummaryStats s;
    s.min = series.front();
    s.max = series.back();
    s.q1 = quantile(0.25);
    s.q2 = quantile(0.50);
    s.q3 = quantile(0.75);
    double sum = 0.0;
    for (double v : series) sum += v;
    s.mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (double v : series) ss += (v - s.mean) * (v - s.mean);
    s.std_dev = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
    return s;
}

struct OccurrenceStats {
    double low_pct = 0.0;     // visibility < 4 mi
    double medium_pct = 0.0;  // 4 <= v < 7
    double high_pct = 0.0;    // 7 <= v < 10
    double clear_pct = 0.0;   // v == 10
    double closure_pct = 0.0;
};

inline OccurrenceStats occurrence_stats(const std::vector<double>& visibility,
                                        const std::vector<double>& closure) {
    if (visibility.size() != closure.size() || visibility.empty())
        throw std::invalid_argument("occurrence_stats: series must be equal-length, non-empty");
    std::size_t low = 0, medium = 0, high = 0, clear = 0, closed = 0;
    for (double v : visibility) {
        if (v < 4.0)
            ++low;
        else if (v < 7.0)
            ++medium;
        else if (v < 10.0)
            ++high;
        else
            ++clear;
    }
    for (double c : closure)
        if (c > 0.0) ++closed;
    const auto n = static_cast<double>(visibility.size());
    return {100.0 * static_cast<double>(low) / n, 100.0 * static_cast<double>(medium) / n,
            100.0 * static_cast<double>(high) / n, 100.0 * static_cast<double>(clear) / n,
            100.0 * static_cast<double>(closed) / n};
}

}  // namespace mstgat
