#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mstgat/binio.hpp"
#include "mstgat/ingest.hpp"
#include "mstgat/tensor.hpp"

namespace mstgat {

struct WindowSpec {
    std::size_t history = 0;  // |H| input steps
    std::size_t horizon = 0;  // |T| predicted steps
};

// 30/45/60-minute horizons on the 5-minute grid, history twice the horizon.
inline WindowSpec horizon_to_windowspec(int horizon_minutes) {
    if (horizon_minutes <= 0 || horizon_minutes % 5 != 0) {
        throw std::invalid_argument("horizon " + std::to_string(horizon_minutes) +
                                    " min is not a positive multiple of 5");
    }
    const auto t = static_cast<std::size_t>(horizon_minutes / 5);
    return WindowSpec{2 * t, t};
}

// Per-channel z-score statistics for the continuous channels, computed from
// the training range only. The closure code is categorical-ish and passes
// through untouched.
struct NormStats {
    double speed_mean = 0.0, speed_std = 1.0;
    double temperature_mean = 0.0, temperature_std = 1.0;
    double visibility_mean = 0.0, visibility_std = 1.0;

    double mean(std::size_t channel) const {
        switch (channel) {
            case kChannelSpeed: return speed_mean;
            case kChannelTemperature: return temperature_mean;
            case kChannelVisibility: return visibility_mean;
            default: return 0.0;
        }
    }
    double std_dev(std::size_t channel) const {
        switch (channel) {
            case kChannelSpeed: return speed_std;
            case kChannelTemperature: return temperature_std;
            case kChannelVisibility: return visibility_std;
            default: return 1.0;
        }
    }
};

// Sample mean/std (n-1 denominator) over steps [range_begin, range_end) of
// every node. Missing speed cells are excluded; a near-constant channel gets
// std 1 so normalization stays finite.
inline NormStats compute_norm_stats(const ObservationTensor& tensor, std::size_t range_begin,
                                    std::size_t range_end) {
    if (range_begin >= range_end || range_end > tensor.steps())
        throw std::invalid_argument("compute_norm_stats: empty or out-of-range train range");

    auto channel_stats = [&](std::size_t c, bool skip_missing, double& mean_out, double& std_out) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t t = range_begin; t < range_end; ++t) {
            for (std::size_t n = 0; n < tensor.nodes(); ++n) {
                if (skip_missing && tensor.is_speed_missing(t, n)) continue;
                sum += tensor.at(t, n, c);
                ++count;
            }
        }
        if (count == 0) throw std::invalid_argument("compute_norm_stats: no observed cells");
        const double mean = sum / static_cast<double>(count);
        double ss = 0.0;
        for (std::size_t t = range_begin; t < range_end; ++t) {
            for (std::size_t n = 0; n < tensor.nodes(); ++n) {
                if (skip_missing && tensor.is_speed_missing(t, n)) continue;
                const double d = tensor.at(t, n, c) - mean;
                ss += d * d;
            }
        }
        const double std_dev =
            count > 1 ? std::sqrt(ss / static_cast<double>(count - 1)) : 0.0;
        mean_out = mean;
        std_out = std_dev < 1e-9 ? 1.0 : std_dev;
    };

    NormStats s;
    channel_stats(kChannelSpeed, true, s.speed_mean, s.speed_std);
    channel_stats(kChannelTemperature, false, s.temperature_mean, s.temperature_std);
    channel_stats(kChannelVisibility, false, s.visibility_mean, s.visibility_std);
    return s;
}

inline ObservationTensor normalize(ObservationTensor tensor, const NormStats& stats) {
    for (std::size_t t = 0; t < tensor.steps(); ++t) {
        for (std::size_t n = 0; n < tensor.nodes(); ++n) {
            for (std::size_t c : {kChannelSpeed, kChannelTemperature, kChannelVisibility}) {
                double& v = tensor.at(t, n, c);
                v = (v - stats.mean(c)) / stats.std_dev(c);
            }
        }
    }
    return tensor;
}

inline double denormalize_speed(double z, const NormStats& stats) {
    return z * stats.speed_std + stats.speed_mean;
}

inline double normalize_speed(double mph, const NormStats& stats) {
    return (mph - stats.speed_mean) / stats.speed_std;
}

// Sliding windows over a normalized tensor. Window m reads inputs from steps
// [m, m+|H|) and speed targets from [m+|H|, m+|H|+|T|); windows touching a
// missing speed cell anywhere in that span are dropped.
struct WindowedDataset {
    WindowSpec spec;
    NormStats stats;  // carried along so predictions can be mapped back to mph
    std::size_t nodes = 0;
    Tensor inputs;   // [M, N, |H|, F]
    Tensor targets;  // [M, N, |T|], normalized speed
    std::vector<std::size_t> window_starts;
    std::size_t dropped = 0;

    std::size_t size() const { return window_starts.size(); }
    bool empty() const { return window_starts.empty(); }
};

// Start indices of windows whose full [m, m+|H|+|T|) span is free of missing
// speed cells. Shared by make_windows and by callers that need the kept set
// before normalization (the training range for NormStats depends on it).
inline std::vector<std::size_t> kept_window_starts(const ObservationTensor& tensor,
                                                   const WindowSpec& spec) {
    const std::size_t s = tensor.steps();
    const std::size_t n = tensor.nodes();
    const std::size_t h = spec.history;
    const std::size_t t = spec.horizon;
    if (h == 0 || t == 0) throw std::invalid_argument("make_windows: |H| and |T| must be >= 1");
    if (s < h + t)
        throw std::invalid_argument("make_windows: series length " + std::to_string(s) +
                                    " is shorter than |H|+|T| = " + std::to_string(h + t));
    const std::size_t candidates = s - h - t + 1;
    std::vector<std::size_t> keep;
    keep.reserve(candidates);
    for (std::size_t m = 0; m < candidates; ++m) {
        bool ok = true;
        for (std::size_t step = m; step < m + h + t && ok; ++step)
            for (std::size_t node = 0; node < n && ok; ++node)
                ok = !tensor.is_speed_missing(step, node);
        if (ok) keep.push_back(m);
    }
    return keep;
}

inline WindowedDataset make_windows(const ObservationTensor& tensor, const WindowSpec& spec,
                                    const NormStats& stats) {
    const std::size_t s = tensor.steps();
    const std::size_t n = tensor.nodes();
    const std::size_t h = spec.history;
    const std::size_t t = spec.horizon;
    const std::size_t candidates = s >= h + t ? s - h - t + 1 : 0;
    const std::vector<std::size_t> keep = kept_window_starts(tensor, spec);

    WindowedDataset ds;
    ds.spec = spec;
    ds.stats = stats;
    ds.nodes = n;
    ds.dropped = candidates - keep.size();
    ds.window_starts = keep;
    if (keep.empty()) {
        throw std::invalid_argument("make_windows: every candidate window overlaps missing data");
    }
    const std::size_t m_count = keep.size();
    ds.inputs = Tensor({m_count, n, h, kNumChannels});
    ds.targets = Tensor({m_count, n, t});
    for (std::size_t m = 0; m < m_count; ++m) {
        const std::size_t start = keep[m];
        for (std::size_t node = 0; node < n; ++node) {
            for (std::size_t k = 0; k < h; ++k)
                for (std::size_t c = 0; c < kNumChannels; ++c)
                    ds.inputs[((m * n + node) * h + k) * kNumChannels + c] =
                        tensor.at(start + k, node, c);
            for (std::size_t k = 0; k < t; ++k)
                ds.targets[(m * n + node) * t + k] = tensor.at(start + h + k, node, kChannelSpeed);
        }
    }
    return ds;
}

struct DatasetSplits {
    WindowedDataset train, val, test;
};

namespace detail {

inline WindowedDataset take_windows(const WindowedDataset& ds, std::size_t begin,
                                    std::size_t count) {
    WindowedDataset out;
    out.spec = ds.spec;
    out.stats = ds.stats;
    out.nodes = ds.nodes;
    out.dropped = 0;
    const std::size_t n = ds.nodes;
    const std::size_t h = ds.spec.history;
    const std::size_t t = ds.spec.horizon;
    out.window_starts.assign(ds.window_starts.begin() + static_cast<std::ptrdiff_t>(begin),
                             ds.window_starts.begin() + static_cast<std::ptrdiff_t>(begin + count));
    out.inputs = Tensor({count, n, h, kNumChannels});
    out.targets = Tensor({count, n, t});
    std::copy_n(ds.inputs.data() + begin * n * h * kNumChannels, count * n * h * kNumChannels,
                out.inputs.data());
    std::copy_n(ds.targets.data() + begin * n * t, count * n * t, out.targets.data());
    return out;
}

}  // namespace detail

// Contiguous-in-time 72/14/14 split by window start index. Integer arithmetic
// implements the floors exactly.
inline DatasetSplits split_dataset(const WindowedDataset& ds) {
    const std::size_t m = ds.size();
    if (m < 3) throw std::invalid_argument("split_dataset: need at least 3 windows, got " +
                                           std::to_string(m));
    const std::size_t train = m * 72 / 100;
    const std::size_t val = m * 14 / 100;
    const std::size_t test = m - train - val;
    if (train == 0 || val == 0 || test == 0)
        throw std::invalid_argument("split_dataset: a split came out empty with M = " +
                                    std::to_string(m));
    DatasetSplits out;
    out.train = detail::take_windows(ds, 0, train);
    out.val = detail::take_windows(ds, train, val);
    out.test = detail::take_windows(ds, train + val, test);
    return out;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

inline nlohmann::json norm_stats_to_json(const NormStats& s) {
    return {{"speed_mean", s.speed_mean},           {"speed_std", s.speed_std},
            {"temperature_mean", s.temperature_mean}, {"temperature_std", s.temperature_std},
            {"visibility_mean", s.visibility_mean},   {"visibility_std", s.visibility_std}};
}

inline NormStats norm_stats_from_json(const nlohmann::json& j) {
    NormStats s;
    s.speed_mean = j.at("speed_mean").get<double>();
    s.speed_std = j.at("speed_std").get<double>();
    s.temperature_mean = j.at("temperature_mean").get<double>();
    s.temperature_std = j.at("temperature_std").get<double>();
    s.visibility_mean = j.at("visibility_mean").get<double>();
    s.visibility_std = j.at("visibility_std").get<double>();
    return s;
}

inline void save_windows(const WindowedDataset& ds, const std::string& bin_path,
                         const std::string& json_path) {
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + bin_path);
    write_doubles_le(bin, ds.inputs.data(), ds.inputs.numel());
    write_doubles_le(bin, ds.targets.data(), ds.targets.numel());

    nlohmann::json j;
    j["inputs_shape"] = ds.inputs.shape();
    j["targets_shape"] = ds.targets.shape();
    j["spec"] = {{"history", ds.spec.history}, {"horizon", ds.spec.horizon}};
    j["norm_stats"] = norm_stats_to_json(ds.stats);
    j["window_starts"] = ds.window_starts;
    j["dropped_windows"] = ds.dropped;
    std::ofstream js(json_path);
    if (!js) throw std::runtime_error("cannot write " + json_path);
    js << j.dump(2) << '\n';
}

inline WindowedDataset load_windows(const std::string& bin_path, const std::string& json_path) {
    std::ifstream js(json_path);
    if (!js) throw std::runtime_error("cannot open " + json_path);
    nlohmann::json j;
    js >> j;

    WindowedDataset ds;
    const auto in_shape = j.at("inputs_shape").get<Shape>();
    const auto tg_shape = j.at("targets_shape").get<Shape>();
    if (in_shape.size() != 4 || tg_shape.size() != 3)
        throw std::runtime_error(json_path + ": bad window shapes");
    ds.spec.history = j.at("spec").at("history").get<std::size_t>();
    ds.spec.horizon = j.at("spec").at("horizon").get<std::size_t>();
    ds.stats = norm_stats_from_json(j.at("norm_stats"));
    ds.window_starts = j.at("window_starts").get<std::vector<std::size_t>>();
    ds.dropped = j.at("dropped_windows").get<std::size_t>();
    ds.nodes = in_shape[1];

    ds.inputs = Tensor(in_shape);
    ds.targets = Tensor(tg_shape);
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + bin_path);
    read_doubles_le(bin, ds.inputs.data(), ds.inputs.numel());
    read_doubles_le(bin, ds.targets.data(), ds.targets.numel());
    return ds;
}

}  // namespace mstgat
