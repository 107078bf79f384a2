#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mstgat/binio.hpp"
#include "mstgat/csv.hpp"
#include "mstgat/graph.hpp"
#include "mstgat/tensor.hpp"
#include "mstgat/timeparse.hpp"

namespace mstgat {

constexpr std::int64_t kGridStepSeconds = 300;  // 5-minute intervals
constexpr std::size_t kNumChannels = 4;
inline const std::vector<std::string>& channel_names() {
    static const std::vector<std::string> n = {"speed_mph", "closure_code", "temperature_f",
                                               "visibility_mi"};
    return n;
}

struct TimeGrid {
    std::int64_t start = 0;  // epoch seconds
    std::int64_t step = kGridStepSeconds;
    std::size_t count = 0;

    std::int64_t time_at(std::size_t i) const { return start + static_cast<std::int64_t>(i) * step; }
    std::int64_t end() const { return time_at(count); }

    bool aligned(std::int64_t ts) const { return (ts - start) % step == 0; }
    bool contains(std::int64_t ts) const { return ts >= start && ts < end(); }
    std::size_t index_of(std::int64_t ts) const {
        return static_cast<std::size_t>((ts - start) / step);
    }
};

// ---------------------------------------------------------------------------
// speed
// ---------------------------------------------------------------------------

struct SpeedMatrix {
    TimeGrid grid;
    std::size_t nodes = 0;
    std::vector<double> values;         // [S * N], meaningful where !missing
    std::vector<std::uint8_t> missing;  // [S * N]

    double& at(std::size_t t, std::size_t n) { return values[t * nodes + n]; }
    double at(std::size_t t, std::size_t n) const { return values[t * nodes + n]; }
    bool is_missing(std::size_t t, std::size_t n) const { return missing[t * nodes + n] != 0; }
    void set(std::size_t t, std::size_t n, double v) {
        values[t * nodes + n] = v;
        missing[t * nodes + n] = 0;
    }
};

struct SpeedLoadReport {
    std::vector<double> missing_fraction;     // per node
    std::set<std::int64_t> unknown_stations;  // present in file, absent from graph
    std::size_t unknown_station_rows = 0;
    std::size_t out_of_range_rows = 0;  // aligned but outside the grid span
};

inline const std::vector<std::string>& speed_csv_header() {
    static const std::vector<std::string> h = {"timestamp", "station_id", "speed_mph"};
    return h;
}

inline SpeedMatrix load_speed_series(const std::string& path, const TimeGrid& grid,
                                     const StationGraph& graph, SpeedLoadReport* report = nullptr) {
    const CsvFile csv = read_csv(path, speed_csv_header());
    SpeedMatrix m;
    m.grid = grid;
    m.nodes = graph.node_count();
    m.values.assign(grid.count * m.nodes, 0.0);
    m.missing.assign(grid.count * m.nodes, 1);
    SpeedLoadReport rep;

    for (const auto& row : csv.rows) {
        if (row.size() != 3) throw std::runtime_error(path + ": malformed row");
        const std::int64_t ts = parse_timestamp(row[0]);
        if (!grid.aligned(ts)) {
            throw std::runtime_error(path + ": timestamp " + row[0] + " is off the " +
                                     std::to_string(grid.step) + "s grid");
        }
        std::int64_t sid = 0;
        double speed = 0.0;
        if (!parse_int_field(row[1], sid) || !parse_double_field(row[2], speed))
            throw std::runtime_error(path + ": malformed row for timestamp " + row[0]);
        if (!graph.has_station(sid)) {
            rep.unknown_stations.insert(sid);
            ++rep.unknown_station_rows;
            continue;
        }
        if (!grid.contains(ts)) {
            ++rep.out_of_range_rows;
            continue;
        }
        m.set(grid.index_of(ts), graph.node_index(sid), speed);
    }

    rep.missing_fraction.assign(m.nodes, 0.0);
    for (std::size_t n = 0; n < m.nodes; ++n) {
        std::size_t miss = 0;
        for (std::size_t t = 0; t < grid.count; ++t) miss += m.is_missing(t, n) ? 1 : 0;
        rep.missing_fraction[n] = static_cast<double>(miss) / static_cast<double>(grid.count);
    }
    if (report) *report = std::move(rep);
    return m;
}

// Interior gaps of at most max_gap steps are filled by linear interpolation
// between the bounding observations; longer runs and leading/trailing runs
// stay missing (downstream windowing excludes them).
inline SpeedMatrix fill_speed_gaps(SpeedMatrix m, std::size_t max_gap = 6) {
    const std::size_t s = m.grid.count;
    for (std::size_t n = 0; n < m.nodes; ++n) {
        std::size_t t = 0;
        while (t < s) {
            if (!m.is_missing(t, n)) {
                ++t;
                continue;
            }
            std::size_t run_end = t;
            while (run_end < s && m.is_missing(run_end, n)) ++run_end;
            const bool has_left = t > 0;
            const bool has_right = run_end < s;
            const std::size_t run = run_end - t;
            if (has_left && has_right && run <= max_gap) {
                const double left = m.at(t - 1, n);
                const double right = m.at(run_end, n);
                const double denom = static_cast<double>(run + 1);
                for (std::size_t k = 0; k < run; ++k) {
                    const double frac = static_cast<double>(k + 1) / denom;
                    m.set(t + k, n, left + (right - left) * frac);
                }
            }
            t = run_end;
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// lane closures
// ---------------------------------------------------------------------------

struct ClosureEvent {
    std::string route_id;
    Direction direction = Direction::N;
    double begin_postmile = 0.0;
    double end_postmile = 0.0;
    std::int64_t start_time = 0;
    std::int64_t end_time = 0;
    int closed_lanes = 0;  // 0 = shoulder-only closure
};

inline const std::vector<std::string>& closure_csv_header() {
    static const std::vector<std::string> h = {"route_id",   "direction", "begin_postmile",
                                               "end_postmile", "start_time", "end_time",
                                               "closed_lanes"};
    return h;
}

inline std::vector<ClosureEvent> load_closure_events(const std::string& path) {
    const CsvFile csv = read_csv(path, closure_csv_header());
    std::vector<ClosureEvent> out;
    for (const auto& row : csv.rows) {
        if (row.size() != 7) throw std::runtime_error(path + ": malformed row");
        ClosureEvent e;
        e.route_id = row[0];
        e.direction = parse_direction(row[1]);
        std::int64_t lanes = 0;
        if (!parse_double_field(row[2], e.begin_postmile) ||
            !parse_double_field(row[3], e.end_postmile) || !parse_int_field(row[6], lanes) ||
            lanes < 0)
            throw std::runtime_error(path + ": malformed closure row");
        e.start_time = parse_timestamp(row[4]);
        e.end_time = parse_timestamp(row[5]);
        e.closed_lanes = static_cast<int>(lanes);
        if (e.begin_postmile > e.end_postmile)
            throw std::runtime_error(path + ": begin_postmile > end_postmile");
        if (e.start_time >= e.end_time)
            throw std::runtime_error(path + ": start_time must precede end_time");
        out.push_back(std::move(e));
    }
    return out;
}

struct ClosureWindow {
    std::int64_t start_time = 0;
    std::int64_t end_time = 0;
    int closed_lanes = 0;
};

// Events whose route and direction match the station and whose postmile
// interval contains the station's exact postmile.
inline std::vector<ClosureWindow> match_closures_to_station(const std::vector<ClosureEvent>& events,
                                                            const StationMeta& station) {
    std::vector<ClosureWindow> out;
    for (const auto& e : events) {
        if (e.route_id != station.route_id || e.direction != station.direction) continue;
        if (e.begin_postmile <= station.abs_postmile && station.abs_postmile <= e.end_postmile)
            out.push_back({e.start_time, e.end_time, e.closed_lanes});
    }
    return out;
}

// Per-step closure code: 0 with no overlapping event, otherwise 1 + c/n using
// the largest c among events overlapping the step. Step [t, t+step) overlaps
// event [s, e) iff t < e and s < t+step.
inline std::vector<double> encode_closure_channel(const std::vector<ClosureWindow>& matched,
                                                  int n_lanes, const TimeGrid& grid) {
    if (n_lanes < 1) throw std::invalid_argument("encode_closure_channel: n_lanes must be >= 1");
    for (const auto& w : matched) {
        if (w.closed_lanes > n_lanes) {
            throw std::invalid_argument("closure with " + std::to_string(w.closed_lanes) +
                                        " closed lanes at a " + std::to_string(n_lanes) +
                                        "-lane station");
        }
    }
    std::vector<double> out(grid.count, 0.0);
    for (std::size_t t = 0; t < grid.count; ++t) {
        const std::int64_t lo = grid.time_at(t);
        const std::int64_t hi = lo + grid.step;
        int max_c = -1;
        for (const auto& w : matched) {
            if (lo < w.end_time && w.start_time < hi) max_c = std::max(max_c, w.closed_lanes);
        }
        if (max_c >= 0)
            out[t] = 1.0 + static_cast<double>(max_c) / static_cast<double>(n_lanes);
    }
    return out;
}

// ---------------------------------------------------------------------------
// weather
// ---------------------------------------------------------------------------

struct WeatherStationMeta {
    std::int64_t weather_station_id = 0;
    double latitude = 0.0;
    double longitude = 0.0;
};

inline const std::vector<std::string>& weather_station_csv_header() {
    static const std::vector<std::string> h = {"weather_station_id", "latitude", "longitude"};
    return h;
}

inline std::vector<WeatherStationMeta> load_weather_stations(const std::string& path) {
    const CsvFile csv = read_csv(path, weather_station_csv_header());
    std::vector<WeatherStationMeta> out;
    std::set<std::int64_t> seen;
    for (const auto& row : csv.rows) {
        WeatherStationMeta m;
        if (row.size() != 3 || !parse_int_field(row[0], m.weather_station_id) ||
            !parse_double_field(row[1], m.latitude) || !parse_double_field(row[2], m.longitude))
            throw std::runtime_error(path + ": malformed weather station row");
        if (!seen.insert(m.weather_station_id).second)
            throw std::runtime_error(path + ": duplicate weather_station_id " +
                                     std::to_string(m.weather_station_id));
        out.push_back(m);
    }
    if (out.empty()) throw std::runtime_error(path + ": no weather stations");
    return out;
}

struct WeatherRecord {
    std::int64_t weather_station_id = 0;
    std::int64_t timestamp = 0;
    std::optional<double> temperature_f;
    std::optional<double> visibility_mi;
};

inline const std::vector<std::string>& weather_csv_header() {
    static const std::vector<std::string> h = {"weather_station_id", "timestamp", "temperature_f",
                                               "visibility_mi"};
    return h;
}

inline std::vector<WeatherRecord> load_weather_records(const std::string& path) {
    const CsvFile csv = read_csv(path, weather_csv_header());
    std::vector<WeatherRecord> out;
    for (const auto& row : csv.rows) {
        if (row.size() != 4) throw std::runtime_error(path + ": malformed weather row");
        WeatherRecord r;
        if (!parse_int_field(row[0], r.weather_station_id))
            throw std::runtime_error(path + ": malformed weather row");
        r.timestamp = parse_timestamp(row[1]);
        double v = 0.0;
        if (!row[2].empty()) {
            if (!parse_double_field(row[2], v))
                throw std::runtime_error(path + ": bad temperature \"" + row[2] + "\"");
            r.temperature_f = v;
        }
        if (!row[3].empty()) {
            if (!parse_double_field(row[3], v))
                throw std::runtime_error(path + ": bad visibility \"" + row[3] + "\"");
            if (v < 0.0 || v > 10.0)
                throw std::runtime_error(path + ": visibility " + row[3] + " outside [0,10]");
            r.visibility_mi = v;
        }
        out.push_back(r);
    }
    return out;
}

struct WeatherSeries {
    std::int64_t weather_station_id = 0;
    std::vector<double> temperature_f;
    std::vector<double> visibility_mi;
    std::vector<std::uint8_t> temperature_missing;
    std::vector<std::uint8_t> visibility_missing;
};

inline double haversine_miles(double lat1, double lon1, double lat2, double lon2) {
    constexpr double kEarthRadiusKm = 6371.0;
    constexpr double kKmPerMile = 1.609344;
    const double rad = std::numbers::pi / 180.0;
    const double dlat = (lat2 - lat1) * rad;
    const double dlon = (lon2 - lon1) * rad;
    const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(lat1 * rad) * std::cos(lat2 * rad) * std::sin(dlon / 2) *
                         std::sin(dlon / 2);
    const double d_km = 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(a)));
    return d_km / kKmPerMile;
}

// Great-circle nearest weather station per traffic station; ties go to the
// smaller weather_station_id so the result is independent of input order.
inline std::map<std::int64_t, std::int64_t> assign_nearest_weather_station(
    const std::vector<StationMeta>& stations,
    const std::vector<WeatherStationMeta>& weather_stations) {
    if (weather_stations.empty())
        throw std::invalid_argument("assign_nearest_weather_station: no weather stations");
    std::map<std::int64_t, std::int64_t> out;
    for (const auto& s : stations) {
        double best_dist = std::numeric_limits<double>::infinity();
        std::int64_t best_id = 0;
        bool have = false;
        for (const auto& w : weather_stations) {
            const double d = haversine_miles(s.latitude, s.longitude, w.latitude, w.longitude);
            if (!have || d < best_dist || (d == best_dist && w.weather_station_id < best_id)) {
                best_dist = d;
                best_id = w.weather_station_id;
                have = true;
            }
        }
        out[s.station_id] = best_id;
    }
    return out;
}

// Snap-and-fill for one dataset's weather records.
//  1. snap: grid step g takes the last record with timestamp in (g-step, g]
//  2. interior gaps of <= max_gap steps: temporal linear interpolation
//  3. anything still missing: nearest other weather station (haversine
//     ascending, ties by id) that has a stage-2 value at that step
// A step no station can fill is an error.
inline std::vector<WeatherSeries> resample_and_fill_weather(
    const std::vector<WeatherRecord>& records,
    const std::vector<WeatherStationMeta>& weather_stations, const TimeGrid& grid,
    std::size_t max_gap = 6) {
    const std::size_t s = grid.count;
    const std::size_t nw = weather_stations.size();

    std::map<std::int64_t, std::size_t> ws_index;
    for (std::size_t i = 0; i < nw; ++i) ws_index[weather_stations[i].weather_station_id] = i;

    struct Channel {
        std::vector<double> value;
        std::vector<std::uint8_t> missing;
        std::vector<std::int64_t> snap_ts;  // timestamp backing each snapped cell
    };
    std::vector<Channel> temp(nw), vis(nw);
    for (std::size_t i = 0; i < nw; ++i) {
        for (Channel* c : {&temp[i], &vis[i]}) {
            c->value.assign(s, 0.0);
            c->missing.assign(s, 1);
            c->snap_ts.assign(s, std::numeric_limits<std::int64_t>::min());
        }
    }

    for (const auto& r : records) {
        auto it = ws_index.find(r.weather_station_id);
        if (it == ws_index.end())
            throw std::runtime_error("weather record for unknown station " +
                                     std::to_string(r.weather_station_id));
        // record at ts lands on the first grid step at or after it (ceil)
        const std::int64_t offset = r.timestamp - grid.start;
        const std::int64_t idx = offset / grid.step + (offset % grid.step > 0 ? 1 : 0);
        if (idx < 0 || idx >= static_cast<std::int64_t>(s)) continue;
        const auto g = static_cast<std::size_t>(idx);
        auto snap = [&](Channel& c, double v) {
            if (r.timestamp >= c.snap_ts[g]) {
                c.value[g] = v;
                c.missing[g] = 0;
                c.snap_ts[g] = r.timestamp;
            }
        };
        if (r.temperature_f) snap(temp[it->second], *r.temperature_f);
        if (r.visibility_mi) snap(vis[it->second], *r.visibility_mi);
    }

    auto interpolate = [&](Channel& c) {
        std::size_t t = 0;
        while (t < s) {
            if (!c.missing[t]) {
                ++t;
                continue;
            }
            std::size_t run_end = t;
            while (run_end < s && c.missing[run_end]) ++run_end;
            if (t > 0 && run_end < s && run_end - t <= max_gap) {
                const double left = c.value[t - 1];
                const double right = c.value[run_end];
                const double denom = static_cast<double>(run_end - t + 1);
                for (std::size_t k = t; k < run_end; ++k) {
                    c.value[k] = left + (right - left) * static_cast<double>(k - t + 1) / denom;
                    c.missing[k] = 0;
                }
            }
            t = run_end;
        }
    };
    for (std::size_t i = 0; i < nw; ++i) {
        interpolate(temp[i]);
        interpolate(vis[i]);
    }

    // stage-2 snapshot is the donor pool for spatial fallback
    const std::vector<Channel> temp_base = temp;
    const std::vector<Channel> vis_base = vis;

    std::vector<std::vector<std::size_t>> fallback_order(nw);
    for (std::size_t i = 0; i < nw; ++i) {
        std::vector<std::size_t> order;
        for (std::size_t j = 0; j < nw; ++j)
            if (j != i) order.push_back(j);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const auto& wi = weather_stations[i];
            const double da = haversine_miles(wi.latitude, wi.longitude,
                                              weather_stations[a].latitude,
                                              weather_stations[a].longitude);
            const double db = haversine_miles(wi.latitude, wi.longitude,
                                              weather_stations[b].latitude,
                                              weather_stations[b].longitude);
            if (da != db) return da < db;
            return weather_stations[a].weather_station_id < weather_stations[b].weather_station_id;
        });
        fallback_order[i] = std::move(order);
    }

    auto spatial_fill = [&](std::vector<Channel>& chans, const std::vector<Channel>& base,
                            const char* what) {
        for (std::size_t i = 0; i < nw; ++i) {
            for (std::size_t t = 0; t < s; ++t) {
                if (!chans[i].missing[t]) continue;
                bool filled = false;
                for (std::size_t j : fallback_order[i]) {
                    if (!base[j].missing[t]) {
                        chans[i].value[t] = base[j].value[t];
                        chans[i].missing[t] = 0;
                        filled = true;
                        break;
                    }
                }
                if (!filled) {
                    throw std::runtime_error(std::string("no station can supply ") + what +
                                             " at step " + std::to_string(t) + " (" +
                                             format_timestamp(grid.time_at(t)) + ")");
                }
            }
        }
    };
    spatial_fill(temp, temp_base, "temperature");
    spatial_fill(vis, vis_base, "visibility");

    std::vector<WeatherSeries> out(nw);
    for (std::size_t i = 0; i < nw; ++i) {
        out[i].weather_station_id = weather_stations[i].weather_station_id;
        out[i].temperature_f = std::move(temp[i].value);
        out[i].visibility_mi = std::move(vis[i].value);
        out[i].temperature_missing.assign(s, 0);
        out[i].visibility_missing.assign(s, 0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// assembled observation tensor
// ---------------------------------------------------------------------------

enum Channel : std::size_t {
    kChannelSpeed = 0,
    kChannelClosure = 1,
    kChannelTemperature = 2,
    kChannelVisibility = 3,
};

struct ObservationTensor {
    TimeGrid grid;
    std::vector<std::int64_t> node_ids;
    Tensor values;                           // [S, N, 4]
    std::vector<std::uint8_t> speed_missing;  // [S * N]

    std::size_t steps() const { return grid.count; }
    std::size_t nodes() const { return node_ids.size(); }

    double& at(std::size_t t, std::size_t n, std::size_t c) {
        return values[(t * nodes() + n) * kNumChannels + c];
    }
    double at(std::size_t t, std::size_t n, std::size_t c) const {
        return values[(t * nodes() + n) * kNumChannels + c];
    }
    bool is_speed_missing(std::size_t t, std::size_t n) const {
        return speed_missing[t * nodes() + n] != 0;
    }
};

inline ObservationTensor assemble_observation_tensor(
    const SpeedMatrix& speed, const std::vector<ClosureEvent>& events,
    const std::vector<WeatherSeries>& weather,
    const std::map<std::int64_t, std::int64_t>& station_to_weather, const StationGraph& graph,
    const TimeGrid& grid) {
    const std::size_t s = grid.count;
    const std::size_t n = graph.node_count();
    if (speed.grid.count != s || speed.nodes != n)
        throw std::invalid_argument("assemble_observation_tensor: speed matrix is " +
                                    std::to_string(speed.grid.count) + "x" +
                                    std::to_string(speed.nodes) + ", expected " +
                                    std::to_string(s) + "x" + std::to_string(n));

    std::map<std::int64_t, const WeatherSeries*> series_by_id;
    for (const auto& w : weather) {
        if (w.temperature_f.size() != s || w.visibility_mi.size() != s)
            throw std::invalid_argument("assemble_observation_tensor: weather series length");
        series_by_id[w.weather_station_id] = &w;
    }

    ObservationTensor out;
    out.grid = grid;
    out.node_ids = graph.node_ids();
    out.values = Tensor({s, n, kNumChannels}, 0.0);
    out.speed_missing = speed.missing;

    for (std::size_t node = 0; node < n; ++node) {
        const StationMeta& st = graph.station(node);
        const auto matched = match_closures_to_station(events, st);
        const auto closure = encode_closure_channel(matched, st.num_lanes, grid);

        auto ws_it = station_to_weather.find(st.station_id);
        if (ws_it == station_to_weather.end())
            throw std::invalid_argument("no weather assignment for station " +
                                        std::to_string(st.station_id));
        auto series_it = series_by_id.find(ws_it->second);
        if (series_it == series_by_id.end())
            throw std::invalid_argument("no weather series for weather station " +
                                        std::to_string(ws_it->second));
        const WeatherSeries& ws = *series_it->second;

        for (std::size_t t = 0; t < s; ++t) {
            out.at(t, node, kChannelSpeed) = speed.at(t, node);
            out.at(t, node, kChannelClosure) = closure[t];
            out.at(t, node, kChannelTemperature) = ws.temperature_f[t];
            out.at(t, node, kChannelVisibility) = ws.visibility_mi[t];
            if (closure[t] != 0.0 && (closure[t] < 1.0 || closure[t] > 2.0))
                throw std::logic_error("closure code outside {0} U [1,2]");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// persistence: flat little-endian binary + JSON sidecar. Missing speed cells
// are stored as NaN (the sidecar records the convention).
// ---------------------------------------------------------------------------

inline void save_observation_tensor(const ObservationTensor& tensor, const std::string& bin_path,
                                    const std::string& json_path) {
    std::vector<double> disk = tensor.values.values();
    const std::size_t n = tensor.nodes();
    for (std::size_t t = 0; t < tensor.steps(); ++t)
        for (std::size_t node = 0; node < n; ++node)
            if (tensor.is_speed_missing(t, node))
                disk[(t * n + node) * kNumChannels + kChannelSpeed] =
                    std::numeric_limits<double>::quiet_NaN();

    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + bin_path);
    write_doubles_le(bin, disk.data(), disk.size());
    if (!bin) throw std::runtime_error("write failed: " + bin_path);

    nlohmann::json j;
    j["shape"] = {tensor.steps(), tensor.nodes(), kNumChannels};
    j["grid"] = {{"start", format_timestamp(tensor.grid.start)},
                 {"step_seconds", tensor.grid.step},
                 {"count", tensor.grid.count}};
    j["nodes"] = tensor.node_ids;
    j["channels"] = channel_names();
    j["missing_encoding"] = "nan";
    std::ofstream js(json_path);
    if (!js) throw std::runtime_error("cannot write " + json_path);
    js << j.dump(2) << '\n';
}

inline ObservationTensor load_observation_tensor(const std::string& bin_path,
                                                 const std::string& json_path) {
    std::ifstream js(json_path);
    if (!js) throw std::runtime_error("cannot open " + json_path);
    nlohmann::json j;
    js >> j;

    ObservationTensor out;
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3 || shape[2] != kNumChannels)
        throw std::runtime_error(json_path + ": bad tensor shape");
    out.grid.start = parse_timestamp(j.at("grid").at("start").get<std::string>());
    out.grid.step = j.at("grid").at("step_seconds").get<std::int64_t>();
    out.grid.count = j.at("grid").at("count").get<std::size_t>();
    out.node_ids = j.at("nodes").get<std::vector<std::int64_t>>();
    if (out.grid.count != shape[0] || out.node_ids.size() != shape[1])
        throw std::runtime_error(json_path + ": sidecar inconsistent with shape");

    std::vector<double> disk(shape[0] * shape[1] * shape[2]);
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + bin_path);
    read_doubles_le(bin, disk.data(), disk.size());

    out.speed_missing.assign(shape[0] * shape[1], 0);
    for (std::size_t t = 0; t < shape[0]; ++t) {
        for (std::size_t node = 0; node < shape[1]; ++node) {
            double& v = disk[(t * shape[1] + node) * kNumChannels + kChannelSpeed];
            if (std::isnan(v)) {
                out.speed_missing[t * shape[1] + node] = 1;
                v = 0.0;
            }
        }
    }
    for (double v : disk)
        if (std::isnan(v)) throw std::runtime_error(bin_path + ": NaN outside the speed channel");
    out.values = Tensor({shape[0], shape[1], shape[2]}, std::move(disk));
    return out;
}

}  // namespace mstgat
