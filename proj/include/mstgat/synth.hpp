#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mstgat/graph.hpp"
#include "mstgat/ingest.hpp"
#include "mstgat/rng.hpp"
#include "mstgat/timeparse.hpp"

namespace mstgat {

// Deterministic corridor generator. Speeds are causally driven by injected
// lane closures and fog with a one-step onset, so the exogenous channels
// contain real predictive signal before the effect reaches the speed series:
//
//   speed(t,i) = base * diurnal(t)
//              * (1 - drop * closed_fraction(t-1,i))
//              * (1 - vis_sens * (10 - visibility(t-1,i)) / 10)
//              + noise
struct SynthConfig {
    std::size_t nodes = 8;
    std::size_t steps = 1500;
    std::uint64_t seed = 0;

    double base_speed_mph = 65.0;
    double diurnal_amplitude = 0.15;  // fractional midday dip of the daily cycle
    double noise_std_mph = 0.5;

    int lanes = 4;
    double closure_rate = 0.01;  // per station, per step, start probability
    double closure_mean_duration_steps = 6.0;
    double closure_drop = 0.4;         // fraction of speed lost at full closure
    double shoulder_prob = 0.15;       // closures with zero closed lanes
    double min_closed_fraction = 0.5;  // non-shoulder closures close >= this share of lanes

    double visibility_event_rate = 0.004;  // per weather station, per step
    double visibility_mean_duration_steps = 24.0;
    double visibility_floor_mi = 1.0;
    double visibility_sensitivity = 0.3;  // fraction of speed lost at zero visibility

    double temperature_mean_f = 60.0;
    double temperature_amplitude_f = 15.0;

    std::string route_id = "SYN";
    std::string start_time = "2022-01-01T00:00:00";
};

inline nlohmann::json synth_config_to_json(const SynthConfig& c) {
    return {{"nodes", c.nodes},
            {"steps", c.steps},
            {"seed", c.seed},
            {"base_speed_mph", c.base_speed_mph},
            {"diurnal_amplitude", c.diurnal_amplitude},
            {"noise_std_mph", c.noise_std_mph},
            {"lanes", c.lanes},
            {"closure_rate", c.closure_rate},
            {"closure_mean_duration_steps", c.closure_mean_duration_steps},
            {"closure_drop", c.closure_drop},
            {"shoulder_prob", c.shoulder_prob},
            {"min_closed_fraction", c.min_closed_fraction},
            {"visibility_event_rate", c.visibility_event_rate},
            {"visibility_mean_duration_steps", c.visibility_mean_duration_steps},
            {"visibility_floor_mi", c.visibility_floor_mi},
            {"visibility_sensitivity", c.visibility_sensitivity},
            {"temperature_mean_f", c.temperature_mean_f},
            {"temperature_amplitude_f", c.temperature_amplitude_f},
            {"route_id", c.route_id},
            {"start_time", c.start_time}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.nodes = j.value("nodes", c.nodes);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.base_speed_mph = j.value("base_speed_mph", c.base_speed_mph);
    c.diurnal_amplitude = j.value("diurnal_amplitude", c.diurnal_amplitude);
    c.noise_std_mph = j.value("noise_std_mph", c.noise_std_mph);
    c.lanes = j.value("lanes", c.lanes);
    c.closure_rate = j.value("closure_rate", c.closure_rate);
    c.closure_mean_duration_steps =
        j.value("closure_mean_duration_steps", c.closure_mean_duration_steps);
    c.closure_drop = j.value("closure_drop", c.closure_drop);
    c.shoulder_prob = j.value("shoulder_prob", c.shoulder_prob);
    c.min_closed_fraction = j.value("min_closed_fraction", c.min_closed_fraction);
    c.visibility_event_rate = j.value("visibility_event_rate", c.visibility_event_rate);
    c.visibility_mean_duration_steps =
        j.value("visibility_mean_duration_steps", c.visibility_mean_duration_steps);
    c.visibility_floor_mi = j.value("visibility_floor_mi", c.visibility_floor_mi);
    c.visibility_sensitivity = j.value("visibility_sensitivity", c.visibility_sensitivity);
    c.temperature_mean_f = j.value("temperature_mean_f", c.temperature_mean_f);
    c.temperature_amplitude_f = j.value("temperature_amplitude_f", c.temperature_amplitude_f);
    c.route_id = j.value("route_id", c.route_id);
    c.start_time = j.value("start_time", c.start_time);
    return c;
}

struct SynthOutput {
    SynthConfig config;
    TimeGrid grid;
    std::vector<StationMeta> stations;
    std::vector<WeatherStationMeta> weather_stations;
    std::vector<ClosureEvent> events;
    std::vector<WeatherSeries> weather;  // complete series, one per weather station
    ObservationTensor truth;             // assembled ground truth, no missing cells
};

namespace detail {

constexpr std::size_t kStepsPerDay = 288;  // 24h of 5-minute steps

// geometric duration with the given mean, >= 1 step
inline std::size_t geometric_duration(Rng& rng, double mean_steps) {
    const double p = 1.0 / std::max(1.0, mean_steps);
    const double u = rng.uniform();
    if (u >= 1.0 || p >= 1.0) return 1;
    return 1 + static_cast<std::size_t>(std::floor(std::log(1.0 - u) / std::log(1.0 - p)));
}

}  // namespace detail

inline SynthOutput generate_corridor(const SynthConfig& cfg) {
    if (cfg.nodes < 2) throw std::invalid_argument("generate_corridor: need at least 2 nodes");
    if (cfg.steps < 2) throw std::invalid_argument("generate_corridor: need at least 2 steps");
    if (cfg.lanes < 1) throw std::invalid_argument("generate_corridor: lanes must be >= 1");
    if (cfg.closure_drop <= 0.0 || cfg.closure_drop >= 1.0 || cfg.visibility_sensitivity < 0.0 ||
        cfg.visibility_sensitivity >= 1.0)
        throw std::invalid_argument("generate_corridor: drop fractions must lie in (0,1)");

    SynthOutput out;
    out.config = cfg;
    out.grid = TimeGrid{parse_timestamp(cfg.start_time), kGridStepSeconds, cfg.steps};

    // linear corridor on one (route, direction) at unit postmile spacing
    for (std::size_t i = 0; i < cfg.nodes; ++i) {
        StationMeta m;
        m.station_id = 101 + static_cast<std::int64_t>(i);
        m.route_id = cfg.route_id;
        m.direction = Direction::E;
        m.abs_postmile = 1.0 + static_cast<double>(i);
        m.num_lanes = cfg.lanes;
        m.latitude = 38.5;
        m.longitude = -121.5 + 0.02 * static_cast<double>(i);
        out.stations.push_back(std::move(m));
    }
    // two weather stations anchoring the corridor ends
    out.weather_stations.push_back({701, 38.5, -121.5});
    out.weather_stations.push_back(
        {702, 38.5, -121.5 + 0.02 * static_cast<double>(cfg.nodes - 1)});

    const std::size_t s = cfg.steps;
    const std::size_t n = cfg.nodes;

    // --- lane closures: at most one active event per station ---
    Rng closure_rng(cfg.seed ^ 0xC1053CAFEULL);
    std::vector<std::vector<int>> closed_lanes(n, std::vector<int>(s, -1));  // -1 = no event
    const int min_closed =
        std::min(cfg.lanes, static_cast<int>(std::ceil(cfg.min_closed_fraction * cfg.lanes)));
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t t = 0;
        while (t < s) {
            if (closure_rng.uniform() < cfg.closure_rate) {
                const std::size_t dur = std::min(
                    detail::geometric_duration(closure_rng, cfg.closure_mean_duration_steps),
                    s - t);
                int c = 0;
                if (closure_rng.uniform() >= cfg.shoulder_prob) {
                    const int span = cfg.lanes - min_closed + 1;
                    c = min_closed + static_cast<int>(closure_rng.below(
                                         static_cast<std::uint64_t>(span)));
                }
                ClosureEvent e;
                e.route_id = cfg.route_id;
                e.direction = Direction::E;
                e.begin_postmile = out.stations[i].abs_postmile;
                e.end_postmile = out.stations[i].abs_postmile;
                e.start_time = out.grid.time_at(t);
                e.end_time = out.grid.time_at(t + dur);
                e.closed_lanes = c;
                out.events.push_back(std::move(e));
                for (std::size_t k = t; k < t + dur; ++k) closed_lanes[i][k] = c;
                t += dur;
            } else {
                ++t;
            }
        }
    }

    // --- weather: daily temperature cycle plus fog events per station ---
    Rng weather_rng(cfg.seed ^ 0x7EA7BEEFULL);
    out.weather.resize(out.weather_stations.size());
    for (std::size_t w = 0; w < out.weather_stations.size(); ++w) {
        WeatherSeries& ws = out.weather[w];
        ws.weather_station_id = out.weather_stations[w].weather_station_id;
        ws.temperature_f.resize(s);
        ws.visibility_mi.assign(s, 10.0);
        ws.temperature_missing.assign(s, 0);
        ws.visibility_missing.assign(s, 0);
        for (std::size_t t = 0; t < s; ++t) {
            const double phase = 2.0 * std::numbers::pi *
                                 static_cast<double>(t % detail::kStepsPerDay) /
                                 static_cast<double>(detail::kStepsPerDay);
            ws.temperature_f[t] =
                cfg.temperature_mean_f - cfg.temperature_amplitude_f * std::cos(phase);
        }
        std::size_t t = 0;
        while (t < s) {
            if (weather_rng.uniform() < cfg.visibility_event_rate) {
                const std::size_t dur = std::min(
                    detail::geometric_duration(weather_rng, cfg.visibility_mean_duration_steps),
                    s - t);
                const double vis = weather_rng.uniform(cfg.visibility_floor_mi, 4.0);
                for (std::size_t k = t; k < t + dur; ++k) ws.visibility_mi[k] = vis;
                t += dur;
            } else {
                ++t;
            }
        }
    }

    const auto assignment = assign_nearest_weather_station(out.stations, out.weather_stations);
    std::vector<std::size_t> ws_of_node(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::int64_t wid = assignment.at(out.stations[i].station_id);
        for (std::size_t w = 0; w < out.weather_stations.size(); ++w)
            if (out.weather_stations[w].weather_station_id == wid) ws_of_node[i] = w;
    }

    // --- speed: diurnal baseline scaled down by lagged closure/fog state ---
    Rng noise_rng(cfg.seed ^ 0x0015EEDULL);
    SpeedMatrix speed;
    speed.grid = out.grid;
    speed.nodes = n;
    speed.values.assign(s * n, 0.0);
    speed.missing.assign(s * n, 0);
    for (std::size_t t = 0; t < s; ++t) {
        const double day_phase = 2.0 * std::numbers::pi *
                                 static_cast<double>(t % detail::kStepsPerDay) /
                                 static_cast<double>(detail::kStepsPerDay);
        const double diurnal = 1.0 - cfg.diurnal_amplitude * 0.5 * (1.0 - std::cos(day_phase));
        for (std::size_t i = 0; i < n; ++i) {
            double closed_fraction = 0.0;
            double visibility = 10.0;
            if (t > 0) {
                if (closed_lanes[i][t - 1] >= 0)
                    closed_fraction = static_cast<double>(closed_lanes[i][t - 1]) /
                                      static_cast<double>(cfg.lanes);
                visibility = out.weather[ws_of_node[i]].visibility_mi[t - 1];
            }
            const double closure_factor = 1.0 - cfg.closure_drop * closed_fraction;
            const double vis_factor =
                1.0 - cfg.visibility_sensitivity * (10.0 - visibility) / 10.0;
            double v = cfg.base_speed_mph * diurnal * closure_factor * vis_factor;
            if (cfg.noise_std_mph > 0.0) v += noise_rng.normal(0.0, cfg.noise_std_mph);
            speed.set(t, i, v);
        }
    }

    const StationGraph graph = build_station_graph(out.stations);
    out.truth = assemble_observation_tensor(speed, out.events, out.weather, assignment, graph,
                                            out.grid);
    return out;
}

// ---------------------------------------------------------------------------
// export in exactly the CSV formats the ingest side consumes
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    return out;
}

}  // namespace detail

struct SynthFiles {
    std::string stations, speed, closures, weather_stations, weather, truth_bin, truth_json,
        config;
};

inline SynthFiles export_synth(const SynthOutput& out, const std::string& directory) {
    namespace fs = std::filesystem;
    const fs::path dir(directory);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir))
        throw std::runtime_error("export_synth: cannot create directory " + directory);

    SynthFiles files;
    files.stations = (dir / "stations.csv").string();
    files.speed = (dir / "speed.csv").string();
    files.closures = (dir / "closures.csv").string();
    files.weather_stations = (dir / "weather_stations.csv").string();
    files.weather = (dir / "weather.csv").string();
    files.truth_bin = (dir / "truth.bin").string();
    files.truth_json = (dir / "truth.json").string();
    files.config = (dir / "synth_config.json").string();

    {
        auto f = detail::open_out(files.stations);
        f << "station_id,route_id,direction,abs_postmile,num_lanes,latitude,longitude\n";
        for (const auto& s : out.stations) {
            f << s.station_id << ',' << s.route_id << ',' << direction_char(s.direction) << ','
              << detail::fmt_double(s.abs_postmile) << ',' << s.num_lanes << ','
              << detail::fmt_double(s.latitude) << ',' << detail::fmt_double(s.longitude)
              << '\n';
        }
    }
    {
        auto f = detail::open_out(files.speed);
        f << "timestamp,station_id,speed_mph\n";
        for (std::size_t t = 0; t < out.truth.steps(); ++t) {
            const std::string ts = format_timestamp(out.grid.time_at(t));
            for (std::size_t i = 0; i < out.truth.nodes(); ++i) {
                f << ts << ',' << out.truth.node_ids[i] << ','
                  << detail::fmt_double(out.truth.at(t, i, kChannelSpeed)) << '\n';
            }
        }
    }
    {
        auto f = detail::open_out(files.closures);
        f << "route_id,direction,begin_postmile,end_postmile,start_time,end_time,closed_lanes\n";
        for (const auto& e : out.events) {
            f << e.route_id << ',' << direction_char(e.direction) << ','
              << detail::fmt_double(e.begin_postmile) << ','
              << detail::fmt_double(e.end_postmile) << ',' << format_timestamp(e.start_time)
              << ',' << format_timestamp(e.end_time) << ',' << e.closed_lanes << '\n';
        }
    }
    {
        auto f = detail::open_out(files.weather_stations);
        f << "weather_station_id,latitude,longitude\n";
        for (const auto& w : out.weather_stations) {
            f << w.weather_station_id << ',' << detail::fmt_double(w.latitude) << ','
              << detail::fmt_double(w.longitude) << '\n';
        }
    }
    {
        auto f = detail::open_out(files.weather);
        f << "weather_station_id,timestamp,temperature_f,visibility_mi\n";
        for (std::size_t t = 0; t < out.grid.count; ++t) {
            const std::string ts = format_timestamp(out.grid.time_at(t));
            for (const auto& w : out.weather) {
                f << w.weather_station_id << ',' << ts << ','
                  << detail::fmt_double(w.temperature_f[t]) << ','
                  << detail::fmt_double(w.visibility_mi[t]) << '\n';
            }
        }
    }
    save_observation_tensor(out.truth, files.truth_bin, files.truth_json);
    {
        auto f = detail::open_out(files.config);
        f << synth_config_to_json(out.config).dump(2) << '\n';
    }
    return files;
}

}  // namespace mstgat
