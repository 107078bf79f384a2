#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mstgat/ingest.hpp"
#include "mstgat/rng.hpp"
#include "mstgat/timeparse.hpp"

using namespace mstgat;
namespace fs = std::filesystem;

namespace {

const std::int64_t kT0 = parse_timestamp("2022-01-01T00:00:00");

fs::path write_temp(const std::string& name, const std::string& content) {
    const fs::path p = fs::temp_directory_path() / name;
    std::ofstream out(p);
    out << content;
    return p;
}

StationMeta station(std::int64_t id, std::string route, Direction dir, double pm, int lanes,
                    double lat, double lon) {
    StationMeta m;
    m.station_id = id;
    m.route_id = std::move(route);
    m.direction = dir;
    m.abs_postmile = pm;
    m.num_lanes = lanes;
    m.latitude = lat;
    m.longitude = lon;
    return m;
}

StationGraph two_station_graph() {
    return build_station_graph({station(1, "80", Direction::E, 1.0, 4, 38.0, -121.0),
                                station(2, "80", Direction::E, 2.0, 4, 38.0, -121.1)});
}

}  // namespace

TEST_CASE("timestamp parsing") {
    CHECK(parse_timestamp("1970-01-01T00:00:00") == 0);
    CHECK(parse_timestamp("1970-01-01 00:05:00") == 300);
    CHECK(parse_timestamp("2022-01-01T00:00:00Z") == kT0);
    CHECK(format_timestamp(kT0) == "2022-01-01T00:00:00");
    CHECK(parse_timestamp(format_timestamp(kT0 + 12345)) == kT0 + 12345);
    CHECK_THROWS_WITH(parse_timestamp("not-a-time"),
                      Catch::Matchers::ContainsSubstring("not-a-time"));
}

TEST_CASE("load_speed_series") {
    const StationGraph graph = two_station_graph();
    const TimeGrid grid{kT0, 300, 3};

    SECTION("complete file has no missing cells") {
        std::string body = "timestamp,station_id,speed_mph\n";
        for (int t = 0; t < 3; ++t)
            for (int sid : {1, 2})
                body += format_timestamp(kT0 + t * 300) + "," + std::to_string(sid) + ",65\n";
        const auto p = write_temp("speed_ok.csv", body);
        SpeedLoadReport rep;
        const SpeedMatrix m = load_speed_series(p.string(), grid, graph, &rep);
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t n = 0; n < 2; ++n) CHECK_FALSE(m.is_missing(t, n));
        CHECK(rep.missing_fraction == std::vector<double>{0.0, 0.0});
    }

    SECTION("one absent cell is flagged, nothing else") {
        std::string body = "timestamp,station_id,speed_mph\n";
        for (int t = 0; t < 3; ++t)
            for (int sid : {1, 2}) {
                if (t == 1 && sid == 2) continue;
                body += format_timestamp(kT0 + t * 300) + "," + std::to_string(sid) + ",65\n";
            }
        const auto p = write_temp("speed_gap.csv", body);
        const SpeedMatrix m = load_speed_series(p.string(), grid, graph);
        CHECK(m.is_missing(1, 1));
        CHECK_FALSE(m.is_missing(1, 0));
        CHECK_FALSE(m.is_missing(0, 1));
    }

    SECTION("off-grid timestamp is rejected by name") {
        const auto p = write_temp("speed_offgrid.csv",
                                  "timestamp,station_id,speed_mph\n"
                                  "2022-01-01T00:02:30,1,65\n");
        CHECK_THROWS_WITH(load_speed_series(p.string(), grid, graph),
                          Catch::Matchers::ContainsSubstring("00:02:30"));
    }

    SECTION("stations absent from the graph are reported and ignored") {
        const auto p = write_temp("speed_unknown.csv",
                                  "timestamp,station_id,speed_mph\n"
                                  "2022-01-01T00:00:00,1,65\n"
                                  "2022-01-01T00:00:00,77,60\n");
        SpeedLoadReport rep;
        const SpeedMatrix m = load_speed_series(p.string(), grid, graph, &rep);
        CHECK(rep.unknown_stations == std::set<std::int64_t>{77});
        CHECK(rep.unknown_station_rows == 1);
        CHECK_FALSE(m.is_missing(0, 0));
    }
}

TEST_CASE("fill_speed_gaps") {
    auto matrix_from = [](const std::vector<double>& vals, const std::vector<int>& miss) {
        SpeedMatrix m;
        m.grid = TimeGrid{kT0, 300, vals.size()};
        m.nodes = 1;
        m.values = vals;
        m.missing.assign(vals.size(), 0);
        for (std::size_t i = 0; i < vals.size(); ++i) m.missing[i] = miss[i] ? 1 : 0;
        return m;
    };

    SECTION("short gap is linearly interpolated") {
        const SpeedMatrix filled =
            fill_speed_gaps(matrix_from({10, 0, 0, 16}, {0, 1, 1, 0}));
        CHECK(filled.at(1, 0) == Catch::Approx(12.0).margin(1e-12));
        CHECK(filled.at(2, 0) == Catch::Approx(14.0).margin(1e-12));
        CHECK_FALSE(filled.is_missing(1, 0));
    }

    SECTION("run longer than max_gap is untouched") {
        const SpeedMatrix filled = fill_speed_gaps(
            matrix_from({10, 0, 0, 0, 0, 0, 0, 0, 16}, {0, 1, 1, 1, 1, 1, 1, 1, 0}), 6);
        for (std::size_t t = 1; t <= 7; ++t) CHECK(filled.is_missing(t, 0));
    }

    SECTION("complete series passes through unchanged") {
        const SpeedMatrix src = matrix_from({1, 2, 3}, {0, 0, 0});
        const SpeedMatrix filled = fill_speed_gaps(src);
        CHECK(filled.values == src.values);
    }

    SECTION("leading and trailing runs stay missing") {
        const SpeedMatrix filled = fill_speed_gaps(matrix_from({0, 5, 0}, {1, 0, 1}));
        CHECK(filled.is_missing(0, 0));
        CHECK(filled.is_missing(2, 0));
    }

    SECTION("interpolation is exact on affine signals") {
        Rng rng(5);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t len = 30;
            const double a = rng.uniform(-2.0, 2.0), b = rng.uniform(20.0, 70.0);
            std::vector<double> vals(len);
            std::vector<int> miss(len, 0);
            for (std::size_t t = 0; t < len; ++t) vals[t] = a * static_cast<double>(t) + b;
            const std::size_t start = 1 + rng.below(20);
            const std::size_t run = 1 + rng.below(6);
            for (std::size_t k = start; k < start + run && k + 1 < len; ++k) miss[k] = 1;
            SpeedMatrix holes = matrix_from(vals, miss);
            for (std::size_t t = 0; t < len; ++t)
                if (miss[t]) holes.values[t] = -1e9;
            const SpeedMatrix filled = fill_speed_gaps(holes);
            for (std::size_t t = 0; t < len; ++t) {
                CHECK_FALSE(filled.is_missing(t, 0));
                CHECK(std::fabs(filled.at(t, 0) - vals[t]) < 1e-9);
            }
        }
    }
}

TEST_CASE("closure matching and encoding") {
    ClosureEvent event;
    event.route_id = "80";
    event.direction = Direction::E;
    event.begin_postmile = 2.0;
    event.end_postmile = 3.0;
    event.start_time = kT0;
    event.end_time = kT0 + 300;
    event.closed_lanes = 1;

    SECTION("postmile containment with matching route and direction") {
        CHECK(match_closures_to_station({event}, station(1, "80", Direction::E, 2.5, 4, 0, 0))
                  .size() == 1);
        CHECK(match_closures_to_station({event}, station(1, "80", Direction::E, 4.0, 4, 0, 0))
                  .empty());
        CHECK(match_closures_to_station({event}, station(1, "80", Direction::W, 2.5, 4, 0, 0))
                  .empty());
    }

    SECTION("no events encodes to all zeros") {
        const auto code = encode_closure_channel({}, 4, TimeGrid{kT0, 300, 5});
        for (double v : code) CHECK(v == 0.0);
    }

    SECTION("shoulder-only closure encodes to exactly 1") {
        const auto code =
            encode_closure_channel({{kT0 + 300, kT0 + 600, 0}}, 4, TimeGrid{kT0, 300, 3});
        CHECK(code == std::vector<double>{0.0, 1.0, 0.0});
    }

    SECTION("two of four lanes encodes to 1.5") {
        const auto code = encode_closure_channel({{kT0, kT0 + 300, 2}}, 4, TimeGrid{kT0, 300, 1});
        CHECK(code[0] == 1.5);
    }

    SECTION("whole closed-lane range follows 1 + c/n") {
        const int n = 5;
        for (int c = 0; c <= n; ++c) {
            const auto code =
                encode_closure_channel({{kT0, kT0 + 300, c}}, n, TimeGrid{kT0, 300, 1});
            CHECK(code[0] == 1.0 + static_cast<double>(c) / n);
        }
    }

    SECTION("more closed lanes than exist is rejected") {
        CHECK_THROWS_AS(encode_closure_channel({{kT0, kT0 + 300, 5}}, 4, TimeGrid{kT0, 300, 1}),
                        std::invalid_argument);
    }

    SECTION("boundary touching is not an overlap") {
        // event covering exactly [t1, t2) must not bleed into neighbors
        const auto code =
            encode_closure_channel({{kT0 + 300, kT0 + 600, 1}}, 4, TimeGrid{kT0, 300, 3});
        CHECK(code[0] == 0.0);
        CHECK(code[1] == 1.25);
        CHECK(code[2] == 0.0);
    }

    SECTION("overlapping events take the maximum closed-lane count") {
        const auto code = encode_closure_channel(
            {{kT0, kT0 + 900, 1}, {kT0 + 300, kT0 + 600, 3}}, 4, TimeGrid{kT0, 300, 3});
        CHECK(code == std::vector<double>{1.25, 1.75, 1.25});
    }

    SECTION("matches the brute-force interval oracle on random instances") {
        Rng rng(31);
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t n_stations = 1 + rng.below(20);
            const std::size_t n_events = rng.below(51);
            const std::size_t n_steps = 1 + rng.below(200);
            const TimeGrid grid{kT0, 300, n_steps};

            std::vector<StationMeta> stations;
            for (std::size_t i = 0; i < n_stations; ++i)
                stations.push_back(station(static_cast<std::int64_t>(i + 1),
                                           std::to_string(rng.below(2)),
                                           rng.uniform() < 0.5 ? Direction::E : Direction::W,
                                           std::floor(rng.uniform(0.0, 10.0) * 4.0) / 4.0,
                                           2 + static_cast<int>(rng.below(4)), 0, 0));

            std::vector<ClosureEvent> events;
            for (std::size_t e = 0; e < n_events; ++e) {
                ClosureEvent ev;
                ev.route_id = std::to_string(rng.below(2));
                ev.direction = rng.uniform() < 0.5 ? Direction::E : Direction::W;
                ev.begin_postmile = std::floor(rng.uniform(0.0, 10.0) * 4.0) / 4.0;
                ev.end_postmile = ev.begin_postmile + std::floor(rng.uniform(0.0, 3.0) * 4.0) / 4.0;
                const std::int64_t s0 =
                    kT0 + static_cast<std::int64_t>(rng.below(n_steps * 300 + 600)) - 300;
                ev.start_time = s0;
                ev.end_time = s0 + 1 + static_cast<std::int64_t>(rng.below(1800));
                ev.closed_lanes = static_cast<int>(rng.below(3));  // <= min lanes ever generated
                events.push_back(std::move(ev));
            }

            for (const auto& st : stations) {
                const auto got =
                    encode_closure_channel(match_closures_to_station(events, st), st.num_lanes,
                                           grid);
                // O(events x steps) direct evaluation per station
                for (std::size_t t = 0; t < n_steps; ++t) {
                    const std::int64_t lo = grid.time_at(t);
                    const std::int64_t hi = lo + grid.step;
                    int max_c = -1;
                    for (const auto& ev : events) {
                        const bool spatial = ev.route_id == st.route_id &&
                                             ev.direction == st.direction &&
                                             ev.begin_postmile <= st.abs_postmile &&
                                             st.abs_postmile <= ev.end_postmile;
                        const bool temporal = lo < ev.end_time && ev.start_time < hi;
                        if (spatial && temporal) max_c = std::max(max_c, ev.closed_lanes);
                    }
                    const double expect =
                        max_c < 0 ? 0.0 : 1.0 + static_cast<double>(max_c) / st.num_lanes;
                    REQUIRE(got[t] == expect);
                    if (got[t] != 0.0) {
                        REQUIRE(got[t] >= 1.0);
                        REQUIRE(got[t] <= 2.0);
                    }
                }
            }
        }
    }
}

TEST_CASE("nearest weather station assignment") {
    const std::vector<StationMeta> stations = {
        station(1, "80", Direction::E, 1.0, 4, 38.00, -121.00),
        station(2, "80", Direction::E, 2.0, 4, 38.90, -121.00)};

    SECTION("single weather station takes everything") {
        const auto m = assign_nearest_weather_station(stations, {{700, 40.0, -120.0}});
        CHECK(m.at(1) == 700);
        CHECK(m.at(2) == 700);
    }

    SECTION("strictly nearer station wins, verified by haversine") {
        const std::vector<WeatherStationMeta> ws = {{700, 38.05, -121.00}, {800, 38.80, -121.00}};
        const auto m = assign_nearest_weather_station(stations, ws);
        CHECK(haversine_miles(38.00, -121.00, 38.05, -121.00) <
              haversine_miles(38.00, -121.00, 38.80, -121.00));
        CHECK(m.at(1) == 700);
        CHECK(m.at(2) == 800);
    }

    SECTION("exact ties break toward the smaller id") {
        const std::vector<WeatherStationMeta> ws = {{900, 38.10, -121.00}, {300, 38.10, -121.00}};
        const auto m = assign_nearest_weather_station(stations, ws);
        CHECK(m.at(1) == 300);
    }

    SECTION("assignment is invariant to weather station ordering") {
        std::vector<WeatherStationMeta> ws = {{700, 38.05, -121.0},
                                              {800, 38.80, -121.0},
                                              {900, 38.05, -121.0}};
        const auto a = assign_nearest_weather_station(stations, ws);
        std::reverse(ws.begin(), ws.end());
        const auto b = assign_nearest_weather_station(stations, ws);
        CHECK(a == b);
    }
}

TEST_CASE("weather resampling and filling") {
    const TimeGrid grid{kT0, 300, 10};
    const std::vector<WeatherStationMeta> two_ws = {{700, 38.0, -121.0}, {800, 39.0, -121.0}};

    auto record = [](std::int64_t ws, std::int64_t ts, double temp,
                     double vis) -> WeatherRecord {
        WeatherRecord r;
        r.weather_station_id = ws;
        r.timestamp = ts;
        r.temperature_f = temp;
        r.visibility_mi = vis;
        return r;
    };

    SECTION("records exactly on the grid pass through") {
        std::vector<WeatherRecord> recs;
        for (std::size_t t = 0; t < 10; ++t) {
            recs.push_back(record(700, grid.time_at(t), 60.0 + t, 10.0));
            recs.push_back(record(800, grid.time_at(t), 50.0, 8.0));
        }
        const auto series = resample_and_fill_weather(recs, two_ws, grid);
        REQUIRE(series.size() == 2);
        for (std::size_t t = 0; t < 10; ++t) {
            CHECK(series[0].temperature_f[t] == 60.0 + t);
            CHECK(series[1].visibility_mi[t] == 8.0);
        }
    }

    SECTION("a two-step interior gap interpolates 60 -> 62 -> 64 -> 66") {
        std::vector<WeatherRecord> recs;
        for (std::size_t t = 0; t < 10; ++t) {
            recs.push_back(record(800, grid.time_at(t), 50.0, 9.0));
            if (t == 1 || t == 2) continue;
            recs.push_back(record(700, grid.time_at(t), t == 0 ? 60.0 : 66.0, 10.0));
        }
        const auto series = resample_and_fill_weather(recs, two_ws, grid);
        CHECK(series[0].temperature_f[0] == 60.0);
        CHECK(series[0].temperature_f[1] == Catch::Approx(62.0).margin(1e-12));
        CHECK(series[0].temperature_f[2] == Catch::Approx(64.0).margin(1e-12));
        CHECK(series[0].temperature_f[3] == 66.0);
    }

    SECTION("gaps beyond max_gap borrow from the nearest station") {
        std::vector<WeatherRecord> recs;
        recs.push_back(record(700, grid.time_at(0), 70.0, 10.0));
        recs.push_back(record(700, grid.time_at(9), 70.0, 10.0));
        for (std::size_t t = 0; t < 10; ++t) recs.push_back(record(800, grid.time_at(t), 55.0, 9.0));
        const auto series = resample_and_fill_weather(recs, two_ws, grid, 6);
        for (std::size_t t = 1; t <= 8; ++t) CHECK(series[0].temperature_f[t] == 55.0);
        CHECK(series[0].temperature_f[0] == 70.0);
    }

    SECTION("irregular records snap to the following grid step") {
        std::vector<WeatherRecord> recs;
        // 00:03 -> step 1 (00:05); a later record in the same window wins
        recs.push_back(record(700, kT0 + 180, 61.0, 10.0));
        recs.push_back(record(700, kT0 + 240, 62.0, 10.0));
        for (std::size_t t = 0; t < 10; ++t) recs.push_back(record(800, grid.time_at(t), 50.0, 9.0));
        const auto series = resample_and_fill_weather(recs, two_ws, grid, 0);
        CHECK(series[0].temperature_f[1] == 62.0);
        CHECK(series[0].temperature_f[0] == 50.0);  // nothing within step 0's window
    }

    SECTION("a step no station can fill is an error naming the step") {
        std::vector<WeatherRecord> recs = {record(700, grid.time_at(0), 60.0, 10.0)};
        CHECK_THROWS_WITH(resample_and_fill_weather(recs, two_ws, grid),
                          Catch::Matchers::ContainsSubstring("step"));
    }

    SECTION("interpolation is exact on affine signals") {
        Rng rng(9);
        for (int trial = 0; trial < 10; ++trial) {
            const double a = rng.uniform(-0.5, 0.5), b = rng.uniform(40.0, 70.0);
            std::vector<WeatherRecord> recs;
            // keep the hole interior so both interpolation bounds exist
            const std::size_t hole_start = 1 + rng.below(3);
            const std::size_t hole_len = 1 + rng.below(5);
            for (std::size_t t = 0; t < 10; ++t) {
                recs.push_back(record(800, grid.time_at(t), 50.0, 9.0));
                if (t >= hole_start && t < hole_start + hole_len) continue;
                recs.push_back(record(700, grid.time_at(t), a * t + b, 10.0));
            }
            const auto series = resample_and_fill_weather(recs, two_ws, grid);
            for (std::size_t t = 0; t < 10; ++t)
                CHECK(std::fabs(series[0].temperature_f[t] - (a * t + b)) < 1e-9);
        }
    }
}

TEST_CASE("assemble_observation_tensor") {
    const StationGraph graph = two_station_graph();
    const TimeGrid grid{kT0, 300, 10};

    SpeedMatrix speed;
    speed.grid = grid;
    speed.nodes = 2;
    speed.values.assign(20, 65.0);
    speed.missing.assign(20, 0);
    speed.missing[3 * 2 + 1] = 1;  // (t=3, node 1)

    std::vector<ClosureEvent> events(1);
    events[0].route_id = "80";
    events[0].direction = Direction::E;
    events[0].begin_postmile = 0.5;
    events[0].end_postmile = 1.5;
    events[0].start_time = kT0;
    events[0].end_time = kT0 + 600;
    events[0].closed_lanes = 2;

    std::vector<WeatherSeries> weather(1);
    weather[0].weather_station_id = 700;
    weather[0].temperature_f.assign(10, 58.0);
    weather[0].visibility_mi.assign(10, 10.0);

    const std::map<std::int64_t, std::int64_t> assignment = {{1, 700}, {2, 700}};
    const ObservationTensor tensor =
        assemble_observation_tensor(speed, events, weather, assignment, graph, grid);

    SECTION("shape and channel layout") {
        CHECK(tensor.values.shape() == Shape{10, 2, 4});
        CHECK(tensor.at(0, 0, kChannelSpeed) == 65.0);
        CHECK(tensor.at(0, 0, kChannelClosure) == 1.5);  // station 1 at pm 1.0 under the event
        CHECK(tensor.at(0, 1, kChannelClosure) == 0.0);
        CHECK(tensor.at(2, 0, kChannelClosure) == 0.0);  // event ended
        CHECK(tensor.at(5, 1, kChannelTemperature) == 58.0);
        CHECK(tensor.at(5, 1, kChannelVisibility) == 10.0);
    }

    SECTION("speed missing flags propagate unchanged") {
        CHECK(tensor.is_speed_missing(3, 1));
        CHECK_FALSE(tensor.is_speed_missing(3, 0));
    }

    SECTION("shape mismatch is rejected") {
        SpeedMatrix bad = speed;
        bad.nodes = 1;
        bad.values.resize(10);
        bad.missing.resize(10);
        CHECK_THROWS_AS(
            assemble_observation_tensor(bad, events, weather, assignment, graph, grid),
            std::invalid_argument);
    }

    SECTION("binary round trip preserves values and missing flags") {
        const auto bin = fs::temp_directory_path() / "tensor_rt.bin";
        const auto js = fs::temp_directory_path() / "tensor_rt.json";
        save_observation_tensor(tensor, bin.string(), js.string());
        const ObservationTensor loaded = load_observation_tensor(bin.string(), js.string());
        CHECK(loaded.grid.start == tensor.grid.start);
        CHECK(loaded.node_ids == tensor.node_ids);
        CHECK(loaded.speed_missing == tensor.speed_missing);
        for (std::size_t t = 0; t < tensor.steps(); ++t)
            for (std::size_t n = 0; n < tensor.nodes(); ++n)
                for (std::size_t c = 0; c < kNumChannels; ++c) {
                    if (c == kChannelSpeed && tensor.is_speed_missing(t, n)) continue;
                    CHECK(loaded.at(t, n, c) == tensor.at(t, n, c));
                }
    }
}
