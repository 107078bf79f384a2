#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "mstgat/graph.hpp"
#include "mstgat/rng.hpp"

using namespace mstgat;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& content) {
    const fs::path p = fs::temp_directory_path() / name;
    std::ofstream out(p);
    out << content;
    return p;
}

StationMeta station(std::int64_t id, std::string route, Direction dir, double pm, int lanes = 3) {
    StationMeta m;
    m.station_id = id;
    m.route_id = std::move(route);
    m.direction = dir;
    m.abs_postmile = pm;
    m.num_lanes = lanes;
    m.latitude = 38.0;
    m.longitude = -121.0;
    return m;
}

std::set<std::pair<std::int64_t, std::int64_t>> edge_ids(const StationGraph& g) {
    std::set<std::pair<std::int64_t, std::int64_t>> out;
    for (const auto& [from, to] : g.edges())
        out.insert({g.station(from).station_id, g.station(to).station_id});
    return out;
}

// all-pairs reference: (a,b) is an edge iff same route+direction, a precedes b
// in travel order, and no third station lies strictly between them
std::set<std::pair<std::int64_t, std::int64_t>> brute_force_edges(
    const std::vector<StationMeta>& stations) {
    std::set<std::pair<std::int64_t, std::int64_t>> out;
    for (const auto& a : stations) {
        for (const auto& b : stations) {
            if (a.station_id == b.station_id) continue;
            if (a.route_id != b.route_id || a.direction != b.direction) continue;
            const bool fwd = increasing_postmile(a.direction);
            const double lo = fwd ? a.abs_postmile : b.abs_postmile;
            const double hi = fwd ? b.abs_postmile : a.abs_postmile;
            if (lo >= hi) continue;
            bool blocked = false;
            for (const auto& c : stations) {
                if (c.station_id == a.station_id || c.station_id == b.station_id) continue;
                if (c.route_id != a.route_id || c.direction != a.direction) continue;
                if (c.abs_postmile > lo && c.abs_postmile < hi) blocked = true;
            }
            if (!blocked) out.insert({a.station_id, b.station_id});
        }
    }
    return out;
}

}  // namespace

TEST_CASE("parse_station_metadata") {
    SECTION("valid file parses every row") {
        const auto p = write_temp("stations_ok.csv",
                                  "station_id,route_id,direction,abs_postmile,num_lanes,latitude,"
                                  "longitude\n"
                                  "1,80,E,1.5,4,38.1,-121.2\n"
                                  "2,80,E,2.5,4,38.2,-121.3\n"
                                  "3,50,W,0.5,3,38.3,-121.4\n");
        const ParsedStations got = parse_station_metadata(p.string());
        CHECK(got.stations.size() == 3);
        CHECK(got.skipped == 0);
        CHECK(got.stations[2].direction == Direction::W);
        CHECK(got.stations[0].num_lanes == 4);
    }

    SECTION("rows with missing required fields are skipped and counted") {
        const auto p = write_temp("stations_skip.csv",
                                  "station_id,route_id,direction,abs_postmile,num_lanes,latitude,"
                                  "longitude\n"
                                  "1,80,E,1.5,,38.1,-121.2\n"
                                  "2,80,E,2.5,4,38.2,-121.3\n");
        const ParsedStations got = parse_station_metadata(p.string());
        CHECK(got.stations.size() == 1);
        CHECK(got.skipped == 1);
    }

    SECTION("duplicate station_id is rejected by id") {
        const auto p = write_temp("stations_dup.csv",
                                  "station_id,route_id,direction,abs_postmile,num_lanes,latitude,"
                                  "longitude\n"
                                  "42,80,E,1.5,4,38.1,-121.2\n"
                                  "42,80,E,2.5,4,38.2,-121.3\n");
        CHECK_THROWS_WITH(parse_station_metadata(p.string()),
                          Catch::Matchers::ContainsSubstring("42"));
    }

    SECTION("unparseable header is rejected") {
        const auto p = write_temp("stations_hdr.csv", "id,route\n1,80\n");
        CHECK_THROWS_AS(parse_station_metadata(p.string()), std::runtime_error);
    }
}

TEST_CASE("build_station_graph") {
    SECTION("consecutive stations on one eastbound route") {
        const std::vector<StationMeta> s = {station(1, "80", Direction::E, 1.0),
                                            station(2, "80", Direction::E, 2.5),
                                            station(3, "80", Direction::E, 4.0)};
        const StationGraph g = build_station_graph(s);
        CHECK(edge_ids(g) == std::set<std::pair<std::int64_t, std::int64_t>>{{1, 2}, {2, 3}});
    }

    SECTION("westbound routes orient toward decreasing postmile") {
        const std::vector<StationMeta> s = {station(1, "50", Direction::W, 1.0),
                                            station(2, "50", Direction::W, 2.5)};
        const StationGraph g = build_station_graph(s);
        CHECK(edge_ids(g) == std::set<std::pair<std::int64_t, std::int64_t>>{{2, 1}});
    }

    SECTION("input order does not matter") {
        std::vector<StationMeta> s = {station(1, "80", Direction::E, 1.0),
                                      station(2, "80", Direction::E, 2.5),
                                      station(3, "80", Direction::E, 4.0),
                                      station(4, "50", Direction::N, 7.0)};
        const StationGraph a = build_station_graph(s);
        std::reverse(s.begin(), s.end());
        const StationGraph b = build_station_graph(s);
        CHECK(a.node_ids() == b.node_ids());
        CHECK(a.edges() == b.edges());
    }

    SECTION("different routes never connect") {
        const std::vector<StationMeta> s = {station(1, "80", Direction::E, 1.0),
                                            station(2, "50", Direction::E, 1.5)};
        CHECK(build_station_graph(s).edges().empty());
    }

    SECTION("max_gap_miles prunes distant pairs") {
        const std::vector<StationMeta> s = {station(1, "80", Direction::E, 1.0),
                                            station(2, "80", Direction::E, 2.0),
                                            station(3, "80", Direction::E, 9.0)};
        const StationGraph g = build_station_graph(s, {}, 3.0);
        CHECK(edge_ids(g) == std::set<std::pair<std::int64_t, std::int64_t>>{{1, 2}});
    }

    SECTION("manual edges are appended verbatim; unknown stations rejected") {
        const std::vector<StationMeta> s = {station(1, "80", Direction::E, 1.0),
                                            station(2, "50", Direction::W, 2.0)};
        const StationGraph g = build_station_graph(s, {{1, 2}});
        CHECK(edge_ids(g) == std::set<std::pair<std::int64_t, std::int64_t>>{{1, 2}});
        CHECK_THROWS_WITH(build_station_graph(s, {{1, 99}}),
                          Catch::Matchers::ContainsSubstring("99"));
    }

    SECTION("k consecutive stations produce k-1 edges") {
        Rng rng(3);
        for (std::size_t k = 2; k <= 12; ++k) {
            std::vector<StationMeta> s;
            for (std::size_t i = 0; i < k; ++i)
                s.push_back(station(static_cast<std::int64_t>(100 + i), "99", Direction::N,
                                    static_cast<double>(i) + rng.uniform()));
            CHECK(build_station_graph(s).edges().size() == k - 1);
        }
    }

    SECTION("matches the all-pairs oracle on random metadata") {
        Rng rng(17);
        for (int trial = 0; trial < 30; ++trial) {
            const std::size_t count = 2 + rng.below(49);
            std::vector<StationMeta> s;
            std::set<double> used;
            for (std::size_t i = 0; i < count; ++i) {
                const std::string route = std::to_string(1 + rng.below(3));
                const auto dir = static_cast<Direction>(rng.below(4));
                double pm = 0.0;
                do {
                    pm = std::floor(rng.uniform(0.0, 300.0) * 100.0) / 100.0;
                } while (!used.insert(pm).second);
                s.push_back(station(static_cast<std::int64_t>(i + 1), route, dir, pm));
            }
            rng.shuffle(s);
            CHECK(edge_ids(build_station_graph(s)) == brute_force_edges(s));
        }
    }
}

TEST_CASE("attention neighborhoods") {
    const std::vector<StationMeta> s = {
        station(1, "A", Direction::E, 1.0), station(2, "A", Direction::E, 2.0),
        station(3, "A", Direction::E, 3.0), station(9, "Z", Direction::N, 1.0)};
    const StationGraph g = build_station_graph(s);  // chain 1->2->3, isolated 9

    SECTION("chain endpoints and middle") {
        CHECK(g.attention_neighborhood(g.node_index(2)) ==
              std::set<std::size_t>{g.node_index(1), g.node_index(2), g.node_index(3)});
        CHECK(g.attention_neighborhood(g.node_index(1)) ==
              std::set<std::size_t>{g.node_index(1), g.node_index(2)});
    }

    SECTION("isolated node keeps only itself") {
        CHECK(g.attention_neighborhood(g.node_index(9)) == std::set<std::size_t>{g.node_index(9)});
    }

    SECTION("unknown node rejected") {
        CHECK_THROWS_AS(g.attention_neighborhood(99), std::out_of_range);
    }

    SECTION("every neighborhood is non-empty and the mask agrees") {
        const Tensor mask = g.attention_mask();
        for (std::size_t i = 0; i < g.node_count(); ++i) {
            const auto& nb = g.attention_neighborhood(i);
            CHECK(!nb.empty());
            for (std::size_t j = 0; j < g.node_count(); ++j)
                CHECK(mask.at2(i, j) == (nb.count(j) ? 1.0 : 0.0));
        }
    }

    SECTION("random graphs: neighborhood equals self plus in plus out") {
        Rng rng(23);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t count = 2 + rng.below(20);
            std::vector<StationMeta> meta;
            std::set<double> used;
            for (std::size_t i = 0; i < count; ++i) {
                double pm = 0.0;
                do {
                    pm = std::floor(rng.uniform(0.0, 99.0) * 100.0) / 100.0;
                } while (!used.insert(pm).second);
                meta.push_back(station(static_cast<std::int64_t>(i + 1),
                                       std::to_string(1 + rng.below(2)),
                                       static_cast<Direction>(rng.below(4)), pm));
            }
            const StationGraph g2 = build_station_graph(meta);
            for (std::size_t v = 0; v < g2.node_count(); ++v) {
                std::set<std::size_t> expect = {v};
                for (const auto& [from, to] : g2.edges()) {
                    if (from == v) expect.insert(to);
                    if (to == v) expect.insert(from);
                }
                CHECK(g2.attention_neighborhood(v) == expect);
            }
        }
    }
}

TEST_CASE("graph export") {
    const std::vector<StationMeta> s = {station(5, "80", Direction::E, 1.0),
                                        station(3, "80", Direction::E, 2.0)};
    const StationGraph g = build_station_graph(s);
    const fs::path edges = fs::temp_directory_path() / "graph_edges.txt";
    const fs::path nodes = fs::temp_directory_path() / "graph_nodes.json";
    export_graph(g, edges.string(), nodes.string());

    std::ifstream ein(edges);
    std::string line;
    std::getline(ein, line);
    CHECK(line == "1 0");  // node order is station_id ascending: [3, 5]; edge 5->3
    std::ifstream nin(nodes);
    std::getline(nin, line);
    CHECK(line == "{\"nodes\":[3,5]}");
}

TEST_CASE("manual edge file parsing") {
    const auto p = write_temp("edges.txt", "# interchange\n1,2\n2,1\n");
    const auto edges = parse_manual_edges(p.string());
    REQUIRE(edges.size() == 2);
    CHECK(edges[0].from == 1);
    CHECK(edges[1].to == 1);
    const auto bad = write_temp("edges_bad.txt", "1\n");
    CHECK_THROWS_AS(parse_manual_edges(bad.string()), std::runtime_error);
}
