#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mstgat/csv.hpp"
#include "mstgat/tensor.hpp"

namespace mstgat {

enum class Direction : std::uint8_t { N, S, E, W };

inline Direction parse_direction(const std::string& s) {
    if (s == "N") return Direction::N;
    if (s == "S") return Direction::S;
    if (s == "E") return Direction::E;
    if (s == "W") return Direction::W;
    throw std::invalid_argument("bad direction \"" + s + "\" (expected N/S/E/W)");
}

inline char direction_char(Direction d) {
    switch (d) {
        case Direction::N: return 'N';
        case Direction::S: return 'S';
        case Direction::E: return 'E';
        case Direction::W: return 'W';
    }
    return '?';
}

// Travel runs toward increasing postmile for N/E routes and decreasing for
// S/W, which fixes the orientation of derived edges.
inline bool increasing_postmile(Direction d) {
    return d == Direction::N || d == Direction::E;
}

struct StationMeta {
    std::int64_t station_id = 0;
    std::string route_id;
    Direction direction = Direction::N;
    double abs_postmile = 0.0;
    int num_lanes = 1;
    double latitude = 0.0;
    double longitude = 0.0;
};

struct ParsedStations {
    std::vector<StationMeta> stations;
    std::size_t skipped = 0;  // rows dropped for missing/invalid required fields
};

inline const std::vector<std::string>& station_csv_header() {
    static const std::vector<std::string> h = {"station_id", "route_id", "direction",
                                               "abs_postmile", "num_lanes", "latitude",
                                               "longitude"};
    return h;
}

inline ParsedStations parse_station_metadata(const std::string& path) {
    const CsvFile csv = read_csv(path, station_csv_header());
    ParsedStations out;
    std::set<std::int64_t> seen;
    for (const auto& row : csv.rows) {
        if (row.size() != 7) {
            ++out.skipped;
            continue;
        }
        StationMeta m;
        std::int64_t lanes = 0;
        bool ok = parse_int_field(row[0], m.station_id);
        ok = ok && !row[1].empty();
        m.route_id = row[1];
        try {
            m.direction = parse_direction(row[2]);
        } catch (const std::invalid_argument&) {
            ok = false;
        }
        ok = ok && parse_double_field(row[3], m.abs_postmile) && m.abs_postmile >= 0.0;
        ok = ok && parse_int_field(row[4], lanes) && lanes >= 1;
        ok = ok && parse_double_field(row[5], m.latitude);
        ok = ok && parse_double_field(row[6], m.longitude);
        if (!ok) {
            ++out.skipped;
            continue;
        }
        m.num_lanes = static_cast<int>(lanes);
        if (!seen.insert(m.station_id).second) {
            throw std::runtime_error(path + ": duplicate station_id " +
                                     std::to_string(m.station_id));
        }
        out.stations.push_back(std::move(m));
    }
    return out;
}

struct ManualEdge {
    std::int64_t from = 0;
    std::int64_t to = 0;
};

// Lines "from_station_id,to_station_id"; '#' comments allowed.
inline std::vector<ManualEdge> parse_manual_edges(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<ManualEdge> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto fields = split_csv_line(line);
        ManualEdge e;
        if (fields.size() != 2 || !parse_int_field(fields[0], e.from) ||
            !parse_int_field(fields[1], e.to)) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad edge line \"" +
                                     line + "\"");
        }
        out.push_back(e);
    }
    return out;
}

// Detector-station graph. Node order (and therefore every tensor's node axis)
// is station_id ascending, so construction is invariant to input ordering.
class StationGraph {
public:
    StationGraph(std::vector<StationMeta> stations, std::vector<std::pair<std::size_t, std::size_t>> edges)
        : stations_(std::move(stations)), edges_(std::move(edges)) {
        for (std::size_t i = 0; i < stations_.size(); ++i)
            index_of_[stations_[i].station_id] = i;
        neighborhoods_.assign(stations_.size(), {});
        for (std::size_t i = 0; i < stations_.size(); ++i) neighborhoods_[i].insert(i);
        for (const auto& [from, to] : edges_) {
            neighborhoods_[from].insert(to);
            neighborhoods_[to].insert(from);
        }
    }

    std::size_t node_count() const { return stations_.size(); }
    const std::vector<StationMeta>& stations() const { return stations_; }
    const StationMeta& station(std::size_t node) const { return stations_.at(node); }
    const std::vector<std::pair<std::size_t, std::size_t>>& edges() const { return edges_; }

    std::vector<std::int64_t> node_ids() const {
        std::vector<std::int64_t> ids;
        ids.reserve(stations_.size());
        for (const auto& s : stations_) ids.push_back(s.station_id);
        return ids;
    }

    std::size_t node_index(std::int64_t station_id) const {
        auto it = index_of_.find(station_id);
        if (it == index_of_.end())
            throw std::out_of_range("unknown station_id " + std::to_string(station_id));
        return it->second;
    }

    bool has_station(std::int64_t station_id) const { return index_of_.count(station_id) != 0; }

    // {node} ∪ in-neighbors ∪ out-neighbors; never empty.
    const std::set<std::size_t>& attention_neighborhood(std::size_t node) const {
        if (node >= stations_.size())
            throw std::out_of_range("unknown node " + std::to_string(node));
        return neighborhoods_[node];
    }

    // [N,N] 0/1 tensor; mask[i][j] = 1 iff j is in i's attention neighborhood.
    Tensor attention_mask() const {
        const std::size_t n = node_count();
        Tensor mask({n, n}, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j : neighborhoods_[i]) mask.at2(i, j) = 1.0;
        return mask;
    }

private:
    std::vector<StationMeta> stations_;
    std::vector<std::pair<std::size_t, std::size_t>> edges_;
    std::unordered_map<std::int64_t, std::size_t> index_of_;
    std::vector<std::set<std::size_t>> neighborhoods_;
};

// Connects consecutive stations within each (route, direction) group, in
// postmile order, oriented in the direction of travel. Pairs farther apart
// than max_gap_miles (when set) stay unconnected. Manual edges are appended
// verbatim and may cross routes.
inline StationGraph build_station_graph(
    const std::vector<StationMeta>& stations,
    const std::vector<ManualEdge>& manual_edges = {},
    std::optional<double> max_gap_miles = std::nullopt) {
    if (stations.empty()) throw std::invalid_argument("build_station_graph: no stations");

    std::vector<StationMeta> nodes = stations;
    std::sort(nodes.begin(), nodes.end(),
              [](const StationMeta& a, const StationMeta& b) { return a.station_id < b.station_id; });
    std::unordered_map<std::int64_t, std::size_t> index_of;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (!index_of.emplace(nodes[i].station_id, i).second) {
            throw std::invalid_argument("build_station_graph: duplicate station_id " +
                                        std::to_string(nodes[i].station_id));
        }
    }

    std::map<std::pair<std::string, char>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < nodes.size(); ++i)
        groups[{nodes[i].route_id, direction_char(nodes[i].direction)}].push_back(i);

    std::set<std::pair<std::size_t, std::size_t>> edge_set;
    for (auto& [key, members] : groups) {
        std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
            if (nodes[a].abs_postmile != nodes[b].abs_postmile)
                return nodes[a].abs_postmile < nodes[b].abs_postmile;
            return nodes[a].station_id < nodes[b].station_id;
        });
        const bool forward = increasing_postmile(nodes[members.front()].direction);
        for (std::size_t i = 0; i + 1 < members.size(); ++i) {
            const std::size_t lo = members[i], hi = members[i + 1];
            const double gap = nodes[hi].abs_postmile - nodes[lo].abs_postmile;
            if (max_gap_miles && gap > *max_gap_miles) continue;
            if (forward)
                edge_set.emplace(lo, hi);
            else
                edge_set.emplace(hi, lo);
        }
    }

    for (const ManualEdge& e : manual_edges) {
        auto from = index_of.find(e.from);
        auto to = index_of.find(e.to);
        if (from == index_of.end() || to == index_of.end()) {
            throw std::invalid_argument("manual edge " + std::to_string(e.from) + "->" +
                                        std::to_string(e.to) + " references unknown station");
        }
        if (from->second == to->second) continue;  // self-loops are implicit in neighborhoods
        edge_set.emplace(from->second, to->second);
    }

    return StationGraph(std::move(nodes),
                        {edge_set.begin(), edge_set.end()});
}

// Edge-list export, one "i j" node-index pair per line; the sidecar JSON maps
// index -> station_id.
inline void export_graph(const StationGraph& graph, const std::string& edges_path,
                         const std::string& nodes_json_path) {
    std::ofstream edges(edges_path);
    if (!edges) throw std::runtime_error("cannot write " + edges_path);
    for (const auto& [from, to] : graph.edges()) edges << from << ' ' << to << '\n';

    std::ofstream nodes(nodes_json_path);
    if (!nodes) throw std::runtime_error("cannot write " + nodes_json_path);
    nodes << "{\"nodes\":[";
    const auto ids = graph.node_ids();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) nodes << ',';
        nodes << ids[i];
    }
    nodes << "]}\n";
}

}  // namespace mstgat
