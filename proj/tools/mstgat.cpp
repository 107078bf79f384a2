// mstgat — traffic speed forecasting pipeline driver.
//
// Subcommands: synth | graph | ingest | train | eval | transfer | stats.
// Every run is driven by a JSON config (optional) plus CLI flags; flags win.
// Each run writes a manifest.json with the fully resolved config, its hash,
// and a hash of every produced file, so a run can be reproduced bit-for-bit
// with `--config manifest.json`.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mstgat/dataset.hpp"
#include "mstgat/graph.hpp"
#include "mstgat/ingest.hpp"
#include "mstgat/models.hpp"
#include "mstgat/synth.hpp"
#include "mstgat/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mstgat;

namespace {

constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// manifest plumbing
// ---------------------------------------------------------------------------

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0)
        h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    return hex64(h);
}

void write_manifest(const fs::path& out_dir, const std::string& command, const json& config,
                    const std::vector<std::string>& outputs) {
    json m;
    m["tool"] = "mstgat";
    m["version"] = kVersion;
    m["command"] = command;
    m["config"] = config;
    const std::string dumped = config.dump();
    m["config_hash"] = hex64(fnv1a(dumped.data(), dumped.size()));
    json files = json::array();
    for (const auto& p : outputs)
        files.push_back({{"path", fs::path(p).filename().string()},
                         {"bytes", fs::file_size(p)},
                         {"fnv1a", hash_file(p)}});
    m["outputs"] = files;
    std::ofstream out(out_dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + out_dir.string());
    out << m.dump(2) << '\n';
}

// config file may be a plain config or a previous run's manifest
json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    json j;
    in >> j;
    if (j.contains("config") && j.contains("command")) return j.at("config");
    return j;
}

fs::path resolve_out_dir(const std::string& flag_value, const json& config) {
    std::string out = flag_value;
    if (out.empty()) {
        if (const char* env = std::getenv("MSTGAT_OUT_DIR")) out = env;
    }
    if (out.empty() && config.contains("out")) out = config.at("out").get<std::string>();
    if (out.empty())
        throw std::runtime_error("no output directory: pass --out or set MSTGAT_OUT_DIR");
    fs::create_directories(out);
    return out;
}

void require_threads(int threads) {
    // the engine is deterministic and single-threaded; the flag caps workers
    // and never affects results
    if (threads < 1) throw std::runtime_error("--threads must be >= 1");
}

// ---------------------------------------------------------------------------
// shared loading helpers
// ---------------------------------------------------------------------------

std::string sidecar_path(const std::string& bin_path) {
    fs::path p(bin_path);
    p.replace_extension(".json");
    return p.string();
}

StationGraph graph_from_config(const json& cfg) {
    const std::string stations_path = cfg.at("stations").get<std::string>();
    const ParsedStations parsed = parse_station_metadata(stations_path);
    if (parsed.skipped > 0)
        std::cerr << "note: skipped " << parsed.skipped << " station rows with missing fields\n";
    std::vector<ManualEdge> manual;
    if (cfg.contains("manual_edges") && !cfg.at("manual_edges").is_null())
        manual = parse_manual_edges(cfg.at("manual_edges").get<std::string>());
    std::optional<double> max_gap;
    if (cfg.contains("max_gap_miles") && !cfg.at("max_gap_miles").is_null())
        max_gap = cfg.at("max_gap_miles").get<double>();
    return build_station_graph(parsed.stations, manual, max_gap);
}

void check_graph_matches_tensor(const StationGraph& graph, const ObservationTensor& tensor) {
    if (graph.node_ids() != tensor.node_ids)
        throw std::runtime_error(
            "station metadata and tensor disagree on the node set/order; "
            "rebuild the tensor from these stations");
}

WindowSpec window_spec_from_config(const json& cfg) {
    if (cfg.contains("window")) {
        WindowSpec spec;
        spec.history = cfg.at("window").at("history").get<std::size_t>();
        spec.horizon = cfg.at("window").at("horizon").get<std::size_t>();
        if (spec.history == 0 || spec.horizon == 0)
            throw std::runtime_error("window.history and window.horizon must be >= 1");
        return spec;
    }
    const int minutes = cfg.at("horizon_minutes").get<int>();
    if (minutes != 30 && minutes != 45 && minutes != 60)
        throw std::runtime_error("horizon must be one of 30/45/60 minutes (or set an explicit "
                                 "\"window\": {\"history\", \"horizon\"})");
    return horizon_to_windowspec(minutes);
}

void append_metrics_csv(std::ofstream& out, const std::string& set, int horizon_min,
                        const std::string& model, const MetricsReport& r) {
    char buf[64];
    auto row = [&](const char* metric, double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << set << ',' << metric << ',' << horizon_min << ',' << model << ',' << buf << '\n';
    };
    row("mae", r.mae);
    row("rmse", r.rmse);
    if (r.mape) row("mape", *r.mape);
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int run_synth(const json& cfg, const fs::path& out_dir) {
    const SynthConfig sc = synth_config_from_json(cfg.value("synth", json::object()));
    const SynthOutput out = generate_corridor(sc);
    const SynthFiles files = export_synth(out, out_dir.string());

    json resolved = cfg;
    resolved["synth"] = synth_config_to_json(sc);
    resolved["out"] = out_dir.string();
    write_manifest(out_dir, "synth", resolved,
                   {files.stations, files.speed, files.closures, files.weather_stations,
                    files.weather, files.truth_bin, files.truth_json, files.config});
    std::cout << "synth: " << out.truth.steps() << " steps x " << out.truth.nodes()
              << " stations, " << out.events.size() << " closure events -> " << out_dir << '\n';
    return 0;
}

int run_graph(const json& cfg, const fs::path& out_dir) {
    const StationGraph graph = graph_from_config(cfg);
    const std::string edges = (out_dir / "graph_edges.txt").string();
    const std::string nodes = (out_dir / "graph_nodes.json").string();
    export_graph(graph, edges, nodes);

    json resolved = cfg;
    resolved["out"] = out_dir.string();
    write_manifest(out_dir, "graph", resolved, {edges, nodes});
    std::cout << "graph: " << graph.node_count() << " nodes, " << graph.edges().size()
              << " edges -> " << out_dir << '\n';
    return 0;
}

TimeGrid derive_grid(const json& cfg, const std::string& speed_path) {
    if (cfg.contains("grid")) {
        TimeGrid g;
        g.start = parse_timestamp(cfg.at("grid").at("start").get<std::string>());
        g.count = cfg.at("grid").at("count").get<std::size_t>();
        return g;
    }
    // no explicit grid: scan the speed file for its span
    const CsvFile csv = read_csv(speed_path, speed_csv_header());
    if (csv.rows.empty()) throw std::runtime_error(speed_path + ": no data rows");
    std::int64_t lo = std::numeric_limits<std::int64_t>::max();
    std::int64_t hi = std::numeric_limits<std::int64_t>::min();
    for (const auto& row : csv.rows) {
        const std::int64_t ts = parse_timestamp(row.at(0));
        lo = std::min(lo, ts);
        hi = std::max(hi, ts);
    }
    if ((hi - lo) % kGridStepSeconds != 0)
        throw std::runtime_error(speed_path + ": timestamps do not span a whole 5-minute grid");
    TimeGrid g;
    g.start = lo;
    g.count = static_cast<std::size_t>((hi - lo) / kGridStepSeconds) + 1;
    return g;
}

int run_ingest(const json& cfg, const fs::path& out_dir) {
    const StationGraph graph = graph_from_config(cfg);
    const std::string speed_path = cfg.at("speed").get<std::string>();
    const TimeGrid grid = derive_grid(cfg, speed_path);

    SpeedLoadReport report;
    SpeedMatrix speed = load_speed_series(speed_path, grid, graph, &report);
    speed = fill_speed_gaps(std::move(speed), cfg.value("max_speed_gap_steps", std::size_t{6}));

    const auto events = load_closure_events(cfg.at("closures").get<std::string>());
    const auto weather_stations =
        load_weather_stations(cfg.at("weather_stations").get<std::string>());
    const auto records = load_weather_records(cfg.at("weather").get<std::string>());
    const auto weather = resample_and_fill_weather(
        records, weather_stations, grid, cfg.value("max_weather_gap_steps", std::size_t{6}));
    const auto assignment = assign_nearest_weather_station(graph.stations(), weather_stations);

    const ObservationTensor tensor =
        assemble_observation_tensor(speed, events, weather, assignment, graph, grid);
    const std::string bin = (out_dir / "tensor.bin").string();
    const std::string sidecar = (out_dir / "tensor.json").string();
    save_observation_tensor(tensor, bin, sidecar);

    double worst_missing = 0.0;
    for (double f : report.missing_fraction) worst_missing = std::max(worst_missing, f);
    json resolved = cfg;
    resolved["grid"] = {{"start", format_timestamp(grid.start)}, {"count", grid.count}};
    resolved["out"] = out_dir.string();
    resolved["ingest_report"] = {{"unknown_station_rows", report.unknown_station_rows},
                                 {"out_of_range_rows", report.out_of_range_rows},
                                 {"missing_fraction_per_node", report.missing_fraction}};
    write_manifest(out_dir, "ingest", resolved, {bin, sidecar});
    std::cout << "ingest: [" << grid.count << "," << graph.node_count() << ",4] tensor -> "
              << out_dir << "  (worst per-station missing fraction " << worst_missing << ")\n";
    return 0;
}

struct PreparedData {
    StationGraph graph;
    Tensor mask;
    WindowSpec spec;
    NormStats stats;
    DatasetSplits splits;
};

PreparedData prepare_splits(const json& cfg, const ObservationTensor& raw) {
    PreparedData d{graph_from_config(cfg), Tensor{}, window_spec_from_config(cfg), {}, {}};
    check_graph_matches_tensor(d.graph, raw);
    d.mask = d.graph.attention_mask();

    // the normalization range is exactly the steps the training windows touch
    const std::vector<std::size_t> kept = kept_window_starts(raw, d.spec);
    if (kept.size() < 3) throw std::runtime_error("not enough complete windows to split");
    const std::size_t train_count = kept.size() * 72 / 100;
    if (train_count == 0) throw std::runtime_error("training split is empty");
    const std::size_t train_range_end = kept[train_count - 1] + d.spec.history + d.spec.horizon;
    d.stats = compute_norm_stats(raw, 0, train_range_end);

    const WindowedDataset windows = make_windows(normalize(raw, d.stats), d.spec, d.stats);
    if (windows.dropped > 0)
        std::cerr << "note: dropped " << windows.dropped << " windows overlapping missing data\n";
    d.splits = split_dataset(windows);
    return d;
}

int run_train(const json& cfg, const fs::path& out_dir) {
    const std::string tensor_bin = cfg.at("tensor").get<std::string>();
    const ObservationTensor raw = load_observation_tensor(tensor_bin, sidecar_path(tensor_bin));
    const PreparedData data = prepare_splits(cfg, raw);

    ModelConfig mc;
    mc.kind = parse_model_kind(cfg.value("model", "m-stgat"));
    const json mj = cfg.value("model_config", json::object());
    mc.hidden = mj.value("hidden", mc.hidden);
    mc.heads = mj.value("heads", mc.heads);
    mc.head_dim = mj.value("head_dim", mc.head_dim);
    mc.cnn_width = mj.value("cnn_width", mc.cnn_width);
    mc.cnn_channels = mj.value("cnn_channels", mc.cnn_channels);
    mc.history = data.spec.history;
    mc.horizon = data.spec.horizon;
    mc.seed = cfg.value("seed", std::uint64_t{0});

    TrainConfig tc;
    tc.epochs = cfg.value("epochs", default_epochs(mc.kind));
    tc.batch_size = cfg.value("batch_size", tc.batch_size);
    tc.learning_rate = cfg.value("learning_rate", tc.learning_rate);
    tc.clip_norm = cfg.value("clip_norm", tc.clip_norm);
    tc.seed = mc.seed;

    std::cout << "train: " << model_kind_name(mc.kind) << ", |H|=" << data.spec.history
              << " |T|=" << data.spec.horizon << ", windows " << data.splits.train.size() << "/"
              << data.splits.val.size() << "/" << data.splits.test.size() << ", epochs "
              << tc.epochs << '\n';

    const TrainResult result = train(mc, data.splits.train, data.splits.val, data.mask, tc);

    const std::string ckpt_prefix = (out_dir / "checkpoint").string();
    save_checkpoint({mc, data.spec, data.stats, result.params}, ckpt_prefix);
    const std::string history_path = (out_dir / "history.csv").string();
    save_history_csv(result.history, history_path);

    const double mape_floor = cfg.value("mape_floor", 1.0);
    const MetricsReport train_r =
        evaluate(mc, result.params, data.splits.train, data.mask, tc.batch_size, mape_floor);
    const MetricsReport val_r =
        evaluate(mc, result.params, data.splits.val, data.mask, tc.batch_size, mape_floor);
    const MetricsReport test_r =
        evaluate(mc, result.params, data.splits.test, data.mask, tc.batch_size, mape_floor);

    const int horizon_min = static_cast<int>(data.spec.horizon * 5);
    json report;
    report["model"] = model_kind_name(mc.kind);
    report["horizon_min"] = horizon_min;
    report["best_epoch"] = result.best_epoch;
    report["best_val_loss"] = result.best_val_loss;
    report["train"] = metrics_to_json(train_r);
    report["val"] = metrics_to_json(val_r);
    report["test"] = metrics_to_json(test_r);
    const std::string metrics_path = (out_dir / "metrics.json").string();
    {
        std::ofstream out(metrics_path);
        out << report.dump(2) << '\n';
    }
    const std::string csv_path = (out_dir / "metrics.csv").string();
    {
        std::ofstream out(csv_path);
        out << "set,metric,horizon_min,model,value\n";
        append_metrics_csv(out, "train", horizon_min, model_kind_name(mc.kind), train_r);
        append_metrics_csv(out, "val", horizon_min, model_kind_name(mc.kind), val_r);
        append_metrics_csv(out, "test", horizon_min, model_kind_name(mc.kind), test_r);
    }

    json resolved = cfg;
    resolved["model"] = model_kind_name(mc.kind);
    resolved["model_config"] = model_config_to_json(mc);
    resolved["epochs"] = tc.epochs;
    resolved["batch_size"] = tc.batch_size;
    resolved["learning_rate"] = tc.learning_rate;
    resolved["seed"] = tc.seed;
    resolved["out"] = out_dir.string();
    write_manifest(out_dir, "train", resolved,
                   {ckpt_prefix + ".json", ckpt_prefix + ".bin", history_path, metrics_path,
                    csv_path});
    std::cout << "train: done; best val loss " << result.best_val_loss << " at epoch "
              << result.best_epoch << "; test MAE " << test_r.mae << " mph -> " << out_dir
              << '\n';
    return 0;
}

int run_eval(const json& cfg, const fs::path& out_dir) {
    const Checkpoint ckpt = load_checkpoint(cfg.at("checkpoint").get<std::string>());
    const std::string tensor_bin = cfg.at("tensor").get<std::string>();
    const ObservationTensor raw = load_observation_tensor(tensor_bin, sidecar_path(tensor_bin));
    const StationGraph graph = graph_from_config(cfg);
    check_graph_matches_tensor(graph, raw);
    const Tensor mask = graph.attention_mask();

    const WindowedDataset windows =
        make_windows(normalize(raw, ckpt.stats), ckpt.spec, ckpt.stats);
    const std::string which = cfg.value("split", "test");
    const double mape_floor = cfg.value("mape_floor", 1.0);
    const std::size_t batch = cfg.value("batch_size", std::size_t{32});

    MetricsReport r;
    if (which == "all") {
        r = evaluate(ckpt.model, ckpt.params, windows, mask, batch, mape_floor);
    } else {
        const DatasetSplits splits = split_dataset(windows);
        if (which == "train")
            r = evaluate(ckpt.model, ckpt.params, splits.train, mask, batch, mape_floor);
        else if (which == "val")
            r = evaluate(ckpt.model, ckpt.params, splits.val, mask, batch, mape_floor);
        else if (which == "test")
            r = evaluate(ckpt.model, ckpt.params, splits.test, mask, batch, mape_floor);
        else
            throw std::runtime_error("--split must be train|val|test|all");
    }

    json report;
    report["model"] = model_kind_name(ckpt.model.kind);
    report["split"] = which;
    report["horizon_min"] = static_cast<int>(ckpt.spec.horizon * 5);
    report["metrics"] = metrics_to_json(r);
    std::cout << report.dump(2) << '\n';

    const std::string path = (out_dir / "eval.json").string();
    {
        std::ofstream out(path);
        out << report.dump(2) << '\n';
    }
    json resolved = cfg;
    resolved["out"] = out_dir.string();
    write_manifest(out_dir, "eval", resolved, {path});
    return 0;
}

int run_transfer(const json& cfg, const fs::path& out_dir) {
    const Checkpoint ckpt = load_checkpoint(cfg.at("checkpoint").get<std::string>());
    const StationGraph graph = graph_from_config(cfg);
    const Tensor mask = graph.attention_mask();
    const double mape_floor = cfg.value("mape_floor", 1.0);
    const std::size_t batch = cfg.value("batch_size", std::size_t{32});

    const auto tensors = cfg.at("tensors").get<std::vector<std::string>>();
    if (tensors.empty()) throw std::runtime_error("transfer: no tensors given");

    json report;
    report["model"] = model_kind_name(ckpt.model.kind);
    report["horizon_min"] = static_cast<int>(ckpt.spec.horizon * 5);
    json sets = json::object();
    const std::string csv_path = (out_dir / "transfer.csv").string();
    std::ofstream csv(csv_path);
    csv << "set,metric,horizon_min,model,value\n";
    for (const auto& path : tensors) {
        const ObservationTensor raw = load_observation_tensor(path, sidecar_path(path));
        check_graph_matches_tensor(graph, raw);
        const MetricsReport r = transfer_evaluate(ckpt.model, ckpt.params, raw, ckpt.stats,
                                                  ckpt.spec, mask, batch, mape_floor);
        const std::string name = fs::path(path).stem().string();
        sets[name] = metrics_to_json(r);
        append_metrics_csv(csv, name, static_cast<int>(ckpt.spec.horizon * 5),
                           model_kind_name(ckpt.model.kind), r);
    }
    report["sets"] = sets;
    std::cout << report.dump(2) << '\n';

    const std::string path = (out_dir / "transfer.json").string();
    {
        std::ofstream out(path);
        out << report.dump(2) << '\n';
    }
    json resolved = cfg;
    resolved["out"] = out_dir.string();
    write_manifest(out_dir, "transfer", resolved, {path, csv_path});
    return 0;
}

json summary_json(const SummaryStats& s) {
    return {{"min", s.min}, {"q1", s.q1},   {"q2", s.q2},    {"q3", s.q3},
            {"max", s.max}, {"mean", s.mean}, {"std", s.std_dev}};
}

int run_stats(const json& cfg, const fs::path& out_dir) {
    const std::string tensor_bin = cfg.at("tensor").get<std::string>();
    const ObservationTensor raw = load_observation_tensor(tensor_bin, sidecar_path(tensor_bin));
    const std::string label = cfg.value("set_label", "PD");

    std::vector<double> speed, temperature, visibility, closure;
    for (std::size_t t = 0; t < raw.steps(); ++t) {
        for (std::size_t n = 0; n < raw.nodes(); ++n) {
            if (!raw.is_speed_missing(t, n)) speed.push_back(raw.at(t, n, kChannelSpeed));
            temperature.push_back(raw.at(t, n, kChannelTemperature));
            visibility.push_back(raw.at(t, n, kChannelVisibility));
            closure.push_back(raw.at(t, n, kChannelClosure));
        }
    }
    if (speed.empty()) throw std::runtime_error("stats: every speed cell is missing");

    const SummaryStats speed_s = summary_stats(speed);
    const SummaryStats temp_s = summary_stats(temperature);
    const SummaryStats vis_s = summary_stats(visibility);
    const OccurrenceStats occ = occurrence_stats(visibility, closure);

    json report;
    report["set"] = label;
    report["summary"] = {{"speed", summary_json(speed_s)},
                         {"temperature", summary_json(temp_s)},
                         {"visibility", summary_json(vis_s)}};
    report["occurrence"] = {{"visibility_low_pct", occ.low_pct},
                            {"visibility_medium_pct", occ.medium_pct},
                            {"visibility_high_pct", occ.high_pct},
                            {"visibility_clear_pct", occ.clear_pct},
                            {"lane_closure_pct", occ.closure_pct}};
    std::cout << report.dump(2) << '\n';

    const std::string json_path = (out_dir / "stats.json").string();
    {
        std::ofstream out(json_path);
        out << report.dump(2) << '\n';
    }
    const std::string summary_csv = (out_dir / "summary_stats.csv").string();
    {
        std::ofstream out(summary_csv);
        out << "variable,set,min,q1,q2,q3,max,mean,std\n";
        char buf[256];
        auto row = [&](const char* var, const SummaryStats& s) {
            std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                          var, label.c_str(), s.min, s.q1, s.q2, s.q3, s.max, s.mean, s.std_dev);
            out << buf;
        };
        row("speed", speed_s);
        row("temperature", temp_s);
        row("visibility", vis_s);
    }
    const std::string occ_csv = (out_dir / "occurrence_stats.csv").string();
    {
        std::ofstream out(occ_csv);
        out << "set,visibility_low_pct,visibility_medium_pct,visibility_high_pct,"
               "visibility_clear_pct,lane_closure_pct\n";
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g,%.17g\n", label.c_str(),
                      occ.low_pct, occ.medium_pct, occ.high_pct, occ.clear_pct, occ.closure_pct);
        out << buf;
    }

    json resolved = cfg;
    resolved["out"] = out_dir.string();
    write_manifest(out_dir, "stats", resolved, {json_path, summary_csv, occ_csv});
    return 0;
}

// merge a CLI string flag into the config when the user passed it
void put_if(json& cfg, const std::string& key, const std::string& value) {
    if (!value.empty()) cfg[key] = value;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"M-STGAT traffic speed forecasting pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_flag;
    int threads = 1;
    app.add_option("--config", config_path, "JSON config (or a previous run's manifest)");
    app.add_option("--out", out_flag, "output directory (or MSTGAT_OUT_DIR)");
    app.add_option("--threads", threads, "worker cap; never affects results");

    auto* synth = app.add_subcommand("synth", "generate a deterministic synthetic corridor");
    std::string synth_seed, synth_nodes, synth_steps;
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--nodes", synth_nodes, "station count");
    synth->add_option("--steps", synth_steps, "grid length");

    auto* graphc = app.add_subcommand("graph", "build and export the station graph");
    std::string g_stations, g_manual, g_maxgap;
    graphc->add_option("--stations", g_stations, "station metadata CSV");
    graphc->add_option("--manual-edges", g_manual, "manual edge file");
    graphc->add_option("--max-gap-miles", g_maxgap, "prune pairs farther apart than this");

    auto* ingest = app.add_subcommand("ingest", "align raw CSVs into an observation tensor");
    std::string i_stations, i_speed, i_closures, i_weather, i_wstations, i_manual, i_maxgap;
    ingest->add_option("--stations", i_stations, "station metadata CSV");
    ingest->add_option("--speed", i_speed, "speed CSV");
    ingest->add_option("--closures", i_closures, "lane closure CSV");
    ingest->add_option("--weather", i_weather, "weather records CSV");
    ingest->add_option("--weather-stations", i_wstations, "weather station metadata CSV");
    ingest->add_option("--manual-edges", i_manual, "manual edge file");
    ingest->add_option("--max-gap-miles", i_maxgap, "prune pairs farther apart than this");

    auto* trainc = app.add_subcommand("train", "train a model on an observation tensor");
    std::string t_tensor, t_stations, t_model, t_horizon, t_epochs, t_batch, t_lr, t_seed;
    trainc->add_option("--tensor", t_tensor, "tensor .bin (sidecar .json alongside)");
    trainc->add_option("--stations", t_stations, "station metadata CSV");
    trainc->add_option("--model", t_model, "m-stgat|stgat|gat|lstm");
    trainc->add_option("--horizon", t_horizon, "prediction horizon in minutes (30/45/60)");
    trainc->add_option("--epochs", t_epochs, "training epochs");
    trainc->add_option("--batch-size", t_batch, "mini-batch size");
    trainc->add_option("--lr", t_lr, "learning rate");
    trainc->add_option("--seed", t_seed, "training/init seed");

    auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    std::string e_ckpt, e_tensor, e_stations, e_split;
    evalc->add_option("--checkpoint", e_ckpt, "checkpoint prefix (without .json/.bin)");
    evalc->add_option("--tensor", e_tensor, "tensor .bin");
    evalc->add_option("--stations", e_stations, "station metadata CSV");
    evalc->add_option("--split", e_split, "train|val|test|all");

    auto* transferc = app.add_subcommand("transfer", "zero-shot transfer evaluation");
    std::string x_ckpt, x_stations;
    std::vector<std::string> x_tensors;
    transferc->add_option("--checkpoint", x_ckpt, "checkpoint prefix");
    transferc->add_option("--stations", x_stations, "station metadata CSV");
    transferc->add_option("--tensor", x_tensors, "transfer tensor .bin (repeatable)");

    auto* statsc = app.add_subcommand("stats", "dataset summary and occurrence tables");
    std::string s_tensor, s_label;
    statsc->add_option("--tensor", s_tensor, "tensor .bin");
    statsc->add_option("--set", s_label, "label for the emitted rows (default PD)");

    // global flags (--out, --config, --threads) may follow the subcommand
    for (CLI::App* sub : {synth, graphc, ingest, trainc, evalc, transferc, statsc})
        sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        require_threads(threads);
        json cfg = config_path.empty() ? json::object() : load_config_file(config_path);

        if (*synth) {
            if (!cfg.contains("synth")) cfg["synth"] = json::object();
            if (!synth_seed.empty()) cfg["synth"]["seed"] = std::stoull(synth_seed);
            if (!synth_nodes.empty()) cfg["synth"]["nodes"] = std::stoull(synth_nodes);
            if (!synth_steps.empty()) cfg["synth"]["steps"] = std::stoull(synth_steps);
            return run_synth(cfg, resolve_out_dir(out_flag, cfg));
        }
        if (*graphc) {
            put_if(cfg, "stations", g_stations);
            put_if(cfg, "manual_edges", g_manual);
            if (!g_maxgap.empty()) cfg["max_gap_miles"] = std::stod(g_maxgap);
            return run_graph(cfg, resolve_out_dir(out_flag, cfg));
        }
        if (*ingest) {
            put_if(cfg, "stations", i_stations);
            put_if(cfg, "speed", i_speed);
            put_if(cfg, "closures", i_closures);
            put_if(cfg, "weather", i_weather);
            put_if(cfg, "weather_stations", i_wstations);
            put_if(cfg, "manual_edges", i_manual);
            if (!i_maxgap.empty()) cfg["max_gap_miles"] = std::stod(i_maxgap);
            return run_ingest(cfg, resolve_out_dir(out_flag, cfg));
        }
        if (*trainc) {
            put_if(cfg, "tensor", t_tensor);
            put_if(cfg, "stations", t_stations);
            put_if(cfg, "model", t_model);
            if (!t_horizon.empty()) cfg["horizon_minutes"] = std::stoi(t_horizon);
            if (!t_epochs.empty()) cfg["epochs"] = std::stoull(t_epochs);
            if (!t_batch.empty()) cfg["batch_size"] = std::stoull(t_batch);
            if (!t_lr.empty()) cfg["learning_rate"] = std::stod(t_lr);
            if (!t_seed.empty()) cfg["seed"] = std::stoull(t_seed);
            return run_train(cfg, resolve_out_dir(out_flag, cfg));
        }
        if (*evalc) {
            put_if(cfg, "checkpoint", e_ckpt);
            put_if(cfg, "tensor", e_tensor);
            put_if(cfg, "stations", e_stations);
            put_if(cfg, "split", e_split);
            return run_eval(cfg, resolve_out_dir(out_flag, cfg));
        }
        if (*transferc) {
            put_if(cfg, "checkpoint", x_ckpt);
            put_if(cfg, "stations", x_stations);
            if (!x_tensors.empty()) cfg["tensors"] = x_tensors;
            return run_transfer(cfg, resolve_out_dir(out_flag, cfg));
        }
        if (*statsc) {
            put_if(cfg, "tensor", s_tensor);
            put_if(cfg, "set_label", s_label);
            return run_stats(cfg, resolve_out_dir(out_flag, cfg));
        }
        std::cerr << "unknown subcommand\n" << app.help() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
