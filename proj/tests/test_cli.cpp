// End-to-end exercises of the command-line pipeline. Each test drives the
// installed binary through std::system on a scratch directory.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& cmd) {
    const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
    if (status == -1) return -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct Scratch {
    fs::path dir;
    std::string cli = MSTGAT_CLI_PATH;

    Scratch() {
        dir = fs::temp_directory_path() / "mstgat_cli_test";
        fs::remove_all(dir);
        fs::create_directories(dir);
    }

    std::string path(const std::string& rel) const { return (dir / rel).string(); }

    int mstgat(const std::string& args) const { return run(cli + " " + args); }
};

// one shared pipeline run keeps the suite fast; later cases reuse its outputs
const Scratch& pipeline() {
    static Scratch s = [] {
        Scratch sc;
        REQUIRE(sc.mstgat("synth --nodes 5 --steps 300 --seed 11 --out " + sc.path("sdata")) == 0);
        REQUIRE(sc.mstgat("graph --stations " + sc.path("sdata/stations.csv") + " --out " +
                          sc.path("graph")) == 0);
        REQUIRE(sc.mstgat("ingest --stations " + sc.path("sdata/stations.csv") + " --speed " +
                          sc.path("sdata/speed.csv") + " --closures " +
                          sc.path("sdata/closures.csv") + " --weather " +
                          sc.path("sdata/weather.csv") + " --weather-stations " +
                          sc.path("sdata/weather_stations.csv") + " --out " + sc.path("idata")) ==
                0);
        REQUIRE(sc.mstgat("train --tensor " + sc.path("idata/tensor.bin") + " --stations " +
                          sc.path("sdata/stations.csv") +
                          " --model m-stgat --horizon 30 --epochs 2 --seed 5 --out " +
                          sc.path("trun")) == 0);
        return sc;
    }();
    return s;
}

}  // namespace

TEST_CASE("pipeline smoke: synth -> ingest -> train leaves artifacts") {
    const Scratch& sc = pipeline();
    CHECK(fs::exists(sc.path("sdata/speed.csv")));
    CHECK(fs::exists(sc.path("graph/graph_edges.txt")));
    CHECK(fs::exists(sc.path("graph/graph_nodes.json")));
    CHECK(fs::exists(sc.path("idata/tensor.bin")));
    CHECK(fs::exists(sc.path("trun/checkpoint.bin")));
    CHECK(fs::exists(sc.path("trun/checkpoint.json")));
    CHECK(fs::exists(sc.path("trun/history.csv")));
    CHECK(fs::exists(sc.path("trun/metrics.csv")));
    CHECK(fs::exists(sc.path("trun/manifest.json")));

    // history rows equal the epoch count
    std::istringstream hist(slurp(sc.path("trun/history.csv")));
    std::string line;
    std::getline(hist, line);
    CHECK(line == "epoch,train_loss,val_loss");
    std::size_t rows = 0;
    while (std::getline(hist, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);
}

TEST_CASE("eval prints a metrics report and writes it to disk") {
    const Scratch& sc = pipeline();
    REQUIRE(sc.mstgat("eval --checkpoint " + sc.path("trun/checkpoint") + " --tensor " +
                      sc.path("idata/tensor.bin") + " --stations " +
                      sc.path("sdata/stations.csv") + " --split test --out " +
                      sc.path("erun")) == 0);
    const json report = json::parse(slurp(sc.path("erun/eval.json")));
    CHECK(report.at("split") == "test");
    CHECK(report.at("metrics").contains("mae"));
    CHECK(report.at("metrics").contains("rmse"));
    CHECK(report.at("metrics").at("mae").get<double>() >= 0.0);
}

TEST_CASE("transfer evaluates whole tensors against the checkpoint") {
    const Scratch& sc = pipeline();
    REQUIRE(sc.mstgat("transfer --checkpoint " + sc.path("trun/checkpoint") + " --tensor " +
                      sc.path("idata/tensor.bin") + " --stations " +
                      sc.path("sdata/stations.csv") + " --out " + sc.path("xrun")) == 0);
    const json report = json::parse(slurp(sc.path("xrun/transfer.json")));
    CHECK(report.at("sets").contains("tensor"));
    const std::string csv = slurp(sc.path("xrun/transfer.csv"));
    CHECK(csv.rfind("set,metric,horizon_min,model,value\n", 0) == 0);
}

TEST_CASE("stats emits the documented summary columns") {
    const Scratch& sc = pipeline();
    REQUIRE(sc.mstgat("stats --tensor " + sc.path("idata/tensor.bin") + " --out " +
                      sc.path("srun")) == 0);
    const std::string csv = slurp(sc.path("srun/summary_stats.csv"));
    CHECK(csv.rfind("variable,set,min,q1,q2,q3,max,mean,std\n", 0) == 0);
    CHECK(csv.find("speed,PD,") != std::string::npos);
    const json report = json::parse(slurp(sc.path("srun/stats.json")));
    const auto& occ = report.at("occurrence");
    const double total = occ.at("visibility_low_pct").get<double>() +
                         occ.at("visibility_medium_pct").get<double>() +
                         occ.at("visibility_high_pct").get<double>() +
                         occ.at("visibility_clear_pct").get<double>();
    CHECK(std::abs(total - 100.0) < 1e-6);
}

TEST_CASE("re-running from a manifest reproduces artifacts bit for bit") {
    const Scratch& sc = pipeline();
    REQUIRE(sc.mstgat("train --config " + sc.path("trun/manifest.json") + " --out " +
                      sc.path("trun_again")) == 0);
    CHECK(slurp(sc.path("trun/checkpoint.bin")) == slurp(sc.path("trun_again/checkpoint.bin")));
    CHECK(slurp(sc.path("trun/history.csv")) == slurp(sc.path("trun_again/history.csv")));
    CHECK(slurp(sc.path("trun/metrics.json")) == slurp(sc.path("trun_again/metrics.json")));
}

TEST_CASE("input files are never mutated") {
    const Scratch& sc = pipeline();
    const std::string before = slurp(sc.path("idata/tensor.bin"));
    REQUIRE(sc.mstgat("eval --checkpoint " + sc.path("trun/checkpoint") + " --tensor " +
                      sc.path("idata/tensor.bin") + " --stations " +
                      sc.path("sdata/stations.csv") + " --split val --out " +
                      sc.path("erun2")) == 0);
    CHECK(slurp(sc.path("idata/tensor.bin")) == before);
    CHECK(slurp(sc.path("sdata/speed.csv")) == slurp(sc.path("sdata/speed.csv")));
}

TEST_CASE("guards: bad horizon, unknown subcommand, missing out dir") {
    const Scratch& sc = pipeline();
    CHECK(sc.mstgat("train --tensor " + sc.path("idata/tensor.bin") + " --stations " +
                    sc.path("sdata/stations.csv") + " --horizon 25 --out " +
                    sc.path("bad")) != 0);
    CHECK(sc.mstgat("frobnicate") != 0);
    CHECK(run(sc.cli) != 0);  // no subcommand at all

    // unset MSTGAT_OUT_DIR and give no --out: must fail cleanly
    CHECK(run("env -u MSTGAT_OUT_DIR " + sc.cli + " synth") != 0);
}

TEST_CASE("MSTGAT_OUT_DIR supplies the output directory") {
    const Scratch& sc = pipeline();
    const std::string env_dir = sc.path("envout");
    CHECK(run("env MSTGAT_OUT_DIR=" + env_dir + " " + sc.cli +
              " synth --nodes 4 --steps 120 --seed 2") == 0);
    CHECK(fs::exists(env_dir + "/speed.csv"));
    CHECK(fs::exists(env_dir + "/manifest.json"));
}

TEST_CASE("--threads caps workers without changing results") {
    const Scratch& sc = pipeline();
    REQUIRE(sc.mstgat("eval --checkpoint " + sc.path("trun/checkpoint") + " --tensor " +
                      sc.path("idata/tensor.bin") + " --stations " +
                      sc.path("sdata/stations.csv") + " --split test --threads 1 --out " +
                      sc.path("t1")) == 0);
    REQUIRE(sc.mstgat("eval --checkpoint " + sc.path("trun/checkpoint") + " --tensor " +
                      sc.path("idata/tensor.bin") + " --stations " +
                      sc.path("sdata/stations.csv") + " --split test --threads 4 --out " +
                      sc.path("t4")) == 0);
    CHECK(slurp(sc.path("t1/eval.json")) == slurp(sc.path("t4/eval.json")));
    CHECK(sc.mstgat("eval --threads 0 --checkpoint x --tensor y --stations z --out w") != 0);
}
