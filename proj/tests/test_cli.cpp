#include "support.hpp"

#include "semalign/commands.hpp"
#include "semalign/config.hpp"
#include "semalign/overlay.hpp"
#include "semalign/png_io.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace semalign;
using namespace semalign::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
    int code;
    std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
    args.insert(args.begin(), "semalign");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::size_t count_files(const fs::path& dir) {
    std::size_t n = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++n;
    return n;
}

// Shared fixture: synthetic data plus a one-epoch mini config.
struct Workspace {
    fs::path root = scratch_dir("cli");
    fs::path data = root / "data";
    fs::path config = root / "mini.json";

    Workspace() {
        fs::remove_all(root);
        fs::create_directories(root);
        TrainConfig cfg = mini_config();
        cfg.epochs = 1;
        cfg.eval.window = 32;
        cfg.eval.stride = 16;
        std::ofstream(config) << dump_config(cfg);
        const auto r = cli({"synth", "--out", data.string(), "--n", "4", "--test", "2", "--size", "32"});
        REQUIRE(r.code == 0);
    }
};

}  // namespace

TEST_CASE("exit codes") {
    CHECK(cli({"--help"}).code == 0);
    CHECK(cli({}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    const auto dir = scratch_dir("cli_codes");
    CHECK(cli({"train", "--out", (dir / "r").string(), "--override", "nope=1"}).code == 2);
    CHECK(cli({"train", "--out", (dir / "r").string(), "--data", (dir / "missing").string()}).code == 3);
    CHECK(cli({"eval", "--checkpoint", (dir / "missing").string(), "--data", dir.string()}).code == 3);
}

TEST_CASE("print-config echoes the resolved defaults") {
    const auto r = cli({"train", "--out", scratch_dir("cli_print").string(), "--print-config"});
    REQUIRE(r.code == 0);
    CHECK(json::parse(r.out) == to_json(TrainConfig{}));
    const auto o = cli({"train", "--out", scratch_dir("cli_print").string(), "--print-config", "--override", "lr=0.5"});
    CHECK(json::parse(o.out).at("lr") == 0.5);
}

TEST_CASE("synth, split, train, eval and overlay") {
    Workspace ws;
    CHECK(count_files(ws.data / "images" / "train") == 4);
    CHECK(count_files(ws.data / "masks" / "test") == 2);

    const auto split_path = ws.root / "split.json";
    REQUIRE(cli({"split", "--root", ws.data.string(), "--ratio", "0.5", "--out", split_path.string()}).code == 0);
    const auto split = read_manifest(split_path);
    CHECK(split.labeled_ids.size() == 2);
    CHECK(split.unlabeled_ids.size() == 2);

    // The data root falls back to the environment.
    ::setenv("SEMALIGN_DATA_ROOT", ws.data.string().c_str(), 1);
    const auto env_split = ws.root / "split_env.json";
    CHECK(cli({"split", "--ratio", "0.5", "--out", env_split.string()}).code == 0);
    CHECK(slurp(env_split) == slurp(split_path));
    ::unsetenv("SEMALIGN_DATA_ROOT");

    const auto run = ws.root / "run";
    const auto t = cli({"train", "--config", ws.config.string(), "--data", ws.data.string(), "--split",
                        split_path.string(), "--out", run.string(), "--eval"});
    REQUIRE(t.code == 0);
    const auto history = json::parse(slurp(run / "run.json"));
    CHECK(history.at("history").size() == 1);
    CHECK(history.at("history")[0].contains("test"));
    CHECK(fs::exists(run / "checkpoint" / "manifest.txt"));

    const std::string before = slurp(run / "run.json");
    const auto report = ws.root / "report";
    const auto e = cli({"eval", "--checkpoint", (run / "checkpoint").string(), "--data", ws.data.string(), "--out",
                        report.string(), "--labeled", "50%"});
    REQUIRE(e.code == 0);
    CHECK(slurp(run / "run.json") == before);
    const std::string summary = slurp(report / "summary.md");
    CHECK(summary.find("| 50% | UniSemAlign |") != std::string::npos);
    CHECK(slurp(report / "metrics.csv").find("gland") != std::string::npos);

    const auto overlays = ws.root / "overlays";
    REQUIRE(cli({"overlay", "--checkpoint", (run / "checkpoint").string(), "--images", ws.data.string(), "--out",
                 overlays.string()})
                .code == 0);
    CHECK(count_files(overlays) == 2);
    for (const auto& f : fs::directory_iterator(overlays)) {
        const auto img = read_png(f.path(), 3);
        CHECK(img.width == 32);
        CHECK(img.height == 32);
    }
}

TEST_CASE("overlay of ground truth against itself has no disagreement") {
    const auto s = tiny_samples(1, 3)[0];
    const auto same = render_overlay(s.image, *s.mask, &*s.mask);
    CHECK(same.disagreement == 0);
    CHECK(same.image.width == 32);
    CHECK(same.image.channels == 3);

    LabelMap flipped = *s.mask;
    for (auto& v : flipped.data) v = static_cast<std::uint8_t>(1 - v);
    CHECK(render_overlay(s.image, flipped, &*s.mask).disagreement == static_cast<std::int64_t>(flipped.data.size()));
}

TEST_CASE("ablation variants match standalone runs") {
    Workspace ws;
    const auto dry = cli({"ablate", "--grid", "branches", "--out", (ws.root / "dry").string(), "--dry-run"});
    REQUIRE(dry.code == 0);
    CHECK(std::count(dry.out.begin(), dry.out.end(), '\n') == 4);
    CHECK(expand_grid({"tokens"}).size() == 5);
    CHECK(expand_grid({"align_loss", "encoder"}).size() == 8);

    const auto ab = ws.root / "ablate";
    const auto r = cli({"ablate", "--config", ws.config.string(), "--data", ws.data.string(), "--grid",
                        "encoder", "--out", ab.string()});
    REQUIRE(r.code == 0);
    const std::string table = slurp(ab / "ablation.csv");
    CHECK(table.find(",unavailable,") != std::string::npos);  // no pretrained encoder here
    CHECK(table.find(",ok,") != std::string::npos);

    fs::path variant;
    for (const auto& e : fs::directory_iterator(ab))
        if (e.is_directory()) variant = e.path();
    REQUIRE(!variant.empty());

    const auto solo = ws.root / "solo";
    REQUIRE(cli({"train", "--config", ws.config.string(), "--override", "encoder.kind=toy", "--data",
                 ws.data.string(), "--out", solo.string()})
                .code == 0);
    REQUIRE(cli({"eval", "--checkpoint", (solo / "checkpoint").string(), "--data", ws.data.string(), "--out",
                 solo.string()})
                .code == 0);
    CHECK(slurp(variant / "checkpoint" / "manifest.txt") == slurp(solo / "checkpoint" / "manifest.txt"));
    CHECK(slurp(variant / "metrics.csv") == slurp(solo / "metrics.csv"));
    CHECK(slurp(variant / "summary.md") == slurp(solo / "summary.md"));
}
