#pragma once

#include "semalign/config.hpp"
#include "semalign/data.hpp"
#include "semalign/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace semalign {

/// Per-run record written next to the checkpoint. History entries are only ever appended.
struct RunManifest {
    std::string run_id;
    nlohmann::json config;
    std::string code_hash;
    std::vector<nlohmann::json> history;
    /// Step records of an unfinished epoch, kept so a resumed run reports the same epoch means.
    std::vector<nlohmann::json> pending;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
    static RunManifest read(const std::filesystem::path& path);
    void write(const std::filesystem::path& path) const;
};

/// Content hash of the library sources this binary was built from.
std::string code_hash();

/// Run id derived from the resolved config, so identical runs share an id.
std::string run_id_for(const TrainConfig& cfg);

struct TrainOptions {
    std::filesystem::path data_root;
    std::filesystem::path split_manifest;  // empty: every training image is labeled
    std::filesystem::path out_dir;
    bool resume = false;
    bool evaluate_test = false;  // evaluate on the test split at epoch ends
    long stop_after = 0;         // stop after this many steps in this invocation (0 = run to the end)
    long log_every = 10;
};

/// Trains and writes `<out>/checkpoint/` and `<out>/run.json`. Logs JSON lines to `log`.
void run_training(const TrainConfig& cfg, const TrainOptions& opt, std::ostream& log);

struct EvalOptions {
    std::filesystem::path checkpoint;
    std::filesystem::path data_root;
    DataSplit split = DataSplit::test;
    std::string mode;  // empty: the checkpoint config's eval.mode
    std::filesystem::path out_dir;
    std::string labeled = "-";
    std::string method = "UniSemAlign";
};

/// Writes `<out>/metrics.csv` and `<out>/summary.md`; returns the report.
MetricReport run_evaluation(const EvalOptions& opt);

/// Named grids mirroring the ablation tables, or explicit `key=v1,v2` axes.
std::vector<std::vector<std::string>> expand_grid(const std::vector<std::string>& grid_specs);

/// Entry point of the `semalign` tool. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& log);

}  // namespace semalign
