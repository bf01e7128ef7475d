#include "semalign/commands.hpp"

#include "semalign/checkpoint.hpp"
#include "semalign/errors.hpp"
#include "semalign/inference.hpp"
#include "semalign/overlay.hpp"
#include "semalign/png_io.hpp"
#include "semalign/random.hpp"
#include "semalign/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#ifndef SEMALIGN_CODE_HASH
#define SEMALIGN_CODE_HASH "unknown"
#endif

namespace semalign {

namespace fs = std::filesystem;
using nlohmann::json;

std::string code_hash() { return SEMALIGN_CODE_HASH; }

std::string run_id_for(const TrainConfig& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(cfg).dump())));
    return buf;
}

json RunManifest::to_json() const {
    json j{{"run_id", run_id}, {"config", config}, {"code_hash", code_hash}, {"history", history}};
    if (!pending.empty()) j["pending"] = pending;
    return j;
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    try {
        m.run_id = j.at("run_id").get<std::string>();
        m.config = j.at("config");
        m.code_hash = j.at("code_hash").get<std::string>();
        for (const auto& h : j.at("history")) m.history.push_back(h);
        if (j.contains("pending"))
            for (const auto& h : j.at("pending")) m.pending.push_back(h);
    } catch (const json::exception& e) {
        throw DataError(std::string("run manifest is malformed: ") + e.what());
    }
    return m;
}

RunManifest RunManifest::read(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read run manifest " + path.string());
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("run manifest " + path.string() + " is not valid JSON");
    return from_json(j);
}

void RunManifest::write(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw DataError("cannot write " + tmp.string());
        out << to_json().dump(2) << "\n";
    }
    fs::rename(tmp, path);
}

namespace {

void log_record(std::ostream& log, const json& record) { log << record.dump() << std::endl; }

json report_json(const LossReport& r) {
    return {{"total", r.total},
            {"sup", {{"dl", r.sup.dl}, {"proto", r.sup.proto}, {"text", r.sup.text}, {"align", r.sup.align}}},
            {"unsup", {{"hard", r.unsup.hard}, {"soft", r.unsup.soft}, {"corr", r.unsup.corr}}},
            {"valid_pixel_fraction", r.valid_pixel_fraction},
            {"lr", r.lr},
            {"tau", r.tau}};
}

// Mean of the numeric loss fields over an epoch's step records.
json epoch_mean(const std::vector<json>& steps) {
    json mean = steps.back();
    mean.erase("step");
    const double k = 1.0 / static_cast<double>(steps.size());
    auto average = [&](const json::json_pointer& ptr) {
        double acc = 0;
        for (const auto& s : steps) acc += k * s.at(ptr).get<double>();
        mean[ptr] = acc;
    };
    for (const char* f : {"/total", "/valid_pixel_fraction", "/sup/dl", "/sup/proto", "/sup/text", "/sup/align",
                          "/unsup/hard", "/unsup/soft", "/unsup/corr"})
        average(json::json_pointer(f));
    return mean;
}

json metrics_json(const MetricReport& m) {
    return {{"mdice", m.mdice}, {"mjaccard", m.mjaccard}, {"dice", m.dice}, {"jaccard", m.jaccard},
            {"n_images", m.n_images}};
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

std::pair<std::vector<Sample>, std::vector<Sample>> training_sets(const TrainConfig& cfg, const TrainOptions& opt) {
    auto samples = load_images(opt.data_root, DataSplit::train, static_cast<int>(cfg.model.num_classes));
    std::vector<Sample> labeled, unlabeled;
    if (opt.split_manifest.empty()) {
        for (auto& s : samples) {
            if (!s.mask) throw DataError("image '" + s.id + "' has no mask and no split manifest was given");
            labeled.push_back(std::move(s));
        }
        return {std::move(labeled), std::move(unlabeled)};
    }
    const SplitManifest split = read_manifest(opt.split_manifest);
    std::map<std::string, Sample*> by_id;
    for (auto& s : samples) by_id[s.id] = &s;
    for (const auto& id : split.labeled_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw DataError("split lists labeled id '" + id + "' not found in the data");
        if (!it->second->mask) throw DataError("labeled id '" + id + "' has no mask");
        labeled.push_back(*it->second);
    }
    for (const auto& id : split.unlabeled_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw DataError("split lists unlabeled id '" + id + "' not found in the data");
        Sample s = *it->second;
        s.mask.reset();
        unlabeled.push_back(std::move(s));
    }
    return {std::move(labeled), std::move(unlabeled)};
}

}  // namespace

void run_training(const TrainConfig& cfg, const TrainOptions& opt, std::ostream& log) {
    auto [labeled, unlabeled] = training_sets(cfg, opt);
    std::vector<Sample> test;
    if (opt.evaluate_test) test = load_dataset(opt.data_root, DataSplit::test, static_cast<int>(cfg.model.num_classes));

    Trainer trainer(cfg, std::move(labeled), std::move(unlabeled));
    const fs::path ckpt = opt.out_dir / "checkpoint";
    const fs::path run_path = opt.out_dir / "run.json";
    RunManifest run{run_id_for(cfg), to_json(cfg), code_hash(), {}, {}};
    if (opt.resume && fs::exists(ckpt / "manifest.txt")) {
        trainer.resume(ckpt);
        if (fs::exists(run_path)) {
            RunManifest prev = RunManifest::read(run_path);
            if (prev.run_id != run.run_id) throw ConfigError("run.json belongs to a different run");
            run.history = std::move(prev.history);
            run.pending = std::move(prev.pending);
        }
        log_record(log, {{"event", "resume"}, {"step", trainer.step()}});
    }

    const long ipe = trainer.iterations_per_epoch();
    log_record(log, {{"event", "start"},
                     {"run_id", run.run_id},
                     {"total_steps", trainer.total_steps()},
                     {"iterations_per_epoch", ipe},
                     {"epochs", cfg.epochs},
                     {"lr", cfg.lr},
                     {"num_context_tokens", cfg.model.num_context_tokens},
                     {"eta_p", cfg.fusion.eta_p},
                     {"eta_t", cfg.fusion.eta_t},
                     {"tau_init", cfg.pseudo.tau_init}});

    long ran = 0;
    while (!trainer.done() && (opt.stop_after <= 0 || ran < opt.stop_after)) {
        const LossReport r = trainer.train_step();
        ++ran;
        const long step = trainer.step();
        json rec = report_json(r);
        rec["step"] = step;
        run.pending.push_back(rec);
        if (opt.log_every > 0 && step % opt.log_every == 0) {
            rec["event"] = "step";
            log_record(log, rec);
        }
        if (step % ipe == 0 || trainer.done()) {
            json entry = epoch_mean(run.pending);
            entry["epoch"] = (step + ipe - 1) / ipe;
            entry["step"] = step;
            entry["tau"] = trainer.threshold().tau;
            const long epoch = entry["epoch"].get<long>();
            const bool eval_now = opt.evaluate_test &&
                                  (trainer.done() || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0));
            if (eval_now) entry["test"] = metrics_json(evaluate(trainer.model(), test, cfg));
            run.history.push_back(entry);
            run.pending.clear();
            trainer.save(ckpt);
            run.write(run_path);
            json ev = entry;
            ev["event"] = "epoch";
            log_record(log, ev);
        }
    }
    if (!run.pending.empty()) trainer.save(ckpt);  // interrupted mid-epoch
    run.write(run_path);
    log_record(log, {{"event", trainer.done() ? "finished" : "stopped"}, {"step", trainer.step()}});
}

MetricReport run_evaluation(const EvalOptions& opt) {
    const CheckpointState st = read_checkpoint(opt.checkpoint);
    TrainConfig cfg = st.config;
    if (!opt.mode.empty()) {
        cfg.eval.mode = opt.mode;
        cfg.validate();
    }
    SegmentationModel<float> model(cfg.model);
    restore_model(st, model);
    const auto samples = load_dataset(opt.data_root, opt.split, static_cast<int>(cfg.model.num_classes));
    const MetricReport report = evaluate(model, samples, cfg);
    if (!opt.out_dir.empty()) {
        write_text(opt.out_dir / "metrics.csv", metrics_csv(report, cfg.model.class_names));
        write_text(opt.out_dir / "summary.md",
                   metrics_summary(report, cfg.model.class_names, opt.labeled, opt.method));
    }
    return report;
}

std::vector<std::vector<std::string>> expand_grid(const std::vector<std::string>& specs) {
    std::vector<std::vector<std::string>> axes;
    for (const auto& spec : specs) {
        if (spec == "branches") {
            // Text/prototype rows: neither, prototype only, text only, both.
            axes.push_back({"align.use_text=false,align.use_prototype=false",
                            "align.use_text=false,align.use_prototype=true",
                            "align.use_text=true,align.use_prototype=false",
                            "align.use_text=true,align.use_prototype=true"});
        } else if (spec == "tokens") {
            axes.push_back({"align.num_context_tokens=0", "align.num_context_tokens=2", "align.num_context_tokens=3",
                            "align.num_context_tokens=4", "align.num_context_tokens=5"});
        } else if (spec == "align_loss") {
            axes.push_back({"align.loss=none", "align.loss=cosine", "align.loss=kl", "align.loss=mse"});
        } else if (spec == "encoder") {
            axes.push_back({"encoder.kind=toy", "encoder.kind=uni"});
        } else {
            const auto eq = spec.find('=');
            if (eq == std::string::npos || eq == 0)
                throw ConfigError("grid '" + spec + "' is neither a named grid nor key=v1,v2,...");
            const std::string key = spec.substr(0, eq);
            std::vector<std::string> axis;
            // Values are separated by ';' when they contain commas themselves (e.g. JSON arrays).
            const std::string values = spec.substr(eq + 1);
            const char sep = values.find(';') != std::string::npos ? ';' : ',';
            std::stringstream ss(values);
            std::string v;
            while (std::getline(ss, v, sep))
                if (!v.empty()) axis.push_back(key + "=" + v);
            if (axis.empty()) throw ConfigError("grid '" + spec + "' has no values");
            axes.push_back(axis);
        }
    }
    std::vector<std::vector<std::string>> variants{{}};
    for (const auto& axis : axes) {
        std::vector<std::vector<std::string>> next;
        for (const auto& v : variants)
            for (const auto& value : axis) {
                auto combined = v;
                std::stringstream ss(value);
                std::string part;
                // Named grids bundle several assignments separated by ','.
                if (value.find(",align.") != std::string::npos) {
                    while (std::getline(ss, part, ',')) combined.push_back(part);
                } else {
                    combined.push_back(value);
                }
                next.push_back(std::move(combined));
            }
        variants = std::move(next);
    }
    return variants;
}

namespace {

std::string variant_dir(std::size_t index, const std::vector<std::string>& overrides) {
    std::string name;
    for (const auto& o : overrides) {
        if (!name.empty()) name += "__";
        name += o;
    }
    for (auto& ch : name)
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_' && ch != '.') ch = '-';
    char prefix[16];
    std::snprintf(prefix, sizeof prefix, "v%02zu_", index);
    return prefix + (name.empty() ? std::string("base") : name);
}

fs::path data_root_or_env(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("SEMALIGN_DATA_ROOT"); env && *env) return env;
    throw ConfigError("no data root: pass --data or set SEMALIGN_DATA_ROOT");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& log) {
    CLI::App app{"Semi-supervised gland segmentation with prototype and text alignment"};
    app.require_subcommand(1);

    // split
    std::string s_root, s_out;
    double s_ratio = 0.1;
    std::uint64_t s_seed = 0;
    auto* split = app.add_subcommand("split", "Create a labeled/unlabeled split manifest");
    split->add_option("--root", s_root, "Dataset root (defaults to $SEMALIGN_DATA_ROOT)");
    split->add_option("--ratio", s_ratio, "Labeled fraction in (0, 1]");
    split->add_option("--seed", s_seed, "Shuffle seed");
    split->add_option("--out", s_out, "Manifest path")->required();

    // synth
    std::string y_out;
    SyntheticSpec y_spec;
    int y_test = 20;
    auto* synth = app.add_subcommand("synth", "Write the synthetic gland dataset");
    synth->add_option("--out", y_out, "Dataset root to create")->required();
    synth->add_option("--n", y_spec.n_images, "Training images");
    synth->add_option("--test", y_test, "Test images");
    synth->add_option("--size", y_spec.size, "Image side in pixels");
    synth->add_option("--seed", y_spec.seed, "Generator seed");

    // train
    std::vector<std::string> t_configs, t_overrides;
    std::string t_data, t_split, t_out;
    TrainOptions t_opt;
    bool t_print_config = false;
    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--config", t_configs, "Config file(s), applied in order");
    train->add_option("--override", t_overrides, "dotted.key=value overrides");
    train->add_option("--data", t_data, "Dataset root (defaults to $SEMALIGN_DATA_ROOT)");
    train->add_option("--split", t_split, "Split manifest; without it every image is labeled");
    train->add_option("--out", t_out, "Run directory")->required();
    train->add_flag("--resume", t_opt.resume, "Continue from <out>/checkpoint if present");
    train->add_flag("--eval", t_opt.evaluate_test, "Evaluate on the test split at epoch ends");
    train->add_option("--stop-after", t_opt.stop_after, "Stop after this many steps");
    train->add_option("--log-every", t_opt.log_every, "Steps between step log records");
    train->add_flag("--print-config", t_print_config, "Print the resolved config and exit");

    // eval
    EvalOptions e_opt;
    std::string e_ckpt, e_data, e_split = "test", e_out, e_mode;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--checkpoint", e_ckpt, "Checkpoint directory")->required();
    eval->add_option("--data", e_data, "Dataset root (defaults to $SEMALIGN_DATA_ROOT)");
    eval->add_option("--split", e_split, "Dataset split (train|test)");
    eval->add_option("--mode", e_mode, "single | sliding (default: from the checkpoint config)");
    eval->add_option("--out", e_out, "Report directory");
    eval->add_option("--labeled", e_opt.labeled, "Labeled-ratio column of the summary");
    eval->add_option("--method", e_opt.method, "Method column of the summary");

    // ablate
    std::vector<std::string> a_configs, a_overrides, a_grids;
    std::string a_data, a_split, a_out, a_labeled = "-";
    bool a_dry = false;
    auto* ablate = app.add_subcommand("ablate", "Train and evaluate every variant of a grid");
    ablate->add_option("--config", a_configs, "Config file(s)");
    ablate->add_option("--override", a_overrides, "Overrides shared by all variants");
    ablate->add_option("--grid", a_grids, "branches | tokens | align_loss | encoder | key=v1,v2")->required();
    ablate->add_option("--data", a_data, "Dataset root (defaults to $SEMALIGN_DATA_ROOT)");
    ablate->add_option("--split", a_split, "Split manifest");
    ablate->add_option("--out", a_out, "Output directory")->required();
    ablate->add_option("--labeled", a_labeled, "Labeled-ratio column of the summaries");
    ablate->add_flag("--dry-run", a_dry, "List variants without running them");

    // overlay
    std::string o_ckpt, o_images, o_split = "test", o_out;
    auto* overlay = app.add_subcommand("overlay", "Write prediction overlays");
    overlay->add_option("--checkpoint", o_ckpt, "Checkpoint directory")->required();
    overlay->add_option("--images", o_images, "Dataset root (defaults to $SEMALIGN_DATA_ROOT)");
    overlay->add_option("--split", o_split, "Dataset split (train|test)");
    overlay->add_option("--out", o_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, log);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*split) {
            const fs::path root = data_root_or_env(s_root);
            std::vector<std::string> ids;
            for (const auto& s : load_images(root, DataSplit::train)) ids.push_back(s.id);
            const SplitManifest m = make_ssl_split(ids, s_ratio, s_seed);
            write_manifest(s_out, m);
            log_record(log, {{"event", "split"},
                             {"labeled", m.labeled_ids.size()},
                             {"unlabeled", m.unlabeled_ids.size()},
                             {"out", s_out}});
            out << m.labeled_ids.size() << " labeled, " << m.unlabeled_ids.size() << " unlabeled\n";
        } else if (*synth) {
            write_dataset(fs::path(y_out), DataSplit::train, generate_synthetic_glands(y_spec));
            SyntheticSpec test = y_spec;
            test.n_images = y_test;
            test.seed = y_spec.seed + 1000;
            test.id_prefix = "synth_test";
            if (y_test > 0) write_dataset(fs::path(y_out), DataSplit::test, generate_synthetic_glands(test));
            out << "wrote " << y_spec.n_images << " train and " << y_test << " test images to " << y_out << "\n";
        } else if (*train) {
            const TrainConfig cfg = resolve_config(t_configs, t_overrides);
            if (t_print_config) {
                out << dump_config(cfg) << "\n";
                return 0;
            }
            t_opt.data_root = data_root_or_env(t_data);
            t_opt.split_manifest = t_split;
            t_opt.out_dir = t_out;
            run_training(cfg, t_opt, log);
        } else if (*eval) {
            e_opt.checkpoint = e_ckpt;
            e_opt.data_root = data_root_or_env(e_data);
            e_opt.split = parse_split(e_split);
            e_opt.mode = e_mode;
            e_opt.out_dir = e_out;
            const MetricReport r = run_evaluation(e_opt);
            const CheckpointState st = read_checkpoint(e_ckpt);
            out << metrics_summary(r, st.config.model.class_names, e_opt.labeled, e_opt.method);
        } else if (*ablate) {
            const auto variants = expand_grid(a_grids);
            std::ostringstream table;
            table << "variant,overrides,status,mdice,mjaccard\n";
            for (std::size_t i = 0; i < variants.size(); ++i) {
                std::vector<std::string> overrides = a_overrides;
                overrides.insert(overrides.end(), variants[i].begin(), variants[i].end());
                const std::string dir = variant_dir(i, variants[i]);
                std::string joined;
                for (const auto& v : variants[i]) joined += (joined.empty() ? "" : " ") + v;
                if (a_dry) {
                    out << dir << ": " << joined << "\n";
                    continue;
                }
                try {
                    const TrainConfig cfg = resolve_config(a_configs, overrides);
                    TrainOptions opt;
                    opt.data_root = data_root_or_env(a_data);
                    opt.split_manifest = a_split;
                    opt.out_dir = fs::path(a_out) / dir;
                    run_training(cfg, opt, log);
                    EvalOptions eo;
                    eo.checkpoint = opt.out_dir / "checkpoint";
                    eo.data_root = opt.data_root;
                    eo.out_dir = opt.out_dir;
                    eo.labeled = a_labeled;
                    const MetricReport r = run_evaluation(eo);
                    char buf[64];
                    std::snprintf(buf, sizeof buf, "%.6f,%.6f", r.mdice, r.mjaccard);
                    table << dir << ",\"" << joined << "\",ok," << buf << "\n";
                } catch (const ConfigError& e) {
                    // A variant that cannot be built here (e.g. a plugin encoder) is reported, not fatal.
                    log_record(log, {{"event", "variant_skipped"}, {"variant", dir}, {"reason", e.what()}});
                    table << dir << ",\"" << joined << "\",unavailable,,\n";
                }
            }
            if (!a_dry) {
                write_text(fs::path(a_out) / "ablation.csv", table.str());
                out << table.str();
            }
        } else if (*overlay) {
            const CheckpointState st = read_checkpoint(o_ckpt);
            SegmentationModel<float> model(st.config.model);
            restore_model(st, model);
            const auto samples = load_images(data_root_or_env(o_images), parse_split(o_split),
                                             static_cast<int>(st.config.model.num_classes));
            for (const auto& s : samples) {
                const LabelMap pred = argmax_labels(infer_image(model, s.image, st.config));
                const OverlayResult r = render_overlay(s.image, pred, s.mask ? &*s.mask : nullptr);
                write_png(fs::path(o_out) / (s.id + ".png"), r.image);
                log_record(log, {{"event", "overlay"}, {"id", s.id}, {"disagreement", r.disagreement}});
            }
            out << "wrote " << samples.size() << " overlays to " << o_out << "\n";
        }
    } catch (const ConfigError& e) {
        log_record(log, {{"event", "error"}, {"kind", "config"}, {"message", e.what()}});
        return 2;
    } catch (const DataError& e) {
        log_record(log, {{"event", "error"}, {"kind", "data"}, {"message", e.what()}});
        return 3;
    } catch (const NumericError& e) {
        log_record(log, {{"event", "error"}, {"kind", "numeric"}, {"message", e.what()}});
        return 4;
    } catch (const json::exception& e) {
        log_record(log, {{"event", "error"}, {"kind", "config"}, {"message", e.what()}});
        return 2;
    } catch (const std::exception& e) {
        log_record(log, {{"event", "error"}, {"kind", "internal"}, {"message", e.what()}});
        return 1;
    }
    return 0;
}

}  // namespace semalign
