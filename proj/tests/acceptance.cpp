// Acceptance checks, one PASS/FAIL line per criterion. Optional arguments select criteria
// by number, e.g. `acceptance 1 2 3`.
#include "support.hpp"

#include "semalign/alignment.hpp"
#include "semalign/checkpoint.hpp"
#include "semalign/fusion.hpp"
#include "semalign/inference.hpp"
#include "semalign/metrics.hpp"
#include "semalign/objectives.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>

using namespace semalign;
using namespace semalign::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::map<std::string, MatrixX<float>> snapshot(SegmentationModel<float>& model) {
    std::map<std::string, MatrixX<float>> out;
    for (auto* p : model.parameters()) out[std::string(to_string(p->group)) + "/" + p->name] = p->value;
    return out;
}

Outcome gradient_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = check_objective_gradients(200);
    const double secs = seconds_since(t0);
    std::set<std::string> groups(r.groups.begin(), r.groups.end());
    bool covered = true;
    for (const char* g : {"decoder", "projection", "prototypes", "context", "text_projection"})
        covered = covered && groups.count(g);
    const bool pass = r.sup.max_rel_error < 1e-4 && r.unsup.max_rel_error < 1e-4 && covered && secs < 120;
    std::string detail = fmt("max rel error L_sup %.2e, L_unsup %.2e over %d entries, %zu groups, %.1f s",
                             r.sup.max_rel_error, r.unsup.max_rel_error, r.sup.checked + r.unsup.checked,
                             groups.size(), secs);
    if (!pass) detail += "; worst L_sup " + r.sup.worst + "; worst L_unsup " + r.unsup.worst;
    return {pass, detail};
}

Outcome normalization() {
    PixelProjector<float> proj(2048, 256);
    Rng rng(1);
    proj.init(rng);
    const auto z = proj.forward(random_tensor<float>({1, 2048, 100, 100}, 2, -2, 2));
    const MatrixX<float> rows = z.rows(0);
    const double norm_err = (rows.rowwise().norm().array() - 1.0f).abs().maxCoeff();

    MatrixX<float> P = random_matrix<float>(2, 256, 3);
    const MatrixX<float> T = random_matrix<float>(2, 256, 4);
    const auto s_zp = prototype_logits(z, P);
    const auto s_zt = text_logits(z, T);
    const double bound = std::max(s_zp.array().abs().maxCoeff(), s_zt.array().abs().maxCoeff());
    P.row(0) *= 37.0f;
    P.row(1) *= 0.01f;
    const double rescale = (prototype_logits(z, P).array() - s_zp.array()).abs().maxCoeff();
    const bool pass = rows.rows() == 10000 && norm_err <= 1e-5 && bound <= 1.0 && rescale <= 1e-6;
    return {pass, fmt("%ld rows, max |norm-1| %.2e, max |S| %.7f, rescale drift %.2e", static_cast<long>(rows.rows()),
                      norm_err, bound, rescale)};
}

Outcome fusion_identity() {
    const auto s_dl = random_tensor<double>({2, 2, 16, 16}, 5, -4, 4);
    const auto s_zp = random_tensor<double>({2, 2, 4, 4}, 6);
    const auto s_zt = random_tensor<double>({2, 2, 4, 4}, 7);
    const bool identity = (fuse_logits(s_dl, s_zp, s_zt, FusionWeights{0, 0}).array() == s_dl.array()).all();

    Tensor<double> dl(1, 2, 1, 1), zp(1, 2, 1, 1), zt(1, 2, 1, 1);
    dl(0, 0, 0, 0) = 2;
    dl(0, 1, 0, 0) = 1;
    zp(0, 0, 0, 0) = 1;
    zt(0, 1, 0, 0) = 1;
    const auto f = fuse_logits(dl, zp, zt, FusionWeights{0.1, 0.1});
    const double err = std::max(std::abs(f(0, 0, 0, 0) - 2.1), std::abs(f(0, 1, 0, 0) - 1.1));
    return {identity && err < 1e-7, fmt("zero weights exact: %s, hand example [%.9f, %.9f] error %.1e",
                                        identity ? "yes" : "no", f(0, 0, 0, 0), f(0, 1, 0, 0), err)};
}

Outcome loss_algebra() {
    // Composition on real training steps.
    Trainer trainer = mini_trainer();
    double total_err = 0;
    for (int i = 0; i < 5; ++i) {
        const auto r = trainer.train_step();
        const double sup = r.sup.dl + r.sup.proto + r.sup.text + r.sup.align;
        const double unsup = r.lambda[0] * r.unsup.hard + r.lambda[1] * r.unsup.soft + r.lambda[2] * r.unsup.corr;
        total_err = std::max(total_err, std::abs(r.total - 0.5 * (sup + unsup)));
    }

    // Uniform logits, C = 2.
    const auto labels = random_labels(2, 8, 8, 2, 8);
    const double ln2_err = std::abs(ce_ignore(Tensor<double>::constant({2, 2, 8, 8}, 0.3), labels).value - std::log(2.0));

    const auto logits = random_tensor<double>({2, 2, 8, 8}, 9, -3, 3);
    const double kl_self = kl_consistency(logits, logits).value;

    const MatrixX<double> P = random_matrix<double>(2, 16, 10);
    double align_self = 0;
    for (AlignLoss kind : {AlignLoss::mse, AlignLoss::cosine, AlignLoss::kl})
        align_self = std::max(align_self, std::abs(align_loss(P, P, kind).value));

    // Perturb logits only where targets are ignored.
    const auto gated = random_labels(2, 8, 8, 2, 11, 0.4);
    const auto a = random_tensor<double>({2, 2, 8, 8}, 12, -3, 3);
    const auto b = random_tensor<double>({2, 2, 8, 8}, 13, -3, 3);
    const auto c = random_tensor<double>({2, 2, 8, 8}, 14, -3, 3);
    auto perturb = [&](const Tensor<double>& x, std::uint64_t seed) {
        Tensor<double> out = x;
        const auto noise = random_tensor<double>(x.shape(), seed, -20, 20);
        for (Index n = 0; n < 2; ++n)
            for (Index k = 0; k < 2; ++k)
                for (Index y = 0; y < 8; ++y)
                    for (Index w = 0; w < 8; ++w)
                        if (gated(n, y, w) == LabelMap::kIgnore) out(n, k, y, w) += noise(n, k, y, w);
        return out;
    };
    const MatrixX<double> T = random_matrix<double>(2, 16, 15);
    const auto sup0 = supervised_loss(a, b, c, P, T, gated);
    const auto sup1 = supervised_loss(perturb(a, 16), perturb(b, 17), perturb(c, 18), P, T, gated);
    const std::array<double, 3> lambda{0.5, 0.25, 0.25};
    const auto un0 = unsupervised_loss(a, b, c, gated, gated, lambda);
    const auto un1 = unsupervised_loss(perturb(a, 19), b, perturb(c, 20), gated, gated, lambda);
    const bool gated_same = sup0.dl == sup1.dl && sup0.proto == sup1.proto && sup0.text == sup1.text &&
                            un0.hard == un1.hard && un0.corr == un1.corr;

    const bool pass = total_err < 1e-7 && ln2_err < 1e-6 && kl_self == 0 && align_self < 1e-7 && gated_same;
    return {pass, fmt("total err %.1e, |CE-ln2| %.1e, KL(p||p) %.1e, align(P,P) %.1e, gated losses unchanged: %s",
                      total_err, ln2_err, kl_self, align_self, gated_same ? "yes" : "no")};
}

Outcome pseudo_gate() {
    bool monotone = true, above = true;
    for (std::uint64_t batch = 0; batch < 5; ++batch) {
        const auto logits = random_tensor<double>({2, 2, 16, 16}, 100 + batch, -4, 4);
        Index prev = logits.n() * logits.h() * logits.w() + 1;
        for (int k = 0; k < 20; ++k) {
            const double tau = 0.5 + 0.5 * k / 19.0;
            const auto pl = generate_pseudo_labels(logits, tau);
            Index valid = 0;
            for (std::size_t i = 0; i < pl.valid.data.size(); ++i) {
                if (!pl.valid.data[i]) continue;
                ++valid;
                above = above && pl.confidence[static_cast<Index>(i)] >= tau;
            }
            monotone = monotone && valid <= prev;
            prev = valid;
        }
    }
    ThresholdState s;
    const std::vector<double> at{s.tau - 0.1, s.tau + 0.1};
    const double drift = std::abs(update_threshold(s, at).tau - s.tau);
    const double tau0 = TrainConfig{}.initial_threshold().tau;
    const bool pass = monotone && above && drift < 1e-12 && tau0 == 0.7;
    return {pass, fmt("nonincreasing over 20 tau values x 5 batches: %s, confidence >= tau: %s, fixed-point drift "
                      "%.1e, tau0 %.2f",
                      monotone ? "yes" : "no", above ? "yes" : "no", drift, tau0)};
}

Outcome metric_oracle() {
    bool exact = true;
    double identity = 0;
    for (std::uint64_t k = 0; k < 200; ++k) {
        const auto p = random_labels(1, 16, 16, 2, 2 * k);
        const auto g = random_labels(1, 16, 16, 2, 2 * k + 1);
        const auto r = dice_jaccard(p, g, 2);
        for (int c = 0; c < 2; ++c) {
            long inter = 0, np = 0, ng = 0;
            for (std::size_t i = 0; i < p.data.size(); ++i) {
                inter += p.data[i] == c && g.data[i] == c;
                np += p.data[i] == c;
                ng += g.data[i] == c;
            }
            exact = exact && r.counts.intersection[c] == inter && r.counts.predicted[c] == np &&
                    r.counts.ground_truth[c] == ng && r.dice[c] == 2.0 * inter / static_cast<double>(np + ng) &&
                    r.jaccard[c] == inter / static_cast<double>(np + ng - inter);
            identity = std::max(identity, std::abs(r.jaccard[c] - r.dice[c] / (2 - r.dice[c])));
        }
    }
    return {exact && identity < 1e-12, fmt("200 pairs exact: %s, max |J - D/(2-D)| %.1e", exact ? "yes" : "no", identity)};
}

Outcome frozen_contracts() {
    TrainConfig cfg = small_config();
    cfg.batch_labeled = 2;
    cfg.batch_unlabeled = 2;
    auto unlabeled = tiny_samples(4, 201, 64);
    for (auto& s : unlabeled) s.mask.reset();
    Trainer trainer(cfg, tiny_samples(4, 200, 64), unlabeled);
    const auto before = snapshot(trainer.model());
    for (int i = 0; i < 50; ++i) trainer.train_step();
    const auto after = snapshot(trainer.model());

    // BN affine and running statistics belong to the decoder and projection blocks.
    const std::set<std::string> allowed{"decoder", "projection", "prototypes", "context",
                                        "text_projection", "classifier", "norm", "buffer"};
    bool frozen_ok = true, only_allowed = true;
    std::set<std::string> moved;
    for (const auto& [key, value] : before) {
        const auto group = key.substr(0, key.find('/'));
        const bool same = after.at(key) == value;
        if (group == "encoder" || group == "text_encoder") frozen_ok = frozen_ok && same;
        if (!same) {
            moved.insert(group);
            only_allowed = only_allowed && allowed.count(group);
        }
    }
    std::string list;
    for (const auto& g : moved) list += (list.empty() ? "" : ",") + g;
    return {frozen_ok && only_allowed, fmt("encoders bit-identical: %s, changed groups {%s}", frozen_ok ? "yes" : "no",
                                           list.c_str())};
}

Outcome overfit() {
    const auto t0 = std::chrono::steady_clock::now();
    SyntheticSpec spec;
    spec.n_images = 40;
    spec.size = 64;
    const auto data = generate_synthetic_glands(spec);
    TrainConfig cfg = resolve_config({}, {"max_steps=300", "augment.crop=64", "augment.scale_min=1",
                                          "augment.scale_max=1"});
    Trainer trainer(cfg, data, {});
    while (!trainer.done()) trainer.train_step();
    const auto m = evaluate(trainer.model(), data, cfg);
    const double secs = seconds_since(t0);
    return {m.mdice >= 0.90 && secs < 600,
            fmt("mDice %.4f after %ld steps on the 40-image 64px set, %.0f s", m.mdice, trainer.step(), secs)};
}

double ssl_run(int variant, int seed, const std::vector<Sample>& data, const std::vector<Sample>& test) {
    std::vector<std::string> overrides{"augment.crop=64",        "model.low_channels=64", "model.high_channels=256",
                                       "model.aspp_channels=64", "model.embed_dim=64",    "encoder.width=192",
                                       "max_steps=900",          "seed=" + std::to_string(seed)};
    if (variant < 2) {
        overrides.push_back("align.use_prototype=false");
        overrides.push_back("align.use_text=false");
    }
    const TrainConfig cfg = resolve_config({}, overrides);
    std::vector<std::string> ids;
    for (const auto& s : data) ids.push_back(s.id);
    const auto split = make_ssl_split(ids, 0.1, cfg.seed);
    const std::set<std::string> labeled(split.labeled_ids.begin(), split.labeled_ids.end());
    std::vector<Sample> L, U;
    for (const auto& s : data) {
        if (labeled.count(s.id)) {
            L.push_back(s);
        } else if (variant > 0) {
            U.push_back(s);
            U.back().mask.reset();
        }
    }
    Trainer trainer(cfg, L, U);
    while (!trainer.done()) trainer.train_step();
    return evaluate(trainer.model(), test, cfg).mdice;
}

Outcome direction_of_effect() {
    const auto t0 = std::chrono::steady_clock::now();
    SyntheticSpec spec;
    spec.n_images = 40;
    spec.size = 64;
    const auto data = generate_synthetic_glands(spec);
    SyntheticSpec tspec = spec;
    tspec.n_images = 20;
    tspec.seed = 1000;
    tspec.id_prefix = "test";
    const auto test = generate_synthetic_glands(tspec);

    int holds = 0;
    std::string detail;
    for (int seed = 0; seed < 3; ++seed) {
        const double sup = ssl_run(0, seed, data, test);
        const double ssl = ssl_run(1, seed, data, test);
        const double full = ssl_run(2, seed, data, test);
        const bool ok = sup <= ssl && ssl <= full;
        holds += ok;
        detail += fmt("%sseed %d: %.4f / %.4f / %.4f%s", seed ? "; " : "", seed, sup, ssl, full, ok ? "" : " (violated)");
    }
    return {holds >= 2, fmt("ordering sup <= ssl <= full on %d of 3 seeds (", holds) + detail +
                            fmt("), %.0f s", seconds_since(t0))};
}

Outcome determinism() {
    TrainConfig cfg = small_config();
    cfg.max_steps = 5;
    cfg.batch_labeled = 2;
    cfg.batch_unlabeled = 2;
    auto run = [&] {
        auto unlabeled = tiny_samples(4, 301, 64);
        for (auto& s : unlabeled) s.mask.reset();
        Trainer t(cfg, tiny_samples(4, 300, 64), unlabeled);
        std::vector<LossReport> reports;
        while (!t.done()) reports.push_back(t.train_step());
        return std::make_pair(reports, snapshot(t.model()));
    };
    const auto a = run(), b = run();
    const bool same = a.first == b.first && a.second == b.second;
    return {same && a.first.size() == 5, fmt("%zu steps, identical reports and weights: %s", a.first.size(),
                                             same ? "yes" : "no")};
}

Outcome checkpoint_round_trip() {
    TrainConfig cfg = mini_config();
    cfg.max_steps = 8;
    Trainer full = mini_trainer(cfg);
    std::vector<double> lr_full;
    while (!full.done()) lr_full.push_back(full.train_step().lr);

    Trainer first = mini_trainer(cfg);
    std::vector<double> lr_resumed;
    for (int i = 0; i < 3; ++i) lr_resumed.push_back(first.train_step().lr);
    const auto dir = scratch_dir("acceptance_ckpt");
    first.save(dir);

    const auto state = read_checkpoint(dir);
    SegmentationModel<float> loaded(state.config.model);
    restore_model(state, loaded);
    const auto image = tiny_samples(1, 9)[0].image;
    const bool bitwise =
        (infer_image(first.model(), image, cfg).array() == infer_image(loaded, image, state.config).array()).all();

    Trainer second = mini_trainer(cfg);
    second.resume(dir);
    while (!second.done()) lr_resumed.push_back(second.train_step().lr);
    const bool lr_same = lr_resumed == lr_full;
    return {bitwise && lr_same, fmt("eval logits bitwise equal: %s, %zu-step lr sequence equal after resume: %s",
                                    bitwise ? "yes" : "no", lr_full.size(), lr_same ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient oracle", gradient_oracle},
        {"normalization invariants", normalization},
        {"fusion identity", fusion_identity},
        {"loss algebra", loss_algebra},
        {"pseudo-label gate", pseudo_gate},
        {"metric oracle", metric_oracle},
        {"frozen contracts", frozen_contracts},
        {"overfit", overfit},
        {"direction of effect", direction_of_effect},
        {"determinism", determinism},
        {"checkpoint round trip", checkpoint_round_trip},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(n)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %2d %s  %s: %s\n", n, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
