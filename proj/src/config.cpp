#include "semalign/config.hpp"

#include "semalign/errors.hpp"

#include <fstream>
#include <sstream>

namespace semalign {

using nlohmann::json;

ThresholdState TrainConfig::initial_threshold() const {
    return ThresholdState{pseudo.tau_init, pseudo.ema_alpha, pseudo.tau_clamp[0], pseudo.tau_clamp[1]};
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (epochs <= 0 && max_steps <= 0) fail("epochs must be > 0 (or set max_steps)");
    if (!(lr > 0)) fail("lr must be > 0");
    if (momentum < 0 || momentum >= 1) fail("momentum must be in [0, 1)");
    if (weight_decay < 0) fail("weight_decay must be >= 0");
    if (!(poly_power >= 0)) fail("poly_power must be >= 0");
    if (batch_labeled <= 0) fail("batch.labeled must be > 0");
    if (batch_unlabeled < 0) fail("batch.unlabeled must be >= 0");
    if (max_steps < 0) fail("max_steps must be >= 0");
    if (augment.crop <= 0 || augment.crop % 16 != 0) fail("augment.crop must be a positive multiple of 16");
    if (augment.scale_min <= 0 || augment.scale_max < augment.scale_min) fail("augment scale range is invalid");
    if (augment.feature_dropout < 0 || augment.feature_dropout >= 1) fail("augment.feature_dropout must be in [0, 1)");
    if (pseudo.tau_clamp[0] > pseudo.tau_clamp[1]) fail("pseudo.tau_clamp must be ordered");
    if (pseudo.tau_init < 0 || pseudo.tau_init > 1) fail("pseudo.tau_init must be in [0, 1]");
    if (pseudo.ema_alpha < 0 || pseudo.ema_alpha > 1) fail("pseudo.ema_alpha must be in [0, 1]");
    if (!loss.kl_stopgrad_target)
        fail("loss.kl_stopgrad_target=false is not supported: the weak view is evaluated without gradients");
    for (double l : loss.lambda)
        if (l < 0) fail("loss.lambda entries must be >= 0");
    if (eval.mode != "single" && eval.mode != "sliding") fail("eval.mode must be single or sliding");
    if (eval.logits != "decoder" && eval.logits != "fused") fail("eval.logits must be decoder or fused");
    if (eval.window <= 0 || eval.window % 16 != 0) fail("eval.window must be a positive multiple of 16");
    if (eval.stride <= 0 || eval.stride > eval.window) fail("eval.stride must be in (0, window]");
    for (double s : data.std)
        if (!(s > 0)) fail("data.std entries must be > 0");
    if (model.encoder.taps.size() != 2) fail("encoder.taps must have two entries");
}

json to_json(const TrainConfig& c) {
    const auto& m = c.model;
    const auto& a = c.augment;
    json j;
    j["epochs"] = c.epochs;
    j["lr"] = c.lr;
    j["momentum"] = c.momentum;
    j["weight_decay"] = c.weight_decay;
    j["poly_power"] = c.poly_power;
    j["batch"] = {{"labeled", c.batch_labeled}, {"unlabeled", c.batch_unlabeled}};
    j["seed"] = c.seed;
    j["max_steps"] = c.max_steps;
    j["eval_every"] = c.eval_every;
    j["model"] = {{"num_classes", m.num_classes},     {"low_channels", m.low_channels},
                  {"high_channels", m.high_channels}, {"aspp_channels", m.aspp_channels},
                  {"low_reduce", m.low_reduce},       {"atrous_rates", m.atrous_rates},
                  {"embed_dim", m.embed_dim}};
    j["encoder"] = {{"kind", m.encoder.kind},
                    {"width", m.encoder.width},
                    {"taps", m.encoder.taps},
                    {"seed", m.encoder.seed}};
    j["text_encoder"] = {{"kind", m.text_encoder.kind}, {"seed", m.text_encoder.seed}};
    j["align"] = {{"use_prototype", m.use_prototype},
                  {"use_text", m.use_text},
                  {"num_context_tokens", m.num_context_tokens},
                  {"class_names", m.class_names},
                  {"temperature", m.temperature},
                  {"loss", to_string(c.loss.align)}};
    j["augment"] = {{"crop", a.crop},
                    {"scale_min", a.scale_min},
                    {"scale_max", a.scale_max},
                    {"flip_prob", a.flip_prob},
                    {"color_jitter_prob", a.color_jitter_prob},
                    {"brightness", a.brightness},
                    {"contrast", a.contrast},
                    {"saturation", a.saturation},
                    {"hue", a.hue},
                    {"grayscale_prob", a.grayscale_prob},
                    {"blur_prob", a.blur_prob},
                    {"blur_sigma_min", a.blur_sigma_min},
                    {"blur_sigma_max", a.blur_sigma_max},
                    {"cutmix_prob", a.cutmix_prob},
                    {"cutmix_area_min", a.cutmix_area_min},
                    {"cutmix_area_max", a.cutmix_area_max},
                    {"cutmix_aspect_min", a.cutmix_aspect_min},
                    {"cutmix_aspect_max", a.cutmix_aspect_max},
                    {"feature_dropout", a.feature_dropout}};
    j["fusion"] = {{"eta_p", c.fusion.eta_p}, {"eta_t", c.fusion.eta_t}};
    j["pseudo"] = {{"tau_init", c.pseudo.tau_init},
                   {"ema_alpha", c.pseudo.ema_alpha},
                   {"tau_clamp", c.pseudo.tau_clamp}};
    j["loss"] = {{"lambda", c.loss.lambda}, {"kl_stopgrad_target", c.loss.kl_stopgrad_target}};
    j["eval"] = {{"mode", c.eval.mode},
                 {"window", c.eval.window},
                 {"stride", c.eval.stride},
                 {"logits", c.eval.logits}};
    j["data"] = {{"mean", c.data.mean}, {"std", c.data.std}};
    j["model_seed"] = m.seed;
    return j;
}

namespace {

// Every key of `j` must also exist in the default tree.
void check_known_keys(const json& j, const json& reference, const std::string& path) {
    if (!j.is_object()) return;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!reference.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
        if (reference.at(it.key()).is_object()) {
            if (!it.value().is_object()) throw ConfigError("config key '" + key + "' must be an object");
            check_known_keys(it.value(), reference.at(it.key()), key);
        }
    }
}

class Reader {
public:
    explicit Reader(const json& root) : root_(root) {}

    template <typename T>
    void operator()(const std::string& dotted, T& out) const {
        const json* node = &root_;
        std::size_t start = 0;
        while (true) {
            const auto dot = dotted.find('.', start);
            const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (!node->is_object() || !node->contains(key)) return;  // keep default
            node = &node->at(key);
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        try {
            out = node->get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config key '" + dotted + "': " + e.what());
        }
    }

private:
    const json& root_;
};

}  // namespace

TrainConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    check_known_keys(j, to_json(TrainConfig{}), "");
    TrainConfig c;
    auto& m = c.model;
    auto& a = c.augment;
    const Reader r(j);
    r("epochs", c.epochs);
    r("lr", c.lr);
    r("momentum", c.momentum);
    r("weight_decay", c.weight_decay);
    r("poly_power", c.poly_power);
    r("batch.labeled", c.batch_labeled);
    r("batch.unlabeled", c.batch_unlabeled);
    r("seed", c.seed);
    r("max_steps", c.max_steps);
    r("eval_every", c.eval_every);
    r("model.num_classes", m.num_classes);
    r("model.low_channels", m.low_channels);
    r("model.high_channels", m.high_channels);
    r("model.aspp_channels", m.aspp_channels);
    r("model.low_reduce", m.low_reduce);
    r("model.atrous_rates", m.atrous_rates);
    r("model.embed_dim", m.embed_dim);
    r("model_seed", m.seed);
    r("encoder.kind", m.encoder.kind);
    r("encoder.width", m.encoder.width);
    r("encoder.taps", m.encoder.taps);
    r("encoder.seed", m.encoder.seed);
    r("text_encoder.kind", m.text_encoder.kind);
    r("text_encoder.seed", m.text_encoder.seed);
    r("align.use_prototype", m.use_prototype);
    r("align.use_text", m.use_text);
    r("align.num_context_tokens", m.num_context_tokens);
    r("align.class_names", m.class_names);
    r("align.temperature", m.temperature);
    std::string align_loss_name = to_string(c.loss.align);
    r("align.loss", align_loss_name);
    c.loss.align = parse_align_loss(align_loss_name);
    r("augment.crop", a.crop);
    r("augment.scale_min", a.scale_min);
    r("augment.scale_max", a.scale_max);
    r("augment.flip_prob", a.flip_prob);
    r("augment.color_jitter_prob", a.color_jitter_prob);
    r("augment.brightness", a.brightness);
    r("augment.contrast", a.contrast);
    r("augment.saturation", a.saturation);
    r("augment.hue", a.hue);
    r("augment.grayscale_prob", a.grayscale_prob);
    r("augment.blur_prob", a.blur_prob);
    r("augment.blur_sigma_min", a.blur_sigma_min);
    r("augment.blur_sigma_max", a.blur_sigma_max);
    r("augment.cutmix_prob", a.cutmix_prob);
    r("augment.cutmix_area_min", a.cutmix_area_min);
    r("augment.cutmix_area_max", a.cutmix_area_max);
    r("augment.cutmix_aspect_min", a.cutmix_aspect_min);
    r("augment.cutmix_aspect_max", a.cutmix_aspect_max);
    r("augment.feature_dropout", a.feature_dropout);
    r("fusion.eta_p", c.fusion.eta_p);
    r("fusion.eta_t", c.fusion.eta_t);
    r("pseudo.tau_init", c.pseudo.tau_init);
    r("pseudo.ema_alpha", c.pseudo.ema_alpha);
    r("pseudo.tau_clamp", c.pseudo.tau_clamp);
    r("loss.lambda", c.loss.lambda);
    r("loss.kl_stopgrad_target", c.loss.kl_stopgrad_target);
    r("eval.mode", c.eval.mode);
    r("eval.window", c.eval.window);
    r("eval.stride", c.eval.stride);
    r("eval.logits", c.eval.logits);
    r("data.mean", c.data.mean);
    r("data.std", c.data.std);
    c.validate();
    return c;
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override '" + assignment + "' is not of the form dotted.key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        json& next = (*node)[part];
        if (next.is_null()) next = json::object();
        if (!next.is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
        node = &next;
        start = dot + 1;
    }
}

TrainConfig resolve_config(const std::vector<std::string>& files, const std::vector<std::string>& overrides) {
    json j = to_json(TrainConfig{});
    for (const auto& path : files) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        json layer = json::parse(in, nullptr, false);
        if (layer.is_discarded() || !layer.is_object())
            throw ConfigError("config file '" + path + "' is not a JSON object");
        check_known_keys(layer, j, "");
        j.merge_patch(layer);
    }
    for (const auto& o : overrides) apply_override(j, o);
    return config_from_json(j);
}

std::string dump_config(const TrainConfig& cfg) { return to_json(cfg).dump(2); }

}  // namespace semalign
