#include "selfdetr/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "selfdetr/errors.hpp"

namespace selfdetr {

double OptimizerConfig::lr_at_epoch(std::size_t epoch, std::size_t total_epochs) const {
    double rate = lr;
    for (double f : decay_at)
        if (static_cast<double>(epoch) >= std::floor(f * static_cast<double>(total_epochs))) rate *= decay_factor;
    return rate;
}

namespace {

std::string preprocess_name(Preprocess p) {
    switch (p) {
        case Preprocess::none: return "none";
        case Preprocess::window: return "window";
        case Preprocess::resize: return "resize";
    }
    return "?";
}

Preprocess parse_preprocess(const std::string& s) {
    if (s == "none") return Preprocess::none;
    if (s == "window") return Preprocess::window;
    if (s == "resize") return Preprocess::resize;
    throw ConfigError("unknown preprocess.mode '" + s + "'");
}

// Every key present in `given` must also appear in the canonical form.
void reject_unknown(const nlohmann::json& given, const nlohmann::json& canonical, const std::string& where) {
    if (!given.is_object() || !canonical.is_object()) return;
    for (auto it = given.begin(); it != given.end(); ++it) {
        const std::string path = where.empty() ? it.key() : where + "." + it.key();
        if (!canonical.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
        reject_unknown(it.value(), canonical.at(it.key()), path);
    }
}

}  // namespace

void ExperimentConfig::validate() const {
    model.validate();
    data.validate();
    if (model.num_classes != data.num_classes && dataset.empty())
        throw ConfigError("model.num_classes must equal data.num_classes");
    if (model.input_dim != data.feature_dim && dataset.empty())
        throw ConfigError("model.input_dim must equal data.feature_dim");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
    if (optimizer.clip_norm < 0.0) throw ConfigError("optimizer.clip_norm must be non-negative");
    if (preprocess.window <= preprocess.overlap) throw ConfigError("preprocess.window must exceed overlap");
    if (preprocess.resize < 2) throw ConfigError("preprocess.resize must be at least 2");
    if (loss.lambda_e < 0.0 || loss.lambda_d < 0.0) throw ConfigError("feedback lambdas must be non-negative");
    for (double t : eval.thresholds)
        if (!(t > 0.0 && t <= 1.0)) throw ConfigError("eval.thresholds must lie in (0, 1]");
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    nlohmann::json fb = c.feedback;
    fb["lambda_e"] = c.loss.lambda_e;
    fb["lambda_d"] = c.loss.lambda_d;
    j = {{"model", c.model},
         {"loss", c.loss},
         {"feedback", fb},
         {"data", c.data},
         {"dataset", c.dataset},
         {"preprocess",
          {{"mode", preprocess_name(c.preprocess.mode)},
           {"window", c.preprocess.window},
           {"overlap", c.preprocess.overlap},
           {"resize", c.preprocess.resize}}},
         {"optimizer",
          {{"lr", c.optimizer.lr},
           {"beta1", c.optimizer.beta1},
           {"beta2", c.optimizer.beta2},
           {"eps", c.optimizer.eps},
           {"decay_at", c.optimizer.decay_at},
           {"decay_factor", c.optimizer.decay_factor},
           {"clip_norm", c.optimizer.clip_norm}}},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"seed", c.seed},
         {"output_dir", c.output_dir},
         {"checkpoint_every", c.checkpoint_every},
         {"eval",
          {{"nms", c.eval.nms}, {"thresholds", c.eval.thresholds}, {"diversity_samples", c.eval.diversity_samples}}}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    reject_unknown(j, nlohmann::json(ExperimentConfig{}), "");
    ExperimentConfig d;
    c = d;
    try {
        if (j.contains("model")) c.model = j.at("model").get<model::ModelConfig>();
        if (j.contains("loss")) c.loss = j.at("loss").get<matching::LossWeights>();
        if (j.contains("feedback")) {
            const auto& fb = j.at("feedback");
            c.feedback = fb.get<feedback::FeedbackConfig>();
            c.loss.lambda_e = fb.value("lambda_e", d.loss.lambda_e);
            c.loss.lambda_d = fb.value("lambda_d", d.loss.lambda_d);
        }
        if (j.contains("data")) c.data = j.at("data").get<data::SynthConfig>();
        c.dataset = j.value("dataset", d.dataset);
        if (j.contains("preprocess")) {
            const auto& p = j.at("preprocess");
            c.preprocess.mode = parse_preprocess(p.value("mode", std::string("none")));
            c.preprocess.window = p.value("window", d.preprocess.window);
            c.preprocess.overlap = p.value("overlap", d.preprocess.overlap);
            c.preprocess.resize = p.value("resize", d.preprocess.resize);
        }
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            c.optimizer.lr = o.value("lr", d.optimizer.lr);
            c.optimizer.beta1 = o.value("beta1", d.optimizer.beta1);
            c.optimizer.beta2 = o.value("beta2", d.optimizer.beta2);
            c.optimizer.eps = o.value("eps", d.optimizer.eps);
            c.optimizer.decay_at = o.value("decay_at", d.optimizer.decay_at);
            c.optimizer.decay_factor = o.value("decay_factor", d.optimizer.decay_factor);
            c.optimizer.clip_norm = o.value("clip_norm", d.optimizer.clip_norm);
        }
        c.epochs = j.value("epochs", d.epochs);
        c.batch_size = j.value("batch_size", d.batch_size);
        c.seed = j.value("seed", d.seed);
        c.output_dir = j.value("output_dir", d.output_dir);
        c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            if (e.contains("nms")) c.eval.nms = e.at("nms").get<eval::NmsOptions>();
            c.eval.thresholds = e.value("thresholds", d.eval.thresholds);
            c.eval.diversity_samples = e.value("diversity_samples", d.eval.diversity_samples);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return j.get<ExperimentConfig>();
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
    std::string pointer = "/" + assignment.substr(0, eq);
    for (auto& ch : pointer)
        if (ch == '.') ch = '/';
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    doc[nlohmann::json::json_pointer(pointer)] = std::move(value);
}

std::string config_hash(const ExperimentConfig& c) {
    nlohmann::json j = c;
    j.erase("output_dir");
    const std::string text = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace selfdetr
