#pragma once
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "voidkit/core/tensor.hpp"
#include "voidkit/opt/protect.hpp"

// Run configuration: one flat record holding every tunable of the pipeline,
// each with a documented default. Serialized as JSON so an experiment is
// reproducible from a single file. Precedence when assembling the effective
// config: command-line flag > config file > default; the bundle path
// additionally falls back to the VOIDKIT_BUNDLE environment variable.

namespace voidkit::cli {

struct RunConfig {
    std::string input;   // input image file, directory, or glob
    std::string output;  // output directory
    std::string bundle;  // bundle manifest path; "" = env fallback, then seeded default

    // perturbation budget
    double epsilon = 12.0 / 255.0;  // byte-domain 12/255 L-inf radius
    double alpha = 1.0 / 255.0;     // one byte step per iteration
    int iterations = 30;

    // objective
    double margin = 0.6;  // identity hinge margin
    double tau_p = 0.5;   // detector confidence threshold for anchor masks
    double lambda_loc = -1.0;
    double lambda_id = -1.0;
    double lambda_attn = 0.01;
    double lambda_feat = 0.01;

    // perceptual adaptation
    double adaptive_q = 0.5;
    double adaptive_gamma = 0.3;
    double adaptive_sigma = 3.0;
    bool adaptive_enabled = true;

    uint64_t seed = 0;
    int jobs = 1;
    bool dump_masks = false;

    bool operator==(const RunConfig&) const = default;
};

namespace cdetail {

[[noreturn]] inline void bad_key(const std::string& key, const std::string& why) {
    throw ConfigError("config: key '" + key + "' " + why);
}

inline double get_number(const nlohmann::json& j, const std::string& key) {
    if (!j.is_number()) bad_key(key, "must be a number");
    return j.get<double>();
}

inline int get_int(const nlohmann::json& j, const std::string& key) {
    if (!j.is_number_integer()) bad_key(key, "must be an integer");
    return j.get<int>();
}

inline bool get_bool(const nlohmann::json& j, const std::string& key) {
    if (!j.is_boolean()) bad_key(key, "must be true or false");
    return j.get<bool>();
}

inline std::string get_string(const nlohmann::json& j, const std::string& key) {
    if (!j.is_string()) bad_key(key, "must be a string");
    return j.get<std::string>();
}

}  // namespace cdetail

inline nlohmann::ordered_json save_config(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["input"] = c.input;
    j["output"] = c.output;
    j["bundle"] = c.bundle;
    j["epsilon"] = c.epsilon;
    j["alpha"] = c.alpha;
    j["iterations"] = c.iterations;
    j["margin"] = c.margin;
    j["tau_p"] = c.tau_p;
    j["lambda_loc"] = c.lambda_loc;
    j["lambda_id"] = c.lambda_id;
    j["lambda_attn"] = c.lambda_attn;
    j["lambda_feat"] = c.lambda_feat;
    j["adaptive_q"] = c.adaptive_q;
    j["adaptive_gamma"] = c.adaptive_gamma;
    j["adaptive_sigma"] = c.adaptive_sigma;
    j["adaptive_enabled"] = c.adaptive_enabled;
    j["seed"] = c.seed;
    j["jobs"] = c.jobs;
    j["dump_masks"] = c.dump_masks;
    return j;
}

inline void save_config_file(const RunConfig& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("config: cannot write '" + path + "'");
    out << save_config(c).dump(2) << '\n';
}

/// Overlay a parsed config object onto `base`. Keys may be omitted (the
/// base value stands); unknown keys are an error so typos cannot silently
/// run a different experiment.
inline RunConfig load_config(const nlohmann::json& j, RunConfig base = {}) {
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    using cdetail::bad_key;
    for (const auto& [key, val] : j.items()) {
        if (key == "input") base.input = cdetail::get_string(val, key);
        else if (key == "output") base.output = cdetail::get_string(val, key);
        else if (key == "bundle") base.bundle = cdetail::get_string(val, key);
        else if (key == "epsilon") base.epsilon = cdetail::get_number(val, key);
        else if (key == "alpha") base.alpha = cdetail::get_number(val, key);
        else if (key == "iterations") base.iterations = cdetail::get_int(val, key);
        else if (key == "margin") base.margin = cdetail::get_number(val, key);
        else if (key == "tau_p") base.tau_p = cdetail::get_number(val, key);
        else if (key == "lambda_loc") base.lambda_loc = cdetail::get_number(val, key);
        else if (key == "lambda_id") base.lambda_id = cdetail::get_number(val, key);
        else if (key == "lambda_attn") base.lambda_attn = cdetail::get_number(val, key);
        else if (key == "lambda_feat") base.lambda_feat = cdetail::get_number(val, key);
        else if (key == "adaptive_q") base.adaptive_q = cdetail::get_number(val, key);
        else if (key == "adaptive_gamma") base.adaptive_gamma = cdetail::get_number(val, key);
        else if (key == "adaptive_sigma") base.adaptive_sigma = cdetail::get_number(val, key);
        else if (key == "adaptive_enabled") base.adaptive_enabled = cdetail::get_bool(val, key);
        else if (key == "seed") {
            if (!val.is_number_unsigned()) bad_key(key, "must be a non-negative integer");
            base.seed = val.get<uint64_t>();
        } else if (key == "jobs") base.jobs = cdetail::get_int(val, key);
        else if (key == "dump_masks") base.dump_masks = cdetail::get_bool(val, key);
        else bad_key(key, "is not a recognized config key");
    }
    return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config: '" + path + "' is not valid JSON");
    return load_config(j, base);
}

/// Everything the command line can say, each field present only when the
/// user actually passed the flag — that presence is what gives flags
/// priority over the config file.
struct FlagOverrides {
    std::optional<std::string> config;
    std::optional<std::string> input;
    std::optional<std::string> output;
    std::optional<std::string> bundle;
    std::optional<double> epsilon;
    std::optional<double> alpha;
    std::optional<int> iterations;
    std::optional<uint64_t> seed;
    std::optional<int> jobs;
    bool no_adaptive = false;
    bool dump_masks = false;
};

/// defaults -> config file -> flags; then the bundle env fallback if the
/// path is still empty. `env_bundle` is injected so the precedence chain is
/// testable without touching the process environment.
inline RunConfig resolve_config(const FlagOverrides& f, const char* env_bundle = nullptr) {
    RunConfig c;
    if (f.config) c = load_config_file(*f.config, c);
    if (f.input) c.input = *f.input;
    if (f.output) c.output = *f.output;
    if (f.bundle) c.bundle = *f.bundle;
    if (f.epsilon) c.epsilon = *f.epsilon;
    if (f.alpha) c.alpha = *f.alpha;
    if (f.iterations) c.iterations = *f.iterations;
    if (f.seed) c.seed = *f.seed;
    if (f.jobs) c.jobs = *f.jobs;
    if (f.no_adaptive) c.adaptive_enabled = false;
    if (f.dump_masks) c.dump_masks = true;
    if (c.bundle.empty() && env_bundle != nullptr && *env_bundle != '\0') c.bundle = env_bundle;
    return c;
}

/// Typed optimizer options; the typed constructors carry the field-level
/// validation (budget ordering, weight signs, adaptive ranges).
inline opt::ProtectOptions to_protect_options(const RunConfig& c) {
    opt::ProtectOptions o;
    o.budget = PerturbationBudget(c.epsilon, c.alpha, c.iterations);
    o.weights = LossWeights(c.lambda_loc, c.lambda_id, c.lambda_attn, c.lambda_feat);
    o.adaptive = opt::AdaptiveConfig(c.adaptive_q, c.adaptive_gamma, c.adaptive_sigma,
                                     c.adaptive_enabled);
    o.margin = c.margin;
    o.tau_p = c.tau_p;
    o.seed = c.seed;
    if (c.jobs < 1) throw ConfigError("config: key 'jobs' must be >= 1");
    return o;
}

}  // namespace voidkit::cli
