#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "voidkit/core/tensor.hpp"
#include "voidkit/victim/surrogate.hpp"

// Bundle manifest: a small key=value text file that declares what a victim
// bundle looks like — image size, codec factor, encoder ids and dimension,
// tap layer ids, timestep range, seed. Loading a manifest constructs the
// seeded surrogate bundle and cross-checks every declared field against the
// constructed components, so a stale or hand-edited manifest fails loudly
// with the offending field named.

namespace voidkit::victim {

struct BundleManifest {
    uint64_t seed = 0;
    int image_size = 64;
    int codec_factor = 8;
    int latent_channels = 4;
    int embedding_dim = 32;
    int timesteps = 10;
    std::vector<std::string> attack_encoders = {"attack0", "attack1"};
    std::string eval_encoder = "eval";
    std::vector<std::string> attention_layers = {"attn1", "attn2"};
    std::vector<std::string> feature_layers = {"down1", "up1"};

    bool operator==(const BundleManifest&) const = default;
};

inline BundleManifest default_manifest(uint64_t seed) {
    BundleManifest m;
    m.seed = seed;
    return m;
}

namespace mdetail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

[[noreturn]] inline void bad_field(const std::string& field, const std::string& why) {
    throw ConfigError("bundle manifest: field '" + field + "' " + why);
}

inline long long parse_int_field(const std::string& field, const std::string& value,
                                 long long lo, long long hi) {
    errno = 0;
    char* end = nullptr;
    long long v = std::strtoll(value.c_str(), &end, 10);
    if (end == value.c_str() || *end != '\0' || errno == ERANGE)
        bad_field(field, "is not an integer: '" + value + "'");
    if (v < lo || v > hi)
        bad_field(field, "out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]: '" + value + "'");
    return v;
}

inline std::string join_list(const std::vector<std::string>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += v[i];
    }
    return out;
}

}  // namespace mdetail

inline std::string serialize_manifest(const BundleManifest& m) {
    std::ostringstream os;
    os << "# victim bundle manifest\n";
    os << "seed=" << m.seed << "\n";
    os << "image_size=" << m.image_size << "\n";
    os << "codec_factor=" << m.codec_factor << "\n";
    os << "latent_channels=" << m.latent_channels << "\n";
    os << "embedding_dim=" << m.embedding_dim << "\n";
    os << "timesteps=" << m.timesteps << "\n";
    os << "attack_encoders=" << mdetail::join_list(m.attack_encoders) << "\n";
    os << "eval_encoder=" << m.eval_encoder << "\n";
    os << "attention_layers=" << mdetail::join_list(m.attention_layers) << "\n";
    os << "feature_layers=" << mdetail::join_list(m.feature_layers) << "\n";
    return os.str();
}

inline BundleManifest parse_manifest(const std::string& text) {
    BundleManifest m;
    std::vector<std::string> seen;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = mdetail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("bundle manifest: line " + std::to_string(lineno) +
                              " is not a key=value pair: '" + t + "'");
        std::string key = mdetail::trim(t.substr(0, eq));
        std::string value = mdetail::trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("bundle manifest: line " + std::to_string(lineno) + " has an empty key");
        if (std::find(seen.begin(), seen.end(), key) != seen.end())
            mdetail::bad_field(key, "appears more than once");
        seen.push_back(key);

        if (key == "seed") {
            errno = 0;
            char* end = nullptr;
            unsigned long long v = std::strtoull(value.c_str(), &end, 10);
            if (end == value.c_str() || *end != '\0' || errno == ERANGE)
                mdetail::bad_field(key, "is not an unsigned integer: '" + value + "'");
            m.seed = static_cast<uint64_t>(v);
        } else if (key == "image_size") {
            m.image_size = static_cast<int>(mdetail::parse_int_field(key, value, 8, 4096));
        } else if (key == "codec_factor") {
            m.codec_factor = static_cast<int>(mdetail::parse_int_field(key, value, 1, 64));
        } else if (key == "latent_channels") {
            m.latent_channels = static_cast<int>(mdetail::parse_int_field(key, value, 1, 512));
        } else if (key == "embedding_dim") {
            m.embedding_dim = static_cast<int>(mdetail::parse_int_field(key, value, 4, 4096));
        } else if (key == "timesteps") {
            m.timesteps = static_cast<int>(mdetail::parse_int_field(key, value, 1, 10000));
        } else if (key == "attack_encoders") {
            m.attack_encoders = mdetail::split_list(value);
            if (m.attack_encoders.empty()) mdetail::bad_field(key, "must list at least one encoder id");
        } else if (key == "eval_encoder") {
            if (value.empty()) mdetail::bad_field(key, "must name an encoder id");
            m.eval_encoder = value;
        } else if (key == "attention_layers") {
            m.attention_layers = mdetail::split_list(value);
            if (m.attention_layers.empty()) mdetail::bad_field(key, "must list at least one layer id");
        } else if (key == "feature_layers") {
            m.feature_layers = mdetail::split_list(value);
            if (m.feature_layers.empty()) mdetail::bad_field(key, "must list at least one layer id");
        } else {
            mdetail::bad_field(key, "is not a recognized manifest key");
        }
    }
    if (std::find(seen.begin(), seen.end(), "seed") == seen.end())
        mdetail::bad_field("seed", "is required but missing");
    return m;
}

inline BundleManifest load_manifest_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("bundle manifest: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_manifest(ss.str());
}

inline void save_manifest_file(const BundleManifest& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("bundle manifest: cannot write '" + path + "'");
    f << serialize_manifest(m);
}

/// Construct the seeded surrogate bundle a manifest declares and verify the
/// declaration field by field.
template <typename Real = double>
VictimBundle<Real> make_bundle(const BundleManifest& m) {
    VictimBundle<Real> b =
        make_surrogate_bundle<Real>(m.seed, static_cast<int>(m.attack_encoders.size()), m.embedding_dim);
    if (b.detector->image_size() != m.image_size)
        mdetail::bad_field("image_size", "does not match the surrogate bundle (expected " +
                                             std::to_string(b.detector->image_size()) + ")");
    auto lshape = b.codec->latent_shape();
    if (m.image_size / lshape[0] != m.codec_factor)
        mdetail::bad_field("codec_factor", "does not match the surrogate codec (expected " +
                                               std::to_string(m.image_size / lshape[0]) + ")");
    if (lshape[2] != m.latent_channels)
        mdetail::bad_field("latent_channels", "does not match the surrogate codec (expected " +
                                                  std::to_string(lshape[2]) + ")");
    if (b.eval_encoder->dim() != m.embedding_dim)
        mdetail::bad_field("embedding_dim", "does not match the surrogate encoders");
    if (b.backbone->timesteps() != m.timesteps)
        mdetail::bad_field("timesteps", "does not match the surrogate backbone (expected " +
                                            std::to_string(b.backbone->timesteps()) + ")");
    for (size_t i = 0; i < m.attack_encoders.size(); ++i)
        if (b.attack_encoders[i]->id() != m.attack_encoders[i])
            mdetail::bad_field("attack_encoders", "entry '" + m.attack_encoders[i] +
                                                      "' does not match constructed id '" +
                                                      b.attack_encoders[i]->id() + "'");
    if (b.eval_encoder->id() != m.eval_encoder)
        mdetail::bad_field("eval_encoder", "does not match the held-out encoder id '" +
                                               b.eval_encoder->id() + "'");
    if (b.backbone->attention_layers() != m.attention_layers)
        mdetail::bad_field("attention_layers", "does not match the surrogate backbone");
    if (b.backbone->feature_layers() != m.feature_layers)
        mdetail::bad_field("feature_layers", "does not match the surrogate backbone");
    return b;
}

/// Resolve which manifest to use: explicit path if given, else the
/// VOIDKIT_BUNDLE environment variable, else none (caller falls back to a
/// seed-derived default bundle).
inline std::string resolve_manifest_path(const std::string& cli_path) {
    if (!cli_path.empty()) return cli_path;
    const char* env = std::getenv("VOIDKIT_BUNDLE");
    if (env != nullptr && *env != '\0') return std::string(env);
    return "";
}

}  // namespace voidkit::victim
