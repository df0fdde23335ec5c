#pragma once
#include <fnmatch.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "voidkit/cli/config.hpp"
#include "voidkit/eval/metrics.hpp"
#include "voidkit/eval/swap.hpp"
#include "voidkit/io/images.hpp"
#include "voidkit/io/png_io.hpp"
#include "voidkit/io/reports.hpp"
#include "voidkit/opt/protect.hpp"
#include "voidkit/saliency/masks.hpp"
#include "voidkit/synth/faces.hpp"
#include "voidkit/victim/manifest.hpp"

// The five subcommands behind the voidkit binary. Each takes the resolved
// RunConfig and a console stream and returns an exit code; the binary maps
// uncaught ConfigError to 1 and any other runtime failure to 2.

namespace voidkit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitSelftest = 3;

namespace fs = std::filesystem;

// ---- input resolution -----------------------------------------------------------

inline bool has_image_ext(const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ".png" || e == ".jpg" || e == ".jpeg";
}

/// A file names itself; a directory yields every image directly inside it; a
/// pattern with wildcards is matched against its parent directory's entries.
/// Results are sorted so batch composition never depends on directory order.
inline std::vector<std::string> enumerate_inputs(const std::string& input) {
    if (input.empty()) return {};
    std::vector<std::string> out;
    if (input.find_first_of("*?[") != std::string::npos) {
        fs::path pat(input);
        fs::path dir = pat.parent_path().empty() ? fs::path(".") : pat.parent_path();
        std::string leaf = pat.filename().string();
        if (!fs::is_directory(dir))
            throw ConfigError("input: directory '" + dir.string() + "' does not exist");
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (!entry.is_regular_file()) continue;
            if (fnmatch(leaf.c_str(), entry.path().filename().string().c_str(), 0) == 0)
                out.push_back(entry.path().string());
        }
    } else if (fs::is_directory(input)) {
        for (const auto& entry : fs::directory_iterator(input)) {
            if (entry.is_regular_file() && has_image_ext(entry.path()))
                out.push_back(entry.path().string());
        }
    } else if (fs::is_regular_file(input)) {
        out.push_back(input);
    } else {
        throw ConfigError("input: '" + input + "' is neither a file, directory, nor pattern");
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::string path_stem(const std::string& path) { return fs::path(path).stem().string(); }

/// pair0_src -> pair0; anything else keeps its stem. Keeps the protect ->
/// evaluate naming convention composable: <id>_src.png protects into
/// <id>_protected.png, which evaluate pairs back up by <id>.
inline std::string protected_base(const std::string& stem) {
    constexpr std::string_view suffix = "_src";
    if (stem.size() > suffix.size() && stem.ends_with(suffix))
        return stem.substr(0, stem.size() - suffix.size());
    return stem;
}

/// Manifest path if configured (flag/file/env), else a seeded default bundle.
template <typename Real = double>
victim::VictimBundle<Real> load_bundle(const RunConfig& c) {
    std::string path = victim::resolve_manifest_path(c.bundle);
    victim::BundleManifest m =
        path.empty() ? victim::default_manifest(c.seed) : victim::load_manifest_file(path);
    return victim::make_bundle<Real>(m);
}

// ---- mask dumps -----------------------------------------------------------------

inline void write_mask_png(const std::string& path, const Tensor<double>& values, int h, int w) {
    std::vector<unsigned char> px(static_cast<size_t>(h) * static_cast<size_t>(w));
    for (size_t i = 0; i < px.size(); ++i) {
        double v = std::clamp(values.data[i], 0.0, 1.0);
        px[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    io::write_png_gray(path, h, w, px);
}

/// Grayscale PNGs of the saliency masks for one source image: the semantic
/// region map, the encoder attention map, and the anchor confidence strip
/// (one pixel per detector anchor).
inline void dump_static_masks(const victim::VictimBundle<double>& bundle,
                              const Tensor<double>& img, const std::string& out_dir,
                              const std::string& stem, double tau_p) {
    saliency::MaskSet<double> set = saliency::build_mask_set(bundle, img, tau_p, {});
    fs::path dir(out_dir);
    write_mask_png((dir / (stem + "_mask_semantic.png")).string(), set.semantic.values,
                   set.semantic.values.dim(0), set.semantic.values.dim(1));
    write_mask_png((dir / (stem + "_mask_cam.png")).string(), set.cam.values,
                   set.cam.values.dim(0), set.cam.values.dim(1));
    write_mask_png((dir / (stem + "_mask_anchor.png")).string(), set.anchor.values, 1,
                   set.anchor.values.dim(0));
}

// ---- protect --------------------------------------------------------------------

struct ProtectJob {
    std::string path;
    std::string stem;
    bool ok = false;
    std::string error;
    opt::ProtectResult<double> result;
};

/// Batch protection. Workers only compute; every file and console write
/// happens on the calling thread, in input order, so reports are identical
/// for any --jobs value. Per-image randomness mixes the run seed with the
/// image stem, never the batch position.
inline int cmd_protect(const RunConfig& c, std::ostream& out) {
    if (c.output.empty()) throw ConfigError("config: key 'output' must name a directory");
    opt::ProtectOptions base = to_protect_options(c);  // validates before any work
    std::vector<std::string> inputs = enumerate_inputs(c.input);

    fs::create_directories(c.output);
    fs::path out_dir(c.output);
    save_config_file(c, (out_dir / "config_used.json").string());

    if (inputs.empty()) {
        std::ofstream summary((out_dir / "summary.csv").string(), std::ios::binary);
        summary << "image,status,iterations,linf_bytes\n";
        out << "protect: no inputs matched '" << c.input << "'; wrote empty summary\n";
        return kExitOk;
    }

    victim::VictimBundle<double> bundle = load_bundle(c);

    std::vector<ProtectJob> jobs(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) {
        jobs[i].path = inputs[i];
        jobs[i].stem = path_stem(inputs[i]);
    }

    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            ProtectJob& job = jobs[i];
            try {
                Tensor<double> img = io::read_image_file<double>(job.path);
                opt::ProtectOptions o = base;
                o.seed = mix_seed(c.seed, hash_name(job.stem));
                o.record_p_history = c.dump_masks;
                job.result = opt::protect(img, bundle, o);
                job.ok = true;
            } catch (const std::runtime_error& e) {
                job.error = e.what();
            }
        }
    };
    int n_threads = std::max(1, std::min<int>(c.jobs, static_cast<int>(jobs.size())));
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    std::ofstream summary((out_dir / "summary.csv").string(), std::ios::binary);
    summary << "image,status,iterations,linf_bytes\n";
    for (const ProtectJob& job : jobs) {
        if (!job.ok) {
            out << "protect: skipping '" << job.path << "': " << job.error << "\n";
            summary << io::csv_field(job.path) << ",skipped,0,0\n";
            continue;
        }
        const auto& r = job.result;
        std::string base_name = protected_base(job.stem);
        io::write_image_png((out_dir / (base_name + "_protected.png")).string(), r.image);
        io::write_run_log_file((out_dir / (base_name + "_runlog.csv")).string(), r.run_log);
        for (const std::string& w : r.warnings) out << "protect: " << job.path << ": " << w << "\n";
        if (c.dump_masks) {
            Tensor<double> img = io::read_image_file<double>(job.path);
            dump_static_masks(bundle, img, c.output, base_name, c.tau_p);
            if (!r.p_history.empty()) {
                const Tensor<double>& p = r.p_history.back();
                write_mask_png((out_dir / (base_name + "_mask_step.png")).string(), p, p.dim(0),
                               p.dim(1));
            }
        }
        summary << io::csv_field(job.path) << "," << (r.aborted ? "aborted" : "ok") << ","
                << r.iterations_completed << "," << r.linf_deviation_bytes << "\n";
        out << "protect: " << job.path << " -> " << base_name << "_protected.png (linf "
            << r.linf_deviation_bytes << " bytes, " << r.iterations_completed << " iters, "
            << r.wall_ms << " ms)\n";
    }
    return kExitOk;
}

// ---- evaluate -------------------------------------------------------------------

struct PairFiles {
    std::string id;
    std::string src, protected_, target;  // empty = that member is missing
};

/// Pair convention inside the input directory: <id>_src, <id>_protected,
/// <id>_target, each .png/.jpg/.jpeg. Ids are discovered from the _src
/// members and sorted.
inline std::vector<PairFiles> discover_pairs(const std::string& input_dir) {
    if (!fs::is_directory(input_dir))
        throw ConfigError("input: '" + input_dir + "' is not a directory");
    auto find_member = [&](const std::string& id, const char* role) -> std::string {
        for (const char* ext : {".png", ".jpg", ".jpeg"}) {
            fs::path p = fs::path(input_dir) / (id + "_" + role + ext);
            if (fs::is_regular_file(p)) return p.string();
        }
        return "";
    };
    std::vector<PairFiles> pairs;
    for (const auto& entry : fs::directory_iterator(input_dir)) {
        if (!entry.is_regular_file() || !has_image_ext(entry.path())) continue;
        std::string stem = entry.path().stem().string();
        constexpr std::string_view suffix = "_src";
        if (stem.size() <= suffix.size() || !stem.ends_with(suffix)) continue;
        PairFiles pf;
        pf.id = stem.substr(0, stem.size() - suffix.size());
        pf.src = entry.path().string();
        pf.protected_ = find_member(pf.id, "protected");
        pf.target = find_member(pf.id, "target");
        pairs.push_back(std::move(pf));
    }
    std::sort(pairs.begin(), pairs.end(),
              [](const PairFiles& a, const PairFiles& b) { return a.id < b.id; });
    return pairs;
}

/// A pair that cannot be scored (missing or unreadable member) contributes
/// one sentinel row instead of aborting the batch.
template <typename Real>
eval::MetricRow<Real> missing_row(const std::string& id) {
    eval::MetricRow<Real> r;
    r.pair_id = id;
    r.transform = "missing";
    r.l2 = eval::MetricRow<Real>::kMissing;
    r.psnr = eval::MetricRow<Real>::kMissing;
    r.ism = eval::MetricRow<Real>::kMissing;
    return r;
}

inline int cmd_evaluate(const RunConfig& c, std::ostream& out) {
    if (c.output.empty()) throw ConfigError("config: key 'output' must name a directory");
    std::vector<PairFiles> pairs = discover_pairs(c.input);
    victim::VictimBundle<double> bundle = load_bundle(c);

    std::vector<eval::MetricRow<double>> rows;
    int complete = 0, missing = 0;
    for (const PairFiles& pf : pairs) {
        if (pf.protected_.empty() || pf.target.empty()) {
            out << "evaluate: pair '" << pf.id << "' is missing its "
                << (pf.protected_.empty() ? "_protected" : "_target") << " member\n";
            rows.push_back(missing_row<double>(pf.id));
            ++missing;
            continue;
        }
        try {
            Tensor<double> clean = io::read_image_file<double>(pf.src);
            Tensor<double> prot = io::read_image_file<double>(pf.protected_);
            Tensor<double> target = io::read_image_file<double>(pf.target);
            auto pair_rows = eval::swap_and_score(prot, clean, {target}, bundle, pf.id, c.seed);
            rows.insert(rows.end(), pair_rows.begin(), pair_rows.end());
            ++complete;
        } catch (const std::runtime_error& e) {
            out << "evaluate: pair '" << pf.id << "' unusable: " << e.what() << "\n";
            rows.push_back(missing_row<double>(pf.id));
            ++missing;
        }
    }

    fs::create_directories(c.output);
    fs::path out_dir(c.output);
    io::write_metrics_csv_file((out_dir / "metrics.csv").string(), rows);
    io::write_metrics_jsonl_file((out_dir / "metrics.jsonl").string(), rows);
    {
        nlohmann::ordered_json info;
        info["eval_encoder"] = bundle.eval_encoder->id();
        info["seed"] = c.seed;
        info["pairs_scored"] = complete;
        info["pairs_missing"] = missing;
        info["transforms"] = eval::transform_labels();
        std::ofstream f((out_dir / "evaluate_info.json").string(), std::ios::binary);
        f << info.dump(2) << '\n';
    }
    out << "evaluate: " << complete << " pairs scored, " << missing << " missing; " << rows.size()
        << " rows (ism encoder '" << bundle.eval_encoder->id() << "')\n";
    return kExitOk;
}

// ---- dump-masks -----------------------------------------------------------------

inline int cmd_dump_masks(const RunConfig& c, std::ostream& out) {
    if (c.output.empty()) throw ConfigError("config: key 'output' must name a directory");
    std::vector<std::string> inputs = enumerate_inputs(c.input);
    victim::VictimBundle<double> bundle = load_bundle(c);
    fs::create_directories(c.output);
    for (const std::string& path : inputs) {
        try {
            Tensor<double> img = io::read_image_file<double>(path);
            dump_static_masks(bundle, img, c.output, path_stem(path), c.tau_p);
            out << "dump-masks: " << path << "\n";
        } catch (const std::runtime_error& e) {
            out << "dump-masks: skipping '" << path << "': " << e.what() << "\n";
        }
    }
    return kExitOk;
}

// ---- selftest -------------------------------------------------------------------

namespace sdetail {

struct Check {
    std::ostream& out;
    bool all_ok = true;

    void run(const char* name, bool ok, const std::string& detail = "") {
        out << "selftest: " << name << " ... " << (ok ? "pass" : "FAIL");
        if (!ok && !detail.empty()) out << " (" << detail << ")";
        out << "\n";
        if (!ok) all_ok = false;
    }

    template <typename Fn>
    void guarded(const char* name, Fn fn) {
        try {
            auto [ok, detail] = fn();
            run(name, ok, detail);
        } catch (const std::exception& e) {
            run(name, false, e.what());
        }
    }
};

}  // namespace sdetail

/// Seeded end-to-end health check: bundle construction, codec fidelity,
/// gradient correctness, the identity-case loss values, step-map laws, and
/// budget enforcement. Prints one line per invariant; any failure exits 3.
inline int cmd_selftest(const RunConfig& c, std::ostream& out) {
    using R = std::pair<bool, std::string>;
    sdetail::Check check{out};

    victim::VictimBundle<double> bundle = load_bundle(c);  // manifest errors name their field
    check.run("bundle manifest and construction", true);

    Tensor<double> face = synth::make_face(mix_seed(c.seed, hash_name("selftest-face")),
                                           bundle.detector->image_size());

    check.guarded("latent codec round-trip fidelity", [&]() -> R {
        Tensor<double> rt = victim::decode_latent(*bundle.codec, bundle.codec->encode(face));
        double psnr = eval::metric_psnr(rt, face);
        char buf[64];
        std::snprintf(buf, sizeof buf, "psnr %.2f dB", psnr);
        return {psnr > 15.0, buf};
    });

    losses::LossEvaluator<double> evaluator(bundle, face, LossWeights::defaults(), c.margin,
                                            c.tau_p);

    check.guarded("identity-case loss values", [&]() -> R {
        Pcg32 rng = stream_for(c.seed, "selftest-identity");
        evaluator.set_context(
            opt::draw_context(*bundle.backbone, bundle.codec->encode(face), rng, -1));
        losses::LossReport<double> rep = evaluator.evaluate_image(face);
        Tensor<double> black({face.dim(0), face.dim(1), 3}, 0.0);
        double d_null = 0;
        for (const auto& enc : bundle.attack_encoders)
            d_null += 1.0 - static_cast<double>(eval::cosine_similarity(
                                victim::embed(*enc, face), victim::embed(*enc, black)));
        d_null /= static_cast<double>(bundle.attack_encoders.size());
        double hinge = static_cast<double>(rep.l_id) - d_null;
        bool ok = std::abs(static_cast<double>(rep.l_loc) - 1.0) < 1e-9 &&
                  std::abs(static_cast<double>(rep.l_attn)) < 1e-9 &&
                  std::abs(static_cast<double>(rep.l_feat)) < 1e-9 &&
                  std::abs(hinge - c.margin) < 1e-9;
        char buf[128];
        std::snprintf(buf, sizeof buf, "l_loc=%.12f l_attn=%.3e l_feat=%.3e hinge=%.12f",
                      static_cast<double>(rep.l_loc), static_cast<double>(rep.l_attn),
                      static_cast<double>(rep.l_feat), hinge);
        return {ok, buf};
    });

    check.guarded("total-loss gradient vs finite differences", [&]() -> R {
        PerturbationBudget wide(10.0, 1.0, 1);  // projection inactive at the check point
        Pcg32 rng = stream_for(c.seed, "selftest-fd");
        Tensor<double> z = bundle.codec->encode(face);
        evaluator.set_context(opt::draw_context(*bundle.backbone, z, rng, -1));
        losses::TotalGradient<double> g = losses::grad_total(z, evaluator, wide);
        double max_rel = 0;
        for (int probe = 0; probe < 6; ++probe) {
            long i = rng.uniform_int(static_cast<int>(z.numel()));
            auto value_at = [&](double delta) {
                Tensor<double> zp = z;
                zp.data[static_cast<size_t>(i)] += delta;
                return static_cast<double>(losses::grad_total(zp, evaluator, wide).report.l_total);
            };
            double step = 1e-4;
            double fd = (value_at(step) - value_at(-step)) / (2.0 * step);
            double an = g.grad.data[static_cast<size_t>(i)];
            double rel = std::abs(fd - an) / std::max({1e-8, std::abs(fd), std::abs(an)});
            max_rel = std::max(max_rel, rel);
        }
        char buf[64];
        std::snprintf(buf, sizeof buf, "max rel err %.3e", max_rel);
        return {max_rel < 1e-2, buf};
    });

    check.guarded("step-map range and quantile mass", [&]() -> R {
        Pcg32 rng = stream_for(c.seed, "selftest-maps");
        Tensor<double> s({16, 16});
        for (auto& v : s.data) v = rng.uniform();  // ties have probability ~0
        SpatialMask<double> sm(MaskKind::perceptual_smooth, s);
        SpatialMask<double> m = opt::binarize_quantile(sm, c.adaptive_q);
        double ones = 0;
        for (double v : m.values.data) ones += v;
        double frac = ones / static_cast<double>(m.values.numel());
        if (std::abs(frac - (1.0 - c.adaptive_q)) > 2.0 / 256.0)
            return {false, "ones mass off the quantile"};
        SpatialMask<double> p = opt::smooth_map(m, c.adaptive_gamma, c.adaptive_sigma);
        for (double v : p.values.data)
            if (!(v >= c.adaptive_gamma && v <= 1.0)) return {false, "step map outside [gamma,1]"};
        for (int rep = 0; rep < 50; ++rep) {
            std::vector<double> vals(1 + rng.uniform_int(64));
            for (auto& v : vals) v = rng.uniform(-4.0, 4.0);
            std::vector<double> sorted = vals;
            std::sort(sorted.begin(), sorted.end());
            double q = 0.5;
            double pos = q * static_cast<double>(sorted.size() - 1);
            size_t lo = static_cast<size_t>(pos);
            size_t hi = std::min(lo + 1, sorted.size() - 1);
            double oracle = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
            if (opt::quantile_linear(vals, q) != oracle) return {false, "quantile oracle mismatch"};
        }
        return {true, ""};
    });

    check.guarded("budget enforcement and determinism", [&]() -> R {
        opt::ProtectOptions o = to_protect_options(c);
        o.budget = PerturbationBudget(c.epsilon, c.alpha, 5);
        o.seed = mix_seed(c.seed, hash_name("selftest-protect"));
        opt::ProtectResult<double> a = opt::protect(face, bundle, o);
        opt::ProtectResult<double> b = opt::protect(face, bundle, o);
        int limit = static_cast<int>(std::lround(c.epsilon * 255.0));
        if (a.linf_deviation_bytes > limit) return {false, "budget exceeded"};
        if (a.image.data != b.image.data) return {false, "protect is not deterministic"};
        return {true, ""};
    });

    out << "selftest: " << (check.all_ok ? "all checks passed" : "FAILED") << "\n";
    return check.all_ok ? kExitOk : kExitSelftest;
}

// ---- samples --------------------------------------------------------------------

/// Starter kit: a default bundle manifest plus seeded synthetic face pairs
/// laid out in the naming convention protect and evaluate expect.
inline int cmd_samples(const RunConfig& c, std::ostream& out) {
    if (c.output.empty()) throw ConfigError("config: key 'output' must name a directory");
    fs::create_directories(c.output);
    fs::path out_dir(c.output);
    victim::save_manifest_file(victim::default_manifest(c.seed),
                               (out_dir / "bundle.manifest").string());
    constexpr int kPairs = 4;
    for (int k = 0; k < kPairs; ++k) {
        std::string id = "pair" + std::to_string(k);
        Tensor<double> src = synth::make_face(mix_seed(c.seed, hash_name(id + "/src")));
        Tensor<double> tgt = synth::make_face(mix_seed(c.seed, hash_name(id + "/target")));
        io::write_image_png((out_dir / (id + "_src.png")).string(), src);
        io::write_image_png((out_dir / (id + "_target.png")).string(), tgt);
    }
    out << "samples: wrote bundle.manifest and " << kPairs << " source/target pairs to "
        << c.output << "\n";
    return kExitOk;
}

}  // namespace voidkit::cli
