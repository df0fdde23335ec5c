// voidkit command line tool: protect face images against diffusion-based
// swapping, evaluate protection quality, and exercise the bundled victim
// models. Subcommand wiring lives in cli/commands.hpp; this file only parses
// arguments and maps failures to exit codes (0 ok, 1 config error, 2 runtime
// error, 3 selftest failure).

#include <cstdlib>
#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "voidkit/cli/commands.hpp"
#include "voidkit/cli/config.hpp"

namespace {

void add_common_options(CLI::App* sub, voidkit::cli::FlagOverrides& f) {
    sub->add_option("--config", f.config, "JSON config file (flags override its values)");
    sub->add_option("--input", f.input, "input image file, directory, or glob pattern");
    sub->add_option("--output", f.output, "output directory");
    sub->add_option("--bundle", f.bundle,
                    "victim bundle manifest (falls back to $VOIDKIT_BUNDLE, then a seeded default)");
    sub->add_option("--seed", f.seed, "run seed; the only entropy source");
    sub->add_option("--jobs", f.jobs, "worker threads for batch protection");
    sub->add_option("--epsilon", f.epsilon, "L-inf budget in unit pixel scale (default 12/255)");
    sub->add_option("--alpha", f.alpha, "ascent step size (default 1/255)");
    sub->add_option("--iters", f.iterations, "ascent iterations (default 30)");
    sub->add_flag("--no-adaptive", f.no_adaptive, "disable the perceptual step-map modulation");
    sub->add_flag("--dump-masks", f.dump_masks, "also write saliency mask PNGs");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"voidkit: immunize face images against diffusion-based face swapping"};
    app.require_subcommand(1);

    voidkit::cli::FlagOverrides flags;
    CLI::App* protect = app.add_subcommand("protect", "write protected copies of input images");
    CLI::App* evaluate =
        app.add_subcommand("evaluate", "swap-and-score paired images across the transform suite");
    CLI::App* selftest = app.add_subcommand("selftest", "run seeded end-to-end invariant checks");
    CLI::App* dump_masks =
        app.add_subcommand("dump-masks", "write saliency mask PNGs for input images");
    CLI::App* samples =
        app.add_subcommand("samples", "write sample face pairs and a default bundle manifest");
    for (CLI::App* sub : {protect, evaluate, selftest, dump_masks, samples})
        add_common_options(sub, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? voidkit::cli::kExitOk : voidkit::cli::kExitConfig;
    }

    try {
        voidkit::cli::RunConfig cfg =
            voidkit::cli::resolve_config(flags, std::getenv("VOIDKIT_BUNDLE"));
        if (*protect) return voidkit::cli::cmd_protect(cfg, std::cout);
        if (*evaluate) return voidkit::cli::cmd_evaluate(cfg, std::cout);
        if (*selftest) return voidkit::cli::cmd_selftest(cfg, std::cout);
        if (*dump_masks) return voidkit::cli::cmd_dump_masks(cfg, std::cout);
        if (*samples) return voidkit::cli::cmd_samples(cfg, std::cout);
        std::cerr << "no subcommand selected\n";
        return voidkit::cli::kExitConfig;
    } catch (const voidkit::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return voidkit::cli::kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return voidkit::cli::kExitRuntime;
    }
}
