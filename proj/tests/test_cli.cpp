#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "voidkit/cli/commands.hpp"
#include "voidkit/cli/config.hpp"
#include "voidkit/io/reports.hpp"
#include "voidkit/synth/faces.hpp"

using namespace voidkit;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char* tag) {
        path = fs::temp_directory_path() / (std::string("voidkit_test_") + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string sub(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

// ---- report serialization ---------------------------------------------------------

TEST_CASE("run log csv reloads field-for-field") {
    std::vector<opt::IterationRow<double>> rows;
    for (int i = 0; i < 4; ++i) {
        opt::IterationRow<double> r;
        r.iteration = i;
        r.losses.l_loc = 0.1 + 0.2 * i;          // 0.30000000000000004 territory
        r.losses.l_id = -1.0 / 3.0 * i;
        r.losses.l_attn = 1e-308 * (i + 1);      // near the subnormal edge
        r.losses.l_feat = 12.0 / 255.0;
        r.losses.l_total = r.losses.l_loc + r.losses.l_id;
        rows.push_back(r);
    }
    TempDir td("runlog");
    std::string path = td.sub("runlog.csv");
    io::write_run_log_file(path, rows);

    auto back = io::read_run_log_file<double>(path);
    REQUIRE(back.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].iteration == rows[i].iteration);
        CHECK(back[i].losses.l_loc == rows[i].losses.l_loc);
        CHECK(back[i].losses.l_id == rows[i].losses.l_id);
        CHECK(back[i].losses.l_attn == rows[i].losses.l_attn);
        CHECK(back[i].losses.l_feat == rows[i].losses.l_feat);
        CHECK(back[i].losses.l_total == rows[i].losses.l_total);
    }

    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "iteration,l_loc,l_id,l_attn,l_feat,l_total");
}

TEST_CASE("metrics csv and jsonl reload field-for-field") {
    std::vector<eval::MetricRow<double>> rows;
    eval::MetricRow<double> a;
    a.pair_id = "pair0";
    a.transform = "jpeg_q50";
    a.l2 = 0.1 + 0.2;
    a.psnr = 29.825512399064699;
    a.ism = -2.0;
    eval::MetricRow<double> b;
    b.pair_id = "odd,id\"x";  // forces csv quoting
    b.transform = "missing";
    b.l2 = b.psnr = b.ism = -3.0;
    rows = {a, b};

    TempDir td("metrics");
    std::string csv = td.sub("m.csv"), jsonl = td.sub("m.jsonl");
    io::write_metrics_csv_file(csv, rows);
    io::write_metrics_jsonl_file(jsonl, rows);

    for (auto& back : {io::read_metrics_csv_file<double>(csv), io::read_metrics_jsonl_file<double>(jsonl)}) {
        REQUIRE(back.size() == rows.size());
        for (size_t i = 0; i < rows.size(); ++i) {
            CHECK(back[i].pair_id == rows[i].pair_id);
            CHECK(back[i].transform == rows[i].transform);
            CHECK(back[i].l2 == rows[i].l2);
            CHECK(back[i].psnr == rows[i].psnr);
            CHECK(back[i].ism == rows[i].ism);
        }
    }

    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "pair_id,transform,l2,psnr,ism");
}

TEST_CASE("report readers reject malformed files") {
    TempDir td("badreports");
    std::string path = td.sub("bad.csv");
    std::ofstream(path) << "wrong,header\n";
    CHECK_THROWS_AS(io::read_metrics_csv_file<double>(path), ConfigError);
    CHECK_THROWS_AS(io::read_run_log_file<double>(path), ConfigError);
    std::ofstream(path) << "pair_id,transform,l2,psnr,ism\nx,y,notanumber,1,1\n";
    CHECK_THROWS_AS(io::read_metrics_csv_file<double>(path), ConfigError);
    CHECK_THROWS_AS(io::read_metrics_csv_file<double>(td.sub("absent.csv")), ConfigError);
}

// ---- config -----------------------------------------------------------------------

TEST_CASE("config save/load round-trips field-exactly") {
    cli::RunConfig c;
    c.input = "faces/*.png";
    c.output = "out";
    c.bundle = "b.manifest";
    c.epsilon = 12.0 / 255.0;
    c.alpha = 1.0 / 255.0;
    c.iterations = 17;
    c.margin = 0.61;
    c.tau_p = 0.51;
    c.lambda_loc = -1.25;
    c.lambda_id = -0.75;
    c.lambda_attn = 0.017;
    c.lambda_feat = 0.002;
    c.adaptive_q = 0.4;
    c.adaptive_gamma = 0.31;
    c.adaptive_sigma = 2.5;
    c.adaptive_enabled = false;
    c.seed = 16045690984833335486ULL;
    c.jobs = 5;
    c.dump_masks = true;

    CHECK(cli::load_config(cli::save_config(c)) == c);

    TempDir td("config");
    std::string path = td.sub("c.json");
    cli::save_config_file(c, path);
    CHECK(cli::load_config_file(path) == c);
}

TEST_CASE("config rejects unknown keys and wrong types by name") {
    CHECK_THROWS_WITH(cli::load_config(nlohmann::json{{"epsilonn", 0.1}}),
                      Catch::Matchers::ContainsSubstring("epsilonn"));
    CHECK_THROWS_WITH(cli::load_config(nlohmann::json{{"iterations", "thirty"}}),
                      Catch::Matchers::ContainsSubstring("iterations"));
    CHECK_THROWS_WITH(cli::load_config(nlohmann::json{{"seed", -4}}),
                      Catch::Matchers::ContainsSubstring("seed"));
    CHECK_THROWS_AS(cli::load_config(nlohmann::json::array()), ConfigError);
}

TEST_CASE("flag beats config file beats default") {
    TempDir td("precedence");
    std::string path = td.sub("c.json");
    std::ofstream(path) << R"({"epsilon": 0.9, "iterations": 7, "alpha": 0.05})";

    cli::FlagOverrides f;
    f.config = path;
    f.iterations = 3;
    cli::RunConfig c = cli::resolve_config(f);
    CHECK(c.epsilon == 0.9);       // file over default
    CHECK(c.iterations == 3);      // flag over file
    CHECK(c.alpha == 0.05);        // file over default
    CHECK(c.margin == 0.6);        // untouched default
    CHECK(c.adaptive_enabled);

    cli::FlagOverrides none;
    cli::RunConfig d = cli::resolve_config(none);
    CHECK(d.epsilon == 12.0 / 255.0);
    CHECK(d.iterations == 30);

    f.no_adaptive = true;
    CHECK_FALSE(cli::resolve_config(f).adaptive_enabled);
}

TEST_CASE("bundle path falls back to the injected environment value") {
    cli::FlagOverrides f;
    CHECK(cli::resolve_config(f, "env.manifest").bundle == "env.manifest");
    CHECK(cli::resolve_config(f, "").bundle.empty());
    CHECK(cli::resolve_config(f, nullptr).bundle.empty());
    f.bundle = "flag.manifest";
    CHECK(cli::resolve_config(f, "env.manifest").bundle == "flag.manifest");

    TempDir td("envprec");
    std::string path = td.sub("c.json");
    std::ofstream(path) << R"({"bundle": "file.manifest"})";
    cli::FlagOverrides g;
    g.config = path;
    CHECK(cli::resolve_config(g, "env.manifest").bundle == "file.manifest");
}

TEST_CASE("typed option conversion validates fields") {
    cli::RunConfig c;
    c.alpha = c.epsilon * 2;  // violates alpha <= epsilon
    CHECK_THROWS_AS(cli::to_protect_options(c), ConfigError);
    cli::RunConfig d;
    d.lambda_attn = -0.01;
    CHECK_THROWS_AS(cli::to_protect_options(d), ConfigError);
    cli::RunConfig e;
    e.jobs = 0;
    CHECK_THROWS_AS(cli::to_protect_options(e), ConfigError);
    cli::RunConfig ok;
    opt::ProtectOptions o = cli::to_protect_options(ok);
    CHECK(o.budget.epsilon == ok.epsilon);
    CHECK(o.adaptive.enabled);
}

// ---- input plumbing ---------------------------------------------------------------

TEST_CASE("input enumeration handles files, directories, and globs") {
    TempDir td("inputs");
    for (const char* name : {"b.png", "a.png", "c.jpg", "note.txt"})
        std::ofstream(td.sub(name)) << "x";

    auto dir_hits = cli::enumerate_inputs(td.str());
    REQUIRE(dir_hits.size() == 3);  // txt filtered out
    CHECK(fs::path(dir_hits[0]).filename() == "a.png");  // sorted
    CHECK(fs::path(dir_hits[1]).filename() == "b.png");

    auto glob_hits = cli::enumerate_inputs((td.path / "*.png").string());
    REQUIRE(glob_hits.size() == 2);

    auto single = cli::enumerate_inputs(td.sub("c.jpg"));
    REQUIRE(single.size() == 1);

    CHECK(cli::enumerate_inputs("").empty());
    CHECK(cli::enumerate_inputs((td.path / "*.webp").string()).empty());
    CHECK_THROWS_AS(cli::enumerate_inputs(td.sub("absent.png")), ConfigError);
}

TEST_CASE("protected output names compose with the pair convention") {
    CHECK(cli::protected_base("pair0_src") == "pair0");
    CHECK(cli::protected_base("portrait") == "portrait");
    CHECK(cli::protected_base("_src") == "_src");  // empty id would be degenerate
}

TEST_CASE("pair discovery flags missing members") {
    TempDir td("pairs");
    Tensor<double> img = synth::make_face(5);
    io::write_image_png(td.sub("p0_src.png"), img);
    io::write_image_png(td.sub("p0_protected.png"), img);
    io::write_image_png(td.sub("p0_target.png"), img);
    io::write_image_png(td.sub("p1_src.png"), img);
    io::write_image_png(td.sub("p1_target.png"), img);  // no protected member

    auto pairs = cli::discover_pairs(td.str());
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].id == "p0");
    CHECK_FALSE(pairs[0].protected_.empty());
    CHECK(pairs[1].id == "p1");
    CHECK(pairs[1].protected_.empty());
    CHECK_THROWS_AS(cli::discover_pairs(td.sub("nodir")), ConfigError);
}

// ---- command flows ----------------------------------------------------------------

TEST_CASE("samples, protect, and evaluate compose end to end") {
    TempDir td("flow");
    std::ostringstream log;

    cli::RunConfig c;
    c.output = td.sub("data");
    c.seed = 2024;
    REQUIRE(cli::cmd_samples(c, log) == cli::kExitOk);
    REQUIRE(fs::is_regular_file(td.path / "data" / "bundle.manifest"));
    REQUIRE(fs::is_regular_file(td.path / "data" / "pair0_src.png"));

    c.input = (td.path / "data" / "*_src.png").string();
    c.bundle = (td.path / "data" / "bundle.manifest").string();
    c.iterations = 2;  // keep the flow test fast
    c.jobs = 2;
    REQUIRE(cli::cmd_protect(c, log) == cli::kExitOk);
    REQUIRE(fs::is_regular_file(td.path / "data" / "pair0_protected.png"));
    REQUIRE(fs::is_regular_file(td.path / "data" / "pair0_runlog.csv"));

    auto run_log = io::read_run_log_file<double>((td.path / "data" / "pair0_runlog.csv").string());
    REQUIRE(run_log.size() == 3);  // 2 iterations + final evaluation

    std::ifstream summary((td.path / "data" / "summary.csv").string());
    std::string line;
    std::getline(summary, line);
    CHECK(line == "image,status,iterations,linf_bytes");
    int data_rows = 0;
    while (std::getline(summary, line))
        if (!line.empty()) ++data_rows;
    CHECK(data_rows == 4);

    c.input = (td.path / "data").string();
    c.output = td.sub("reports");
    REQUIRE(cli::cmd_evaluate(c, log) == cli::kExitOk);
    // labels include the untransformed row, so this is pairs x (1 + transforms)
    auto rows = io::read_metrics_csv_file<double>((td.path / "reports" / "metrics.csv").string());
    CHECK(rows.size() == 4 * eval::transform_labels().size());
    auto jrows = io::read_metrics_jsonl_file<double>((td.path / "reports" / "metrics.jsonl").string());
    REQUIRE(jrows.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(jrows[i].pair_id == rows[i].pair_id);
        CHECK(jrows[i].l2 == rows[i].l2);
        CHECK(jrows[i].ism == rows[i].ism);
    }
}

TEST_CASE("protect skips unreadable inputs with a warning and still succeeds") {
    TempDir td("skip");
    fs::create_directories(td.sub("in"));
    Tensor<double> img = synth::make_face(3);
    io::write_image_png((td.path / "in" / "good.png").string(), img);
    std::ofstream((td.path / "in" / "broken.png").c_str()) << "not a png";

    cli::RunConfig c;
    c.input = (td.path / "in").string();
    c.output = td.sub("out");
    c.iterations = 1;
    std::ostringstream log;
    REQUIRE(cli::cmd_protect(c, log) == cli::kExitOk);
    CHECK(log.str().find("skipping") != std::string::npos);
    CHECK(fs::is_regular_file(td.path / "out" / "good_protected.png"));
    CHECK_FALSE(fs::exists(td.path / "out" / "broken_protected.png"));

    std::ifstream summary((td.path / "out" / "summary.csv").string());
    std::string all((std::istreambuf_iterator<char>(summary)), std::istreambuf_iterator<char>());
    CHECK(all.find("skipped") != std::string::npos);
    CHECK(all.find(",ok,") != std::string::npos);
}

TEST_CASE("empty protect batch writes an empty summary and exits cleanly") {
    TempDir td("empty");
    cli::RunConfig c;
    c.input = "";
    c.output = td.sub("out");
    std::ostringstream log;
    REQUIRE(cli::cmd_protect(c, log) == cli::kExitOk);
    std::ifstream summary((td.path / "out" / "summary.csv").string());
    std::string header;
    REQUIRE(std::getline(summary, header));
    std::string rest;
    CHECK_FALSE(std::getline(summary, rest));
}

TEST_CASE("evaluate emits a sentinel row per unusable pair") {
    TempDir td("sentinel");
    fs::create_directories(td.sub("in"));
    Tensor<double> img = synth::make_face(9);
    io::write_image_png((td.path / "in" / "q_src.png").string(), img);
    // no protected and no target member

    cli::RunConfig c;
    c.input = td.sub("in");
    c.output = td.sub("out");
    std::ostringstream log;
    REQUIRE(cli::cmd_evaluate(c, log) == cli::kExitOk);
    auto rows = io::read_metrics_csv_file<double>((td.path / "out" / "metrics.csv").string());
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].pair_id == "q");
    CHECK(rows[0].transform == "missing");
    CHECK(rows[0].l2 == -3.0);
    CHECK(rows[0].psnr == -3.0);
    CHECK(rows[0].ism == -3.0);
}

TEST_CASE("dump-masks writes the grayscale mask set") {
    TempDir td("masks");
    fs::create_directories(td.sub("in"));
    io::write_image_png((td.path / "in" / "f.png").string(), synth::make_face(4));
    cli::RunConfig c;
    c.input = td.sub("in");
    c.output = td.sub("out");
    std::ostringstream log;
    REQUIRE(cli::cmd_dump_masks(c, log) == cli::kExitOk);
    for (const char* n : {"f_mask_semantic.png", "f_mask_cam.png", "f_mask_anchor.png"})
        CHECK(fs::is_regular_file(td.path / "out" / n));
}

TEST_CASE("selftest passes on a fresh seeded bundle and is repeatable") {
    cli::RunConfig c;
    c.seed = 123;
    std::ostringstream log1, log2;
    REQUIRE(cli::cmd_selftest(c, log1) == cli::kExitOk);
    REQUIRE(cli::cmd_selftest(c, log2) == cli::kExitOk);
    CHECK(log1.str() == log2.str());  // identical pass list
    CHECK(log1.str().find("FAIL") == std::string::npos);
}
