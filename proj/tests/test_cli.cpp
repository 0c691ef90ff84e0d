// End-to-end checks of the installed CLI binary (path via M2REPA_CLI).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
    const char* p = std::getenv("M2REPA_CLI");
    REQUIRE_MESSAGE(p != nullptr, "M2REPA_CLI must point at the CLI binary");
    return p;
}

int run(const std::string& args, const std::string& log) {
    const std::string cmd = cli_path() + " " + args + " >" + log + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return rc == -1 ? -1 : WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct TempDir {
    fs::path path;
    TempDir() : path("cli_test_tmp") {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_tiny_config(const fs::path& p) {
    std::ofstream out(p);
    out << "[model]\nembed_dim = 8\ndepth = 2\ntap_layer = 1\n";
    out << "[data]\nframes = 4\nn_clips = 4\nsplit_ratio = 0.5\n";
    out << "[train]\nbatch = 2\nsteps = 2\n";
    out << "[align]\nexpert_dim = 8\nexpert_depth = 1\nprojector_depth = 2\n";
    out << "[eval]\nhorizon_short = 2\neuler_steps = 2\neval_clips = 1\nhorizons = short\n";
}

}  // namespace

TEST_CASE("missing config file exits nonzero and names the path") {
    TempDir dir;
    const std::string log = (dir.path / "log.txt").string();
    CHECK(run("train --config missing_config.ini --out " + (dir.path / "out").string(), log) !=
          0);
    CHECK(slurp(log).find("missing_config.ini") != std::string::npos);
}

TEST_CASE("train twice gives byte-identical loss CSVs; variant override lands in summary") {
    TempDir dir;
    const fs::path cfg = dir.path / "cfg.ini";
    write_tiny_config(cfg);
    const std::string log = (dir.path / "log.txt").string();

    REQUIRE(run("train --config " + cfg.string() + " --out " + (dir.path / "a").string(), log) ==
            0);
    REQUIRE(run("train --config " + cfg.string() + " --out " + (dir.path / "b").string(), log) ==
            0);
    CHECK(slurp(dir.path / "a" / "loss.csv") == slurp(dir.path / "b" / "loss.csv"));

    REQUIRE(run("train --config " + cfg.string() + " --variant baseline --out " +
                    (dir.path / "c").string(),
                log) == 0);
    const std::string summary = slurp(dir.path / "c" / "summary.txt");
    CHECK(summary.find("variant: baseline") != std::string::npos);
    CHECK(summary.find("alignment_active: no") != std::string::npos);
}

TEST_CASE("eval produces the metric CSV and rejects corrupt checkpoints nonzero") {
    TempDir dir;
    const fs::path cfg = dir.path / "cfg.ini";
    write_tiny_config(cfg);
    const std::string log = (dir.path / "log.txt").string();
    REQUIRE(run("train --config " + cfg.string() + " --out " + (dir.path / "run").string(),
                log) == 0);
    const fs::path ckpt = dir.path / "run" / "checkpoint.m2rp";

    REQUIRE(run("eval --checkpoint " + ckpt.string() + " --frames short --out " +
                    (dir.path / "eval").string(),
                log) == 0);
    const std::string metrics = slurp(dir.path / "eval" / "metrics.csv");
    CHECK(metrics.find("variant,horizon,psnr") != std::string::npos);
    CHECK(metrics.find("m2repa-cka,short,") != std::string::npos);

    CHECK(run("verify --checkpoint " + ckpt.string(), log) == 0);
    {
        std::fstream f(ckpt, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        f.write("\x7f", 1);
    }
    CHECK(run("verify --checkpoint " + ckpt.string(), log) != 0);
    CHECK(slurp(log).find("CRC") != std::string::npos);
    CHECK(run("eval --checkpoint " + ckpt.string() + " --frames short --out " +
                  (dir.path / "eval2").string(),
              log) != 0);
}

TEST_CASE("export-clip writes frames and controls") {
    TempDir dir;
    const std::string log = (dir.path / "log.txt").string();
    REQUIRE(run("export-clip --clip 9 --frames-count 3 --out " + (dir.path / "clip").string(),
                log) == 0);
    CHECK(fs::exists(dir.path / "clip" / "frame_002.m2rt"));
    CHECK(fs::exists(dir.path / "clip" / "controls.txt"));
}
