// Black-box coverage of the extern-C surface, linked against the shared
// library only.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "m2repa/m2repa.h"

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("capi_test_tmp") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all("capi_test_tmp"); }
    std::string str() const { return path.string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

m2_config* tiny_config() {
    m2_config* cfg = nullptr;
    REQUIRE(m2_config_create(&cfg) == M2_OK);
    auto set = [&](const char* sec, const char* key, const char* val) {
        REQUIRE(m2_config_set(cfg, sec, key, val) == M2_OK);
    };
    set("model", "embed_dim", "8");
    set("model", "depth", "2");
    set("model", "tap_layer", "1");
    set("data", "frames", "4");
    set("data", "n_clips", "4");
    set("data", "split_ratio", "0.5");
    set("train", "batch", "2");
    set("train", "steps", "2");
    set("align", "expert_dim", "8");
    set("align", "expert_depth", "1");
    set("align", "projector_depth", "2");
    set("eval", "horizon_short", "2");
    set("eval", "euler_steps", "2");
    set("eval", "eval_clips", "1");
    set("eval", "horizons", "short");
    return cfg;
}

}  // namespace

TEST_CASE("config handles set, get, and reject unknown keys") {
    m2_config* cfg = nullptr;
    REQUIRE(m2_config_create(&cfg) == M2_OK);

    char buf[64];
    CHECK(m2_config_get(cfg, "train", "lambda_align", buf, sizeof buf) == M2_OK);
    CHECK(std::string(buf) == "0.5");

    CHECK(m2_config_set(cfg, "train", "variant", "baseline") == M2_OK);
    CHECK(m2_config_get(cfg, "train", "variant", buf, sizeof buf) == M2_OK);
    CHECK(std::string(buf) == "baseline");

    CHECK(m2_config_set(cfg, "train", "made_up", "1") != M2_OK);
    CHECK(std::string(m2_last_error()).find("made_up") != std::string::npos);

    CHECK(m2_config_set(cfg, "train", "steps", "not-a-number") != M2_OK);
    CHECK(m2_config_get(cfg, "train", "lambda_align", buf, 2) != M2_OK);

    m2_config_destroy(cfg);
}

TEST_CASE("missing config file fails with the path in the message") {
    m2_config* cfg = nullptr;
    m2_status st = m2_config_load("definitely_missing.ini", &cfg);
    CHECK(st == M2_ERR_IO);
    CHECK(std::string(m2_last_error()).find("definitely_missing.ini") != std::string::npos);
}

TEST_CASE("train, eval, verify, and corruption rejection through the C API") {
    TempDir dir("flow");
    m2_config* cfg = tiny_config();

    REQUIRE(m2_train(cfg, dir.str().c_str()) == M2_OK);
    const fs::path ckpt = dir.path / "checkpoint.m2rp";
    CHECK(fs::exists(ckpt));
    const std::string loss1 = slurp(dir.path / "loss.csv");

    TempDir dir2("flow2");
    REQUIRE(m2_train(cfg, dir2.str().c_str()) == M2_OK);
    CHECK(slurp(dir2.path / "loss.csv") == loss1);  // byte-identical reruns

    CHECK(m2_checkpoint_verify(ckpt.string().c_str()) == M2_OK);

    TempDir evaldir("eval");
    REQUIRE(m2_eval(ckpt.string().c_str(), "short", evaldir.str().c_str()) == M2_OK);
    const std::string metrics1 = slurp(evaldir.path / "metrics.csv");
    REQUIRE(m2_eval(ckpt.string().c_str(), "short", evaldir.str().c_str()) == M2_OK);
    CHECK(slurp(evaldir.path / "metrics.csv") == metrics1);

    CHECK(m2_eval(ckpt.string().c_str(), "medium", evaldir.str().c_str()) ==
          M2_ERR_INVALID_ARGUMENT);

    // flip one payload byte: CRC must reject with a corrupt status
    {
        std::fstream f(ckpt, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(0, std::ios::end);
        const auto size = static_cast<long>(f.tellg());
        f.seekp(size / 2);
        char byte = 0;
        f.seekg(size / 2);
        f.read(&byte, 1);
        byte = static_cast<char>(byte ^ 0x11);
        f.seekp(size / 2);
        f.write(&byte, 1);
    }
    CHECK(m2_checkpoint_verify(ckpt.string().c_str()) == M2_ERR_CORRUPT);
    CHECK(std::string(m2_last_error()).find("CRC") != std::string::npos);
    CHECK(m2_eval(ckpt.string().c_str(), "short", evaldir.str().c_str()) == M2_ERR_CORRUPT);

    m2_config_destroy(cfg);
}

TEST_CASE("clip and feature export through the C API") {
    TempDir dir("exports");
    m2_config* cfg = tiny_config();

    REQUIRE(m2_export_clip(cfg, 7, 3, (dir.path / "clip").string().c_str()) == M2_OK);
    CHECK(fs::exists(dir.path / "clip" / "frame_000.m2rt"));
    CHECK(fs::exists(dir.path / "clip" / "controls.txt"));
    CHECK(m2_checkpoint_verify((dir.path / "clip" / "frame_000.m2rt").string().c_str()) ==
          M2_OK);

    REQUIRE(m2_train(cfg, (dir.path / "run").string().c_str()) == M2_OK);
    const std::string ckpt = (dir.path / "run" / "checkpoint.m2rp").string();
    REQUIRE(m2_export_features(ckpt.c_str(), 0, 11, (dir.path / "feat").string().c_str()) ==
            M2_OK);
    CHECK(fs::exists(dir.path / "feat" / "hidden_tap.ppm"));
    CHECK(fs::exists(dir.path / "feat" / "cka.txt"));

    CHECK(m2_export_features(ckpt.c_str(), 40, 11, (dir.path / "feat2").string().c_str()) !=
          M2_OK);

    m2_config_destroy(cfg);
}

TEST_CASE("api metadata") {
    CHECK(m2_abi_version() == 1);
    CHECK(std::string(m2_status_name(M2_OK)) == "ok");
    CHECK(std::string(m2_status_name(M2_ERR_CORRUPT)) == "corrupt file");
    CHECK(m2_build_id() != nullptr);
}
