#include <cstdio>
#include <fstream>

#include "core/config.h"
#include "doctest.h"

using namespace m2repa;

TEST_CASE("config text round trip covers every documented key") {
    Config cfg;
    std::string text = config_to_text(cfg);
    for (const char* key :
         {"arch", "embed_dim", "variant", "lambda_align", "lambda_decouple", "horizon_short",
          "expert_seed_rgb", "cka_max_rows", "motion", "timestep_mode"}) {
        CHECK(text.find(key) != std::string::npos);
    }
    Config back = config_from_text(text);
    CHECK(config_to_text(back) == text);
}

TEST_CASE("config parser reports line numbers and rejects unknown keys") {
    const char* path = "cfg_test.ini";
    {
        std::ofstream out(path);
        out << "[train]\n";
        out << "steps = 12\n";
        out << "nonsense = 1\n";
    }
    CHECK_THROWS_WITH_AS(load_config(path), doctest::Contains(":3"), std::runtime_error);
    CHECK_THROWS_WITH_AS(load_config(path), doctest::Contains("nonsense"), std::runtime_error);
    std::remove(path);

    {
        std::ofstream out(path);
        out << "steps = 12\n";
    }
    CHECK_THROWS_WITH_AS(load_config(path), doctest::Contains("section"), std::runtime_error);
    std::remove(path);

    {
        std::ofstream out(path);
        out << "[train]\n";
        out << "variant = m2repa-cka  # the full method\n";
        out << "steps = 7\n";
        out << "\n";
        out << "[data]\n";
        out << "frames = 4\n";
        out << "context = 2\n";
    }
    Config cfg = load_config(path);
    CHECK(cfg.variant == "m2repa-cka");
    CHECK(cfg.steps == 7);
    CHECK(cfg.frames == 4);
    CHECK(cfg.context == 2);
    std::remove(path);

    CHECK_THROWS_AS(load_config("no_such_file.ini"), std::runtime_error);
}

TEST_CASE("config validation catches bad values") {
    Config cfg;
    cfg.context = 10;
    cfg.frames = 4;
    CHECK_THROWS_AS(validate_config(cfg), std::runtime_error);

    Config bad_choice;
    CHECK_THROWS_WITH_AS(apply_config_line(bad_choice, "train", "variant", "m3repa"),
                         doctest::Contains("must be one of"), std::runtime_error);
    CHECK_THROWS_AS(apply_config_line(bad_choice, "train", "steps", "twelve"),
                    std::runtime_error);

    CHECK(get_config_value(Config{}, "train", "lambda_align") == "0.5");
    CHECK(get_config_value(Config{}, "train", "lambda_decouple") == "0.05");
}
