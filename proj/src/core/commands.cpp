#include "commands.h"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "align.h"
#include "checkpoint.h"
#include "report.h"
#include "trainer.h"

namespace m2repa {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("cli: " + msg);
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail("cannot create output directory '" + dir + "': " + ec.message());
}

std::string loss_csv(const std::vector<LossBreakdown>& history) {
    std::string csv = "step,fm,align,decouple,total\n";
    for (std::size_t i = 0; i < history.size(); ++i) {
        const auto& b = history[i];
        csv += std::to_string(i) + "," + csv_num(b.fm) + "," + csv_num(b.align) + "," +
               csv_num(b.decouple) + "," + csv_num(b.total) + "\n";
    }
    return csv;
}

std::string metrics_row(const std::string& variant, const std::string& horizon,
                        const ClipMetrics& m) {
    return variant + "," + horizon + "," + csv_num(m.psnr) + "," + csv_num(m.ssim) + "," +
           csv_num(m.abs_rel) + "," + csv_num(m.delta1) + "," + csv_num(m.miou) + "," +
           csv_num(m.matched_fraction) + "\n";
}

constexpr const char* kMetricsHeader =
    "variant,horizon,psnr,ssim,abs_rel,delta1,miou,matched_fraction\n";

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

int thread_cap() {
    if (const char* env = std::getenv("M2REPA_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

void cmd_train(const Config& cfg, const std::string& out_dir) {
    validate_config(cfg);
    ensure_dir(out_dir);
    Trainer trainer(cfg);
    RunReport report = trainer.run_loop();
    trainer.save_checkpoint((fs::path(out_dir) / "checkpoint.m2rp").string());
    write_text_file((fs::path(out_dir) / "loss.csv").string(), loss_csv(report.history));

    std::ostringstream summary;
    summary << "variant: " << report.variant << "\n";
    summary << "seed: " << report.seed << "\n";
    summary << "steps: " << report.history.size() << "\n";
    summary << "build: " << report.build_id << "\n";
    const auto& last = report.history.back();
    summary << "final_fm: " << csv_num(last.fm) << "\n";
    summary << "final_align: " << csv_num(last.align) << "\n";
    summary << "final_decouple: " << csv_num(last.decouple) << "\n";
    summary << "final_total: " << csv_num(last.total) << "\n";
    summary << "alignment_active: "
            << (parse_variant(cfg.variant) != TrainVariant::Baseline ? "yes" : "no") << "\n";
    summary << "decoupling_active: "
            << (cfg.variant == "m2repa-cka" || cfg.variant == "m2repa-cos2" ? "yes" : "no")
            << "\n";
    summary << "mean_pairwise_cka: " << csv_num(report.mean_pairwise_cka) << "\n";
    summary << "eval_short_psnr: " << csv_num(report.final_metrics.psnr) << "\n";
    summary << "eval_short_ssim: " << csv_num(report.final_metrics.ssim) << "\n";
    summary << "eval_short_abs_rel: " << csv_num(report.final_metrics.abs_rel) << "\n";
    summary << "eval_short_delta1: " << csv_num(report.final_metrics.delta1) << "\n";
    summary << "eval_short_miou: " << csv_num(report.final_metrics.miou) << "\n";
    summary << "wall_seconds: " << csv_num(report.wall_seconds) << "\n";
    summary << "\n[config]\n" << report.config_echo;
    write_text_file((fs::path(out_dir) / "summary.txt").string(), summary.str());
}

void cmd_eval(const std::string& checkpoint_path, const std::string& horizons,
              const std::string& out_dir) {
    ensure_dir(out_dir);
    verify_bundle(checkpoint_path);
    Config cfg = Trainer::checkpoint_config(checkpoint_path);
    Trainer trainer(cfg);
    trainer.load_checkpoint(checkpoint_path);

    auto names = split_list(horizons.empty() ? cfg.horizons : horizons);
    if (names.empty()) fail("eval needs at least one horizon (short|long)");
    std::string csv = kMetricsHeader;
    for (const auto& name : names) {
        EvalResult r = trainer.evaluate(name);
        csv += metrics_row(cfg.variant, name, r.metrics);
    }
    write_text_file((fs::path(out_dir) / "metrics.csv").string(), csv);
}

void cmd_ablate(const Config& base, const std::vector<std::uint64_t>& seeds,
                const std::string& out_dir) {
    if (seeds.empty()) fail("ablate needs at least one seed");
    validate_config(base);
    ensure_dir(out_dir);

    struct Job {
        TrainVariant variant;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (TrainVariant v : all_variants()) {
        for (std::uint64_t s : seeds) jobs.push_back({v, s});
    }

    struct Outcome {
        std::map<std::string, ClipMetrics> metrics;  // horizon -> metrics
        double mean_pairwise_cka = 0.0;
        double final_total = 0.0;
    };
    std::vector<Outcome> outcomes(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());

    auto run_job = [&](std::size_t idx) {
        const Job& job = jobs[idx];
        try {
            Config cfg = base;
            cfg.variant = variant_name(job.variant);
            cfg.seed = job.seed;
            const fs::path run_dir =
                fs::path(out_dir) / variant_name(job.variant) / ("seed-" + std::to_string(job.seed));
            ensure_dir(run_dir.string());
            Trainer trainer(cfg);
            RunReport report = trainer.run_loop();
            trainer.save_checkpoint((run_dir / "checkpoint.m2rp").string());
            write_text_file((run_dir / "loss.csv").string(), loss_csv(report.history));
            Outcome& out = outcomes[idx];
            out.mean_pairwise_cka = report.mean_pairwise_cka;
            out.final_total = report.history.back().total;
            for (const auto& name : split_list(cfg.horizons)) {
                out.metrics[name] = trainer.evaluate(name).metrics;
            }
        } catch (...) {
            errors[idx] = std::current_exception();
        }
    };

    const int cap = thread_cap();
    if (cap <= 1 || jobs.size() == 1) {
        for (std::size_t i = 0; i < jobs.size(); ++i) run_job(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        const int n_workers = std::min<int>(cap, static_cast<int>(jobs.size()));
        for (int w = 0; w < n_workers; ++w) {
            workers.emplace_back([&] {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= jobs.size()) return;
                    run_job(i);
                }
            });
        }
        for (auto& t : workers) t.join();
    }

    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (errors[i]) {
            try {
                std::rethrow_exception(errors[i]);
            } catch (const std::exception& e) {
                fail("ablation run '" + std::string(variant_name(jobs[i].variant)) + "' (seed " +
                     std::to_string(jobs[i].seed) + ") failed: " + e.what());
            }
        }
    }

    // per-run rows plus per-variant means, one block per horizon
    std::string csv =
        "variant,seed,horizon,psnr,ssim,abs_rel,delta1,miou,matched_fraction,"
        "mean_pairwise_cka,final_total\n";
    const auto horizon_names = split_list(base.horizons);
    std::ostringstream table;
    table << "variant";
    for (const auto& h : horizon_names) {
        table << " | " << h << ": psnr ssim abs_rel delta1 miou";
    }
    table << " | mean_pairwise_cka\n";

    for (TrainVariant v : all_variants()) {
        std::map<std::string, ClipMetrics> mean_metrics;
        double mean_cka = 0.0;
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            if (jobs[i].variant != v) continue;
            const Outcome& out = outcomes[i];
            for (const auto& h : horizon_names) {
                const ClipMetrics& m = out.metrics.at(h);
                csv += std::string(variant_name(v)) + "," + std::to_string(jobs[i].seed) + "," +
                       h + "," + csv_num(m.psnr) + "," + csv_num(m.ssim) + "," +
                       csv_num(m.abs_rel) + "," + csv_num(m.delta1) + "," + csv_num(m.miou) +
                       "," + csv_num(m.matched_fraction) + "," +
                       csv_num(out.mean_pairwise_cka) + "," + csv_num(out.final_total) + "\n";
                ClipMetrics& acc = mean_metrics[h];
                acc.psnr += m.psnr;
                acc.ssim += m.ssim;
                acc.abs_rel += m.abs_rel;
                acc.delta1 += m.delta1;
                acc.miou += m.miou;
                acc.matched_fraction += m.matched_fraction;
            }
            mean_cka += out.mean_pairwise_cka;
        }
        const double n = static_cast<double>(seeds.size());
        mean_cka /= n;
        table << variant_name(v);
        for (const auto& h : horizon_names) {
            ClipMetrics& m = mean_metrics[h];
            m.psnr /= n;
            m.ssim /= n;
            m.abs_rel /= n;
            m.delta1 /= n;
            m.miou /= n;
            m.matched_fraction /= n;
            csv += std::string(variant_name(v)) + ",mean," + h + "," + csv_num(m.psnr) + "," +
                   csv_num(m.ssim) + "," + csv_num(m.abs_rel) + "," + csv_num(m.delta1) + "," +
                   csv_num(m.miou) + "," + csv_num(m.matched_fraction) + "," +
                   csv_num(mean_cka) + ",\n";
            table << " | " << csv_num(m.psnr) << " " << csv_num(m.ssim) << " "
                  << csv_num(m.abs_rel) << " " << csv_num(m.delta1) << " " << csv_num(m.miou);
        }
        table << " | " << csv_num(mean_cka) << "\n";
    }
    write_text_file((fs::path(out_dir) / "ablation.csv").string(), csv);
    write_text_file((fs::path(out_dir) / "ablation_summary.txt").string(), table.str());
}

void cmd_export_features(const std::string& checkpoint_path, int tap_layer,
                         std::uint64_t clip_seed, const std::string& out_dir) {
    ensure_dir(out_dir);
    verify_bundle(checkpoint_path);
    Config cfg = Trainer::checkpoint_config(checkpoint_path);
    if (tap_layer >= 1) {
        if (tap_layer > cfg.depth) {
            fail("tap layer " + std::to_string(tap_layer) + " exceeds trunk depth " +
                 std::to_string(cfg.depth));
        }
        cfg.tap_layer = tap_layer;
    }
    Trainer trainer(cfg);
    trainer.load_checkpoint(checkpoint_path);

    SceneConfig scene_cfg = make_scene_config(cfg);
    SceneState scene = generate_scene(clip_seed, scene_cfg);
    TriModalClip clip = render_clip(scene, cfg.frames, cfg.context);

    // mid-trajectory probe: every frame at t = 0.5
    std::vector<float> t_vec(static_cast<std::size_t>(cfg.frames), 0.5f);
    Tensor tap = trainer.hidden_tap_for_clip(clip, t_vec, derive_seed(clip_seed, "export"));
    auto projected = trainer.bank().project(tap);

    const BackboneConfig bcfg = make_backbone_config(cfg);
    const int n = bcfg.tokens_per_frame();
    const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
    const int scale = cfg.height / grid;

    auto export_tokens = [&](const std::string& name, const Tensor& tokens) {
        write_tensor_file((fs::path(out_dir) / (name + ".m2rt")).string(), "features/" + name,
                          tokens);
        write_ppm((fs::path(out_dir) / (name + ".ppm")).string(),
                  pca_feature_image(tokens, grid, grid, scale));
    };

    export_tokens("hidden_tap", tap);
    const char* mods[3] = {"rgb", "depth", "mask"};
    Tensor pixels = clip.to_tensor();
    std::vector<Tensor> expert_feats;
    for (int k = 0; k < 3; ++k) {
        export_tokens(std::string("projected_") + mods[k], projected[static_cast<std::size_t>(k)]);
        ExpertSpec spec;
        spec.modality = k == 0 ? Modality::Rgb : k == 1 ? Modality::Depth : Modality::Mask;
        spec.seed = k == 0 ? cfg.expert_seed_rgb
                           : k == 1 ? cfg.expert_seed_depth : cfg.expert_seed_mask;
        spec.feature_dim = cfg.expert_dim;
        spec.token_grid = n;
        spec.depth = cfg.expert_depth;
        Expert expert(spec, cfg.mask_channels, cfg.height, cfg.width);
        expert_feats.push_back(expert.extract(pixels));
        export_tokens(std::string("expert_") + mods[k], expert_feats.back());
    }

    auto flat = [](const Tensor& t) {
        return reshape(t, {t.dim(0) * t.dim(1), t.dim(2)});
    };
    std::string cka_log;
    for (int i = 0; i < 3; ++i) {
        for (int j = i + 1; j < 3; ++j) {
            const double v = linear_cka(flat(expert_feats[static_cast<std::size_t>(i)]),
                                        flat(expert_feats[static_cast<std::size_t>(j)]))
                                 .scalar_value();
            cka_log += std::string("expert_") + mods[i] + " expert_" + mods[j] + " " +
                       csv_num(v) + "\n";
        }
    }
    write_text_file((fs::path(out_dir) / "cka.txt").string(), cka_log);
}

void cmd_export_clip(const Config& cfg, std::uint64_t clip_seed, int frames,
                     const std::string& out_dir) {
    validate_config(cfg);
    ensure_dir(out_dir);
    SceneState scene = generate_scene(clip_seed, make_scene_config(cfg));
    TriModalClip clip = render_clip(scene, frames, std::min(cfg.context, frames - 1));

    std::string controls;
    for (int i = 0; i < clip.t(); ++i) {
        const auto& c = clip.controls[static_cast<std::size_t>(i)];
        if (c.kind == ControlKind::CameraPose) {
            controls += "pose";
            for (float p : c.pose) controls += " " + csv_num(p);
        } else {
            controls += "action " + std::to_string(c.action);
        }
        controls += "\n";
        char name[32];
        std::snprintf(name, sizeof name, "frame_%03d.m2rt", i);
        const auto& f = clip.frames[static_cast<std::size_t>(i)];
        Tensor parts[] = {f.rgb, f.depth, f.mask};
        write_tensor_file((fs::path(out_dir) / name).string(),
                          "frame/" + std::to_string(i), concat(parts, 0));
    }
    write_text_file((fs::path(out_dir) / "controls.txt").string(), controls);
}

void cmd_sweep(const Config& base, const std::string& axis, const std::vector<double>& values,
               const std::string& out_dir) {
    ensure_dir(out_dir);
    auto points = sweep(base, axis, values);
    std::string csv =
        "axis,value,seed,final_fm,final_total,psnr,ssim,abs_rel,delta1,miou,"
        "mean_pairwise_cka\n";
    for (const auto& p : points) {
        const auto& last = p.report.history.back();
        const auto& m = p.eval_short.metrics;
        csv += axis + "," + csv_num(p.value) + "," + std::to_string(p.report.seed) + "," +
               csv_num(last.fm) + "," + csv_num(last.total) + "," + csv_num(m.psnr) + "," +
               csv_num(m.ssim) + "," + csv_num(m.abs_rel) + "," + csv_num(m.delta1) + "," +
               csv_num(m.miou) + "," + csv_num(p.report.mean_pairwise_cka) + "\n";
    }
    write_text_file((fs::path(out_dir) / "sweep.csv").string(), csv);
}

}  // namespace m2repa
