#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "align.h"
#include "backbone.h"
#include "config.h"
#include "experts.h"
#include "flow.h"
#include "metrics.h"

namespace m2repa {

enum class TrainVariant {
    Baseline,
    RepaRgb,
    RepaDepth,
    RepaMask,
    NaiveMulti,
    M2RepaCos2,
    M2RepaCka,
};

TrainVariant parse_variant(const std::string& name);
const char* variant_name(TrainVariant v);
std::vector<TrainVariant> all_variants();

struct EvalResult {
    std::string horizon_name;
    int horizon = 0;
    ClipMetrics metrics;
};

struct RunReport {
    std::vector<LossBreakdown> history;
    ClipMetrics final_metrics;       // short-horizon evaluation after training
    double mean_pairwise_cka = 0.0;  // CKA diagnostic on projected features
    double wall_seconds = 0.0;
    std::string config_echo;
    std::string build_id;
    std::string variant;
    std::uint64_t seed = 0;
};

// Adam-style moments (or plain SGD) over named parameters; state is keyed by
// name so it survives checkpointing.
class Optimizer {
public:
    Optimizer(std::string kind, double lr, const NamedParams& trainable);
    void update(const std::vector<std::pair<std::string, Tensor>>& params,
                const std::vector<Tensor>& grads);

    std::int64_t step_count() const { return step_; }
    void set_step_count(std::int64_t s) { step_ = s; }
    std::vector<float>& moment_m(const std::string& name);
    std::vector<float>& moment_v(const std::string& name);
    const std::vector<float>& moment_m(const std::string& name) const;
    const std::vector<float>& moment_v(const std::string& name) const;

private:
    std::string kind_;
    double lr_;
    std::int64_t step_ = 0;
    std::vector<std::string> names_;  // deterministic order
    std::vector<std::vector<float>> m_, v_;
    int index_of(const std::string& name) const;
};

// The full optimization loop: dataset, frozen experts, backbone, projector
// bank, variant-gated losses, one optimizer step per run_step.
class Trainer {
public:
    explicit Trainer(const Config& cfg);

    LossBreakdown run_step(int step);
    RunReport run_loop();
    EvalResult evaluate(const std::string& horizon_name);

    double mean_pairwise_cka();

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);
    static Config checkpoint_config(const std::string& path);

    const Config& config() const { return cfg_; }
    const Backbone& model() const { return model_; }
    ProjectorBank& bank() { return bank_; }
    const ClipDataset& dataset() const { return data_; }
    std::vector<std::uint32_t> expert_checksums() const;
    const NamedParams& trainable_params() const { return trainable_; }
    Tensor hidden_tap_for_clip(const TriModalClip& clip, const std::vector<float>& t_vec,
                               std::uint64_t noise_seed);

private:
    Tensor stack_states(const std::vector<int>& clip_idx) const;
    Tensor stack_pixels(const std::vector<int>& clip_idx) const;
    std::vector<ControlSignal> stack_controls(const std::vector<int>& clip_idx) const;
    Tensor expert_targets(int which, const std::vector<int>& clip_idx);
    std::vector<int> active_experts() const;

    Config cfg_;
    TrainVariant variant_;
    BackboneConfig model_cfg_;
    std::unique_ptr<LatentCodec> codec_;
    Backbone model_;
    ProjectorBank bank_;
    std::vector<Expert> experts_;
    ClipDataset data_;
    std::vector<Tensor> train_states_;   // model-space clip tensors
    std::vector<Tensor> train_pixels_;   // clean pixel clips (expert inputs)
    std::vector<std::vector<Tensor>> expert_cache_;  // [expert][clip]
    Optimizer opt_;
    NamedParams trainable_;  // model + projector parameters, fixed order
};

struct SweepPoint {
    double value = 0.0;
    RunReport report;
    EvalResult eval_short;
};

// One seeded run per value on a shared data split. axis is one of
// lambda-decouple | tap-layer | projector-depth.
std::vector<SweepPoint> sweep(const Config& base, const std::string& axis,
                              std::span<const double> values);

}  // namespace m2repa
