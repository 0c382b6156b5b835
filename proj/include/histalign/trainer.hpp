#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "histalign/ambigen.hpp"
#include "histalign/evalprobe.hpp"
#include "histalign/model.hpp"
#include "histalign/objectives.hpp"

namespace histalign::train {

enum class LossMask { AllPositions, LastTokenOnly };
std::string_view to_string(LossMask mask);
LossMask parse_loss_mask(std::string_view name);

struct TrainConfig {
    objectives::Objective objective = objectives::Objective::Xe;
    double alpha = 1.0;    // histalign only
    double lambda = 0.001;  // histalign only
    double learning_rate = 1e-3;
    double warmup_ratio = 0.0;
    std::size_t batch_size = 32;
    std::optional<std::size_t> max_steps;
    std::optional<std::size_t> epochs;
    LossMask loss_mask = LossMask::LastTokenOnly;
    bool freeze_output_embeddings = true;
    std::uint64_t seed = 0;

    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables clipping

    std::size_t eval_every = 0;  // validation interval in steps; 0 = once per epoch
    std::vector<std::size_t> eval_ks{2, 5, 10, 25};
    std::optional<std::size_t> stop_after_step;  // interrupt after this many steps (resumable)

    void validate() const;
    objectives::ObjectiveConfig objective_config() const { return {objective, alpha, lambda}; }
};

struct AdamState {
    lm::Parameters m;
    lm::Parameters v;
    std::uint64_t step = 0;
};

struct StepRecord {
    std::uint64_t step = 0;
    double learning_rate = 0.0;
    objectives::LossBreakdown loss;
    double wall_time = 0.0;  // seconds since the run started
};

struct ValidationRecord {
    std::uint64_t step = 0;
    objectives::LossBreakdown loss;
    std::vector<eval::EvalReport> reports;  // full, then cache-only
    bool improved = false;
};

/// Append-only training record.
struct RunLog {
    std::vector<StepRecord> steps;
    std::vector<ValidationRecord> evals;
    std::optional<std::string> failure;

    /// Line-delimited JSON. Wall time is omitted unless requested so that
    /// reruns produce byte-identical logs.
    void write_jsonl(std::ostream& out, bool include_wall_time = false) const;
};

/// Everything needed to continue a run step-identically.
struct TrainState {
    lm::MiniLM model;
    AdamState optimizer;
    std::optional<lm::Parameters> best_params;
    double best_val_loss = std::numeric_limits<double>::infinity();
};

struct TrainResult {
    lm::MiniLM best_model;  // minimal validation loss (final model when there is no dev set)
    TrainState state;       // where training stopped
    RunLog log;
    bool completed = false;  // false when interrupted by stop_after_step
};

/// Raised on a non-finite loss or gradient; the log holds the offending step.
class TrainingDiverged : public NumericalError {
public:
    TrainingDiverged(const std::string& message, std::uint64_t step, RunLog log)
        : NumericalError(message), step_(step), log_(std::move(log)) {}
    std::uint64_t step() const { return step_; }
    const RunLog& log() const { return log_; }

private:
    std::uint64_t step_;
    RunLog log_;
};

/// Model input and supervision mask for one example (context followed by the target).
std::vector<TokenId> example_sequence(const ambigen::TokenizedExample& example);
std::vector<bool> example_mask(std::size_t length, LossMask mask);

/// Mean loss and parameter gradient over a batch of examples.
objectives::LossBreakdown batch_loss(const lm::MiniLM& model, std::span<const ambigen::TokenizedExample* const> batch,
                                     const objectives::ObjectiveConfig& objective, LossMask mask,
                                     lm::Parameters* grads);

/// Mean loss over a dataset without gradients.
objectives::LossBreakdown dataset_loss(const lm::MiniLM& model, const std::vector<ambigen::TokenizedExample>& data,
                                       const objectives::ObjectiveConfig& objective, LossMask mask);

double learning_rate_at(const TrainConfig& config, std::size_t step, std::size_t total_steps);
std::size_t total_steps(const TrainConfig& config, std::size_t train_size);

TrainResult train(lm::MiniLM model, const std::vector<ambigen::TokenizedExample>& train_set,
                  const std::vector<ambigen::TokenizedExample>& dev_set, const TrainConfig& config);

TrainResult resume_training(TrainState state, const std::vector<ambigen::TokenizedExample>& train_set,
                            const std::vector<ambigen::TokenizedExample>& dev_set, const TrainConfig& config);

// Training checkpoint: the model checkpoint followed by "HOPT", u32 version,
// u64 step, f64 best validation loss, u8 has-best, tensor list
// ("m/<name>", "v/<name>", then "best/<name>" when present).
inline constexpr std::uint32_t kOptimizerSectionVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace histalign::train
