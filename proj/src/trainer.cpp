#include "histalign/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "histalign/serialization.hpp"

namespace histalign::train {

namespace {

using Clock = std::chrono::steady_clock;

bool is_decayed(std::string_view name) {
    return name.find("bias") == std::string_view::npos && name.find("gain") == std::string_view::npos;
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

nlohmann::json loss_json(const objectives::LossBreakdown& loss) {
    return {{"xe", loss.xe},
            {"trime", loss.trime},
            {"contrastive", loss.contrastive},
            {"total", loss.total},
            {"contributing_positions", loss.contributing_positions}};
}

void check_vocabulary(const lm::MiniLM& model, const std::vector<ambigen::TokenizedExample>& data) {
    const auto& cfg = model.config();
    for (const auto& ex : data) {
        auto bad = [&](TokenId t) { return t >= cfg.vocab_size; };
        if (bad(ex.target) || std::any_of(ex.context.begin(), ex.context.end(), bad)) {
            throw std::invalid_argument("dataset token id exceeds the model vocabulary");
        }
        if (ex.context.size() + 1 > cfg.context_length) {
            throw std::invalid_argument("example longer than the model context length");
        }
    }
}

class Loop {
public:
    Loop(TrainState state, const std::vector<ambigen::TokenizedExample>& train_set,
         const std::vector<ambigen::TokenizedExample>& dev_set, const TrainConfig& config)
        : state_(std::move(state)), train_(train_set), dev_(dev_set), config_(config) {}

    TrainResult run() {
        config_.validate();
        if (train_.empty()) {
            throw std::invalid_argument("training set is empty");
        }
        check_vocabulary(state_.model, train_);
        check_vocabulary(state_.model, dev_);

        const std::size_t steps_per_epoch = (train_.size() + config_.batch_size - 1) / config_.batch_size;
        const std::size_t total = total_steps(config_, train_.size());
        const std::size_t eval_every = config_.eval_every > 0 ? config_.eval_every : steps_per_epoch;
        const auto started = Clock::now();

        std::size_t cached_epoch = static_cast<std::size_t>(-1);
        std::vector<std::size_t> order;
        lm::Parameters grads = lm::Parameters::zeros(state_.model.config());
        std::vector<const ambigen::TokenizedExample*> batch;

        bool interrupted = false;
        while (state_.optimizer.step < total) {
            if (config_.stop_after_step && state_.optimizer.step >= *config_.stop_after_step) {
                interrupted = true;
                break;
            }
            const std::size_t step = state_.optimizer.step;
            const std::size_t epoch = step / steps_per_epoch;
            if (epoch != cached_epoch) {
                order = epoch_order(config_.seed, epoch, train_.size());
                cached_epoch = epoch;
            }
            const std::size_t begin = (step % steps_per_epoch) * config_.batch_size;
            const std::size_t end = std::min(begin + config_.batch_size, train_.size());
            batch.clear();
            for (std::size_t i = begin; i < end; ++i) {
                batch.push_back(&train_[order[i]]);
            }

            grads.set_zero();
            objectives::LossBreakdown loss;
            try {
                loss = batch_loss(state_.model, batch, config_.objective_config(), config_.loss_mask, &grads);
            } catch (const NumericalError& e) {
                log_.failure = std::string(e.what()) + " at step " + std::to_string(step + 1);
                throw TrainingDiverged(*log_.failure, step + 1, log_);
            }
            const double lr = learning_rate_at(config_, step, total);
            log_.steps.push_back(
                {step + 1, lr, loss, std::chrono::duration<double>(Clock::now() - started).count()});
            if (!std::isfinite(loss.total) || !gradients_finite(grads)) {
                log_.failure = "non-finite loss or gradient at step " + std::to_string(step + 1);
                throw TrainingDiverged(*log_.failure, step + 1, log_);
            }
            apply_update(grads, lr);

            const std::size_t done = state_.optimizer.step;
            if (done % eval_every == 0 || done == total) {
                validate(done);
            }
        }

        TrainResult result{state_.model, std::move(state_), std::move(log_), !interrupted};
        if (result.state.best_params) {
            result.best_model = lm::MiniLM(result.state.model.config(), *result.state.best_params);
        }
        return result;
    }

private:
    static bool gradients_finite(const lm::Parameters& grads) {
        bool ok = true;
        grads.visit([&ok](std::string_view, const Matrix& m) { ok = ok && m.allFinite(); });
        return ok;
    }

    void apply_update(lm::Parameters& grads, double lr) {
        const bool freeze = config_.freeze_output_embeddings;
        auto trainable = [freeze](std::string_view name) { return !(freeze && name == "token_embedding"); };

        if (config_.clip_norm > 0.0) {
            double sq = 0.0;
            grads.visit([&](std::string_view name, const Matrix& g) {
                if (trainable(name)) {
                    sq += g.squaredNorm();
                }
            });
            const double norm = std::sqrt(sq);
            if (norm > config_.clip_norm) {
                const double scale = config_.clip_norm / (norm + 1e-6);
                grads.visit([&](std::string_view, Matrix& g) { g *= scale; });
            }
        }

        AdamState& opt = state_.optimizer;
        opt.step += 1;
        const double t = static_cast<double>(opt.step);
        const double bias1 = 1.0 - std::pow(config_.beta1, t);
        const double bias2 = 1.0 - std::pow(config_.beta2, t);

        // Walk parameters, gradients and both moments in lockstep.
        std::vector<Matrix*> params, gs, ms, vs;
        std::vector<std::string> names;
        state_.model.params().visit([&](std::string_view name, Matrix& m) {
            params.push_back(&m);
            names.emplace_back(name);
        });
        grads.visit([&](std::string_view, Matrix& m) { gs.push_back(&m); });
        opt.m.visit([&](std::string_view, Matrix& m) { ms.push_back(&m); });
        opt.v.visit([&](std::string_view, Matrix& m) { vs.push_back(&m); });

        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!trainable(names[i])) {
                continue;
            }
            Matrix& p = *params[i];
            const Matrix& g = *gs[i];
            Matrix& m = *ms[i];
            Matrix& v = *vs[i];
            if (config_.weight_decay > 0.0 && is_decayed(names[i])) {
                p *= (1.0 - lr * config_.weight_decay);
            }
            m = config_.beta1 * m + (1.0 - config_.beta1) * g;
            v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
            p.array() -= lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + config_.adam_eps);
        }
    }

    void validate(std::size_t step) {
        if (dev_.empty()) {
            return;
        }
        ValidationRecord rec;
        rec.step = step;
        rec.loss = dataset_loss(state_.model, dev_, config_.objective_config(), config_.loss_mask);
        for (auto mode : {eval::EvalMode::Full, eval::EvalMode::CacheOnly}) {
            rec.reports.push_back(eval::evaluate(state_.model, dev_, config_.eval_ks, mode));
        }
        if (rec.loss.total < state_.best_val_loss) {
            state_.best_val_loss = rec.loss.total;
            state_.best_params = state_.model.params();
            rec.improved = true;
        }
        log_.evals.push_back(std::move(rec));
    }

    TrainState state_;
    const std::vector<ambigen::TokenizedExample>& train_;
    const std::vector<ambigen::TokenizedExample>& dev_;
    TrainConfig config_;
    RunLog log_;
};

}  // namespace

std::string_view to_string(LossMask mask) {
    return mask == LossMask::AllPositions ? "all-positions" : "last-token-only";
}

LossMask parse_loss_mask(std::string_view name) {
    if (name == "all-positions") return LossMask::AllPositions;
    if (name == "last-token-only") return LossMask::LastTokenOnly;
    throw std::invalid_argument("unknown loss mask '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
    if (max_steps.has_value() == epochs.has_value()) {
        throw std::invalid_argument("exactly one of max_steps and epochs must be set");
    }
    if ((max_steps && *max_steps == 0) || (epochs && *epochs == 0)) {
        throw std::invalid_argument("max_steps/epochs must be positive");
    }
    if (alpha < 0.0 || lambda < 0.0) {
        throw std::invalid_argument("alpha and lambda must be non-negative");
    }
    if (!(learning_rate > 0.0)) {
        throw std::invalid_argument("learning_rate must be positive");
    }
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
        throw std::invalid_argument("warmup_ratio must lie in [0, 1)");
    }
    if (batch_size == 0) {
        throw std::invalid_argument("batch_size must be positive");
    }
    for (std::size_t k : eval_ks) {
        if (k < 2) {
            throw std::invalid_argument("evaluation k values must be >= 2");
        }
    }
}

void RunLog::write_jsonl(std::ostream& out, bool include_wall_time) const {
    for (const auto& s : steps) {
        nlohmann::json rec = {{"type", "step"}, {"step", s.step}, {"lr", s.learning_rate}, {"loss", loss_json(s.loss)}};
        if (include_wall_time) {
            rec["wall_time"] = s.wall_time;
        }
        out << rec.dump() << '\n';
    }
    for (const auto& e : evals) {
        nlohmann::json rec = {{"type", "validation"}, {"step", e.step}, {"loss", loss_json(e.loss)},
                              {"improved", e.improved}};
        for (const auto& report : e.reports) {
            nlohmann::json acc = nlohmann::json::object();
            for (const auto& [k, a] : report.acc_at_k) {
                acc[std::to_string(k)] = a;
            }
            rec["acc_at_k"][std::string(eval::to_string(report.mode))] = acc;
            rec["n"] = report.n_examples;
        }
        out << rec.dump() << '\n';
    }
    if (failure) {
        out << nlohmann::json{{"type", "failure"}, {"message", *failure}}.dump() << '\n';
    }
}

std::vector<TokenId> example_sequence(const ambigen::TokenizedExample& example) {
    std::vector<TokenId> seq = example.context;
    seq.push_back(example.target);
    return seq;
}

std::vector<bool> example_mask(std::size_t length, LossMask mask) {
    std::vector<bool> m(length, false);
    if (length < 2) {
        return m;
    }
    if (mask == LossMask::LastTokenOnly) {
        m.back() = true;
    } else {
        std::fill(m.begin() + 1, m.end(), true);
    }
    return m;
}

objectives::LossBreakdown batch_loss(const lm::MiniLM& model, std::span<const ambigen::TokenizedExample* const> batch,
                                     const objectives::ObjectiveConfig& objective, LossMask mask,
                                     lm::Parameters* grads) {
    if (batch.empty()) {
        throw std::invalid_argument("empty batch");
    }
    objectives::LossBreakdown mean;
    const double scale = 1.0 / static_cast<double>(batch.size());
    lm::ForwardTrace trace;
    objectives::SequenceGrad seq_grad;
    for (const auto* ex : batch) {
        const auto tokens = example_sequence(*ex);
        const auto target_mask = example_mask(tokens.size(), mask);
        const auto out = lm::forward(model, tokens, true, grads != nullptr ? &trace : nullptr);
        const auto loss = objectives::sequence_loss(out, model.embeddings(), tokens, target_mask, objective,
                                                    grads != nullptr ? &seq_grad : nullptr);
        mean.xe += loss.xe * scale;
        mean.trime += loss.trime * scale;
        mean.contrastive += loss.contrastive * scale;
        mean.total += loss.total * scale;
        mean.contributing_positions += loss.contributing_positions;
        if (grads != nullptr) {
            seq_grad.d_hidden *= scale;
            grads->token_embedding += scale * seq_grad.d_embedding;
            lm::backward(model, trace, seq_grad.d_hidden, *grads);
        }
    }
    return mean;
}

objectives::LossBreakdown dataset_loss(const lm::MiniLM& model, const std::vector<ambigen::TokenizedExample>& data,
                                       const objectives::ObjectiveConfig& objective, LossMask mask) {
    std::vector<const ambigen::TokenizedExample*> all;
    all.reserve(data.size());
    for (const auto& ex : data) {
        all.push_back(&ex);
    }
    return batch_loss(model, all, objective, mask, nullptr);
}

std::size_t total_steps(const TrainConfig& config, std::size_t train_size) {
    if (config.max_steps) {
        return *config.max_steps;
    }
    const std::size_t per_epoch = (train_size + config.batch_size - 1) / config.batch_size;
    return per_epoch * config.epochs.value_or(1);
}

double learning_rate_at(const TrainConfig& config, std::size_t step, std::size_t total) {
    const auto warmup = static_cast<std::size_t>(std::ceil(config.warmup_ratio * static_cast<double>(total)));
    double factor;
    if (step < warmup) {
        factor = static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(1, warmup));
    } else {
        factor = std::max(0.0, static_cast<double>(total - step) /
                                   static_cast<double>(std::max<std::size_t>(1, total - warmup)));
    }
    return config.learning_rate * factor;
}

TrainResult train(lm::MiniLM model, const std::vector<ambigen::TokenizedExample>& train_set,
                  const std::vector<ambigen::TokenizedExample>& dev_set, const TrainConfig& config) {
    const auto cfg = model.config();
    TrainState state{std::move(model), AdamState{lm::Parameters::zeros(cfg), lm::Parameters::zeros(cfg), 0},
                     std::nullopt, std::numeric_limits<double>::infinity()};
    return Loop(std::move(state), train_set, dev_set, config).run();
}

TrainResult resume_training(TrainState state, const std::vector<ambigen::TokenizedExample>& train_set,
                            const std::vector<ambigen::TokenizedExample>& dev_set, const TrainConfig& config) {
    return Loop(std::move(state), train_set, dev_set, config).run();
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
    std::ostringstream out(std::ios::binary);
    lm::write_model(out, state.model);
    io::write_magic(out, "HOPT");
    io::write_u32(out, kOptimizerSectionVersion);
    io::write_u64(out, state.optimizer.step);
    io::write_f64(out, state.best_val_loss);
    io::write_u8(out, state.best_params ? 1 : 0);
    auto tensors = state.optimizer.m.to_named_tensors("m/");
    auto v = state.optimizer.v.to_named_tensors("v/");
    tensors.insert(tensors.end(), v.begin(), v.end());
    if (state.best_params) {
        auto best = state.best_params->to_named_tensors("best/");
        tensors.insert(tensors.end(), best.begin(), best.end());
    }
    io::write_tensor_list(out, tensors);
    io::atomic_write(path, out.str());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument("cannot open checkpoint " + path.string());
    }
    lm::MiniLM model = lm::read_model(in);
    io::expect_magic(in, "HOPT");
    const std::uint32_t version = io::read_u32(in);
    if (version != kOptimizerSectionVersion) {
        throw io::FormatError("unsupported optimizer section version " + std::to_string(version));
    }
    const std::uint64_t step = io::read_u64(in);
    const double best_val = io::read_f64(in);
    const bool has_best = io::read_u8(in) != 0;
    const auto tensors = io::read_tensor_list(in);

    const auto& cfg = model.config();
    const std::size_t per_set = model.params().to_named_tensors().size();
    if (tensors.size() != per_set * (has_best ? 3 : 2)) {
        throw io::FormatError("optimizer section has the wrong number of tensors");
    }
    auto slice = [&](std::size_t k) {
        return std::vector<io::NamedTensor>(tensors.begin() + static_cast<std::ptrdiff_t>(k * per_set),
                                            tensors.begin() + static_cast<std::ptrdiff_t>((k + 1) * per_set));
    };
    AdamState opt{lm::Parameters::zeros(cfg), lm::Parameters::zeros(cfg), step};
    opt.m.load_named_tensors(slice(0), "m/");
    opt.v.load_named_tensors(slice(1), "v/");
    std::optional<lm::Parameters> best;
    if (has_best) {
        best = lm::Parameters::zeros(cfg);
        best->load_named_tensors(slice(2), "best/");
    }
    return TrainState{std::move(model), std::move(opt), std::move(best), best_val};
}

}  // namespace histalign::train
