#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "histalign/ambigen.hpp"
#include "histalign/config.hpp"
#include "histalign/evalprobe.hpp"
#include "histalign/gradcheck.hpp"
#include "histalign/sampling.hpp"
#include "histalign/serialization.hpp"
#include "histalign/trainer.hpp"

namespace fs = std::filesystem;
using namespace histalign;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "histalign 0.1.0";

enum Exit { kOk = 0, kInput = 2, kNumerical = 3 };

std::string checksum(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

void write_manifest(const fs::path& path, json manifest) {
    manifest["tool_version"] = kToolVersion;
    for (const auto& [key, file] : manifest["outputs"].items()) {
        if (!fs::exists(file.get<std::string>())) {
            throw std::runtime_error("manifest output " + key + " missing");
        }
    }
    io::atomic_write(path, manifest.dump(2) + "\n");
}

fs::path sidecar(const fs::path& checkpoint, const char* ext) {
    fs::path p = checkpoint;
    return p.replace_extension(ext);
}

std::vector<ambigen::TokenizedExample> load_split(const fs::path& data, const ambigen::Vocabulary& vocab,
                                                  const std::string& split) {
    const auto examples = ambigen::load_dataset(data);
    const auto tokens = ambigen::tokenize(vocab, examples);
    if (split == "all") {
        return tokens;
    }
    return ambigen::select_split(tokens, ambigen::parse_split(split));
}

// ---- gen-data ---------------------------------------------------------------

struct GenDataArgs {
    std::string quadruples;
    std::string templates;
    std::string out;
    std::uint64_t seed = 0;
};

int cmd_gen_data(const GenDataArgs& a) {
    lm::Rng rng(a.seed);
    std::vector<ambigen::AnalogyQuadruple> quads;
    const std::string synth = "synthetic:";
    if (a.quadruples.rfind(synth, 0) == 0) {
        std::size_t n = 0;
        try {
            n = std::stoul(a.quadruples.substr(synth.size()));
        } catch (const std::exception&) {
            throw std::invalid_argument("bad synthetic count in '" + a.quadruples + "'");
        }
        if (n == 0) {
            throw std::invalid_argument("synthetic count must be positive");
        }
        const std::size_t relations = std::min<std::size_t>(10, n);
        quads = ambigen::synth_quadruples(relations, (n + relations - 1) / relations, rng);
        quads.resize(std::min(quads.size(), n));
    } else {
        quads = ambigen::parse_analogy_file(a.quadruples);
    }
    const auto templates = a.templates.empty() ? ambigen::builtin_templates() : ambigen::read_templates(a.templates);
    auto examples = ambigen::make_examples(quads, templates, rng);
    ambigen::split_by_diagonal_words(examples, {}, rng);
    for (const auto& ex : examples) {
        if (!ambigen::is_well_posed(ex)) {
            throw std::invalid_argument("generated example is not well posed (target '" + ex.target + "')");
        }
    }
    std::ostringstream out;
    ambigen::write_dataset(out, examples);
    const std::string bytes = out.str();
    io::atomic_write(a.out, bytes);

    std::map<std::string, std::size_t> per_split;
    for (const auto& ex : examples) {
        ++per_split[std::string(ambigen::to_string(ex.split))];
    }
    write_manifest(a.out + ".manifest.json",
                   {{"command", "gen-data"},
                    {"config",
                     {{"quadruples", a.quadruples},
                      {"templates", a.templates.empty() ? "builtin" : a.templates},
                      {"seed", a.seed}}},
                    {"dataset_checksum", checksum(bytes)},
                    {"examples", per_split},
                    {"outputs", {{"dataset", a.out}}}});
    std::cout << "wrote " << examples.size() << " examples from " << quads.size() << " quadruples to " << a.out
              << "\n";
    for (const auto& [split, count] : per_split) {
        std::cout << "  " << split << ": " << count << "\n";
    }
    return kOk;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::vector<std::string> sets;
    std::map<std::string, std::string> flags;  // named overrides
    bool resume = false;
};

int cmd_train(const TrainArgs& a) {
    config::KeyValues kv;
    if (!a.config.empty()) {
        kv = config::load_key_values(a.config);
    }
    auto override_key = [&kv](const std::string& key, const std::string& value) {
        if (key == "max_steps") kv.erase("epochs");
        if (key == "epochs") kv.erase("max_steps");
        kv[key] = value;
    };
    for (const auto& [k, v] : a.flags) {
        override_key(k, v);
    }
    for (const auto& s : a.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw std::invalid_argument("--set expects key=value, got '" + s + "'");
        }
        override_key(s.substr(0, eq), s.substr(eq + 1));
    }
    config::RunConfig rc = config::to_run_config(kv);
    config::apply_environment(rc);
    if (rc.data.empty()) {
        throw std::invalid_argument("no dataset given (config key 'data')");
    }
    if (!fs::exists(rc.data)) {
        throw std::invalid_argument("dataset not found: " + rc.data.string());
    }

    const std::string data_bytes = io::read_file(rc.data);
    const auto examples = ambigen::load_dataset(rc.data);
    auto [vocab, tokens] = ambigen::build_vocab_and_tokenize(examples);
    const auto train_set = ambigen::select_split(tokens, ambigen::Split::Train);
    const auto dev_set = ambigen::select_split(tokens, ambigen::Split::Dev);
    rc.model.vocab_size = static_cast<std::uint32_t>(vocab.size());

    fs::create_directories(rc.out_dir);
    const fs::path stem = rc.out_dir / rc.name;
    const fs::path ckpt = stem.string() + ".ckpt";
    const fs::path state_path = stem.string() + ".state";
    const fs::path vocab_path = stem.string() + ".vocab";
    const fs::path log_path = stem.string() + ".log.jsonl";

    train::TrainResult result = [&] {
        if (a.resume && fs::exists(state_path)) {
            train::TrainState state = train::load_checkpoint(state_path);
            if (state.model.config() != rc.model) {
                throw std::invalid_argument("resumable state does not match the configured model");
            }
            return train::resume_training(std::move(state), train_set, dev_set, rc.train);
        }
        if (!rc.init_checkpoint.empty()) {
            lm::MiniLM base = lm::load_model(rc.init_checkpoint);
            if (base.config().vocab_size != rc.model.vocab_size) {
                throw std::invalid_argument("init checkpoint vocabulary does not match the dataset");
            }
            rc.model = base.config();
            return train::train(std::move(base), train_set, dev_set, rc.train);
        }
        return train::train(lm::init_model(rc.model), train_set, dev_set, rc.train);
    }();

    vocab.save(vocab_path);
    lm::save_model(ckpt, result.best_model);
    train::save_checkpoint(state_path, result.state);
    std::ostringstream log;
    result.log.write_jsonl(log, rc.log_wall_time);
    io::atomic_write(log_path, log.str());

    json outputs = {{"checkpoint", ckpt.string()},
                    {"state", state_path.string()},
                    {"vocab", vocab_path.string()},
                    {"log", log_path.string()}};
    write_manifest(stem.string() + ".manifest.json", {{"command", "train"},
                                                      {"config", kv},
                                                      {"dataset", rc.data.string()},
                                                      {"dataset_checksum", checksum(data_bytes)},
                                                      {"completed", result.completed},
                                                      {"steps", result.state.optimizer.step},
                                                      {"outputs", outputs}});

    std::cout << "objective " << objectives::to_string(rc.train.objective) << ", " << train_set.size()
              << " train / " << dev_set.size() << " dev examples, vocab " << vocab.size() << "\n";
    if (!result.log.steps.empty()) {
        const auto& last = result.log.steps.back();
        std::cout << "step " << last.step << ": loss " << last.loss.total << " (xe " << last.loss.xe << ", trime "
                  << last.loss.trime << ", cont " << last.loss.contrastive << ")\n";
    }
    if (std::isfinite(result.state.best_val_loss)) {
        std::cout << "best validation loss " << result.state.best_val_loss << "\n";
    }
    std::cout << (result.completed ? "finished" : "stopped early") << "; checkpoint " << ckpt.string() << "\n";
    return kOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string vocab;
    std::string mode = "full";
    std::vector<std::size_t> ks{2, 5, 10, 25};
    std::string split = "test";
    std::string out;
};

int cmd_eval(const EvalArgs& a) {
    const auto mode = eval::parse_mode(a.mode);
    const auto model = lm::load_model(a.checkpoint);
    const auto vocab = ambigen::Vocabulary::load(a.vocab.empty() ? sidecar(a.checkpoint, ".vocab") : fs::path(a.vocab));
    const auto data = load_split(a.data, vocab, a.split);
    if (data.empty()) {
        throw std::invalid_argument("no examples in split '" + a.split + "'");
    }
    const auto report = eval::evaluate(model, data, a.ks, mode);

    std::ostringstream records;
    for (const auto& [k, acc] : report.acc_at_k) {
        records << json{{"run", fs::path(a.checkpoint).stem().string()},
                        {"mode", eval::to_string(mode)},
                        {"k", k},
                        {"acc", acc},
                        {"n", report.n_examples}}
                       .dump()
                << "\n";
        std::cout << "acc@" << k << " = " << std::fixed << std::setprecision(4) << acc << "  (" << a.mode
                  << ", n=" << report.n_examples << ")\n";
    }
    if (!a.out.empty()) {
        io::atomic_write(a.out, records.str());
        write_manifest(a.out + ".manifest.json",
                       {{"command", "eval"},
                        {"config", {{"checkpoint", a.checkpoint}, {"mode", a.mode}, {"split", a.split}, {"k", a.ks}}},
                        {"dataset_checksum", checksum(io::read_file(a.data))},
                        {"outputs", {{"report", a.out}}}});
    }
    return kOk;
}

// ---- rank-probe -------------------------------------------------------------

struct ProbeArgs {
    std::string checkpoint;
    std::string data;
    std::string vocab;
    std::size_t n = 200;
    bool with_cache = true;
    std::string split = "test";
    double rel_tol = 1e-6;
    std::string out;
};

int cmd_rank_probe(const ProbeArgs& a) {
    const auto model = lm::load_model(a.checkpoint);
    const auto vocab = ambigen::Vocabulary::load(a.vocab.empty() ? sidecar(a.checkpoint, ".vocab") : fs::path(a.vocab));
    const auto data = load_split(a.data, vocab, a.split);
    const auto report = eval::logprob_matrix_rank_probe(model, data, a.n, a.with_cache, a.rel_tol);

    json rec = {{"run", fs::path(a.checkpoint).stem().string()},
                {"n_contexts", report.n_contexts},
                {"vocab_size", report.vocab_size},
                {"hidden_size", report.hidden_size},
                {"rel_tol", a.rel_tol},
                {"baseline_rank", report.baseline.rank},
                {"baseline_smallest_retained", eval::smallest_retained(report.baseline, 8)}};
    std::cout << "N=" << report.n_contexts << " d=" << report.hidden_size << " V=" << report.vocab_size << "\n";
    std::cout << "rank without cache: " << report.baseline.rank << " (bound d+1 = " << report.hidden_size + 1
              << ")\n";
    if (report.with_cache) {
        rec["with_cache_rank"] = report.with_cache->rank;
        rec["with_cache_smallest_retained"] = eval::smallest_retained(*report.with_cache, 8);
        std::cout << "rank with cache:    " << report.with_cache->rank << "\n";
    }
    if (!a.out.empty()) {
        io::atomic_write(a.out, rec.dump() + "\n");
        write_manifest(a.out + ".manifest.json",
                       {{"command", "rank-probe"},
                        {"config", {{"checkpoint", a.checkpoint}, {"n", a.n}, {"with_cache", a.with_cache}, {"split", a.split}}},
                        {"dataset_checksum", checksum(io::read_file(a.data))},
                        {"outputs", {{"report", a.out}}}});
    }
    return kOk;
}

// ---- gradcheck --------------------------------------------------------------

int cmd_gradcheck(const std::string& objective, gradcheck::Options opts, std::size_t points) {
    opts.objective = objectives::parse_objective(objective);
    double worst = 0.0;
    bool ok = true;
    for (std::size_t i = 0; i < points; ++i) {
        const auto r = gradcheck::check(opts);
        worst = std::max(worst, r.report.max_rel_error);
        const bool pass = r.report.max_rel_error < 1e-4;
        ok = ok && pass;
        std::cout << (pass ? "PASS" : "FAIL") << "  seed " << r.seed << "  max rel err " << std::scientific
                  << std::setprecision(3) << r.report.max_rel_error << "  (param " << r.report.worst_index
                  << ", analytic " << r.report.analytic << ", numeric " << r.report.numeric << ")\n";
        opts.seed = r.seed + 1;
    }
    std::cout << (ok ? "PASS" : "FAIL") << " " << objective << ": worst relative error " << std::scientific
              << std::setprecision(3) << worst << "\n";
    return ok ? kOk : kNumerical;
}

// ---- generate ---------------------------------------------------------------

struct GenerateArgs {
    std::string checkpoint;
    std::string vocab;
    std::string prompt;
    lm::GenerateOptions options;
};

int cmd_generate(const GenerateArgs& a) {
    const auto model = lm::load_model(a.checkpoint);
    const auto vocab = ambigen::Vocabulary::load(a.vocab.empty() ? sidecar(a.checkpoint, ".vocab") : fs::path(a.vocab));
    std::vector<std::string> words;
    std::istringstream in(a.prompt);
    for (std::string w; in >> w;) {
        words.push_back(w);
    }
    if (words.empty()) {
        throw std::invalid_argument("prompt is empty");
    }
    const auto continuation = lm::generate(model, vocab.encode(words), a.options);
    std::string text;
    for (const auto& w : vocab.decode(continuation)) {
        text += (text.empty() ? "" : " ") + w;
    }
    std::cout << text << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cache-LM lab: data generation, training, evaluation and probes"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "build an Ambiguous-template dataset");
    gen_cmd->add_option("--quadruples", gen.quadruples, "analogy file or synthetic:N")->required();
    gen_cmd->add_option("--templates", gen.templates, "template file (one per line)");
    gen_cmd->add_option("--out", gen.out, "dataset path")->required();
    gen_cmd->add_option("--seed", gen.seed);

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train a model from a key=value config");
    train_cmd->add_option("--config", tr.config, "config file");
    train_cmd->add_option("--set", tr.sets, "override any config key (key=value)");
    train_cmd->add_flag("--resume", tr.resume, "continue from <out_dir>/<name>.state when present");
    for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{
             {"--data", "data"},
             {"--init-checkpoint", "init_checkpoint"},
             {"--out-dir", "out_dir"},
             {"--name", "name"},
             {"--objective", "objective"},
             {"--alpha", "alpha"},
             {"--lambda", "lambda"},
             {"--lr", "learning_rate"},
             {"--warmup-ratio", "warmup_ratio"},
             {"--batch-size", "batch_size"},
             {"--epochs", "epochs"},
             {"--max-steps", "max_steps"},
             {"--loss-mask", "loss_mask"},
             {"--freeze-output-embeddings", "freeze_output_embeddings"},
             {"--seed", "seed"}}) {
        train_cmd->add_option_function<std::string>(flag, [&tr, key](const std::string& v) { tr.flags[key] = v; });
    }

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Acc@k of both gold words");
    eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
    eval_cmd->add_option("--data", ev.data)->required();
    eval_cmd->add_option("--vocab", ev.vocab, "defaults to the checkpoint's .vocab sidecar");
    eval_cmd->add_option("--mode", ev.mode)->check(CLI::IsMember({"full", "cache-only"}));
    eval_cmd->add_option("--k", ev.ks)->delimiter(',');
    eval_cmd->add_option("--split", ev.split)->check(CLI::IsMember({"train", "dev", "test", "all"}));
    eval_cmd->add_option("--out", ev.out, "JSONL report");

    ProbeArgs pr;
    auto* probe_cmd = app.add_subcommand("rank-probe", "numerical rank of the log-probability matrix");
    probe_cmd->add_option("--checkpoint", pr.checkpoint)->required();
    probe_cmd->add_option("--data", pr.data)->required();
    probe_cmd->add_option("--vocab", pr.vocab);
    probe_cmd->add_option("--n", pr.n);
    probe_cmd->add_option("--with-cache", pr.with_cache);
    probe_cmd->add_option("--split", pr.split)->check(CLI::IsMember({"train", "dev", "test", "all"}));
    probe_cmd->add_option("--rel-tol", pr.rel_tol);
    probe_cmd->add_option("--out", pr.out, "JSON report");

    std::string gc_objective = "xe";
    gradcheck::Options gc;
    std::size_t gc_points = 1;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of an objective's gradient");
    gc_cmd->add_option("--objective", gc_objective)->check(CLI::IsMember({"xe", "trime", "histalign"}));
    gc_cmd->add_option("--d", gc.hidden_size);
    gc_cmd->add_option("--v", gc.vocab_size);
    gc_cmd->add_option("--layers", gc.num_layers);
    gc_cmd->add_option("--heads", gc.num_heads);
    gc_cmd->add_option("--length", gc.length);
    gc_cmd->add_option("--seed", gc.seed);
    gc_cmd->add_option("--points", gc_points);
    gc_cmd->add_option("--eps", gc.eps);
    gc_cmd->add_option("--lambda", gc.lambda);

    GenerateArgs gn;
    auto* gen_text = app.add_subcommand("generate", "nucleus-sampled continuation");
    gen_text->add_option("--checkpoint", gn.checkpoint)->required();
    gen_text->add_option("--vocab", gn.vocab);
    gen_text->add_option("--prompt", gn.prompt)->required();
    gen_text->add_option("--p", gn.options.top_p);
    gen_text->add_option("--max-tokens", gn.options.max_tokens);
    gen_text->add_option("--use-cache", gn.options.use_cache);
    gen_text->add_option("--seed", gn.options.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kInput;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(gen);
        if (*train_cmd) return cmd_train(tr);
        if (*eval_cmd) return cmd_eval(ev);
        if (*probe_cmd) return cmd_rank_probe(pr);
        if (*gc_cmd) return cmd_gradcheck(gc_objective, gc, gc_points);
        if (*gen_text) return cmd_generate(gn);
    } catch (const train::TrainingDiverged& e) {
        std::cerr << "error: " << e.what() << " (step " << e.step() << ")\n";
        return kNumerical;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInput;
    }
    return kInput;
}
