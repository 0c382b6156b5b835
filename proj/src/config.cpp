#include "histalign/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace histalign::config {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    T value{};
    in >> value;
    if (in.fail() || !in.eof()) {
        throw std::invalid_argument("config key '" + key + "': cannot parse '" + text + "'");
    }
    if constexpr (std::is_unsigned_v<T>) {
        if (text.find('-') != std::string::npos) {
            throw std::invalid_argument("config key '" + key + "' must be non-negative");
        }
    }
    return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw std::invalid_argument("config key '" + key + "': expected true or false, got '" + text + "'");
}

}  // namespace

KeyValues parse_key_values(std::istream& in) {
    KeyValues values;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        const std::string body = trim(std::string_view(line).substr(0, hash));
        if (body.empty()) {
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(number) + ": expected key = value");
        }
        std::string key = trim(std::string_view(body).substr(0, eq));
        std::string value = trim(std::string_view(body).substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(number) + ": empty key");
        }
        if (!values.emplace(key, value).second) {
            throw std::invalid_argument("config line " + std::to_string(number) + ": duplicate key '" + key + "'");
        }
    }
    return values;
}

KeyValues load_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("cannot open config " + path.string());
    }
    return parse_key_values(in);
}

std::string format_key_values(const KeyValues& values) {
    std::string out;
    for (const auto& [k, v] : values) {
        out += k + " = " + v + "\n";
    }
    return out;
}

const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        "data",          "init_checkpoint", "out_dir",        "name",          "objective",    "alpha",
        "lambda",        "learning_rate",  "warmup_ratio",  "batch_size",   "max_steps",
        "epochs",        "loss_mask",      "freeze_output_embeddings",      "seed",
        "weight_decay",  "clip_norm",      "eval_every",    "eval_ks",      "stop_after_step",
        "hidden_size",   "num_layers",     "num_heads",     "context_length", "log_wall_time"};
    return keys;
}

RunConfig to_run_config(const KeyValues& values) {
    const auto& keys = known_keys();
    for (const auto& [k, v] : values) {
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
            throw std::invalid_argument("unknown config key '" + k + "'");
        }
    }
    auto get = [&](const std::string& key) -> const std::string* {
        const auto it = values.find(key);
        return it == values.end() ? nullptr : &it->second;
    };

    RunConfig rc;
    rc.model.hidden_size = 16;
    rc.model.num_layers = 2;
    rc.model.num_heads = 2;
    rc.model.context_length = 32;
    auto& tc = rc.train;

    if (auto* v = get("data")) rc.data = *v;
    if (auto* v = get("init_checkpoint")) rc.init_checkpoint = *v;
    if (auto* v = get("out_dir")) rc.out_dir = *v;
    if (auto* v = get("name")) rc.name = *v;
    if (rc.name.empty() || rc.name.find('/') != std::string::npos) {
        throw std::invalid_argument("config key 'name' must be a plain file stem");
    }
    if (auto* v = get("objective")) tc.objective = objectives::parse_objective(*v);
    if (auto* v = get("alpha")) tc.alpha = parse_number<double>("alpha", *v);
    if (auto* v = get("lambda")) tc.lambda = parse_number<double>("lambda", *v);
    if (auto* v = get("learning_rate")) tc.learning_rate = parse_number<double>("learning_rate", *v);
    if (auto* v = get("warmup_ratio")) tc.warmup_ratio = parse_number<double>("warmup_ratio", *v);
    if (auto* v = get("batch_size")) tc.batch_size = parse_number<std::size_t>("batch_size", *v);
    if (auto* v = get("max_steps")) tc.max_steps = parse_number<std::size_t>("max_steps", *v);
    if (auto* v = get("epochs")) tc.epochs = parse_number<std::size_t>("epochs", *v);
    if (auto* v = get("loss_mask")) tc.loss_mask = train::parse_loss_mask(*v);
    if (auto* v = get("freeze_output_embeddings")) tc.freeze_output_embeddings = parse_bool("freeze_output_embeddings", *v);
    if (auto* v = get("seed")) tc.seed = parse_number<std::uint64_t>("seed", *v);
    if (auto* v = get("weight_decay")) tc.weight_decay = parse_number<double>("weight_decay", *v);
    if (auto* v = get("clip_norm")) tc.clip_norm = parse_number<double>("clip_norm", *v);
    if (auto* v = get("eval_every")) tc.eval_every = parse_number<std::size_t>("eval_every", *v);
    if (auto* v = get("stop_after_step")) tc.stop_after_step = parse_number<std::size_t>("stop_after_step", *v);
    if (auto* v = get("eval_ks")) {
        tc.eval_ks.clear();
        std::istringstream in(*v);
        std::string item;
        while (std::getline(in, item, ',')) {
            tc.eval_ks.push_back(parse_number<std::size_t>("eval_ks", trim(item)));
        }
    }
    if (auto* v = get("hidden_size")) rc.model.hidden_size = parse_number<std::uint32_t>("hidden_size", *v);
    if (auto* v = get("num_layers")) rc.model.num_layers = parse_number<std::uint32_t>("num_layers", *v);
    if (auto* v = get("num_heads")) rc.model.num_heads = parse_number<std::uint32_t>("num_heads", *v);
    if (auto* v = get("context_length")) rc.model.context_length = parse_number<std::uint32_t>("context_length", *v);
    if (auto* v = get("log_wall_time")) rc.log_wall_time = parse_bool("log_wall_time", *v);
    rc.model.seed = tc.seed;

    if (!tc.max_steps && !tc.epochs) {
        tc.epochs = 1;
    }
    tc.validate();
    return rc;
}

void apply_environment(RunConfig& config) {
    if (const char* dir = std::getenv(kOutDirEnv); dir != nullptr && *dir != '\0') {
        config.out_dir = dir;
    }
}

}  // namespace histalign::config
