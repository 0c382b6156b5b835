#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "histalign/model.hpp"
#include "histalign/trainer.hpp"

namespace histalign::config {

/// Ordered so that formatted snapshots are stable.
using KeyValues = std::map<std::string, std::string>;

/// Flat `key = value` lines; '#' starts a comment. Duplicate or malformed
/// lines raise std::invalid_argument naming the line.
KeyValues parse_key_values(std::istream& in);
KeyValues load_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& values);

/// Every key a training config may carry.
const std::vector<std::string>& known_keys();

struct RunConfig {
    std::filesystem::path data;
    std::filesystem::path init_checkpoint;  // start from these weights instead of a fresh init
    std::filesystem::path out_dir = ".";
    std::string name = "run";
    lm::ModelConfig model;  // vocab_size is filled in from the data
    train::TrainConfig train;
    bool log_wall_time = false;
};

/// Builds a run config from key/values, rejecting unknown keys.
RunConfig to_run_config(const KeyValues& values);

/// The only environment override: replaces out_dir when set and non-empty.
inline constexpr const char* kOutDirEnv = "HISTALIGN_OUT_DIR";
void apply_environment(RunConfig& config);

}  // namespace histalign::config
