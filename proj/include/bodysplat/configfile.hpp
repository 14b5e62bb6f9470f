#pragma once

#include "bodysplat/trainer.hpp"

namespace bodysplat {

// Plain key=value configuration ('#' comments, blank lines ignored).
// Unknown keys are schema errors; later assignments win.
void set_config_key(TrainConfig* cfg, const std::string& key, const std::string& value);
void apply_config_file(TrainConfig* cfg, const std::string& path);
TrainConfig load_train_config(const std::string& path);

// Writes every key with the config's current values, suitable as a starting
// point for edits.
void write_config_file(const std::string& path, const TrainConfig& cfg);

}  // namespace bodysplat
