#ifndef PNFRL_CONFIG_HPP_
#define PNFRL_CONFIG_HPP_

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include "pnfrl/trainer.hpp"

namespace pnfrl {

// Config files are "key = value" lines; '#' starts a comment. Keys are the
// TrainCfg / ComboCfg / PnfCfg / EnsembleCfg field names (H, n_start, f_aug,
// beta, delta_max, ...). Unknown keys are an error.
void apply_config_value(TrainCfg& cfg, std::string_view key,
                        std::string_view value);
TrainCfg parse_config(std::istream& is, TrainCfg base = {});
TrainCfg load_config(const std::filesystem::path& path, TrainCfg base = {});
// every key, current values, in file syntax
std::string dump_config(const TrainCfg& cfg);

}  // namespace pnfrl

#endif  // PNFRL_CONFIG_HPP_
