#pragma once

#include <string>
#include <utility>
#include <vector>

namespace posesynth {

// flat KEY=VALUE lines; '#' starts a comment, blank lines are ignored
std::vector<std::pair<std::string, std::string>> load_config(const std::string& path);

// strict numeric parsers for config values, naming the key on failure
double config_f64(const std::string& key, const std::string& value);
long long config_i64(const std::string& key, const std::string& value);

}  // namespace posesynth
