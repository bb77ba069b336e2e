#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "posesynth/model.hpp"
#include "posesynth/pose_sampling.hpp"

namespace posesynth {

struct RunConfig {
  std::string subcommand;
  std::string scene_dir;     // --scene
  std::string out_path;      // --out, file or directory by subcommand
  std::string config_path;   // --config
  std::string model_path;    // --model, eval only
  std::string spec_name = "biased-street";  // generate --spec
  std::string experiment;    // experiment template name
  std::optional<uint64_t> seed;
  SamplePolicy policy = SamplePolicy::kOutOfDistribution;
  Arch arch = Arch::kTransformer;
  std::optional<int> epochs;
  int threads = 1;
};

// 0 success, 1 user error, 2 internal error
int run_cli(int argc, char** argv);

}  // namespace posesynth
