#include "posesynth/cli.hpp"

int main(int argc, char** argv) { return posesynth::run_cli(argc, argv); }
