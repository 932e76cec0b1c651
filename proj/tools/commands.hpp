#pragma once

// Subcommands of the mtm tool. Each returns a process exit code:
// 0 ok, 1 config, 2 numeric abort, 3 gradcheck failure, 4 checkpoint/layer.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mtm::cli {

enum Exit : int { kOk = 0, kConfig = 1, kNumeric = 2, kGradcheck = 3, kCheckpoint = 4 };

struct Args {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string scope = "ops";
  std::string layer;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> n;
};

int gen_data(const Args& a);
int train(const Args& a);
int sample(const Args& a);
/// `corrupt` names a gradcheck case whose gradient is perturbed (negative
/// control for tests).
int gradcheck(const Args& a, const std::string& corrupt = "");
int metrics(const Args& a);
int ablate_offsets(const Args& a);
int dump_offsets(const Args& a);
int bench(const Args& a);

/// Parses argv, runs the subcommand and maps errors to exit codes.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& argv);

}  // namespace mtm::cli
