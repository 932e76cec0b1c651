#pragma once

// Finite-difference gradient suite over the differentiable operators.

#include <cstdint>
#include <string>
#include <vector>

namespace mtm {

enum class GradcheckScope { kOps, kBlock, kFull };

/// "ops", "block" or "full"; throws ContractError otherwise.
GradcheckScope parse_scope(const std::string& s);

struct GradcheckRow {
  std::string op;
  double max_rel_err = 0.0;
  double kink_margin = 0.0;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double eps = 1e-5;
  /// Draws whose nearest kink (leaky_relu at 0, bilinear lattice) is closer
  /// than this are redrawn.
  double min_kink_margin = 2e-4;
  /// Name of a case whose taped gradient is deliberately perturbed, for
  /// negative controls. Empty: none.
  std::string corrupt;
};

constexpr double kGradcheckTolerance = 1e-4;

/// ops: conv2d, modulate_demodulate, bilinear_sample, deform_conv2d,
/// predict_offsets, mtm_forward. block adds mapping and synthesis_block.
/// full adds discriminate and generate. Each case is seeded by (seed, name),
/// so its row does not depend on the scope.
std::vector<GradcheckRow> run_gradcheck(GradcheckScope scope, const GradcheckOptions& opt);

/// "op_name,max_rel_err" header and rows.
std::string gradcheck_csv(const std::vector<GradcheckRow>& rows);

bool gradcheck_passed(const std::vector<GradcheckRow>& rows);

}  // namespace mtm
