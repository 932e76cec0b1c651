#pragma once

// Toy style-based generator and discriminator.
//
// Parameters live in a ParamStore keyed by name. Generator names start with
// "gen.", discriminator names with "d." (image) or "dt." (frame pairs). A
// modulated transformation module is the first conv of a block whose names
// include "<block>.conv0.offset.".
//
// Dense layers, affines, toRGB and discriminator layers draw N(0, 1) weights
// and are scaled by 1 / sqrt(fan_in) at run time. Main conv kernels are
// demodulated, so they use N(0, 1) without a gain.

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mtm/autodiff.hpp"
#include "mtm/rng.hpp"
#include "mtm/tensor.hpp"

namespace mtm {

using ParamStore = std::map<std::string, Tensor4>;
using VarMap = std::map<std::string, ad::Var>;

struct GeneratorConfig {
  int resolution = 32;  ///< final resolution, a power of two >= 4
  int channels = 64;
  int z_dim = 64;
  int w_dim = 64;
  int m_dim = 16;       ///< motion code size, used in video mode
  std::set<std::string> mtm_groups;  ///< subset of {low, mid, high}
  bool video = false;
  int frames = 4;
  int d_channels = 64;

  /// Throws ContractError on an invalid combination.
  void validate() const;
  std::vector<int> block_resolutions() const;
  /// low = {4, 8}, mid = {16}, high = {32}.
  static std::string group_of(int resolution);
  bool has_mtm(int resolution) const;
  /// Width of the latent fed to offset affines.
  int offset_style_dim() const { return video ? w_dim + m_dim : w_dim; }
};

/// Per-parameter initialisation is seeded by (seed, name), so adding or
/// removing modules leaves every other parameter unchanged.
ParamStore init_generator(const GeneratorConfig& cfg, std::uint64_t seed);
/// in_channels 1 for images ("d."), 2 for frame pairs ("dt.").
ParamStore init_discriminator(const GeneratorConfig& cfg, std::uint64_t seed,
                              const std::string& prefix = "d.", int in_channels = 1);

/// Recovers the generator shape from parameter names and shapes.
GeneratorConfig infer_generator_config(const ParamStore& store);

/// Names of MTM layers, e.g. "gen.b4.conv0".
std::vector<std::string> mtm_layer_names(const ParamStore& store);

std::size_t count_params(const ParamStore& store, const std::string& prefix = "gen.");
std::size_t count_offset_params(const ParamStore& store, const std::string& prefix = "gen.");

/// Every parameter with the given prefix as a leaf (or constant) on `tape`.
VarMap bind_params(ad::Tape& tape, const ParamStore& store, bool requires_grad,
            const std::string& prefix = "");

/// Two dense layers with leaky_relu: (n, z_dim, 1, 1) -> (n, w_dim, 1, 1).
ad::Var mapping(const ad::Var& z, const VarMap& p);

struct BlockOutput {
  ad::Var features;
  ad::Var offsets;  ///< invalid unless the block uses an MTM
};

/// upsample (skipped for the 4x4 block) -> conv0 (MTM when use_mtm) ->
/// leaky_relu -> conv1 -> leaky_relu. `offset_latent` feeds the offset affine.
BlockOutput synthesis_block(const ad::Var& feat, const ad::Var& w_latent,
                            const ad::Var& offset_latent, const VarMap& p, int resolution,
                            bool use_mtm, bool offsets_enabled = true);

struct GeneratorOutput {
  ad::Var image;  ///< (n, 1, R, R) in [-1, 1]
  std::vector<std::pair<std::string, ad::Var>> offsets;  ///< per MTM layer
};

struct GenerateOptions {
  bool offsets_enabled = true;
};

/// Image mode: offset affines see w. With `motion` (n, m_dim, 1, 1) valid they
/// see concat(w, motion) instead.
GeneratorOutput generate(const ad::Var& z, const ad::Var& motion, const VarMap& p,
                         const GeneratorConfig& cfg, GenerateOptions opt = {});

/// m_0 ~ N(0, 1), m_{t+1} = 0.9 m_t + 0.1 xi_t, for n clips, clip-major:
/// (n * T, m_dim, 1, 1). With `frozen` every code is zero.
Tensor4 motion_codes(std::uint64_t seed, int n, int frames, int m_dim, bool frozen = false);

/// Each of the n content codes repeated T times, clip-major.
Tensor4 repeat_frames(const Tensor4& z, int frames);

/// Frames (n * T, 1, R, R) for content codes (n, z_dim, 1, 1) and motion
/// codes (n * T, m_dim, 1, 1). Main styles depend on z only.
GeneratorOutput generate_video(const Tensor4& z_content, const Tensor4& motion,
                               ad::Tape& tape, const VarMap& p, const GeneratorConfig& cfg,
                               GenerateOptions opt = {});

/// conv 3x3 + leaky_relu per resolution with 2x2 mean pooling down to 4x4,
/// then a dense layer. Returns (n, 1, 1, 1) logits.
ad::Var discriminate(const ad::Var& image, const VarMap& p, const std::string& prefix = "d.");

/// Untaped convenience: EMA-style sampling with no gradients.
struct Samples {
  Tensor4 images;
  std::vector<std::pair<std::string, Tensor4>> offsets;
};
Samples sample_images(const ParamStore& gen, const GeneratorConfig& cfg, const Tensor4& z,
                      const Tensor4* motion = nullptr, GenerateOptions opt = {});

/// z ~ N(0, 1) of shape (n, z_dim, 1, 1).
Tensor4 sample_latents(std::uint64_t seed, int n, int z_dim);

// ---- checkpoint ----

/// "MTMCKPT1", u32 count, then per tensor: u16 name length, name, u8 ndim,
/// ndim x u64 dims, little-endian doubles.
void save_checkpoint(const ParamStore& store, const std::string& path);
ParamStore load_checkpoint(const std::string& path);
std::string serialize_checkpoint(const ParamStore& store);
ParamStore deserialize_checkpoint(const std::string& bytes);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mtm
