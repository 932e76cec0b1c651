#pragma once

// Adversarial training: non-saturating logistic loss, R1, Adam, EMA.

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "mtm/autodiff.hpp"
#include "mtm/stylegen.hpp"
#include "mtm/tensor.hpp"

namespace mtm {

struct TrainConfig {
  int batch = 16;  ///< images, or clips in video mode
  int steps = 0;
  double lr = 2.5e-3;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double eps = 1e-8;
  double r1_gamma = 1.0;
  int r1_every = 1;
  double ema_decay = 0.995;
  std::uint64_t seed = 0;
  int eval_every = 100;
  int eval_samples = 512;
  bool video_mode = false;
  int frames = 4;
  bool temporal_pairs = true;

  void validate() const;
};

struct DataConfig {
  std::uint64_t seed = 1000;
  int n = 2048;          ///< training images (clips in video mode)
  int resolution = 16;
  bool video = false;
  int frames = 4;
  int held_out = 512;    ///< real images (frames) used for evaluation

  void validate() const;
};

// ---- losses ----

/// mean softplus(-logit)
ad::Var loss_g_nonsat(const ad::Var& fake_logits);
/// mean softplus(-real) + mean softplus(fake)
ad::Var loss_d(const ad::Var& real_logits, const ad::Var& fake_logits);
/// (gamma / 2) mean over the batch of sum over pixels of (dD/dx)^2. `real`
/// must be a gradient-requiring leaf and `logits` computed from it. The
/// result is differentiable with respect to the discriminator parameters.
ad::Var r1_penalty(const ad::Var& real, const ad::Var& logits, double gamma);

// ---- optimizer ----

struct AdamState {
  std::map<std::string, Tensor4> m;
  std::map<std::string, Tensor4> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update over `grads`, iterating names in sorted
/// order. Parameters absent from `grads` are untouched.
void adam_step(ParamStore& params, const std::map<std::string, Tensor4>& grads,
               AdamState& state, const TrainConfig& cfg);

/// ema = decay * ema + (1 - decay) * current, for every name in `current`.
void ema_update(ParamStore& ema, const ParamStore& current, double decay);

// ---- loop ----

struct TrainState {
  ParamStore gen;
  ParamStore disc;  ///< "d." and, in video mode, "dt." parameters
  ParamStore ema;
  AdamState opt_g;
  AdamState opt_d;
};

TrainState init_train_state(const GeneratorConfig& gcfg, const TrainConfig& tcfg);

struct MetricsRow {
  int step = 0;
  double loss_g = 0.0;
  double loss_d = 0.0;
  double r1 = 0.0;
  double rffd = 0.0;
  double offset_mean_abs = 0.0;
  double offset_max_abs = 0.0;
};

std::string metrics_header();
std::string format_row(const MetricsRow& r);

struct TrainOptions {
  std::string out_dir;       ///< empty: nothing is written
  bool write_samples = true; ///< sample grid per evaluation row
  /// Called after every evaluation row.
  std::function<void(const MetricsRow&)> on_row;
};

struct TrainResult {
  TrainState state;
  std::vector<MetricsRow> rows;
};

/// Runs the whole schedule. Rows are written at steps 0, E, 2E, ... The
/// step-0 row evaluates losses on one batch without updating. A non-finite
/// loss writes nan_dump.txt (and last_batch.ppm) to out_dir and throws
/// NumericError.
TrainResult train(const GeneratorConfig& gcfg, const TrainConfig& tcfg, const DataConfig& dcfg,
                  const TrainOptions& opt);

/// Mean wall-clock milliseconds per training step (D step, G step, EMA) over
/// `steps` steps that follow `warmup` untimed ones.
double time_train_steps(const GeneratorConfig& gcfg, const TrainConfig& tcfg,
                        const DataConfig& dcfg, int warmup, int steps);

/// Training reals: images of sample_dataset(n, seed) or frames of n clips.
Tensor4 training_reals(const DataConfig& d);
/// Held-out reals: the next `held_out` images after the training range
/// (seeds seed + n, ...), or frames of held_out / frames clips.
Tensor4 held_out_reals(const DataConfig& d);

}  // namespace mtm
