#include "mtm/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include "mtm/io.hpp"
#include "mtm/metrics.hpp"
#include "mtm/synth.hpp"

namespace mtm {
namespace {

constexpr std::uint64_t kBatchStream = 0x5851F42D4C957F2DULL;
constexpr std::uint64_t kEvalStream = 0x14057B7EF767814FULL;

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

std::map<std::string, Tensor4> collect(const VarMap& vars, const ad::GradientMap& g) {
  std::map<std::string, Tensor4> out;
  for (const auto& [name, v] : vars) out.emplace(name, g.value(v));
  return out;
}

std::vector<ad::Var> leaves_of(const VarMap& vars) {
  std::vector<ad::Var> out;
  out.reserve(vars.size());
  for (const auto& [name, v] : vars) out.push_back(v);
  return out;
}

// Consecutive-frame pairs (clip b, frames t and t + 1) stacked along channels.
std::pair<std::vector<int>, std::vector<int>> pair_index(int clips, int frames) {
  std::vector<int> a, b;
  for (int c = 0; c < clips; ++c)
    for (int t = 0; t + 1 < frames; ++t) {
      a.push_back(c * frames + t);
      b.push_back(c * frames + t + 1);
    }
  return {a, b};
}

ad::Var frame_pairs(const ad::Var& frames, int clips, int t) {
  const auto [a, b] = pair_index(clips, t);
  return ad::concat_channels(ad::gather_batch(frames, a), ad::gather_batch(frames, b));
}

Tensor4 frame_pairs(const Tensor4& frames, int clips, int t) {
  ad::Tape tape;
  return frame_pairs(tape.constant(frames), clips, t).value();
}

Tensor4 take(const Tensor4& src, const std::vector<int>& index) {
  ad::Tape tape;
  return ad::gather_batch(tape.constant(src), index).value();
}

double l2(const Tensor4& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

void TrainConfig::validate() const {
  require(batch >= 1, "train.batch must be >= 1");
  require(steps >= 0, "train.steps must be >= 0");
  require(lr > 0.0, "train.lr must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "train.beta1 must be in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "train.beta2 must be in [0, 1)");
  require(eps > 0.0, "train.eps must be > 0");
  require(r1_gamma >= 0.0, "train.r1_gamma must be >= 0");
  require(r1_every >= 1, "train.r1_every must be >= 1");
  require(ema_decay >= 0.0 && ema_decay <= 1.0, "train.ema_decay must be in [0, 1]");
  require(eval_every >= 1, "train.eval_every must be >= 1");
  require(eval_samples >= 32, "train.eval_samples must be >= 32");
  require(frames >= 1, "train.frames must be >= 1");
  require(!(video_mode && temporal_pairs && frames < 2),
          "train.temporal_pairs needs frames >= 2");
}

void DataConfig::validate() const {
  require(n >= 1, "data.n must be >= 1");
  require(resolution >= 4, "data.resolution must be >= 4");
  require(frames >= 1, "data.frames must be >= 1");
  require(held_out >= 32, "data.held_out must be >= 32");
}

ad::Var loss_g_nonsat(const ad::Var& fake_logits) {
  return ad::mean(ad::softplus(ad::scale(fake_logits, -1.0)));
}

ad::Var loss_d(const ad::Var& real_logits, const ad::Var& fake_logits) {
  return ad::add(ad::mean(ad::softplus(ad::scale(real_logits, -1.0))),
                 ad::mean(ad::softplus(fake_logits)));
}

ad::Var r1_penalty(const ad::Var& real, const ad::Var& logits, double gamma) {
  ad::Tape& tape = real.tape();
  const std::vector<ad::Var> leaves{real};
  const ad::GradientMap g = tape.backward(ad::sum(logits), leaves, true);
  const ad::Var& gx = g.at(real);
  if (!gx.value().all_finite()) throw NumericError("r1_penalty: non-finite input gradient");
  return ad::scale(ad::sum(ad::square(gx)), 0.5 * gamma / real.shape().n);
}

void adam_step(ParamStore& params, const std::map<std::string, Tensor4>& grads,
               AdamState& state, const TrainConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("adam_step: unknown parameter " + name);
    Tensor4& p = it->second;
    require_same_shape(p, g, ("adam_step " + name).c_str());
    Tensor4& m = state.m.try_emplace(name, Tensor4(p.shape())).first->second;
    Tensor4& v = state.v.try_emplace(name, Tensor4(p.shape())).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

void ema_update(ParamStore& ema, const ParamStore& current, double decay) {
  for (const auto& [name, p] : current) {
    auto it = ema.find(name);
    if (it == ema.end()) {
      ema.emplace(name, p);
      continue;
    }
    Tensor4& e = it->second;
    require_same_shape(e, p, ("ema_update " + name).c_str());
    for (std::size_t i = 0; i < p.size(); ++i) e[i] = decay * e[i] + (1.0 - decay) * p[i];
  }
}

TrainState init_train_state(const GeneratorConfig& gcfg, const TrainConfig& tcfg) {
  TrainState s;
  s.gen = init_generator(gcfg, tcfg.seed);
  s.disc = init_discriminator(gcfg, tcfg.seed, "d.", 1);
  if (tcfg.video_mode && tcfg.temporal_pairs) {
    ParamStore dt = init_discriminator(gcfg, tcfg.seed, "dt.", 2);
    s.disc.insert(dt.begin(), dt.end());
  }
  s.ema = s.gen;
  return s;
}

std::string metrics_header() {
  return "step,loss_g,loss_d,r1,rffd,offset_mean_abs,offset_max_abs";
}

std::string format_row(const MetricsRow& r) {
  return std::to_string(r.step) + "," + fmt(r.loss_g) + "," + fmt(r.loss_d) + "," + fmt(r.r1) +
         "," + fmt(r.rffd) + "," + fmt(r.offset_mean_abs) + "," + fmt(r.offset_max_abs);
}

Tensor4 training_reals(const DataConfig& d) {
  if (d.video) return sample_video_batch(d.n, d.seed, d.frames, d.resolution);
  return sample_dataset(d.n, d.seed, d.resolution).images;
}

Tensor4 held_out_reals(const DataConfig& d) {
  const std::uint64_t seed = d.seed + static_cast<std::uint64_t>(d.n);
  if (d.video) {
    const int clips = (d.held_out + d.frames - 1) / d.frames;
    return sample_video_batch(clips, seed, d.frames, d.resolution);
  }
  return sample_dataset(d.held_out, seed, d.resolution).images;
}

namespace {

struct StepLosses {
  double loss_g = 0.0;
  double loss_d = 0.0;
  double r1 = 0.0;
  Tensor4 fakes;
};

class Trainer {
 public:
  Trainer(const GeneratorConfig& g, const TrainConfig& t, const DataConfig& d,
          const TrainOptions& o)
      : gcfg_(g), tcfg_(t), dcfg_(d), opt_(o), rng_(t.seed ^ kBatchStream) {
    gcfg_.video = t.video_mode;
    gcfg_.frames = t.frames;
    gcfg_.validate();
    tcfg_.validate();
    dcfg_.validate();
    require(dcfg_.resolution == gcfg_.resolution,
            "data.resolution must equal generator.resolution");
    require(dcfg_.video == tcfg_.video_mode, "data.video must equal train.video_mode");
    require(!dcfg_.video || dcfg_.frames == tcfg_.frames, "data.frames must equal train.frames");
    state_ = init_train_state(gcfg_, tcfg_);
    reals_ = training_reals(dcfg_);
    held_ = held_out_reals(dcfg_);
    extractor_ = std::make_unique<FeatureExtractor>(gcfg_.resolution);
    held_stats_ = fit_gaussian(extractor_->extract(held_));
    const int frames = video() ? tcfg_.frames : 1;
    eval_units_ = (tcfg_.eval_samples + frames - 1) / frames;
    const std::uint64_t es = tcfg_.seed ^ kEvalStream;
    eval_z_ = sample_latents(es, eval_units_, gcfg_.z_dim);
    if (video()) eval_motion_ = motion_codes(es + 1, eval_units_, frames, gcfg_.m_dim);
  }

  void advance(int s) { step(s, true); }

  TrainResult run() {
    std::ofstream csv;
    if (!opt_.out_dir.empty()) {
      std::filesystem::create_directories(opt_.out_dir);
      csv.open(opt_.out_dir + "/metrics.csv", std::ios::binary);
      if (!csv) throw IoError("cannot write " + opt_.out_dir + "/metrics.csv");
      csv << metrics_header() << "\n";
    }
    TrainResult result;
    auto emit = [&](int step, const StepLosses& l) {
      MetricsRow row = evaluate(step, l);
      if (csv.is_open()) {
        csv << format_row(row) << "\n";
        csv.flush();
      }
      if (opt_.on_row) opt_.on_row(row);
      result.rows.push_back(row);
    };
    emit(0, step(0, false));
    for (int s = 1; s <= tcfg_.steps; ++s) {
      StepLosses l = step(s, true);
      if (s % tcfg_.eval_every == 0) emit(s, l);
    }
    if (!opt_.out_dir.empty()) {
      ParamStore all = state_.gen;
      all.insert(state_.disc.begin(), state_.disc.end());
      save_checkpoint(all, opt_.out_dir + "/checkpoint.ckpt");
      save_checkpoint(state_.ema, opt_.out_dir + "/checkpoint_ema.ckpt");
    }
    result.state = std::move(state_);
    return result;
  }

 private:
  bool video() const { return tcfg_.video_mode; }
  bool temporal() const { return video() && tcfg_.temporal_pairs; }
  int frames() const { return video() ? tcfg_.frames : 1; }

  // Latents for one batch: z (and motion codes in video mode).
  std::pair<Tensor4, Tensor4> draw_latents() {
    Tensor4 z = randn(Shape4{tcfg_.batch, gcfg_.z_dim, 1, 1}, rng_);
    Tensor4 m;
    if (video()) {
      m = motion_codes(rng_.next_u64(), tcfg_.batch, frames(), gcfg_.m_dim);
      z = repeat_frames(z, frames());
    }
    return {std::move(z), std::move(m)};
  }

  Tensor4 draw_reals() {
    std::vector<int> index;
    const int units = video() ? dcfg_.n : reals_.n();
    for (int b = 0; b < tcfg_.batch; ++b) {
      const int u = static_cast<int>(rng_.below(static_cast<std::uint64_t>(units)));
      for (int t = 0; t < frames(); ++t) index.push_back(u * frames() + t);
    }
    return take(reals_, index);
  }

  GeneratorOutput run_generator(ad::Tape& tape, const VarMap& gp,
                                const std::pair<Tensor4, Tensor4>& lat) {
    const ad::Var mv = video() ? tape.constant(lat.second) : ad::Var();
    return generate(tape.constant(lat.first), mv, gp, gcfg_);
  }

  StepLosses step(int s, bool update) {
    StepLosses out;
    const bool do_r1 = tcfg_.r1_gamma > 0.0 && (s <= 1 || (s - 1) % tcfg_.r1_every == 0);
    // Discriminator.
    {
      const auto lat = draw_latents();
      const Tensor4 real = draw_reals();
      ad::Tape tape;
      const VarMap dp = bind_params(tape, state_.disc, true);
      const VarMap gp = bind_params(tape, state_.gen, false, "gen.");
      const ad::Var fake = run_generator(tape, gp, lat).image;
      out.fakes = fake.value();
      const ad::Var xr = tape.leaf(real, true);
      const ad::Var lr = discriminate(xr, dp, "d.");
      ad::Var total = loss_d(lr, discriminate(fake, dp, "d."));
      ad::Var r1;
      if (do_r1) r1 = r1_penalty(xr, lr, tcfg_.r1_gamma);
      if (temporal()) {
        const ad::Var pr = tape.leaf(frame_pairs(real, tcfg_.batch, frames()), true);
        const ad::Var pf = frame_pairs(fake, tcfg_.batch, frames());
        const ad::Var lpr = discriminate(pr, dp, "dt.");
        total = ad::add(total, loss_d(lpr, discriminate(pf, dp, "dt.")));
        if (do_r1) r1 = ad::add(r1, r1_penalty(pr, lpr, tcfg_.r1_gamma));
      }
      out.loss_d = total.value().item();
      out.r1 = do_r1 ? r1.value().item() : 0.0;
      check(s, out);
      if (update) {
        if (do_r1) total = ad::add(total, r1);
        const std::vector<ad::Var> leaves = leaves_of(dp);
        const ad::GradientMap g = tape.backward(total, leaves);
        adam_step(state_.disc, collect(dp, g), state_.opt_d, tcfg_);
      }
    }
    // Generator.
    {
      const auto lat = draw_latents();
      ad::Tape tape;
      const VarMap gp = bind_params(tape, state_.gen, true, "gen.");
      const VarMap dp = bind_params(tape, state_.disc, false);
      const ad::Var fake = run_generator(tape, gp, lat).image;
      ad::Var total = loss_g_nonsat(discriminate(fake, dp, "d."));
      if (temporal()) {
        total = ad::add(total, loss_g_nonsat(discriminate(
                                   frame_pairs(fake, tcfg_.batch, frames()), dp, "dt.")));
      }
      out.loss_g = total.value().item();
      check(s, out);
      if (update) {
        const std::vector<ad::Var> leaves = leaves_of(gp);
        const ad::GradientMap g = tape.backward(total, leaves);
        adam_step(state_.gen, collect(gp, g), state_.opt_g, tcfg_);
        ema_update(state_.ema, state_.gen, tcfg_.ema_decay);
      }
    }
    return out;
  }

  MetricsRow evaluate(int s, const StepLosses& l) {
    MetricsRow row;
    row.step = s;
    row.loss_g = l.loss_g;
    row.loss_d = l.loss_d;
    row.r1 = l.r1;
    Tensor4 z = video() ? repeat_frames(eval_z_, frames()) : eval_z_;
    const Samples smp =
        sample_images(state_.ema, gcfg_, z, video() ? &eval_motion_ : nullptr);
    row.rffd = frechet_distance(fit_gaussian(extractor_->extract(smp.images)), held_stats_);
    if (!smp.offsets.empty()) {
      std::vector<Tensor4> fields;
      for (const auto& [name, f] : smp.offsets) fields.push_back(f);
      const OffsetStats st = offset_stats(fields);
      row.offset_mean_abs = st.mean_abs;
      row.offset_max_abs = st.max_abs;
    }
    if (!std::isfinite(row.rffd)) {
      StepLosses bad = l;
      dump(s, bad, "non-finite rffd");
    }
    if (!opt_.out_dir.empty() && opt_.write_samples) {
      char name[64];
      std::snprintf(name, sizeof name, "/samples_%06d.ppm", s);
      const int shown = std::min(smp.images.n(), video() ? 4 * frames() : 16);
      std::vector<int> idx(shown);
      for (int i = 0; i < shown; ++i) idx[i] = i;
      const int cols = video() ? frames() : 4;
      write_ppm(opt_.out_dir + name, make_grid(take(smp.images, idx), cols));
    }
    std::fprintf(stderr, "step %d loss_g %s loss_d %s r1 %s rffd %s offset_mean_abs %s\n", s,
                 fmt(row.loss_g).c_str(), fmt(row.loss_d).c_str(), fmt(row.r1).c_str(),
                 fmt(row.rffd).c_str(), fmt(row.offset_mean_abs).c_str());
    return row;
  }

  void check(int s, const StepLosses& l) {
    if (std::isfinite(l.loss_g) && std::isfinite(l.loss_d) && std::isfinite(l.r1)) return;
    dump(s, l, "non-finite loss");
  }

  [[noreturn]] void dump(int s, const StepLosses& l, const std::string& why) {
    if (!opt_.out_dir.empty()) {
      std::filesystem::create_directories(opt_.out_dir);
      std::ostringstream d;
      d << "reason," << why << "\nstep," << s << "\nloss_g," << fmt(l.loss_g) << "\nloss_d,"
        << fmt(l.loss_d) << "\nr1," << fmt(l.r1) << "\nparam,l2_norm\n";
      for (const auto& [name, t] : state_.gen) d << name << "," << fmt(l2(t)) << "\n";
      for (const auto& [name, t] : state_.disc) d << name << "," << fmt(l2(t)) << "\n";
      write_text(opt_.out_dir + "/nan_dump.txt", d.str());
      if (l.fakes.size() > 1) write_ppm(opt_.out_dir + "/last_batch.ppm", make_grid(l.fakes, 4));
    }
    throw NumericError(why + " at step " + std::to_string(s));
  }

  GeneratorConfig gcfg_;
  TrainConfig tcfg_;
  DataConfig dcfg_;
  TrainOptions opt_;
  Rng rng_;
  TrainState state_;
  Tensor4 reals_;
  Tensor4 held_;
  std::unique_ptr<FeatureExtractor> extractor_;
  GaussianStats held_stats_;
  int eval_units_ = 0;
  Tensor4 eval_z_;
  Tensor4 eval_motion_;
};

}  // namespace

TrainResult train(const GeneratorConfig& gcfg, const TrainConfig& tcfg, const DataConfig& dcfg,
                  const TrainOptions& opt) {
  Trainer t(gcfg, tcfg, dcfg, opt);
  return t.run();
}

double time_train_steps(const GeneratorConfig& gcfg, const TrainConfig& tcfg,
                        const DataConfig& dcfg, int warmup, int steps) {
  require(warmup >= 0 && steps >= 1, "time_train_steps: need at least one timed step");
  Trainer t(gcfg, tcfg, dcfg, {});
  for (int s = 1; s <= warmup; ++s) t.advance(s);
  const auto start = std::chrono::steady_clock::now();
  for (int s = warmup + 1; s <= warmup + steps; ++s) t.advance(s);
  const std::chrono::duration<double, std::milli> took = std::chrono::steady_clock::now() - start;
  return took.count() / steps;
}

}  // namespace mtm
