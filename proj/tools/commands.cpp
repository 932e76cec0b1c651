#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mtm/config.hpp"
#include "mtm/gradcheck.hpp"
#include "mtm/io.hpp"
#include "mtm/metrics.hpp"
#include "mtm/stylegen.hpp"
#include "mtm/synth.hpp"
#include "mtm/train.hpp"

namespace mtm::cli {
namespace {

class LayerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig config_of(const Args& a) {
  return a.config.empty() ? RunConfig{} : load_run_config(a.config);
}

std::string out_dir(const Args& a, const RunConfig& c) {
  const std::string d = a.out.empty() ? c.out_dir : a.out;
  if (d.empty()) throw ConfigError("an output directory is required (--out or out_dir)");
  std::filesystem::create_directories(d);
  return d;
}

std::string path_in(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

struct Generator {
  ParamStore params;
  GeneratorConfig cfg;
};

Generator load_generator(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  Generator g;
  for (auto& [name, t] : load_checkpoint(path))
    if (name.rfind("gen.", 0) == 0) g.params.emplace(name, std::move(t));
  g.cfg = infer_generator_config(g.params);
  return g;
}

// Latents for n images: z, and for video generators one motion code each.
Samples draw_samples(const Generator& g, int n, std::uint64_t seed, GenerateOptions opt = {}) {
  const Tensor4 z = sample_latents(seed, n, g.cfg.z_dim);
  if (!g.cfg.video) return sample_images(g.params, g.cfg, z, nullptr, opt);
  const Tensor4 m = motion_codes(seed ^ 0x9E3779B97F4A7C15ULL, n, 1, g.cfg.m_dim);
  return sample_images(g.params, g.cfg, z, &m, opt);
}

// Held-out reals at the generator's resolution, image mode.
Tensor4 reference_reals(const Args& a, int resolution) {
  DataConfig d = a.config.empty() ? DataConfig{} : load_run_config(a.config).data;
  if (!a.config.empty() && d.resolution != resolution)
    throw ConfigError("data.resolution does not match the checkpoint");
  d.resolution = resolution;
  d.video = false;
  return held_out_reals(d);
}

Tensor4 first(const Tensor4& t, int count) {
  count = std::min(count, t.n());
  Tensor4 out(Shape4{count, t.c(), t.h(), t.w()});
  std::copy_n(t.ptr(), out.size(), out.ptr());
  return out;
}

int sample_count(const Args& a, int fallback, int minimum) {
  const int n = a.n ? static_cast<int>(*a.n) : fallback;
  if (n < minimum) throw ConfigError("--n must be at least " + std::to_string(minimum));
  return n;
}

std::string group_label(const std::set<std::string>& g) {
  if (g.empty()) return "none";
  std::string s;
  for (const char* name : {"low", "mid", "high"})
    if (g.count(name)) s += (s.empty() ? "" : "+") + std::string(name);
  return s;
}

}  // namespace

int gen_data(const Args& a) {
  const RunConfig c = config_of(a);
  const std::string dir = out_dir(a, c);
  const int n = sample_count(a, c.data.n, 1);
  const std::uint64_t seed = a.seed.value_or(c.data.seed);
  const int res = c.data.resolution;
  std::ostringstream csv;
  char name[64];
  auto pose_fields = [](const PoseParams& p) {
    return fmt(p.cy) + "," + fmt(p.cx) + "," + fmt(p.theta0) + "," + fmt(p.theta1) + "," +
           fmt(p.length) + "," + fmt(p.radius);
  };
  if (c.data.video) {
    csv << "clip,frame,cy,cx,theta0,theta1,length,radius\n";
    const int frames = c.data.frames;
    Tensor4 all(Shape4{n * frames, 1, res, res});
    for (int i = 0; i < n; ++i) {
      const Clip clip = sample_video(seed + static_cast<std::uint64_t>(i), frames, res);
      for (int t = 0; t < frames; ++t) {
        std::snprintf(name, sizeof name, "clip_%06d_f%02d.ppm", i, t);
        write_ppm(path_in(dir, name), clip.frames, t);
        csv << i << "," << t << "," << pose_fields(clip.poses[t]) << "\n";
      }
      std::copy_n(clip.frames.ptr(), clip.frames.size(), all.plane(i * frames, 0));
    }
    write_ppm(path_in(dir, "grid.ppm"), make_grid(first(all, 8 * frames), frames));
  } else {
    csv << "index,cy,cx,theta0,theta1,length,radius\n";
    const Dataset d = sample_dataset(n, seed, res);
    for (int i = 0; i < n; ++i) {
      std::snprintf(name, sizeof name, "img_%06d.ppm", i);
      write_ppm(path_in(dir, name), d.images, i);
      csv << i << "," << pose_fields(d.poses[i]) << "\n";
    }
    write_ppm(path_in(dir, "grid.ppm"), make_grid(first(d.images, 64), 8));
  }
  write_text(path_in(dir, "poses.csv"), csv.str());
  return kOk;
}

int train(const Args& a) {
  RunConfig c = config_of(a);
  if (a.seed) c.train.seed = *a.seed;
  TrainOptions o;
  o.out_dir = out_dir(a, c);
  mtm::train(c.generator, c.train, c.data, o);
  return kOk;
}

int sample(const Args& a) {
  const Generator g = load_generator(a.checkpoint);
  const std::string dir = out_dir(a, RunConfig{});
  const int n = sample_count(a, 16, 1);
  const std::uint64_t seed = a.seed.value_or(0);
  Tensor4 images;
  int cols = std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n)))));
  if (g.cfg.video) {
    const int frames = a.config.empty() ? g.cfg.frames : load_run_config(a.config).train.frames;
    const Tensor4 z = repeat_frames(sample_latents(seed, n, g.cfg.z_dim), frames);
    const Tensor4 m = motion_codes(seed ^ 0x9E3779B97F4A7C15ULL, n, frames, g.cfg.m_dim);
    images = sample_images(g.params, g.cfg, z, &m).images;
    cols = frames;
  } else {
    images = draw_samples(g, n, seed).images;
  }
  char name[64];
  for (int i = 0; i < images.n(); ++i) {
    std::snprintf(name, sizeof name, "sample_%04d.ppm", i);
    write_ppm(path_in(dir, name), images, i);
  }
  write_ppm(path_in(dir, "samples.ppm"), make_grid(images, cols));
  return kOk;
}

int gradcheck(const Args& a, const std::string& corrupt) {
  GradcheckOptions o;
  o.seed = a.seed.value_or(0);
  o.corrupt = corrupt;
  const std::vector<GradcheckRow> rows = run_gradcheck(parse_scope(a.scope), o);
  const std::string csv = gradcheck_csv(rows);
  std::cout << csv;
  if (!a.out.empty()) {
    std::filesystem::create_directories(a.out);
    write_text(path_in(a.out, "gradcheck.csv"), csv);
  }
  if (gradcheck_passed(rows)) return kOk;
  for (const GradcheckRow& r : rows)
    if (!(r.max_rel_err < kGradcheckTolerance))
      std::cerr << "gradcheck failed: " << r.op << " max_rel_err " << fmt(r.max_rel_err) << "\n";
  return kGradcheck;
}

int metrics(const Args& a) {
  const int n = sample_count(a, 512, 32);
  std::string set_a;
  Tensor4 images;
  int res;
  if (!a.checkpoint.empty()) {
    const Generator g = load_generator(a.checkpoint);
    images = draw_samples(g, n, a.seed.value_or(0)).images;
    set_a = a.checkpoint;
    res = g.cfg.resolution;
  } else {
    const RunConfig c = config_of(a);
    DataConfig d = c.data;
    d.video = false;
    d.n = n;
    images = training_reals(d);
    set_a = "train";
    res = d.resolution;
  }
  const Tensor4 held = reference_reals(a, res);
  std::cout << set_a << ",held_out," << images.n() << "," << held.n() << ","
            << fmt(rffd(images, held)) << "\n";
  return kOk;
}

int ablate_offsets(const Args& a) {
  const Generator g = load_generator(a.checkpoint);
  if (mtm_layer_names(g.params).empty())
    throw LayerError(a.checkpoint + " has no modulated transformation layers");
  const int n = sample_count(a, 512, 32);
  const std::string dir = out_dir(a, RunConfig{});
  const std::uint64_t seed = a.seed.value_or(0);
  const Tensor4 trained = draw_samples(g, n, seed).images;
  const Tensor4 zeroed = draw_samples(g, n, seed, {.offsets_enabled = false}).images;
  const Tensor4 held = reference_reals(a, g.cfg.resolution);
  const FeatureExtractor fx(g.cfg.resolution);
  const std::string csv = "rffd_trained,rffd_zeroed,l2_trained,l2_zeroed\n" +
                          fmt(rffd(trained, held, fx)) + "," + fmt(rffd(zeroed, held, fx)) +
                          "," + fmt(mean_pairwise_l2(trained)) + "," +
                          fmt(mean_pairwise_l2(zeroed)) + "\n";
  std::cout << csv;
  write_text(path_in(dir, "ablation.csv"), csv);
  write_ppm(path_in(dir, "samples_trained.ppm"), make_grid(first(trained, 16), 4));
  write_ppm(path_in(dir, "samples_zeroed.ppm"), make_grid(first(zeroed, 16), 4));
  return kOk;
}

int dump_offsets(const Args& a) {
  const Generator g = load_generator(a.checkpoint);
  const std::vector<std::string> layers = mtm_layer_names(g.params);
  if (layers.empty()) throw LayerError(a.checkpoint + " has no modulated transformation layers");
  const std::string layer = a.layer.empty() ? layers.front() : a.layer;
  if (std::find(layers.begin(), layers.end(), layer) == layers.end()) {
    std::string known;
    for (const auto& l : layers) known += " " + l;
    throw LayerError("unknown layer '" + layer + "'; MTM layers:" + known);
  }
  const std::string dir = out_dir(a, RunConfig{});
  const Samples s = draw_samples(g, 1, a.seed.value_or(0));
  const Tensor4* field = nullptr;
  for (const auto& [name, f] : s.offsets)
    if (name == layer) field = &f;
  const int taps = field->c() / 2, h = field->h(), w = field->w();
  std::ostringstream csv;
  csv << "batch,tap,y,x,dy,dx\n";
  Tensor4 mag(Shape4{taps, 1, h, w});
  double peak = 0.0;
  for (int t = 0; t < taps; ++t)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double dy = field->at(0, 2 * t, y, x), dx = field->at(0, 2 * t + 1, y, x);
        csv << 0 << "," << t << "," << y << "," << x << "," << fmt(dy) << "," << fmt(dx) << "\n";
        mag.at(t, 0, y, x) = std::sqrt(dy * dy + dx * dx);
        peak = std::max(peak, mag.at(t, 0, y, x));
      }
  // magnitude mapped to [-1, 1] with the largest magnitude over all taps white
  for (double& v : mag.data()) v = peak > 0.0 ? 2.0 * v / peak - 1.0 : -1.0;
  write_text(path_in(dir, "offsets.csv"), csv.str());
  char name[64];
  for (int t = 0; t < taps; ++t) {
    std::snprintf(name, sizeof name, "offsets_tap%d.ppm", t);
    write_ppm(path_in(dir, name), mag, t);
  }
  const int k = static_cast<int>(std::lround(std::sqrt(taps)));
  write_ppm(path_in(dir, "offsets_taps.ppm"), make_grid(mag, k));
  return kOk;
}

int bench(const Args& a) {
  constexpr int kWarmup = 10, kTimed = 50;
  RunConfig c = config_of(a);
  if (a.seed) c.train.seed = *a.seed;
  const std::vector<std::set<std::string>> settings{
      {}, {"low"}, {"low", "mid"}, {"low", "mid", "high"}};
  std::string csv = "groups,ms_per_step,param_count\n";
  std::cout << csv << std::flush;
  for (const auto& groups : settings) {
    GeneratorConfig g = c.generator;
    g.mtm_groups = groups;
    const std::size_t params = count_params(init_generator(g, c.train.seed));
    const double ms = time_train_steps(g, c.train, c.data, kWarmup, kTimed);
    const std::string line = group_label(groups) + "," + fmt(ms) + "," + std::to_string(params) + "\n";
    std::cout << line << std::flush;
    csv += line;
  }
  if (!a.out.empty()) {
    std::filesystem::create_directories(a.out);
    write_text(path_in(a.out, "bench.csv"), csv);
  }
  return kOk;
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Modulated transformation module toolkit"};
  app.require_subcommand(1);
  Args args;
  std::uint64_t seed = 0;
  std::uint32_t n = 0;
  struct Command {
    const char* name;
    const char* help;
    int (*fn)(const Args&);
  };
  const std::vector<Command> commands{
      {"gen-data", "render the synthetic dataset (PPM + poses.csv)", gen_data},
      {"train", "train a generator", train},
      {"sample", "sample images from a checkpoint", sample},
      {"gradcheck", "finite-difference gradient suite", [](const Args& x) { return gradcheck(x); }},
      {"metrics", "RFFD against held-out reals", metrics},
      {"ablate-offsets", "compare trained and zeroed offsets", ablate_offsets},
      {"dump-offsets", "write one layer's offsets as CSV and heat maps", dump_offsets},
      {"bench", "time training steps per MTM placement", bench},
  };
  std::vector<std::pair<CLI::App*, CLI::Option*>> seed_opts, n_opts;
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", args.config, "run configuration (JSON)");
    seed_opts.emplace_back(sub, sub->add_option("--seed", seed, "random seed"));
    sub->add_option("--out", args.out, "output directory");
    sub->add_option("--checkpoint", args.checkpoint, "checkpoint file");
    n_opts.emplace_back(sub, sub->add_option("--n", n, "number of samples"));
    sub->add_option("--scope", args.scope, "gradcheck scope")
        ->check(CLI::IsMember({"ops", "block", "full"}));
    sub->add_option("--layer", args.layer, "MTM layer name, e.g. gen.b4.conv0");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  for (const auto& [sub, opt] : seed_opts)
    if (sub->parsed() && opt->count()) args.seed = seed;
  for (const auto& [sub, opt] : n_opts)
    if (sub->parsed() && opt->count()) args.n = n;

  for (const Command& c : commands) {
    if (!app.got_subcommand(c.name)) continue;
    try {
      return c.fn(args);
    } catch (const CheckpointError& e) {
      std::cerr << "checkpoint error: " << e.what() << "\n";
      return kCheckpoint;
    } catch (const LayerError& e) {
      std::cerr << "layer error: " << e.what() << "\n";
      return kCheckpoint;
    } catch (const NumericError& e) {
      std::cerr << "numeric abort: " << e.what() << "\n";
      return kNumeric;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kConfig;
    }
  }
  return kConfig;
}

int run(const std::vector<std::string>& argv) {
  std::vector<const char*> ptrs;
  for (const auto& s : argv) ptrs.push_back(s.c_str());
  return run(static_cast<int>(ptrs.size()), ptrs.data());
}

}  // namespace mtm::cli
