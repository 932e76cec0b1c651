#include "mtm/config.hpp"

#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "json.hpp"

namespace mtm {
namespace {

using nlohmann::json;

constexpr int kDefaultResolution = 16;

// Reads one section, rejecting keys that no field claimed.
class Section {
 public:
  Section(const json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    node_ = &root.at(name);
    if (!node_->is_object()) throw ConfigError("'" + name + "' must be an object");
  }

  template <typename T>
  std::optional<T> get(const std::string& key) {
    seen_.insert(key);
    if (node_ == nullptr || !node_->contains(key)) return std::nullopt;
    const json& v = node_->at(key);
    try {
      if (kind_matches<T>(v)) return v.get<T>();
    } catch (const nlohmann::json::exception&) {
    }
    throw ConfigError(name_ + "." + key + " has the wrong type");
  }

  template <typename T>
  void read(const std::string& key, T& field) {
    if (auto v = get<T>(key)) field = *v;
  }

  void finish() const {
    if (node_ == nullptr) return;
    for (const auto& [key, value] : node_->items())
      if (!seen_.count(key)) throw ConfigError("unknown key '" + name_ + "." + key + "'");
  }

 private:
  template <typename T>
  static bool kind_matches(const json& v) {
    if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
    else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
    else if constexpr (std::is_floating_point_v<T>) return v.is_number();
    else if constexpr (std::is_unsigned_v<T>) return v.is_number_unsigned();
    else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
    else return true;
  }

  std::string name_;
  const json* node_ = nullptr;
  std::set<std::string> seen_;
};

// One shared value set from up to three places.
template <typename T>
T merge(const std::string& what, T fallback, std::initializer_list<std::optional<T>> values) {
  std::optional<T> chosen;
  for (const auto& v : values) {
    if (!v) continue;
    if (chosen && *chosen != *v) throw ConfigError("conflicting values for " + what);
    chosen = v;
  }
  return chosen.value_or(fallback);
}

void rethrow_as_config(const std::exception& e) { throw ConfigError(e.what()); }

}  // namespace

RunConfig::RunConfig() {
  generator.resolution = kDefaultResolution;
  data.resolution = kDefaultResolution;
}

void RunConfig::validate() const {
  try {
    generator.validate();
    train.validate();
    data.validate();
  } catch (const ContractError& e) {
    rethrow_as_config(e);
  }
  if (generator.resolution != data.resolution)
    throw ConfigError("generator.resolution and data.resolution differ");
  if (generator.video != train.video_mode || data.video != train.video_mode)
    throw ConfigError("video settings differ between sections");
  if (train.video_mode && (generator.frames != train.frames || data.frames != train.frames))
    throw ConfigError("frame counts differ between sections");
}

RunConfig parse_run_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : root.items())
    if (key != "generator" && key != "train" && key != "data" && key != "out_dir")
      throw ConfigError("unknown key '" + key + "'");

  RunConfig c;
  Section g(root, "generator"), t(root, "train"), d(root, "data");

  g.read("channels", c.generator.channels);
  g.read("z_dim", c.generator.z_dim);
  g.read("w_dim", c.generator.w_dim);
  g.read("m_dim", c.generator.m_dim);
  g.read("d_channels", c.generator.d_channels);
  if (auto groups = g.get<std::vector<std::string>>("mtm_groups")) {
    c.generator.mtm_groups = std::set<std::string>(groups->begin(), groups->end());
    if (c.generator.mtm_groups.size() != groups->size())
      throw ConfigError("generator.mtm_groups has duplicates");
  }

  t.read("batch", c.train.batch);
  t.read("steps", c.train.steps);
  t.read("lr", c.train.lr);
  t.read("beta1", c.train.beta1);
  t.read("beta2", c.train.beta2);
  t.read("eps", c.train.eps);
  t.read("r1_gamma", c.train.r1_gamma);
  t.read("r1_every", c.train.r1_every);
  t.read("ema_decay", c.train.ema_decay);
  t.read("seed", c.train.seed);
  t.read("eval_every", c.train.eval_every);
  t.read("eval_samples", c.train.eval_samples);
  t.read("temporal_pairs", c.train.temporal_pairs);

  d.read("seed", c.data.seed);
  d.read("n", c.data.n);
  d.read("held_out", c.data.held_out);

  const int res = merge<int>("resolution", kDefaultResolution,
                             {g.get<int>("resolution"), d.get<int>("resolution")});
  c.generator.resolution = c.data.resolution = res;
  const bool video = merge<bool>("video", false,
                                 {g.get<bool>("video"), t.get<bool>("video_mode"),
                                  d.get<bool>("video")});
  c.generator.video = c.train.video_mode = c.data.video = video;
  const int frames = merge<int>("frames", 4,
                                {g.get<int>("frames"), t.get<int>("frames"), d.get<int>("frames")});
  c.generator.frames = c.train.frames = c.data.frames = frames;

  if (root.contains("out_dir")) {
    if (!root.at("out_dir").is_string()) throw ConfigError("out_dir must be a string");
    c.out_dir = root.at("out_dir").get<std::string>();
  }
  g.finish();
  t.finish();
  d.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::ostringstream s;
  s << f.rdbuf();
  try {
    return parse_run_config(s.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace mtm
