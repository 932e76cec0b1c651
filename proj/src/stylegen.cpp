#include "mtm/stylegen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mtm/conv.hpp"
#include "mtm/deform.hpp"

namespace mtm {
namespace {

constexpr int kKernel = 3;
constexpr double kSlope = 0.2;

Tensor4 init_randn(const std::string& name, Shape4 s, std::uint64_t seed) {
  Rng rng(seed ^ fnv1a(name));
  return randn(s, rng);
}

std::string block(int r) { return "gen.b" + std::to_string(r); }

const ad::Var& need(const VarMap& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw CheckpointError("missing parameter " + name);
  return it->second;
}

double gain(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

/// Equalized dense layer on (n, in, 1, 1).
ad::Var dense(const ad::Var& x, const VarMap& p, const std::string& name) {
  const ad::Var& w = need(p, name + ".weight");
  const ad::Var y = ad::scale(ad::linear(x, w), gain(w.shape().c));
  return ad::bias_add(y, need(p, name + ".bias"));
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

void GeneratorConfig::validate() const {
  if (resolution < 4 || !is_power_of_two(resolution)) {
    throw ContractError("generator.resolution must be a power of two >= 4, got " +
                        std::to_string(resolution));
  }
  if (channels < 1 || z_dim < 1 || w_dim < 1 || m_dim < 1 || d_channels < 1) {
    throw ContractError("generator sizes must be positive");
  }
  if (frames < 1) throw ContractError("generator.frames must be >= 1");
  for (const std::string& g : mtm_groups) {
    if (g != "low" && g != "mid" && g != "high") {
      throw ContractError("unknown mtm group '" + g + "' (expected low, mid or high)");
    }
  }
}

std::vector<int> GeneratorConfig::block_resolutions() const {
  std::vector<int> r;
  for (int v = 4; v <= resolution; v *= 2) r.push_back(v);
  return r;
}

std::string GeneratorConfig::group_of(int resolution) {
  if (resolution <= 8) return "low";
  if (resolution == 16) return "mid";
  return "high";
}

bool GeneratorConfig::has_mtm(int resolution) const {
  return mtm_groups.count(group_of(resolution)) > 0;
}

ParamStore init_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore s;
  const int c = cfg.channels;
  auto put = [&](const std::string& name, Tensor4 t) { s.emplace(name, std::move(t)); };
  put("gen.mapping.fc0.weight", init_randn("gen.mapping.fc0.weight",
                                           Shape4{cfg.w_dim, cfg.z_dim, 1, 1}, seed));
  put("gen.mapping.fc0.bias", Tensor4(Shape4{1, cfg.w_dim, 1, 1}));
  put("gen.mapping.fc1.weight", init_randn("gen.mapping.fc1.weight",
                                           Shape4{cfg.w_dim, cfg.w_dim, 1, 1}, seed));
  put("gen.mapping.fc1.bias", Tensor4(Shape4{1, cfg.w_dim, 1, 1}));
  put("gen.const", init_randn("gen.const", Shape4{1, c, 4, 4}, seed));
  for (int r : cfg.block_resolutions()) {
    for (int i = 0; i < 2; ++i) {
      const std::string n = block(r) + ".conv" + std::to_string(i);
      put(n + ".weight", init_randn(n + ".weight", Shape4{c, c, kKernel, kKernel}, seed));
      put(n + ".bias", Tensor4(Shape4{1, c, 1, 1}));
      put(n + ".affine.weight", init_randn(n + ".affine.weight", Shape4{c, cfg.w_dim, 1, 1}, seed));
      put(n + ".affine.bias", Tensor4(Shape4{1, c, 1, 1}, 1.0));
    }
    if (cfg.has_mtm(r)) {
      const std::string n = block(r) + ".conv0.offset";
      const int taps2 = 2 * kKernel * kKernel;
      put(n + ".weight", Tensor4(Shape4{taps2, c, kKernel, kKernel}));
      put(n + ".bias", Tensor4(Shape4{1, taps2, 1, 1}));
      put(n + ".affine.weight",
          init_randn(n + ".affine.weight", Shape4{c, cfg.offset_style_dim(), 1, 1}, seed));
      put(n + ".affine.bias", Tensor4(Shape4{1, c, 1, 1}, 1.0));
    }
  }
  put("gen.torgb.weight", init_randn("gen.torgb.weight", Shape4{1, c, 1, 1}, seed));
  put("gen.torgb.bias", Tensor4(Shape4{1, 1, 1, 1}));
  return s;
}

ParamStore init_discriminator(const GeneratorConfig& cfg, std::uint64_t seed,
                              const std::string& prefix, int in_channels) {
  cfg.validate();
  ParamStore s;
  const int c = cfg.d_channels;
  for (int r = cfg.resolution; r >= 4; r /= 2) {
    const std::string n = prefix + "b" + std::to_string(r) + ".conv";
    const int cin = r == cfg.resolution ? in_channels : c;
    s.emplace(n + ".weight", init_randn(n + ".weight", Shape4{c, cin, kKernel, kKernel}, seed));
    s.emplace(n + ".bias", Tensor4(Shape4{1, c, 1, 1}));
  }
  s.emplace(prefix + "fc.weight", init_randn(prefix + "fc.weight", Shape4{1, c * 16, 1, 1}, seed));
  s.emplace(prefix + "fc.bias", Tensor4(Shape4{1, 1, 1, 1}));
  return s;
}

GeneratorConfig infer_generator_config(const ParamStore& store) {
  auto get = [&](const std::string& name) -> const Tensor4& {
    auto it = store.find(name);
    if (it == store.end()) throw CheckpointError("checkpoint has no " + name);
    return it->second;
  };
  GeneratorConfig cfg;
  cfg.channels = get("gen.const").c();
  cfg.z_dim = get("gen.mapping.fc0.weight").c();
  cfg.w_dim = get("gen.mapping.fc0.weight").n();
  int res = 0;
  for (int r = 4; store.count(block(r) + ".conv1.weight"); r *= 2) res = r;
  if (res == 0) throw CheckpointError("checkpoint has no synthesis blocks");
  cfg.resolution = res;
  std::map<std::string, int> present, total;
  for (int r : cfg.block_resolutions()) {
    const std::string g = GeneratorConfig::group_of(r);
    ++total[g];
    const auto it = store.find(block(r) + ".conv0.offset.affine.weight");
    if (it == store.end()) continue;
    ++present[g];
    const int in = it->second.c();
    if (in > cfg.w_dim) {
      cfg.video = true;
      cfg.m_dim = in - cfg.w_dim;
    }
  }
  for (const auto& [g, n] : present) {
    if (n != total[g]) throw CheckpointError("group " + g + " is only partly MTM");
    cfg.mtm_groups.insert(g);
  }
  const auto d = store.find("d.fc.weight");
  if (d != store.end()) cfg.d_channels = d->second.c() / 16;
  cfg.validate();
  return cfg;
}

std::vector<std::string> mtm_layer_names(const ParamStore& store) {
  std::vector<std::string> names;
  const std::string tag = ".offset.weight";
  for (const auto& [name, t] : store) {
    if (name.size() > tag.size() && name.compare(name.size() - tag.size(), tag.size(), tag) == 0) {
      names.push_back(name.substr(0, name.size() - tag.size()));
    }
  }
  return names;
}

std::size_t count_params(const ParamStore& store, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [name, t] : store)
    if (name.rfind(prefix, 0) == 0) n += t.size();
  return n;
}

std::size_t count_offset_params(const ParamStore& store, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [name, t] : store)
    if (name.rfind(prefix, 0) == 0 && name.find(".offset.") != std::string::npos) n += t.size();
  return n;
}

VarMap bind_params(ad::Tape& tape, const ParamStore& store, bool requires_grad,
            const std::string& prefix) {
  VarMap m;
  for (const auto& [name, t] : store)
    if (name.rfind(prefix, 0) == 0) m.emplace(name, tape.leaf(t, requires_grad));
  return m;
}

ad::Var mapping(const ad::Var& z, const VarMap& p) {
  const int z_dim = need(p, "gen.mapping.fc0.weight").shape().c;
  const Shape4 s = z.shape();
  if (s.c != z_dim || s.h != 1 || s.w != 1) {
    throw ShapeError("mapping: expected (n, " + std::to_string(z_dim) + ", 1, 1), got " +
                     s.str());
  }
  const ad::Var h = ad::leaky_relu(dense(z, p, "gen.mapping.fc0"), kSlope);
  return ad::leaky_relu(dense(h, p, "gen.mapping.fc1"), kSlope);
}

BlockOutput synthesis_block(const ad::Var& feat, const ad::Var& w_latent,
                            const ad::Var& offset_latent, const VarMap& p, int resolution,
                            bool use_mtm, bool offsets_enabled) {
  const std::string b = block(resolution);
  const ad::Var x = resolution == 4 ? feat : ad::upsample_nearest2x(feat);
  if (x.shape().h != resolution) {
    throw ShapeError("synthesis_block " + b + ": input " + feat.shape().str() +
                     " does not lead to resolution " + std::to_string(resolution));
  }
  BlockOutput out;
  const ad::Var s0 = dense(w_latent, p, b + ".conv0.affine");
  ad::Var y;
  if (use_mtm) {
    const ad::Var os = dense(offset_latent, p, b + ".conv0.offset.affine");
    const ad::MtmParams mp{need(p, b + ".conv0.weight"), need(p, b + ".conv0.bias"),
                           need(p, b + ".conv0.offset.weight"),
                           need(p, b + ".conv0.offset.bias"), offsets_enabled};
    const ad::MtmResult r = ad::mtm_forward(mp, x, s0, os);
    y = r.output;
    out.offsets = r.offsets;
  } else {
    y = ad::modulated_conv2d(x, need(p, b + ".conv0.weight"), s0, need(p, b + ".conv0.bias"));
  }
  y = ad::leaky_relu(y, kSlope);
  const ad::Var s1 = dense(w_latent, p, b + ".conv1.affine");
  y = ad::modulated_conv2d(y, need(p, b + ".conv1.weight"), s1, need(p, b + ".conv1.bias"));
  out.features = ad::leaky_relu(y, kSlope);
  return out;
}

GeneratorOutput generate(const ad::Var& z, const ad::Var& motion, const VarMap& p,
                         const GeneratorConfig& cfg, GenerateOptions opt) {
  const int n = z.shape().n;
  const ad::Var w = mapping(z, p);
  ad::Var offset_latent = w;
  if (motion.valid()) {
    if (motion.shape().n != n) throw ShapeError("generate: motion batch differs from z");
    offset_latent = ad::concat_channels(w, motion);
  }
  ad::Var x = ad::gather_batch(need(p, "gen.const"), std::vector<int>(n, 0));
  GeneratorOutput out;
  for (int r : cfg.block_resolutions()) {
    const bool use_mtm = cfg.has_mtm(r);
    BlockOutput b = synthesis_block(x, w, offset_latent, p, r, use_mtm, opt.offsets_enabled);
    x = b.features;
    if (use_mtm) out.offsets.emplace_back(block(r) + ".conv0", b.offsets);
  }
  const ad::Var& rgb = need(p, "gen.torgb.weight");
  const ad::Var y = ad::scale(ad::conv2d(x, rgb), gain(rgb.shape().c));
  out.image = ad::tanh(ad::bias_add(y, need(p, "gen.torgb.bias")));
  return out;
}

Tensor4 motion_codes(std::uint64_t seed, int n, int frames, int m_dim, bool frozen) {
  if (n < 1 || frames < 1 || m_dim < 1) throw ContractError("motion_codes: sizes must be positive");
  Tensor4 m(Shape4{n * frames, m_dim, 1, 1});
  if (frozen) return m;
  Rng rng(seed);
  for (int c = 0; c < n; ++c) {
    double* first = m.plane(c * frames, 0);
    for (int j = 0; j < m_dim; ++j) first[j] = rng.normal();
    for (int t = 1; t < frames; ++t) {
      const double* prev = m.plane(c * frames + t - 1, 0);
      double* cur = m.plane(c * frames + t, 0);
      for (int j = 0; j < m_dim; ++j) cur[j] = 0.9 * prev[j] + 0.1 * rng.normal();
    }
  }
  return m;
}

Tensor4 repeat_frames(const Tensor4& z, int frames) {
  const Shape4 s = z.shape();
  Tensor4 out(Shape4{s.n * frames, s.c, s.h, s.w});
  const std::size_t per = static_cast<std::size_t>(s.c) * s.plane();
  for (int b = 0; b < s.n; ++b)
    for (int t = 0; t < frames; ++t) std::copy_n(z.plane(b, 0), per, out.plane(b * frames + t, 0));
  return out;
}

GeneratorOutput generate_video(const Tensor4& z_content, const Tensor4& motion, ad::Tape& tape,
                               const VarMap& p, const GeneratorConfig& cfg,
                               GenerateOptions opt) {
  if (!cfg.video) throw ContractError("generate_video: generator is not in video mode");
  const int frames = motion.n() / z_content.n();
  if (frames < 1 || frames * z_content.n() != motion.n()) {
    throw ShapeError("generate_video: motion codes do not split into clips");
  }
  return generate(tape.constant(repeat_frames(z_content, frames)), tape.constant(motion), p,
                  cfg, opt);
}

ad::Var discriminate(const ad::Var& image, const VarMap& p, const std::string& prefix) {
  const int res = image.shape().h;
  if (image.shape().w != res || res < 4 || !is_power_of_two(res)) {
    throw ShapeError("discriminate: unsupported image " + image.shape().str());
  }
  ad::Var x = image;
  for (int r = res; r >= 4; r /= 2) {
    const std::string n = prefix + "b" + std::to_string(r) + ".conv";
    const ad::Var& w = need(p, n + ".weight");
    if (w.shape().c != x.shape().c) {
      throw ShapeError("discriminate: " + n + " expects " + std::to_string(w.shape().c) +
                       " channels, got " + x.shape().str());
    }
    const ad::Var y = ad::conv2d(x, ad::scale(w, gain(w.shape().c * kKernel * kKernel)));
    x = ad::leaky_relu(ad::bias_add(y, need(p, n + ".bias")), kSlope);
    if (r > 4) x = ad::mean_pool2x2(x);
  }
  const Shape4 s = x.shape();
  const ad::Var flat = ad::reshape(x, Shape4{s.n, s.c * s.h * s.w, 1, 1});
  return dense(flat, p, prefix + "fc");
}

Samples sample_images(const ParamStore& gen, const GeneratorConfig& cfg, const Tensor4& z,
                      const Tensor4* motion, GenerateOptions opt) {
  constexpr int kChunk = 32;
  const int n = z.n();
  Samples out;
  out.images = Tensor4(Shape4{n, 1, cfg.resolution, cfg.resolution});
  const std::size_t zper = static_cast<std::size_t>(z.c());
  for (int start = 0; start < n; start += kChunk) {
    const int m = std::min(kChunk, n - start);
    ad::Tape tape;
    const VarMap p = bind_params(tape, gen, false, "gen.");
    Tensor4 zc(Shape4{m, z.c(), 1, 1});
    std::copy_n(z.ptr() + start * zper, m * zper, zc.ptr());
    ad::Var mv;
    if (motion != nullptr) {
      const std::size_t mper = static_cast<std::size_t>(motion->c());
      Tensor4 mc(Shape4{m, motion->c(), 1, 1});
      std::copy_n(motion->ptr() + start * mper, m * mper, mc.ptr());
      mv = tape.constant(std::move(mc));
    }
    const GeneratorOutput g = generate(tape.constant(std::move(zc)), mv, p, cfg, opt);
    std::copy_n(g.image.value().ptr(), g.image.value().size(), out.images.plane(start, 0));
    for (std::size_t i = 0; i < g.offsets.size(); ++i) {
      const Tensor4& v = g.offsets[i].second.value();
      if (start == 0) {
        out.offsets.emplace_back(g.offsets[i].first, Tensor4(Shape4{n, v.c(), v.h(), v.w()}));
      }
      std::copy_n(v.ptr(), v.size(), out.offsets[i].second.plane(start, 0));
    }
  }
  return out;
}

Tensor4 sample_latents(std::uint64_t seed, int n, int z_dim) {
  Rng rng(seed);
  return randn(Shape4{n, z_dim, 1, 1}, rng);
}

// ---- checkpoint ----

namespace {

constexpr char kMagic[] = "MTMCKPT1";

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw CheckpointError("checkpoint is truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ParamStore& store) {
  std::string out(kMagic, 8);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store) {
    if (name.size() > 0xffff) throw CheckpointError("parameter name too long: " + name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(4);
    const Shape4 s = t.shape();
    for (int d : {s.n, s.c, s.h, s.w}) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ParamStore deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(8) != std::string(kMagic, 8)) throw CheckpointError("not an MTMCKPT1 checkpoint");
  const std::uint32_t count = r.get<std::uint32_t>();
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.get<std::uint16_t>());
    const int ndim = r.get<std::uint8_t>();
    if (ndim < 1 || ndim > 4) throw CheckpointError(name + ": unsupported rank " + std::to_string(ndim));
    int dims[4] = {1, 1, 1, 1};
    for (int d = 0; d < ndim; ++d) {
      const std::uint64_t v = r.get<std::uint64_t>();
      if (v == 0 || v > (1u << 30)) throw CheckpointError(name + ": bad dimension");
      dims[4 - ndim + d] = static_cast<int>(v);
    }
    Tensor4 t(Shape4{dims[0], dims[1], dims[2], dims[3]});
    for (double& v : t.data()) v = std::bit_cast<double>(r.get<std::uint64_t>());
    if (!store.emplace(name, std::move(t)).second) throw CheckpointError("duplicate tensor " + name);
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return store;
}

void save_checkpoint(const ParamStore& store, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write " + path);
  const std::string b = serialize_checkpoint(store);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!f) throw CheckpointError("write failed for " + path);
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace mtm
