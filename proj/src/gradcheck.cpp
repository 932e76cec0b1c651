#include "mtm/gradcheck.hpp"

#include <functional>
#include <limits>

#include "mtm/autodiff.hpp"
#include "mtm/conv.hpp"
#include "mtm/deform.hpp"
#include "mtm/io.hpp"
#include "mtm/rng.hpp"
#include "mtm/stylegen.hpp"

namespace mtm {
namespace {

using ad::ScalarFn;
using ad::Var;

// A case draws a point and returns the scalar function to check at it.
struct Draw {
  std::vector<Tensor4> point;
  ScalarFn f;
};
using CaseFn = std::function<Draw(Rng&)>;

Tensor4 uniform(Shape4 s, Rng& rng, double lo, double hi) {
  Tensor4 t(s);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// <r, y> with a fixed random r, so every output element contributes.
Var project(ad::Tape& t, const Var& y, const Tensor4& r) { return ad::sum(ad::mul(y, t.constant(r))); }

// Parameters passed as finite-difference inputs, rebuilt into a VarMap by name.
struct Params {
  std::vector<std::string> names;
  std::vector<Tensor4> values;

  void randomize(const ParamStore& store, Rng& rng, double scale = 1.0) {
    for (const auto& [name, t] : store) {
      names.push_back(name);
      Tensor4 v = randn(t.shape(), rng);
      for (double& x : v.data()) x *= scale;
      values.push_back(std::move(v));
    }
  }
  VarMap bind(const std::vector<Var>& in, std::size_t first) const {
    VarMap m;
    for (std::size_t i = 0; i < names.size(); ++i) m.emplace(names[i], in[first + i]);
    return m;
  }
};

GeneratorConfig tiny_generator() {
  GeneratorConfig g;
  g.resolution = 8;
  g.channels = 3;
  g.z_dim = 4;
  g.w_dim = 4;
  g.d_channels = 3;
  g.mtm_groups = {"low"};
  return g;
}

Draw conv2d_case(Rng& rng) {
  const Tensor4 r = randn(Shape4{2, 4, 5, 5}, rng);
  return {{randn(Shape4{2, 3, 5, 5}, rng), randn(Shape4{4, 3, 3, 3}, rng)},
          [r](ad::Tape& t, const std::vector<Var>& in) {
            return project(t, ad::conv2d(in[0], in[1]), r);
          }};
}

Draw modulate_case(Rng& rng) {
  const Tensor4 r = randn(Shape4{2 * 4, 3, 3, 3}, rng);
  return {{randn(Shape4{4, 3, 3, 3}, rng), randn(Shape4{2, 3, 1, 1}, rng)},
          [r](ad::Tape& t, const std::vector<Var>& in) {
            return project(t, ad::modulate_demodulate(in[0], in[1]), r);
          }};
}

Draw bilinear_case(Rng& rng) {
  const Tensor4 r = randn(Shape4{2, 3, 4, 4}, rng);
  return {{randn(Shape4{2, 3, 5, 5}, rng), uniform(Shape4{2, 2, 4, 4}, rng, -0.9, 4.9)},
          [r](ad::Tape& t, const std::vector<Var>& in) {
            return project(t, ad::sample_bilinear(in[0], in[1]), r);
          }};
}

Draw deform_case(Rng& rng) {
  const Tensor4 r = randn(Shape4{2, 4, 5, 5}, rng);
  return {{randn(Shape4{2, 3, 5, 5}, rng), randn(Shape4{4, 3, 3, 3}, rng),
           uniform(Shape4{2, 18, 5, 5}, rng, -1.5, 1.5)},
          [r](ad::Tape& t, const std::vector<Var>& in) {
            return project(t, ad::deform_conv2d(in[0], in[1], in[2]), r);
          }};
}

Draw predict_case(Rng& rng) {
  const Tensor4 r = randn(Shape4{2, 18, 5, 5}, rng);
  return {{randn(Shape4{2, 3, 5, 5}, rng), randn(Shape4{2, 3, 1, 1}, rng),
           randn(Shape4{18, 3, 3, 3}, rng), randn(Shape4{1, 18, 1, 1}, rng)},
          [r](ad::Tape& t, const std::vector<Var>& in) {
            return project(t, ad::predict_offsets(in[0], in[1], in[2], in[3]), r);
          }};
}

Draw mtm_case(Rng& rng) {
  const Tensor4 r = randn(Shape4{1, 4, 6, 6}, rng);
  const Tensor4 q = randn(Shape4{1, 18, 6, 6}, rng);
  return {{randn(Shape4{1, 4, 6, 6}, rng), randn(Shape4{4, 4, 3, 3}, rng),
           randn(Shape4{1, 4, 1, 1}, rng), randn(Shape4{18, 4, 3, 3}, rng),
           randn(Shape4{1, 18, 1, 1}, rng), randn(Shape4{1, 4, 1, 1}, rng),
           randn(Shape4{1, 4, 1, 1}, rng)},
          [r, q](ad::Tape& t, const std::vector<Var>& in) {
            const ad::MtmResult m =
                ad::mtm_forward({in[1], in[2], in[3], in[4], true}, in[0], in[5], in[6]);
            return ad::add(project(t, m.output, r), project(t, m.offsets, q));
          }};
}

Draw mapping_case(Rng& rng) {
  const GeneratorConfig g = tiny_generator();
  ParamStore store;
  for (auto& [name, t] : init_generator(g, 0))
    if (name.rfind("gen.mapping.", 0) == 0) store.emplace(name, t);
  Params p;
  p.randomize(store, rng);
  const Tensor4 r = randn(Shape4{2, g.w_dim, 1, 1}, rng);
  std::vector<Tensor4> point{randn(Shape4{2, g.z_dim, 1, 1}, rng)};
  point.insert(point.end(), p.values.begin(), p.values.end());
  return {point, [p, r](ad::Tape& t, const std::vector<Var>& in) {
            return project(t, mapping(in[0], p.bind(in, 1)), r);
          }};
}

Draw block_case(Rng& rng) {
  const GeneratorConfig g = tiny_generator();
  ParamStore store;
  for (auto& [name, t] : init_generator(g, 0))
    if (name.rfind("gen.b8.", 0) == 0) store.emplace(name, t);
  Params p;
  p.randomize(store, rng);
  const Tensor4 r = randn(Shape4{1, g.channels, 8, 8}, rng);
  std::vector<Tensor4> point{randn(Shape4{1, g.channels, 4, 4}, rng),
                             randn(Shape4{1, g.w_dim, 1, 1}, rng)};
  point.insert(point.end(), p.values.begin(), p.values.end());
  return {point, [p, r](ad::Tape& t, const std::vector<Var>& in) {
            const BlockOutput b = synthesis_block(in[0], in[1], in[1], p.bind(in, 2), 8, true);
            return project(t, b.features, r);
          }};
}

Draw discriminate_case(Rng& rng) {
  const GeneratorConfig g = tiny_generator();
  Params p;
  p.randomize(init_discriminator(g, 0), rng);
  const Tensor4 r = randn(Shape4{2, 1, 1, 1}, rng);
  std::vector<Tensor4> point{uniform(Shape4{2, 1, 8, 8}, rng, -1.0, 1.0)};
  point.insert(point.end(), p.values.begin(), p.values.end());
  return {point, [p, r](ad::Tape& t, const std::vector<Var>& in) {
            return project(t, discriminate(in[0], p.bind(in, 1)), r);
          }};
}

Draw generate_case(Rng& rng) {
  const GeneratorConfig g = tiny_generator();
  Params p;
  p.randomize(init_generator(g, 0), rng, 0.5);
  const Tensor4 r = randn(Shape4{1, 1, 8, 8}, rng);
  std::vector<Tensor4> point{randn(Shape4{1, g.z_dim, 1, 1}, rng)};
  point.insert(point.end(), p.values.begin(), p.values.end());
  return {point, [p, r, g](ad::Tape& t, const std::vector<Var>& in) {
            return project(t, generate(in[0], Var(), p.bind(in, 1), g).image, r);
          }};
}

double kink_margin_at(const ScalarFn& f, const std::vector<Tensor4>& point) {
  ad::Tape tape;
  std::vector<Var> in;
  for (const Tensor4& x : point) in.push_back(tape.constant(x));
  f(tape, in);
  return tape.min_kink_distance();
}

// f + c (g - g~) where g = sum(in[0]^2) and g~ its detached value: the value
// is unchanged and the gradient of in[0] gains 2 c in[0].
ScalarFn corrupted(ScalarFn f) {
  return [f](ad::Tape& t, const std::vector<Var>& in) {
    const Var g = ad::sum(ad::square(in[0]));
    return ad::add(f(t, in), ad::scale(ad::sub(g, t.constant(g.value())), 1e-2));
  };
}

GradcheckRow run_case(const std::string& name, const CaseFn& make, const GradcheckOptions& opt) {
  constexpr int kAttempts = 100;
  Rng rng(opt.seed ^ fnv1a(name));
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    Draw d = make(rng);
    const double margin = kink_margin_at(d.f, d.point);
    if (margin < opt.min_kink_margin && attempt + 1 < kAttempts) continue;
    if (opt.corrupt == name) d.f = corrupted(d.f);
    const ad::FiniteDiffReport rep = ad::finite_diff_report(d.f, d.point, opt.eps);
    return {name, rep.max_rel_error, margin};
  }
  return {name, std::numeric_limits<double>::infinity(), 0.0};
}

}  // namespace

GradcheckScope parse_scope(const std::string& s) {
  if (s == "ops") return GradcheckScope::kOps;
  if (s == "block") return GradcheckScope::kBlock;
  if (s == "full") return GradcheckScope::kFull;
  throw ContractError("unknown gradcheck scope '" + s + "' (expected ops, block or full)");
}

std::vector<GradcheckRow> run_gradcheck(GradcheckScope scope, const GradcheckOptions& opt) {
  std::vector<std::pair<std::string, CaseFn>> cases{
      {"conv2d", conv2d_case},           {"modulate_demodulate", modulate_case},
      {"bilinear_sample", bilinear_case}, {"deform_conv2d", deform_case},
      {"predict_offsets", predict_case},  {"mtm_forward", mtm_case}};
  if (scope != GradcheckScope::kOps) {
    cases.emplace_back("mapping", mapping_case);
    cases.emplace_back("synthesis_block", block_case);
  }
  if (scope == GradcheckScope::kFull) {
    cases.emplace_back("discriminate", discriminate_case);
    cases.emplace_back("generate", generate_case);
  }
  std::vector<GradcheckRow> rows;
  for (const auto& [name, make] : cases) rows.push_back(run_case(name, make, opt));
  return rows;
}

std::string gradcheck_csv(const std::vector<GradcheckRow>& rows) {
  std::string out = "op_name,max_rel_err\n";
  for (const GradcheckRow& r : rows) out += r.op + "," + fmt(r.max_rel_err) + "\n";
  return out;
}

bool gradcheck_passed(const std::vector<GradcheckRow>& rows) {
  for (const GradcheckRow& r : rows)
    if (!(r.max_rel_err < kGradcheckTolerance)) return false;
  return true;
}

}  // namespace mtm
