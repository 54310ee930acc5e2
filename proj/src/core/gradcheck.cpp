#include "vfa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "vfa/attention.hpp"
#include "vfa/error.hpp"
#include "vfa/geometry.hpp"
#include "vfa/losses.hpp"
#include "vfa/synth.hpp"
#include "vfa/train.hpp"

namespace vfa {

bool GradcheckReport::all_passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
}

std::vector<std::string> GradcheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (!e.passed) out.push_back(e.op);
  return out;
}

FdResult finite_difference_check(const std::function<Var<double>()>& loss, std::vector<Var<double>> leaves,
                                 double step, double floor, bool negate_analytic) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    if (l.has_grad()) {
      analytic.emplace_back(l.grad().begin(), l.grad().end());
    } else {
      analytic.emplace_back(static_cast<std::size_t>(l.numel()), 0.0);
    }
    l.zero_grad();
  }
  FdResult r;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto x = leaves[k].mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + step;
      const double fp = loss().item();
      x[i] = saved - step;
      const double fm = loss().item();
      x[i] = saved;
      const double numeric = (fp - fm) / (2 * step);
      const double a = negate_analytic ? -analytic[k][i] : analytic[k][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      r.max_rel_error = std::max(r.max_rel_error, std::isfinite(err) ? err : 1e300);
      ++r.checked;
    }
  }
  return r;
}

namespace {

using V = Var<double>;

struct Case {
  std::vector<V> leaves;
  std::function<V()> loss;
};

struct Rng {
  std::mt19937_64 gen;
  V uniform(Shape s, double lo, double hi) {
    std::uniform_real_distribution<double> U(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(numel(s)));
    for (auto& x : v) x = U(gen);
    return V::from(std::move(s), std::move(v));
  }
  // Values with |x| in [lo, hi] and random sign, to stay off kinks at zero.
  V away_from_zero(Shape s, double lo, double hi) {
    std::uniform_real_distribution<double> U(lo, hi);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> v(static_cast<std::size_t>(numel(s)));
    for (auto& x : v) x = (coin(gen) ? 1 : -1) * U(gen);
    return V::from(std::move(s), std::move(v));
  }
};

// Scalar probe of an arbitrary output: sum(out * w) with fixed random w.
V project(const V& out, const V& w) { return sum(mul(out, w)); }

// Non-integer sampling coordinates strictly inside [0, n - 1].
V coords_inside(Rng& r, std::int64_t d, std::int64_t n, Shape out_spatial) {
  Shape s{d};
  s.insert(s.end(), out_spatial.begin(), out_spatial.end());
  std::uniform_real_distribution<double> U(0.05, 0.95);
  std::uniform_int_distribution<std::int64_t> I(0, n - 2);
  std::vector<double> v(static_cast<std::size_t>(numel(s)));
  for (auto& x : v) x = static_cast<double>(I(r.gen)) + U(r.gen);
  return V::from(std::move(s), std::move(v));
}

std::map<std::string, std::function<Case(Rng&, std::int64_t)>> registry() {
  std::map<std::string, std::function<Case(Rng&, std::int64_t)>> m;
  auto unary = [](auto op, double lo, double hi, bool signed_input) {
    return [=](Rng& r, std::int64_t) {
      V x = signed_input ? r.away_from_zero({3, 4}, lo, hi) : r.uniform({3, 4}, lo, hi);
      V w = r.uniform({3, 4}, -1, 1);
      return Case{{x}, [=] { return project(op(x), w); }};
    };
  };
  auto binary = [](auto op) {
    return [=](Rng& r, std::int64_t) {
      V a = r.uniform({3, 4}, 0.5, 1.5), b = r.uniform({3, 4}, 0.5, 1.5), w = r.uniform({3, 4}, -1, 1);
      return Case{{a, b}, [=] { return project(op(a, b), w); }};
    };
  };
  m["add"] = binary([](const V& a, const V& b) { return add(a, b); });
  m["sub"] = binary([](const V& a, const V& b) { return sub(a, b); });
  m["mul"] = binary([](const V& a, const V& b) { return mul(a, b); });
  m["div"] = binary([](const V& a, const V& b) { return div(a, b); });
  m["square"] = unary([](const V& x) { return square(x); }, -1, 1, false);
  m["sqrt"] = unary([](const V& x) { return sqrt(x); }, 0.5, 2, false);
  m["exp"] = unary([](const V& x) { return exp(x); }, -1, 1, false);
  m["log"] = unary([](const V& x) { return log(x); }, 0.5, 2, false);
  m["leaky_relu"] = unary([](const V& x) { return leaky_relu(x, 0.2); }, 0.05, 1, true);
  m["sum_axis"] = [](Rng& r, std::int64_t) {
    V x = r.uniform({3, 4, 5}, -1, 1), w = r.uniform({3, 5}, -1, 1);
    return Case{{x}, [=] { return project(sum_axis(x, 1), w); }};
  };
  m["matmul"] = [](Rng& r, std::int64_t) {
    V a = r.uniform({2, 3, 4}, -1, 1), b = r.uniform({4, 5}, -1, 1), w = r.uniform({2, 3, 5}, -1, 1);
    return Case{{a, b}, [=] { return project(matmul(a, b), w); }};
  };
  m["transpose_last2"] = [](Rng& r, std::int64_t) {
    V a = r.uniform({2, 3, 4}, -1, 1), w = r.uniform({2, 4, 3}, -1, 1);
    return Case{{a}, [=] { return project(transpose_last2(a), w); }};
  };
  m["softmax"] = [](Rng& r, std::int64_t) {
    V x = r.uniform({4, 9}, -2, 2), w = r.uniform({4, 9}, -1, 1);
    return Case{{x}, [=] { return project(softmax(x, 1, 0.7), w); }};
  };
  m["l2_normalize_last"] = [](Rng& r, std::int64_t) {
    V x = r.uniform({4, 6}, -1, 1), w = r.uniform({4, 6}, -1, 1);
    return Case{{x}, [=] { return project(l2_normalize_last(x, 1e-6), w); }};
  };
  m["norm_last"] = [](Rng& r, std::int64_t) {
    V x = r.uniform({4, 3}, -1, 1), w = r.uniform({4}, -1, 1);
    return Case{{x}, [=] { return project(norm_last(x), w); }};
  };
  m["conv"] = [](Rng& r, std::int64_t n) {
    V x = r.uniform({2, n, n}, -1, 1), k = r.uniform({3, 2, 3, 3}, -0.5, 0.5), b = r.uniform({3}, -0.5, 0.5);
    V w = r.uniform({3, n, n}, -1, 1);
    return Case{{x, k, b}, [=] { return project(conv_same(x, k, b), w); }};
  };
  m["conv3d"] = [](Rng& r, std::int64_t) {
    V x = r.uniform({2, 4, 5, 3}, -1, 1), k = r.uniform({2, 2, 3, 3, 3}, -0.5, 0.5), b = r.uniform({2}, -0.5, 0.5);
    V w = r.uniform({2, 4, 5, 3}, -1, 1);
    return Case{{x, k, b}, [=] { return project(conv_same(x, k, b), w); }};
  };
  m["downsample2"] = [](Rng& r, std::int64_t n) {
    V x = r.uniform({2, n, n}, -1, 1), w = r.uniform({2, n / 2, n / 2}, -1, 1);
    return Case{{x}, [=] { return project(downsample2(x), w); }};
  };
  m["upsample2"] = [](Rng& r, std::int64_t n) {
    V x = r.uniform({2, n / 2, n / 2}, -1, 1), w = r.uniform({2, n, n}, -1, 1);
    return Case{{x}, [=] { return project(upsample2(x), w); }};
  };
  m["concat_channels"] = [](Rng& r, std::int64_t n) {
    V a = r.uniform({1, n, n}, -1, 1), b = r.uniform({2, n, n}, -1, 1), w = r.uniform({3, n, n}, -1, 1);
    return Case{{a, b}, [=] { return project(concat_channels(a, b), w); }};
  };
  m["grid_sample"] = [](Rng& r, std::int64_t n) {
    V img = r.uniform({2, n, n}, -1, 1), c = coords_inside(r, 2, n, {n, n}), w = r.uniform({2, n, n}, -1, 1);
    return Case{{img, c}, [=] { return project(grid_sample(img, c), w); }};
  };
  m["extract_windows"] = [](Rng& r, std::int64_t n) {
    V x = r.uniform({2, n, n}, -1, 1), w = r.uniform({n * n, 9, 2}, -1, 1);
    return Case{{x}, [=] { return project(extract_windows(x, 3), w); }};
  };
  m["box_sum"] = [](Rng& r, std::int64_t n) {
    V x = r.uniform({1, n, n}, -1, 1), w = r.uniform({1, n, n}, -1, 1);
    return Case{{x}, [=] { return project(box_sum(x, 5), w); }};
  };
  m["diff_forward"] = [](Rng& r, std::int64_t n) {
    V x = r.uniform({2, n, n}, -1, 1), w = r.uniform({2, n, n - 1}, -1, 1);
    return Case{{x}, [=] { return project(diff_forward(x, 1), w); }};
  };
  m["soft_joint_histogram"] = [](Rng& r, std::int64_t n) {
    V a = r.uniform({1, n, n}, 0.01, 0.99), b = r.uniform({1, n, n}, 0.01, 0.99), w = r.uniform({8, 8}, -1, 1);
    return Case{{a, b}, [=] { return project(soft_joint_histogram(a, b, 8), w); }};
  };
  m["vfa_attention"] = [](Rng& r, std::int64_t n) {
    V f = r.uniform({4, n, n}, -1, 1), mv = r.uniform({4, n, n}, -1, 1), w = r.uniform({2, n, n}, -1, 1);
    return Case{{f, mv}, [=] { return project(vfa_attention(f, mv, AttentionConfig{}).displacement, w); }};
  };
  m["vfa_attention_cosine"] = [](Rng& r, std::int64_t n) {
    V f = r.uniform({4, n, n}, -1, 1), mv = r.uniform({4, n, n}, -1, 1), w = r.uniform({2, n, n}, -1, 1);
    AttentionConfig cfg;
    cfg.similarity = Similarity::Cosine;
    cfg.temperature = 0.5;
    return Case{{f, mv}, [=] { return project(vfa_attention(f, mv, cfg).displacement, w); }};
  };
  m["warp"] = [](Rng& r, std::int64_t n) {
    V img = r.uniform({1, n, n}, -1, 1), u = r.uniform({2, n, n}, -0.9, 0.9), w = r.uniform({1, n, n}, -1, 1);
    // keep sample points off integer coordinates
    auto uv = u.mutable_data();
    for (auto& x : uv) x = std::copysign(0.1 + 0.8 * std::abs(x), x);
    return Case{{img, u}, [=] { return project(warp(img, to_transform(u)), w); }};
  };
  m["compose"] = [](Rng& r, std::int64_t n) {
    V a = r.uniform({2, n, n}, 0.1, 0.4), b = r.uniform({2, n, n}, -1, 1), w = r.uniform({2, n, n}, -1, 1);
    return Case{{a, b}, [=] { return project(compose(to_transform(a), to_transform(b)).displacement(), w); }};
  };
  m["upsample_transform"] = [](Rng& r, std::int64_t n) {
    V u = r.uniform({2, n / 2, n / 2}, -1, 1), w = r.uniform({2, n, n}, -1, 1);
    return Case{{u}, [=] { return project(upsample_transform(to_transform(u)).displacement(), w); }};
  };
  m["scaling_and_squaring"] = [](Rng& r, std::int64_t n) {
    V v = r.uniform({2, n, n}, -0.7, 0.7), w = r.uniform({2, n, n}, -1, 1);
    return Case{{v}, [=] { return project(scaling_and_squaring(v, 4).displacement(), w); }};
  };
  m["apply_beta"] = [](Rng& r, std::int64_t n) {
    V u = r.uniform({2, n, n}, -1, 1), beta = V::scalar(0.3), w = r.uniform({2, n, n}, -1, 1);
    return Case{{u, beta}, [=] { return project(apply_beta(u, beta).displacement(), w); }};
  };
  m["ncc_loss"] = [](Rng& r, std::int64_t n) {
    V a = r.uniform({1, n, n}, 0, 1), b = r.uniform({1, n, n}, 0, 1);
    return Case{{a, b}, [=] { return ncc_loss(a, b, 5); }};
  };
  m["mi_loss"] = [](Rng& r, std::int64_t n) {
    V a = r.uniform({1, n, n}, 0.01, 0.99), b = r.uniform({1, n, n}, 0.01, 0.99);
    return Case{{a, b}, [=] { return mi_loss(a, b, 8); }};
  };
  m["diffusion_reg"] = [](Rng& r, std::int64_t n) {
    V u = r.uniform({2, n, n}, -1, 1);
    return Case{{u}, [=] { return diffusion_reg(u); }};
  };
  m["mse_loss"] = [](Rng& r, std::int64_t n) {
    V a = r.uniform({1, n, n}, 0, 1), b = r.uniform({1, n, n}, 0, 1);
    return Case{{a, b}, [=] { return mse_loss(a, b); }};
  };
  m["dice_loss"] = [](Rng& r, std::int64_t n) {
    V a = r.uniform({2, n, n}, 0, 1), b = r.uniform({2, n, n}, 0, 1);
    return Case{{a, b}, [=] { return dice_loss(a, b); }};
  };
  m["tre_loss"] = [](Rng& r, std::int64_t n) {
    V u = r.uniform({2, n, n}, -1, 1);
    KeypointSet kp;
    kp.dims = 2;
    kp.spacing = {1.0, 1.5};
    std::uniform_real_distribution<double> U(0.1, 0.9);
    for (int p = 0; p < 6; ++p)
      for (int a = 0; a < 2; ++a) {
        kp.fixed.push_back(static_cast<double>(1 + p) + U(r.gen));
        kp.moving.push_back(static_cast<double>(1 + p) + 3 * U(r.gen));
      }
    return Case{{u}, [=] { return tre_loss(to_transform(u), kp); }};
  };
  return m;
}

}  // namespace

std::vector<std::string> gradcheck_names(bool include_model) {
  std::vector<std::string> names;
  for (const auto& [name, fn] : registry()) names.push_back(name);
  if (include_model) names.push_back("model");
  return names;
}

GradcheckEntry model_gradcheck(const ModelConfig& cfg, std::int64_t size, const GradcheckOptions& opts) {
  VfaModel<double> model(cfg, 2);
  SynthSpec spec;
  spec.extents = {size, size};
  spec.max_displacement = 1.5;
  spec.smoothness = 3.0;
  spec.seed = opts.seed + 7;
  const Sample<double> sample = to_sample<double>(gen_synthetic_pair(spec));
  LossRecipe recipe = LossRecipe::from_preset("t1-atlas");
  recipe.ncc_window = std::min<int>(9, static_cast<int>(size) - ((size + 1) % 2));
  std::vector<V> leaves;
  for (const auto& [name, p] : model.parameters()) leaves.push_back(p);
  const auto loss = [&] { return evaluate_loss(model, sample, recipe).total; };
  const FdResult fd = finite_difference_check(loss, leaves, opts.step, opts.floor, opts.inject_sign_bug == "model");
  return {"model", fd.max_rel_error, fd.checked, fd.max_rel_error < opts.tolerance};
}

GradcheckReport run_gradchecks(const GradcheckOptions& opts) {
  if (opts.size < 8 || opts.size % 4 != 0) throw ParameterError("gradcheck size must be a multiple of 4, >= 8");
  if (!opts.inject_sign_bug.empty()) {
    const auto names = gradcheck_names(true);
    if (std::find(names.begin(), names.end(), opts.inject_sign_bug) == names.end()) {
      throw ParameterError("unknown gradcheck op '" + opts.inject_sign_bug + "'");
    }
  }
  GradcheckReport report;
  Rng rng{std::mt19937_64(opts.seed)};
  for (const auto& [name, build] : registry()) {
    Case c = build(rng, opts.size);
    const FdResult fd =
        finite_difference_check(c.loss, c.leaves, opts.step, opts.floor, opts.inject_sign_bug == name);
    report.entries.push_back({name, fd.max_rel_error, fd.checked, fd.max_rel_error < opts.tolerance});
  }
  if (opts.include_model) {
    ModelConfig cfg;
    cfg.extractor.channels = opts.model_channels;
    cfg.extractor.match_channels = 8;
    cfg.seed = opts.seed;
    report.entries.push_back(model_gradcheck(cfg, opts.size, opts));
  }
  return report;
}

}  // namespace vfa
