// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments
// select criteria by number; the exit status is non-zero if any selected
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <optional>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../fixtures.hpp"
#include "../metric_checks.hpp"
#include "vfa/attention.hpp"
#include "vfa/gradcheck.hpp"
#include "vfa/losses.hpp"
#include "vfa/metrics.hpp"
#include "vfa/model.hpp"
#include "vfa/synth.hpp"
#include "vfa/train.hpp"

using namespace vfa;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

template <typename T>
bool same_bits(const Var<T>& a, const Var<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), sizeof(T) * a.numel()) == 0;
}

// ---- 1 ---------------------------------------------------------------------

Verdict gradient_integrity() {
  ModelConfig cfg;
  cfg.extractor.channels = {8, 16};
  GradcheckOptions opts;
  const auto t0 = Clock::now();
  const GradcheckEntry e = model_gradcheck(cfg, 12, opts);
  const double secs = seconds_since(t0);
  return {e.max_rel_error < 1e-4 && e.checked > 0 && secs < 300,
          fmt("2 levels, 12x12, f64, %lld parameters, max rel err %.3g (< 1e-4), %.1f s (< 300 s)",
              static_cast<long long>(e.checked), e.max_rel_error, secs)};
}

// ---- 2 ---------------------------------------------------------------------

Verdict attention_exactness() {
  AttentionConfig cfg;
  cfg.temperature = 0.01;
  double worst = 0;
  int shifts = 0, oracle_disagree = 0;
  for (int d : {2, 3}) {
    const std::int64_t n = d == 2 ? 7 : 5;
    const int total = d == 2 ? 9 : 27;
    for (int k = 0; k < total; ++k) {
      std::vector<int> s(d);
      int rem = k;
      for (int a = d - 1; a >= 0; --a) {
        s[a] = rem % 3 - 1;
        rem /= 3;
      }
      const auto pr = fixture::one_hot_shift(d, n, s);
      const auto out = vfa_attention(pr.fixed, pr.moving, cfg);
      std::int64_t N = 1;
      for (int a = 0; a < d; ++a) N *= n;
      for (std::int64_t p = 0; p < N; ++p) {
        if (!fixture::interior(p, d, n, 1)) continue;
        const auto arg = fixture::argmax_offset(pr, p, 3);
        for (int a = 0; a < d; ++a) {
          if (arg[a] != s[a]) ++oracle_disagree;
          worst = std::max(worst, std::abs(out.displacement.at(a * N + p) - s[a]));
          worst = std::max(worst, std::abs(out.displacement.at(a * N + p) - arg[a]));
        }
      }
      ++shifts;
    }
  }
  return {worst < 1e-3 && oracle_disagree == 0 && shifts == 36,
          fmt("%d shifts (9 in 2D, 27 in 3D), t = 0.01, max |u - s| %.3g (< 1e-3), argmax oracle disagreements %d",
              shifts, worst, oracle_disagree)};
}

// ---- 3 ---------------------------------------------------------------------

Verdict symmetry_null() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  double worst = 0;
  int cases = 0;
  for (int d : {2, 3})
    for (Similarity sim : {Similarity::InnerProduct, Similarity::Cosine})
      for (int window : {3, 5}) {
        const std::int64_t C = 16, n = 6;
        Shape shape{C};
        std::int64_t N = 1;
        for (int a = 0; a < d; ++a) {
          shape.push_back(n);
          N *= n;
        }
        std::vector<double> f(static_cast<std::size_t>(C * N)), m(f.size());
        for (std::int64_t c = 0; c < C; ++c) {
          const double fv = nd(rng), mv = nd(rng);
          for (std::int64_t p = 0; p < N; ++p) {
            f[c * N + p] = fv;
            m[c * N + p] = mv;
          }
        }
        AttentionConfig cfg;
        cfg.similarity = sim;
        cfg.window = window;
        const auto out = vfa_attention(Var<double>::from(shape, f), Var<double>::from(shape, m), cfg);
        for (double v : out.displacement.data()) worst = std::max(worst, std::abs(v));
        ++cases;
      }
  return {worst < 1e-6, fmt("%d configurations (2D/3D, inner/cosine, w = 3/5), max |u| %.3g (< 1e-6)", cases, worst)};
}

// ---- 4 ---------------------------------------------------------------------

// Per-axis extent, in finest-level voxels, of the region reachable by the
// coarse-to-fine chain when every level saturates on a corner candidate:
// the spread between the all-negative and all-positive corner transforms
// plus the footprint of one coarsest-level voxel.
Verdict search_region() {
  std::ostringstream detail;
  bool ok = true;
  const int expected[] = {18, 38, 78};
  for (int d : {2, 3}) {
    for (int L = 3; L <= 5; ++L) {
      const std::int64_t coarse = 2;
      const auto beta = Var<double>::scalar(1.0);
      const auto R = value_matrix<double>(d, 3);
      const std::int64_t K = R.dim(0);
      double lo[3] = {0, 0, 0}, hi[3] = {0, 0, 0};
      bool uniform = true;
      for (int corner : {0, 1}) {
        TransformGrid<double> phi;
        for (int i = L - 1; i >= 0; --i) {
          const std::int64_t e = coarse << (L - 1 - i);
          std::int64_t N = 1;
          Shape sp;
          for (int a = 0; a < d; ++a) {
            N *= e;
            sp.push_back(e);
          }
          std::vector<double> w(static_cast<std::size_t>(N * K), 0.0);
          for (std::int64_t p = 0; p < N; ++p) w[p * K + (corner ? K - 1 : 0)] = 1.0;
          Var<double> u = matmul(Var<double>::from(Shape{N, K}, w), R);
          Shape us{d};
          us.insert(us.end(), sp.begin(), sp.end());
          u = reshape(transpose_last2(u), us);
          if (i == L - 1) {
            phi = advance_level<double>(nullptr, u, beta, false, 7);
          } else {
            const auto up = upsample_transform(phi);
            phi = advance_level(&up, u, beta, false, 7);
          }
        }
        const auto& disp = phi.displacement();
        const std::int64_t N = disp.numel() / d;
        for (int a = 0; a < d; ++a) {
          const double first = disp.at(a * N);
          for (std::int64_t p = 0; p < N; ++p) uniform = uniform && disp.at(a * N + p) == first;
          (corner ? hi : lo)[a] = first;
        }
      }
      for (int a = 0; a < d; ++a) {
        const double diameter = hi[a] - lo[a] + static_cast<double>(std::int64_t{1} << (L - 1));
        if (diameter != expected[L - 3] || !uniform) ok = false;
        if (a == 0) detail << (d == 2 ? "2D" : "3D") << " L=" << L << ": " << diameter << "  ";
      }
    }
  }
  detail << "(expected 18, 38, 78 per axis, beta = 1)";
  return {ok, detail.str()};
}

// ---- 5, 6, 7 ---------------------------------------------------------------

constexpr int kTrainPairs = 500;
constexpr int kHeldOut = 20;
constexpr std::int64_t kSteps = 2000;
constexpr std::int64_t kEarlySteps = 500;
constexpr double kLearningRate = 1e-3;

SynthSpec task_spec(std::uint64_t seed) {
  SynthSpec s;
  s.kind = SynthKind::Texture;
  s.extents = {64, 64};
  s.max_displacement = 8;
  s.smoothness = 8;
  s.seed = seed;
  return s;
}

struct Task {
  std::vector<Sample<float>> train;
  std::vector<SynthPair> held_out;
  std::vector<Sample<float>> held_out_samples;
};

const Task& task() {
  static const Task t = [] {
    Task t;
    for (int i = 0; i < kTrainPairs; ++i) t.train.push_back(to_sample<float>(gen_synthetic_pair(task_spec(100 + i))));
    for (int i = 0; i < kHeldOut; ++i) {
      t.held_out.push_back(gen_synthetic_pair(task_spec(900000 + i)));
      t.held_out_samples.push_back(to_sample<float>(t.held_out.back()));
    }
    return t;
  }();
  return t;
}

double endpoint_error(const DisplacementVolume& a, const DisplacementVolume& b) {
  const std::int64_t N = a.voxels();
  const int d = a.dims();
  double s = 0;
  for (std::int64_t p = 0; p < N; ++p) {
    double q = 0;
    for (int k = 0; k < d; ++k) {
      const double e = a.u[k * N + p] - b.u[k * N + p];
      q += e * e;
    }
    s += std::sqrt(q);
  }
  return s / static_cast<double>(N);
}

struct HeldOutReport {
  double epe = 0, epe_identity = 0, ncc = 0, ncc_identity = 0, sparsity = 0;
  int fold_free = 0;
};

HeldOutReport evaluate_held_out(const VfaModel<float>& model, int count) {
  const Task& t = task();
  HeldOutReport r;
  for (int i = 0; i < count; ++i) {
    const auto& s = t.held_out_samples[i];
    const auto reg = model.register_pair(s.fixed, s.moving);
    const auto phi = DisplacementVolume::from(reg.phi);
    r.epe += endpoint_error(phi, t.held_out[i].phi_gt);
    r.epe_identity += endpoint_error(DisplacementVolume::identity(phi.extents), t.held_out[i].phi_gt);
    r.ncc += -static_cast<double>(ncc_loss(s.fixed, warp(s.moving, reg.phi)).item());
    r.ncc_identity += -static_cast<double>(ncc_loss(s.fixed, s.moving).item());
    r.fold_free += nd_voxels(phi).count == 0;
    double sp = 0;
    for (const auto& tr : reg.traces) sp += sparsity_report(tr.weights);
    r.sparsity += sp / static_cast<double>(reg.traces.size());
  }
  r.epe /= count;
  r.epe_identity /= count;
  r.ncc /= count;
  r.ncc_identity /= count;
  r.sparsity /= count;
  return r;
}

struct RunRecord {
  std::vector<double> beta;   // after each step
  std::vector<double> total;  // per step
  HeldOutReport early;        // after kEarlySteps
  HeldOutReport final_report;
  double seconds = 0;
};

RunRecord train_run(const ModelConfig& cfg, std::int64_t steps) {
  const Task& t = task();
  VfaModel<float> model(cfg, 2);
  TrainConfig tc;
  tc.adam.learning_rate = kLearningRate;
  tc.epochs = static_cast<int>((steps + kTrainPairs - 1) / kTrainPairs);
  tc.max_steps = steps;
  tc.seed = cfg.seed;
  RunRecord rec;
  rec.beta.push_back(static_cast<double>(model.beta().item()));
  const auto t0 = Clock::now();
  double eval_seconds = 0;
  fit(model, t.train, std::vector<Sample<float>>{t.held_out_samples[0]}, tc, [&](const HistoryRow& row) {
    rec.beta.push_back(row.beta);
    rec.total.push_back(row.total);
    if (row.step + 1 == kEarlySteps) {
      const auto e0 = Clock::now();
      rec.early = evaluate_held_out(model, 10);
      eval_seconds += seconds_since(e0);
    }
    if ((row.step + 1) % 250 == 0) {
      std::fprintf(stderr, "  step %lld  loss %.4f  beta %.4f  %.0f s\n", static_cast<long long>(row.step + 1), row.total,
                   row.beta, seconds_since(t0));
    }
    return true;
  });
  rec.seconds = seconds_since(t0) - eval_seconds;
  rec.final_report = evaluate_held_out(model, kHeldOut);
  return rec;
}

ModelConfig task_model(bool diffeomorphic, std::optional<double> temperature) {
  ModelConfig cfg;
  cfg.beta0 = 0.1;
  cfg.diffeomorphic = diffeomorphic;
  cfg.attention.temperature = temperature;
  cfg.seed = 1;
  return cfg;
}

const RunRecord& baseline_run() {
  static const RunRecord r = train_run(task_model(false, std::nullopt), kSteps);
  return r;
}

double moving_average(const std::vector<double>& v, std::size_t end) {
  double s = 0;
  for (std::size_t i = end - 10; i < end; ++i) s += v[i];
  return s / 10.0;
}

Verdict beta_dynamics() {
  const RunRecord& base = baseline_run();
  // beta sampled every 100 steps over the first 500 must rise strictly.
  bool rising = true;
  std::ostringstream trace;
  for (std::int64_t s = 0; s <= kEarlySteps; s += 100) {
    trace << (s ? " " : "") << fmt("%.4f", base.beta[s]);
    if (s > 0 && !(base.beta[s] > base.beta[s - 100])) rising = false;
  }
  const double ma_first = moving_average(base.total, 10);
  const double ma_last = moving_average(base.total, kEarlySteps);
  const bool loss_down = ma_last < ma_first;
  const RunRecord cold = train_run(task_model(false, 0.05), kEarlySteps);
  const bool sharper = cold.final_report.sparsity > base.early.sparsity;
  return {rising && loss_down && sharper,
          fmt("beta at steps 0..500 by 100: %s (strictly rising: %s); loss MA10 %.4f -> %.4f; "
              "sparsity at step 500 with t = 0.05: %.3f vs sqrt(C): %.3f",
              trace.str().c_str(), rising ? "yes" : "no", ma_first, ma_last, cold.final_report.sparsity,
              base.early.sparsity)};
}

Verdict end_to_end() {
  const RunRecord& base = baseline_run();
  const auto& r = base.final_report;
  const double ratio = r.epe / r.epe_identity;
  return {ratio < 0.5 && r.ncc > 0.9 && base.seconds < 1800,
          fmt("%lld steps, %d held-out pairs: EPE %.3f vs identity %.3f (ratio %.3f < 0.5), NCC %.3f (> 0.9, identity "
              "%.3f), training %.0f s (< 1800 s)",
              static_cast<long long>(kSteps), kHeldOut, r.epe, r.epe_identity, ratio, r.ncc, r.ncc_identity, base.seconds)};
}

Verdict diffeomorphic_variant() {
  const RunRecord run = train_run(task_model(true, std::nullopt), kSteps);
  const auto& r = run.final_report;
  const double frac = static_cast<double>(r.fold_free) / kHeldOut;
  return {frac >= 0.95,
          fmt("%d of %d held-out pairs with nd_voxels = 0 (%.0f%%, >= 95%%); EPE ratio %.3f, NCC %.3f, training %.0f s",
              r.fold_free, kHeldOut, 100 * frac, r.epe / r.epe_identity, r.ncc, run.seconds)};
}

// ---- 8 ---------------------------------------------------------------------

Verdict metric_oracles() {
  bool ok = true;
  std::ostringstream os;
  for (const auto& o : metric_checks::compare(50, 2024)) {
    ok = ok && metric_checks::passed(o);
    os << o.metric << " " << (o.mismatches ? fmt("%lld mismatches", static_cast<long long>(o.mismatches)) : fmt("%.1e", o.max_error))
       << "; ";
  }
  os << "50 instances, reals within 1e-9, counts exact";
  return {ok, os.str()};
}

// ---- 9 ---------------------------------------------------------------------

template <typename T>
bool identity_contract(int d) {
  const std::vector<std::int64_t> ext = d == 2 ? std::vector<std::int64_t>{64, 64} : std::vector<std::int64_t>{16, 16, 16};
  SynthSpec s;
  s.extents = ext;
  s.smoothness = 3;
  s.max_displacement = 2;
  const auto pair = gen_synthetic_pair(s);
  const auto f = to_sample<T>(pair).fixed, m = to_sample<T>(pair).moving;
  ModelConfig cfg;
  if (d == 3) cfg.extractor.channels = {4, 8, 8};
  VfaModel<T> model(cfg, d);
  model.set_beta(0.0);
  const auto reg = model.register_pair(f, m);
  bool ok = same_bits(reg.phi.absolute(), identity_coordinates<T>(ext));
  for (T v : reg.phi.displacement().data()) ok = ok && v == T(0);
  ok = ok && same_bits(warp(m, reg.phi), m);
  ok = ok && same_bits(warp(m, TransformGrid<T>::identity(ext)), m);
  ok = ok && same_bits(warp(f, TransformGrid<T>::identity(ext)), f);
  return ok;
}

Verdict identity() {
  const bool a = identity_contract<float>(2), b = identity_contract<double>(2), c = identity_contract<float>(3),
             e = identity_contract<double>(3);
  return {a && b && c && e, fmt("beta = 0 gives phi == id and warp(m, id) == m bitwise: 2D f32 %s, 2D f64 %s, 3D f32 %s, 3D f64 %s",
                                a ? "ok" : "no", b ? "ok" : "no", c ? "ok" : "no", e ? "ok" : "no")};
}

// ---- 10 --------------------------------------------------------------------

Verdict loss_presets() {
  SynthSpec s;
  s.kind = SynthKind::CheckerOrgans;
  s.extents = {16, 16};
  s.smoothness = 3;
  s.max_displacement = 1.5;
  s.keypoints = 4;
  const auto sample = to_sample<float>(gen_synthetic_pair(s));
  ModelConfig cfg;
  cfg.extractor.channels = {4, 8};
  bool ok = true;
  std::ostringstream os;
  for (const auto& preset : LossRecipe::preset_names()) {
    VfaModel<float> model(cfg, 2);
    TrainConfig tc;
    tc.recipe = LossRecipe::from_preset(preset);
    tc.max_steps = 1;
    const auto r = fit(model, std::vector<Sample<float>>{sample}, {}, tc);
    std::ostringstream csv;
    r.history.write_csv(csv);
    std::istringstream in(csv.str());
    std::string l1, l2;
    std::getline(in, l1);
    std::getline(in, l2);
    std::ifstream g(std::string(VFA_GOLDEN_DIR) + "/history_" + preset + ".txt");
    std::string g1, g2;
    std::getline(g, g1);
    std::getline(g, g2);
    const bool match = g && l1 == g1 && l2 == g2;
    ok = ok && match;
    os << preset << " [" << tc.recipe.terms_string() << "] " << (match ? "matches" : "DIFFERS") << "; ";
  }
  return {ok, os.str() + "golden history headers"};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> all = {
      {1, "gradient integrity", gradient_integrity},
      {2, "attention exactness", attention_exactness},
      {3, "symmetry null", symmetry_null},
      {4, "search-region recurrence", search_region},
      {5, "beta dynamics", beta_dynamics},
      {6, "end-to-end recovery", end_to_end},
      {7, "diffeomorphic variant", diffeomorphic_variant},
      {8, "metric oracles", metric_oracles},
      {9, "identity contract", identity},
      {10, "loss presets", loss_presets},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s  %2d %-26s %s  [%.1f s]\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
