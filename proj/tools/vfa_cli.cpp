// vfa: command-line front end.
//
// Exit codes: 0 success, 1 internal error (including a diverged training
// run and failed gradient checks), 2 bad input or path (including usage and
// parameter errors), 3 shape or file-format error.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vfa/attention.hpp"
#include "vfa/checkpoint.hpp"
#include "vfa/dataio.hpp"
#include "vfa/error.hpp"
#include "vfa/gradcheck.hpp"
#include "vfa/metrics.hpp"
#include "vfa/model.hpp"
#include "vfa/simd/kernels.hpp"
#include "vfa/synth.hpp"
#include "vfa/train.hpp"

namespace fs = std::filesystem;
using namespace vfa;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitInput = 2;
constexpr int kExitShape = 3;

bool g_quiet = false;

void info(const std::string& msg) {
  if (!g_quiet) std::cerr << msg << '\n';
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::int64_t> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<std::int64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::logic_error&) {
      throw ParameterError(what + ": '" + s + "' is not a comma-separated integer list");
    }
  }
  if (out.empty()) throw ParameterError(what + " is empty");
  return out;
}

std::vector<double> parse_double_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::logic_error&) {
      throw ParameterError(what + ": '" + s + "' is not a comma-separated number list");
    }
  }
  return out;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " is required");
  if (!fs::exists(path)) throw IoError(what + " '" + path + "' does not exist");
}

Volume read_image_volume(const std::string& path, const std::string& what) {
  require_file(path, what);
  Volume v = read_volume(path);
  if (v.channels != 1) {
    throw FormatError(what + " '" + path + "' has " + std::to_string(v.channels) + " channels, expected 1");
  }
  return v;
}

// ---- shared model / training options ---------------------------------------

struct ModelFlags {
  std::string channels = "8,16,32,64,128";
  std::int64_t match_channels = 16;
  bool separate_weights = false;
  std::string temperature = "sqrt_dk";
  std::string similarity = "inner_product";
  int window = 3;
  double beta0 = kDefaultBeta;
  bool diffeomorphic = false;
  int integration_steps = 7;

  void add(CLI::App* app) {
    app->add_option("--channels", channels, "Feature widths per level, fine to coarse (sets the level count)");
    app->add_option("--match-channels", match_channels, "Width after the pre-matching conv");
    app->add_flag("--separate-weights", separate_weights, "Independent extractors for fixed and moving images");
    app->add_option("--temperature", temperature, "Softmax temperature, or sqrt_dk");
    app->add_option("--similarity", similarity, "inner_product or cosine");
    app->add_option("--window", window, "Attention window extent (odd, >= 3)");
    app->add_option("--beta0", beta0, "Initial beta");
    app->add_flag("--diffeomorphic", diffeomorphic, "Integrate each level by scaling and squaring");
    app->add_option("--integration-steps", integration_steps, "Scaling-and-squaring steps");
  }

  ModelConfig build(std::uint64_t seed) const {
    ModelConfig cfg;
    cfg.extractor.channels = parse_int_list(channels, "--channels");
    cfg.extractor.match_channels = match_channels;
    cfg.extractor.shared_weights = !separate_weights;
    if (temperature != "sqrt_dk") cfg.attention.temperature = parse_double_list(temperature, "--temperature").at(0);
    cfg.attention.similarity = parse_similarity(similarity);
    cfg.attention.window = window;
    cfg.beta0 = beta0;
    cfg.diffeomorphic = diffeomorphic;
    cfg.integration_steps = integration_steps;
    cfg.seed = seed;
    cfg.validate();
    return cfg;
  }
};

struct SynthFlags {
  std::string kind = "blobs";
  std::string size = "64,64";
  double magnitude = 4.0;
  double smoothness = 6.0;
  int keypoints = 0;

  void add(CLI::App* app, const std::string& prefix) {
    app->add_option("--" + prefix + "kind", kind, "blobs, checker-organs or texture");
    app->add_option("--" + prefix + "size", size, "Extents, e.g. 64,64");
    app->add_option("--" + prefix + "magnitude", magnitude, "Largest displacement norm in voxels");
    app->add_option("--" + prefix + "smoothness", smoothness, "Gaussian smoothing of the displacement, voxels");
    app->add_option("--" + prefix + "keypoints", keypoints, "Keypoint pairs to emit");
  }

  SynthSpec build(std::uint64_t seed) const {
    SynthSpec s;
    s.kind = parse_synth_kind(kind);
    s.extents = parse_int_list(size, "size");
    s.max_displacement = magnitude;
    s.smoothness = smoothness;
    s.keypoints = keypoints;
    s.seed = seed;
    s.validate();
    return s;
  }
};

// A case directory holds fixed.vol and moving.vol, optionally
// fixed_labels.vol, moving_labels.vol and keypoints.csv.
Sample<float> load_case(const fs::path& dir) {
  Sample<float> s;
  s.name = dir.filename().string();
  const Volume f = read_image_volume((dir / "fixed.vol").string(), "fixed image");
  const Volume m = read_image_volume((dir / "moving.vol").string(), "moving image");
  if (f.shape.extents != m.shape.extents) {
    throw DimensionError(dir.string() + ": fixed " + to_string(f.shape.extents) + " and moving " +
                         to_string(m.shape.extents) + " differ in shape");
  }
  s.fixed = f.to_var<float>();
  s.moving = m.to_var<float>();
  if (fs::exists(dir / "fixed_labels.vol") && fs::exists(dir / "moving_labels.vol")) {
    s.fixed_labels = read_volume(dir / "fixed_labels.vol").to_labels();
    s.moving_labels = read_volume(dir / "moving_labels.vol").to_labels();
  }
  if (fs::exists(dir / "keypoints.csv")) {
    auto kp = read_keypoints(dir / "keypoints.csv", f.shape.dims());
    for (const auto& w : kp.warnings) info("warning: " + w);
    kp.keypoints.spacing = f.shape.spacing;
    if (!kp.keypoints.empty()) s.keypoints = std::move(kp.keypoints);
  }
  return s;
}

std::vector<Sample<float>> load_dataset(const std::string& dir) {
  require_file(dir, "dataset directory");
  std::vector<fs::path> cases;
  if (fs::exists(fs::path(dir) / "fixed.vol")) {
    cases.emplace_back(dir);
  } else {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory()) cases.push_back(e.path());
    std::sort(cases.begin(), cases.end());
  }
  if (cases.empty()) throw UsageError("dataset directory '" + dir + "' contains no cases");
  std::vector<Sample<float>> out;
  for (const auto& c : cases) out.push_back(load_case(c));
  return out;
}

void write_case(const fs::path& dir, const SynthPair& pair) {
  fs::create_directories(dir);
  const std::vector<double> spacing(pair.phi_gt.extents.size(), 1.0);
  write_volume(dir / "fixed.vol", Volume::from_var(pair.fixed, spacing, Dtype::F32));
  write_volume(dir / "moving.vol", Volume::from_var(pair.moving, spacing, Dtype::F32));
  write_volume(dir / "phi_gt.vol", Volume::from_displacement(pair.phi_gt, spacing, Dtype::F64));
  if (pair.fixed_labels) {
    write_volume(dir / "fixed_labels.vol", Volume::from_labels(*pair.fixed_labels, spacing));
    write_volume(dir / "moving_labels.vol", Volume::from_labels(*pair.moving_labels, spacing));
  }
  if (pair.keypoints) write_keypoints(dir / "keypoints.csv", *pair.keypoints);
}

double mean_abs(const Var<float>& u) {
  double s = 0;
  for (float v : u.data()) s += std::abs(static_cast<double>(v));
  return u.numel() ? s / static_cast<double>(u.numel()) : 0.0;
}

// Per-voxel displacement norm; 3-D volumes are cut at the middle of the
// last axis.
void write_norm_heatmap(const fs::path& path, const Var<float>& u) {
  const Extents3 e = spatial_extents(u.shape());
  const std::int64_t N = e.count();
  const std::int64_t mid = e.dims == 3 ? e.n[2] / 2 : 0;
  std::vector<double> map(static_cast<std::size_t>(e.n[0] * e.n[1]));
  const auto d = u.data();
  for (std::int64_t i = 0; i < e.n[0]; ++i)
    for (std::int64_t j = 0; j < e.n[1]; ++j) {
      const std::int64_t p = (i * e.n[1] + j) * e.n[2] + mid;
      double s = 0;
      for (int a = 0; a < e.dims; ++a) s += static_cast<double>(d[a * N + p]) * d[a * N + p];
      map[i * e.n[1] + j] = std::sqrt(s);
    }
  write_pgm(path, map, e.n[0], e.n[1]);
}

// ---- train -----------------------------------------------------------------

struct TrainCmd {
  ModelFlags model;
  SynthFlags synth;
  std::string data, val, out = "run";
  int synthetic = 0;
  std::string preset = "t1-atlas";
  std::vector<std::string> weights;
  int epochs = 1;
  std::int64_t steps = 0;
  double lr = 1e-4;
  bool flip = false;
  int ncc_window = 9;
  int mi_bins = 32;
  int log_every = 10;
};

int run_train(const TrainCmd& c, std::uint64_t seed) {
  const ModelConfig mcfg = c.model.build(seed);
  TrainConfig tcfg;
  tcfg.recipe = LossRecipe::from_preset(c.preset);
  tcfg.recipe.ncc_window = c.ncc_window;
  tcfg.recipe.mi_bins = c.mi_bins;
  for (const auto& w : c.weights) {
    const auto eq = w.find('=');
    if (eq == std::string::npos) throw ParameterError("--weight expects term=value, got '" + w + "'");
    tcfg.recipe.set_weight(w.substr(0, eq), parse_double_list(w.substr(eq + 1), "--weight").at(0));
  }
  tcfg.adam.learning_rate = c.lr;
  tcfg.flip_augment = c.flip;
  tcfg.seed = seed;
  tcfg.recipe.validate();

  std::vector<Sample<float>> train, val;
  if (c.synthetic > 0) {
    for (int i = 0; i < c.synthetic; ++i) {
      train.push_back(to_sample<float>(gen_synthetic_pair(c.synth.build(seed * 1000003 + i)), "synth" + std::to_string(i)));
    }
  } else {
    if (c.data.empty()) throw UsageError("train needs --data DIR or --synthetic N");
    train = load_dataset(c.data);
  }
  if (!c.val.empty()) val = load_dataset(c.val);
  for (const auto& s : train) {
    if (tcfg.recipe.needs_labels() && !s.fixed_labels) {
      throw UsageError("preset '" + c.preset + "' needs label maps; case '" + s.name + "' has none");
    }
    if (tcfg.recipe.needs_keypoints() && !s.keypoints) {
      throw UsageError("preset '" + c.preset + "' needs keypoints; case '" + s.name + "' has none");
    }
  }
  const int dims = static_cast<int>(train[0].fixed.rank()) - 1;
  for (const auto& s : train) {
    if (s.fixed.shape() != train[0].fixed.shape()) {
      throw DimensionError("training cases differ in shape: " + to_string(s.fixed.shape()) + " vs " +
                           to_string(train[0].fixed.shape()));
    }
  }
  check_divisible(spatial_shape(train[0].fixed.shape()), mcfg.extractor.divisor());
  tcfg.epochs = c.epochs;
  if (c.steps > 0) {
    tcfg.max_steps = c.steps;
    tcfg.epochs = static_cast<int>((c.steps + static_cast<std::int64_t>(train.size()) - 1) /
                                   static_cast<std::int64_t>(train.size()));
  }

  VfaModel<float> model(mcfg, dims);
  info(model.describe());
  const auto t0 = std::chrono::steady_clock::now();
  auto result = fit(model, train, val, tcfg, [&](const HistoryRow& r) {
    if (c.log_every > 0 && (r.step % c.log_every == 0 || r.val_metric)) {
      std::ostringstream os;
      os << "step " << r.step << " epoch " << r.epoch << " loss " << fmt(r.total) << " beta " << fmt(r.beta);
      if (r.val_metric) os << " val " << fmt(*r.val_metric);
      info(os.str());
    }
    return true;
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(c.out);
  {
    std::ofstream os(fs::path(c.out) / "history.csv");
    if (!os) throw IoError("cannot write '" + (fs::path(c.out) / "history.csv").string() + "'");
    result.history.write_csv(os);
  }
  // Self-registration: the largest mean |u| over training fixed images
  // registered to themselves, and twice that plus 1e-3 as the bound.
  double self_max = 0;
  for (const auto& s : train) {
    const auto reg = model.register_pair(s.fixed.detach(), s.fixed.detach());
    self_max = std::max(self_max, mean_abs(reg.phi.displacement()));
  }
  Metadata meta{{"preset", tcfg.recipe.preset},
                {"terms", tcfg.recipe.terms_string()},
                {"steps", std::to_string(result.history.rows.size())},
                {"final_beta", fmt(static_cast<double>(model.beta().item()))},
                {"self_registration_mean_abs_u", fmt(self_max)},
                {"self_registration_bound", fmt(2 * self_max + 1e-3)},
                {"train_seconds", fmt(secs)}};
  save_checkpoint(fs::path(c.out) / "final.ckpt", model, meta);
  if (!result.best_values.empty()) {
    const auto final_values = [&] {
      std::vector<std::vector<float>> v;
      for (const auto& [n, p] : model.parameters()) v.emplace_back(p.data().begin(), p.data().end());
      return v;
    }();
    load_values(model, result.best_values);
    meta["best_epoch"] = std::to_string(result.best_epoch);
    meta["best_val_metric"] = fmt(result.best_metric);
    save_checkpoint(fs::path(c.out) / "best.ckpt", model, meta);
    load_values(model, final_values);
  }
  info("wrote " + (fs::path(c.out) / "final.ckpt").string() + ", best.ckpt and history.csv (" +
       std::to_string(result.history.rows.size()) + " steps, " + fmt(secs) + " s)");
  return kExitOk;
}

// ---- register --------------------------------------------------------------

struct RegisterCmd {
  std::string checkpoint, fixed, moving, out, save_warped, save_intermediates, save_heatmap;
  std::optional<double> beta;
};

int run_register(const RegisterCmd& c) {
  require_file(c.checkpoint, "checkpoint");
  if (c.out.empty()) throw UsageError("register needs --out");
  Metadata meta;
  VfaModel<float> model = load_checkpoint<float>(c.checkpoint, &meta);
  const Volume f = read_image_volume(c.fixed, "fixed image");
  const Volume m = read_image_volume(c.moving, "moving image");
  if (f.shape.extents != m.shape.extents) {
    throw DimensionError("fixed " + to_string(f.shape.extents) + " and moving " + to_string(m.shape.extents) +
                         " images differ in shape");
  }
  if (f.shape.dims() != model.dims()) {
    throw DimensionError("checkpoint is " + std::to_string(model.dims()) + "-D, images are " +
                         std::to_string(f.shape.dims()) + "-D");
  }
  if (c.beta) model.set_beta(*c.beta);
  const Var<float> fv = f.to_var<float>(), mv = m.to_var<float>();
  const auto reg = model.register_pair(fv, mv);
  const auto phi = DisplacementVolume::from(reg.phi);
  write_volume(c.out, Volume::from_displacement(phi, f.shape.spacing, Dtype::F32));
  if (!c.save_warped.empty()) {
    write_volume(c.save_warped, Volume::from_var(warp(mv, reg.phi), f.shape.spacing, Dtype::F32));
  }
  if (!c.save_intermediates.empty()) {
    fs::create_directories(c.save_intermediates);
    const int L = static_cast<int>(reg.transforms.size());
    for (int k = 0; k < L; ++k) {
      const int level = L - 1 - k;
      const auto field = DisplacementVolume::from(reg.transforms[k]);
      std::vector<double> sp = f.shape.spacing;
      for (auto& s : sp) s *= static_cast<double>(1 << level);
      write_volume(fs::path(c.save_intermediates) / ("phi_level" + std::to_string(level) + ".vol"),
                   Volume::from_displacement(field, sp, Dtype::F32));
    }
  }
  if (!c.save_heatmap.empty()) write_norm_heatmap(c.save_heatmap, reg.phi.displacement());
  std::cout << "mean_abs_u " << fmt(mean_abs(reg.phi.displacement())) << "\n";
  std::cout << "beta " << fmt(static_cast<double>(model.beta().item())) << "\n";
  if (auto it = meta.find("self_registration_bound"); it != meta.end()) {
    std::cout << "self_registration_bound " << it->second << "\n";
  }
  return kExitOk;
}

// ---- warp ------------------------------------------------------------------

struct WarpCmd {
  std::string moving, transform, out;
  bool labels = false;
};

int run_warp(const WarpCmd& c) {
  if (c.out.empty()) throw UsageError("warp needs --out");
  require_file(c.moving, "moving volume");
  require_file(c.transform, "transform");
  const Volume m = read_volume(c.moving);
  const DisplacementVolume phi = read_volume(c.transform).to_displacement();
  if (m.shape.extents != phi.extents) {
    throw DimensionError("moving volume " + to_string(m.shape.extents) + " and transform " +
                         to_string(phi.extents) + " differ in shape");
  }
  if (c.labels) {
    write_volume(c.out, Volume::from_labels(warp_labels_nearest(m.to_labels(), phi), m.shape.spacing));
  } else {
    const Var<double> w = warp(m.to_var<double>(), phi.to_transform<double>());
    write_volume(c.out, Volume::from_var(w, m.shape.spacing, m.dtype == Dtype::I32 ? Dtype::F32 : m.dtype));
  }
  return kExitOk;
}

// ---- evaluate --------------------------------------------------------------

struct EvaluateCmd {
  std::string transform, fixed_labels, moving_labels, keypoints, spacing, cases, out, name = "case0";
};

struct CaseSpec {
  std::string name, transform, fixed_labels, moving_labels, keypoints;
};

const char* kMetricHeader = "case,dsc,hd95,nd_voxels,nd_voxels_pct,nd_volume,nd_volume_pct,sdlogj,tre,tre30";

std::vector<CaseSpec> read_case_list(const std::string& path) {
  require_file(path, "case list");
  std::ifstream is(path);
  std::vector<CaseSpec> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (lineno == 1 && !cells.empty() && cells[0] == "case") continue;
    cells.resize(5);
    if (cells[0].empty() || cells[1].empty()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": each row needs case,transform[,...]");
    }
    out.push_back({cells[0], cells[1], cells[2], cells[3], cells[4]});
  }
  return out;
}

int run_evaluate(const EvaluateCmd& c) {
  std::vector<CaseSpec> cases;
  if (!c.cases.empty()) {
    cases = read_case_list(c.cases);
  } else if (!c.transform.empty()) {
    cases.push_back({c.name, c.transform, c.fixed_labels, c.moving_labels, c.keypoints});
  }
  if (cases.empty()) throw UsageError("evaluate needs --transform or --cases with at least one case");
  std::ostringstream csv;
  csv << kMetricHeader << '\n';
  std::vector<std::vector<double>> columns(8);
  std::vector<double> tre_means;
  for (const auto& cs : cases) {
    require_file(cs.transform, "transform");
    const Volume tv = read_volume(cs.transform);
    const DisplacementVolume phi = tv.to_displacement();
    std::vector<double> spacing = c.spacing.empty() ? tv.shape.spacing : parse_double_list(c.spacing, "--spacing");
    if (spacing.size() != phi.extents.size()) throw DimensionError("--spacing needs one value per axis");
    std::vector<std::optional<double>> row(8);
    if (!cs.fixed_labels.empty() || !cs.moving_labels.empty()) {
      require_file(cs.fixed_labels, "fixed labels");
      require_file(cs.moving_labels, "moving labels");
      const LabelMap fl = read_volume(cs.fixed_labels).to_labels();
      const LabelMap ml = read_volume(cs.moving_labels).to_labels();
      if (fl.extents != phi.extents || ml.extents != phi.extents) {
        throw DimensionError("label maps and transform of case '" + cs.name + "' differ in shape");
      }
      const LabelMap warped = warp_labels_nearest(ml, phi);
      const double d = dice_score(fl, warped).mean;
      if (std::isfinite(d)) row[0] = d;
      row[1] = mean_hd95(fl, warped, spacing);
    }
    const FoldCount nv = nd_voxels(phi);
    const FoldVolume vol = nd_volume(phi);
    row[2] = static_cast<double>(nv.count);
    row[3] = nv.percent;
    row[4] = vol.volume;
    row[5] = vol.percent;
    row[6] = sdlogj(phi);
    if (!cs.keypoints.empty()) {
      require_file(cs.keypoints, "keypoints");
      auto kp = read_keypoints(cs.keypoints, phi.dims());
      for (const auto& w : kp.warnings) info("warning: " + w);
      kp.keypoints.spacing = spacing;
      if (!kp.keypoints.empty()) {
        row[7] = mean_tre(phi, kp.keypoints);
        tre_means.push_back(*row[7]);
      }
    }
    csv << cs.name;
    for (std::size_t k = 0; k < row.size(); ++k) {
      csv << ',';
      if (row[k]) {
        csv << (k == 2 ? std::to_string(static_cast<std::int64_t>(*row[k])) : fmt(*row[k]));
        columns[k].push_back(*row[k]);
      }
    }
    csv << ",\n";
  }
  csv << "summary";
  for (const auto& col : columns) {
    csv << ',';
    if (!col.empty()) csv << fmt(std::accumulate(col.begin(), col.end(), 0.0) / static_cast<double>(col.size()));
  }
  csv << ',';
  if (!tre_means.empty()) csv << fmt(tre30(tre_means));
  csv << '\n';
  if (c.out.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream os(c.out);
    if (!os) throw IoError("cannot write '" + c.out + "'");
    os << csv.str();
  }
  return kExitOk;
}

// ---- synth -----------------------------------------------------------------

struct SynthCmd {
  SynthFlags synth;
  std::string out;
  int count = 1;
};

int run_synth(const SynthCmd& c, std::uint64_t seed) {
  if (c.out.empty()) throw UsageError("synth needs --out");
  if (c.count < 1) throw ParameterError("--count must be >= 1");
  for (int i = 0; i < c.count; ++i) {
    const SynthPair pair = gen_synthetic_pair(c.synth.build(seed * 1000003 + i));
    const fs::path dir = c.count == 1 ? fs::path(c.out) : fs::path(c.out) / ("case" + std::to_string(i));
    write_case(dir, pair);
    info("wrote " + dir.string() + " (" + std::to_string(pair.attempts) + " draw(s))");
  }
  return kExitOk;
}

// ---- inspect ---------------------------------------------------------------

struct InspectCmd {
  std::string checkpoint, volume, fixed, moving, out_dir;
};

int run_inspect(const InspectCmd& c) {
  if (!c.volume.empty()) {
    require_file(c.volume, "volume");
    const Volume v = read_volume(c.volume);
    std::cout << "dims " << to_string(v.shape.extents) << "\nchannels " << v.channels << "\ndtype "
              << to_string(v.dtype) << "\nspacing";
    for (double s : v.shape.spacing) std::cout << ' ' << fmt(s);
    const auto [lo, hi] = std::minmax_element(v.values.begin(), v.values.end());
    std::cout << "\nmin " << fmt(*lo) << "\nmax " << fmt(*hi) << '\n';
    return kExitOk;
  }
  require_file(c.checkpoint, "checkpoint");
  Metadata meta;
  VfaModel<float> model = load_checkpoint<float>(c.checkpoint, &meta);
  std::cout << model.describe();
  for (const auto& [k, v] : meta) std::cout << "meta " << k << " = " << v << '\n';
  if (c.fixed.empty() && c.moving.empty()) return kExitOk;
  const Volume f = read_image_volume(c.fixed, "fixed image");
  const Volume m = read_image_volume(c.moving, "moving image");
  if (f.shape.extents != m.shape.extents) throw DimensionError("fixed and moving images differ in shape");
  const auto reg = model.register_pair(f.to_var<float>(), m.to_var<float>());
  std::ostringstream csv;
  csv << "level,extents,sparsity,mean_abs_local_u,mean_abs_u\n";
  const int L = static_cast<int>(reg.transforms.size());
  for (int k = 0; k < L; ++k) {
    const int level = L - 1 - k;
    std::string ext;
    for (auto n : reg.transforms[k].extents()) ext += (ext.empty() ? "" : "x") + std::to_string(n);
    csv << level << ',' << ext << ',' << fmt(sparsity_report(reg.traces[k].weights)) << ','
        << fmt(mean_abs(reg.traces[k].local_displacement)) << ',' << fmt(mean_abs(reg.transforms[k].displacement()))
        << '\n';
  }
  std::cout << csv.str();
  if (!c.out_dir.empty()) {
    fs::create_directories(c.out_dir);
    std::ofstream(fs::path(c.out_dir) / "levels.csv") << csv.str();
    // Finest-level attention maps, one row per voxel.
    const Var<float>& w = reg.traces.back().weights;
    std::ofstream att(fs::path(c.out_dir) / "attention.csv");
    att << "voxel";
    for (std::int64_t k = 0; k < w.dim(1); ++k) att << ",w" << k;
    att << '\n';
    const auto d = w.data();
    for (std::int64_t i = 0; i < w.dim(0); ++i) {
      att << i;
      for (std::int64_t k = 0; k < w.dim(1); ++k) att << ',' << fmt(d[i * w.dim(1) + k]);
      att << '\n';
    }
    for (int k = 0; k < L; ++k) {
      write_norm_heatmap(fs::path(c.out_dir) / ("norm_u_level" + std::to_string(L - 1 - k) + ".pgm"),
                         reg.transforms[k].displacement());
    }
    const auto phi = DisplacementVolume::from(reg.phi);
    if (phi.dims() == 2) {
      auto det = jacobian_determinant(phi);
      for (auto& v : det) v = std::max(v, 0.0);
      write_pgm(fs::path(c.out_dir) / "jacobian.pgm", det, phi.extents[0] - 2, phi.extents[1] - 2);
    }
  }
  return kExitOk;
}

// ---- gradcheck -------------------------------------------------------------

struct GradcheckCmd {
  GradcheckOptions opts;
  bool no_model = false;
  bool list = false;
};

int run_gradcheck(GradcheckCmd c, std::uint64_t seed) {
  if (c.list) {
    for (const auto& n : gradcheck_names(true)) std::cout << n << '\n';
    return kExitOk;
  }
  c.opts.include_model = !c.no_model;
  c.opts.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckReport r = run_gradchecks(c.opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << std::left << std::setw(24) << "op" << std::setw(18) << "max_rel_err" << std::setw(10) << "checked"
            << "result\n";
  for (const auto& e : r.entries) {
    std::cout << std::left << std::setw(24) << e.op << std::setw(18) << fmt(e.max_rel_error) << std::setw(10)
              << e.checked << (e.passed ? "PASS" : "FAIL") << '\n';
  }
  std::cout << (r.all_passed() ? "all checks passed" : "FAILED:");
  for (const auto& f : r.failures()) std::cout << ' ' << f;
  std::cout << " (" << fmt(secs) << " s)\n";
  return r.all_passed() ? kExitOk : kExitInternal;
}

// Applies "key = value" lines on top of the parsed command line. Keys are
// long option names of the selected subcommand or of the top level.
void apply_config(CLI::App& app, CLI::App* sub, const std::string& path) {
  require_file(path, "config file");
  const ConfigMap cfg = read_run_config(path);
  for (const auto& [key, value] : cfg) {
    CLI::Option* opt = sub ? sub->get_option_no_throw("--" + key) : nullptr;
    if (!opt) opt = app.get_option_no_throw("--" + key);
    if (!opt) throw ParameterError(path + ": unknown setting '" + key + "'");
    opt->clear();
    if (opt->get_type_size() == 0) {
      if (value == "true" || value == "1") {
        opt->add_result(std::string("true"));
      } else if (value == "false" || value == "0") {
        opt->add_result(std::string("false"));
      } else {
        throw ParameterError(path + ": '" + key + "' expects true or false");
      }
    } else {
      std::stringstream ss(value);
      std::string item;
      std::vector<std::string> items;
      if (opt->get_expected_max() > 1) {
        while (std::getline(ss, item, ';')) items.push_back(item);
      } else {
        items.push_back(value);
      }
      for (const auto& it : items) opt->add_result(it);
    }
    opt->run_callback();
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vector field attention registration"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string isa = "auto";
  std::string config;
  app.add_option("--seed", seed, "Random seed");
  app.add_flag("--deterministic", deterministic, "Pin the scalar kernels so results do not depend on the CPU");
  app.add_option("--isa", isa, "Kernel variant: auto, scalar or avx2");
  app.add_option("--config", config, "key = value file; its settings override command-line flags");
  app.add_flag("--quiet", g_quiet, "Suppress progress messages");

  TrainCmd train;
  auto* train_app = app.add_subcommand("train", "Train a model and write checkpoints plus history.csv");
  train.model.add(train_app);
  train.synth.add(train_app, "synth-");
  train_app->add_option("--data", train.data, "Dataset directory (one sub-directory per case)");
  train_app->add_option("--val", train.val, "Validation dataset directory");
  train_app->add_option("--synthetic", train.synthetic, "Train on N generated pairs instead of --data");
  train_app->add_option("--out", train.out, "Output directory");
  train_app->add_option("--preset", train.preset, "t1-atlas, multimodal, weakly-sup or semi-sup-tre");
  train_app->add_option("--weight", train.weights, "Override a term weight, e.g. diffusion=0.5");
  train_app->add_option("--epochs", train.epochs, "Epochs over the dataset");
  train_app->add_option("--steps", train.steps, "Total optimizer steps (overrides --epochs)");
  train_app->add_option("--lr", train.lr, "Adam learning rate");
  train_app->add_flag("--flip", train.flip, "Random paired flips along every axis");
  train_app->add_option("--ncc-window", train.ncc_window, "NCC window extent");
  train_app->add_option("--mi-bins", train.mi_bins, "MI histogram bins");
  train_app->add_option("--log-every", train.log_every, "Progress message interval in steps");

  RegisterCmd reg;
  auto* reg_app = app.add_subcommand("register", "Register a moving image to a fixed image");
  reg_app->add_option("--checkpoint", reg.checkpoint, "Model checkpoint")->required();
  reg_app->add_option("--fixed", reg.fixed, "Fixed image volume")->required();
  reg_app->add_option("--moving", reg.moving, "Moving image volume")->required();
  reg_app->add_option("--out", reg.out, "Output displacement volume")->required();
  reg_app->add_option("--save-warped", reg.save_warped, "Also write the warped moving image");
  reg_app->add_option("--save-intermediates", reg.save_intermediates, "Directory for per-level transforms");
  reg_app->add_option("--save-heatmap", reg.save_heatmap, "PGM of the displacement norm");
  reg_app->add_option("--beta", reg.beta, "Override the learned beta");

  WarpCmd wc;
  auto* warp_app = app.add_subcommand("warp", "Resample a volume with a displacement volume");
  warp_app->add_option("--moving", wc.moving, "Volume to resample")->required();
  warp_app->add_option("--transform", wc.transform, "Displacement volume")->required();
  warp_app->add_option("--out", wc.out, "Output volume")->required();
  warp_app->add_flag("--labels", wc.labels, "Nearest-neighbour resampling of a label map");

  EvaluateCmd ev;
  auto* ev_app = app.add_subcommand("evaluate", "Write a metrics CSV");
  ev_app->add_option("--transform", ev.transform, "Displacement volume");
  ev_app->add_option("--fixed-labels", ev.fixed_labels, "Fixed label volume");
  ev_app->add_option("--moving-labels", ev.moving_labels, "Moving label volume");
  ev_app->add_option("--keypoints", ev.keypoints, "Keypoint CSV");
  ev_app->add_option("--spacing", ev.spacing, "Millimetres per axis (default: from the transform header)");
  ev_app->add_option("--cases", ev.cases, "CSV of case,transform,fixed_labels,moving_labels,keypoints");
  ev_app->add_option("--name", ev.name, "Case name for a single --transform");
  ev_app->add_option("--out", ev.out, "Output CSV (default: stdout)");

  SynthCmd sy;
  auto* synth_app = app.add_subcommand("synth", "Generate synthetic pairs with ground truth");
  sy.synth.add(synth_app, "");
  synth_app->add_option("--count", sy.count, "Number of pairs");
  synth_app->add_option("--out", sy.out, "Output directory")->required();

  InspectCmd in;
  auto* inspect_app = app.add_subcommand("inspect", "Describe a checkpoint or volume; dump attention statistics");
  inspect_app->add_option("--checkpoint", in.checkpoint, "Model checkpoint");
  inspect_app->add_option("--volume", in.volume, "Volume file to describe");
  inspect_app->add_option("--fixed", in.fixed, "Fixed image for attention statistics");
  inspect_app->add_option("--moving", in.moving, "Moving image for attention statistics");
  inspect_app->add_option("--out", in.out_dir, "Directory for CSV and PGM dumps");

  GradcheckCmd gc;
  auto* gc_app = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  gc_app->add_option("--size", gc.opts.size, "Square 2-D instance extent");
  gc_app->add_option("--tolerance", gc.opts.tolerance, "Largest accepted relative error");
  gc_app->add_option("--inject-sign-bug", gc.opts.inject_sign_bug, "Negate the analytic gradient of one check");
  gc_app->add_flag("--no-model", gc.no_model, "Skip the full-model check");
  gc_app->add_flag("--list", gc.list, "List check names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    CLI::App* selected = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front();
    if (!config.empty()) apply_config(app, selected, config);
    if (deterministic) {
      simd::set_isa(simd::Isa::Scalar);
    } else {
      const simd::Isa want = simd::parse_isa(isa);
      if (!simd::isa_supported(want)) throw ParameterError("ISA '" + isa + "' is not supported on this CPU");
      simd::set_isa(want);
    }
    const std::string name = selected->get_name();
    if (name == "train") return run_train(train, seed);
    if (name == "register") return run_register(reg);
    if (name == "warp") return run_warp(wc);
    if (name == "evaluate") return run_evaluate(ev);
    if (name == "synth") return run_synth(sy, seed);
    if (name == "inspect") return run_inspect(in);
    if (name == "gradcheck") return run_gradcheck(gc, seed);
    return kExitInternal;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitShape;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitShape;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInternal;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}
