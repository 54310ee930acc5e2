#include "vfa/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "vfa/error.hpp"
#include "vfa/losses.hpp"
#include "vfa/metrics.hpp"

namespace vfa {

namespace {

const std::vector<std::string> kTermNames = {"ncc", "mi", "mse", "diffusion", "dice", "tre"};

std::string format_weight(double w) {
  std::ostringstream os;
  os << std::setprecision(12) << w;
  return os.str();
}

}  // namespace

LossRecipe LossRecipe::from_preset(const std::string& name) {
  LossRecipe r;
  r.preset = name;
  if (name == "t1-atlas") {
    r.terms = {{"ncc", 1.0}, {"diffusion", 1.0}};
  } else if (name == "multimodal") {
    r.terms = {{"mi", 1.0}, {"diffusion", 0.2}};
  } else if (name == "weakly-sup") {
    r.terms = {{"mse", 1.0}, {"diffusion", 0.05}, {"dice", 1.0}};
  } else if (name == "semi-sup-tre") {
    r.terms = {{"mse", 5.0}, {"diffusion", 0.2}, {"tre", 0.05}};
  } else {
    throw ParameterError("unknown loss preset '" + name + "' (expected t1-atlas, multimodal, weakly-sup or semi-sup-tre)");
  }
  return r;
}

std::vector<std::string> LossRecipe::preset_names() { return {"t1-atlas", "multimodal", "weakly-sup", "semi-sup-tre"}; }

LossRecipe LossRecipe::parse_terms(const std::string& spec) {
  LossRecipe r;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ParameterError("loss term '" + item + "' must read name:weight");
    LossTerm t;
    t.name = item.substr(0, colon);
    try {
      std::size_t used = 0;
      t.weight = std::stod(item.substr(colon + 1), &used);
      if (used != item.size() - colon - 1) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
      throw ParameterError("loss term '" + item + "' has a malformed weight");
    }
    r.terms.push_back(t);
  }
  r.validate();
  return r;
}

bool LossRecipe::uses(const std::string& term) const {
  return std::any_of(terms.begin(), terms.end(), [&](const LossTerm& t) { return t.name == term; });
}

void LossRecipe::set_weight(const std::string& term, double weight) {
  for (auto& t : terms) {
    if (t.name == term) {
      t.weight = weight;
      validate();
      return;
    }
  }
  terms.push_back({term, weight});
  validate();
}

std::string LossRecipe::terms_string() const {
  std::string s;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (i) s += ',';
    s += terms[i].name + ':' + format_weight(terms[i].weight);
  }
  return s;
}

void LossRecipe::validate() const {
  if (terms.empty()) throw ParameterError("loss recipe has no terms");
  std::set<std::string> seen;
  for (const auto& t : terms) {
    if (std::find(kTermNames.begin(), kTermNames.end(), t.name) == kTermNames.end()) {
      throw ParameterError("unknown loss term '" + t.name + "'");
    }
    if (!seen.insert(t.name).second) throw ParameterError("loss term '" + t.name + "' listed twice");
    if (!(t.weight >= 0) || !std::isfinite(t.weight)) {
      throw ParameterError("loss weight of '" + t.name + "' must be finite and nonnegative");
    }
  }
  if (ncc_window < 1 || ncc_window % 2 == 0) throw ParameterError("ncc window must be odd");
  if (mi_bins < 2) throw ParameterError("mi bins must be >= 2");
}

// ---- optimizer -------------------------------------------------------------

template <typename T>
Adam<T>::Adam(NamedParams<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.learning_rate > 0)) throw ParameterError("learning rate must be positive");
  if (!(cfg_.beta1 >= 0 && cfg_.beta1 < 1 && cfg_.beta2 >= 0 && cfg_.beta2 < 1)) {
    throw ParameterError("Adam moment parameters must lie in [0, 1)");
  }
  for (const auto& [name, p] : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var<T>& p = params_[k].second;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto x = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double update = cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      x[i] = static_cast<T>(static_cast<double>(x[i]) - update);
    }
    p.zero_grad();
  }
}

// ---- loss ------------------------------------------------------------------

template <typename T>
LossValue<T> evaluate_loss(const VfaModel<T>& model, const Sample<T>& sample, const LossRecipe& recipe) {
  recipe.validate();
  if (recipe.needs_labels() && (!sample.fixed_labels || !sample.moving_labels)) {
    throw UsageError("loss recipe '" + recipe.preset + "' needs label maps for sample '" + sample.name + "'");
  }
  if (recipe.needs_keypoints() && !sample.keypoints) {
    throw UsageError("loss recipe '" + recipe.preset + "' needs keypoints for sample '" + sample.name + "'");
  }
  LossValue<T> out;
  out.registration = model.register_pair(sample.fixed, sample.moving);
  const TransformGrid<T>& phi = out.registration.phi;
  const Var<T> warped = warp(sample.moving, phi);
  for (const auto& term : recipe.terms) {
    Var<T> v;
    if (term.name == "ncc") {
      v = ncc_loss(sample.fixed, warped, recipe.ncc_window);
    } else if (term.name == "mi") {
      v = mi_loss(sample.fixed, warped, recipe.mi_bins);
    } else if (term.name == "mse") {
      v = mse_loss(sample.fixed, warped);
    } else if (term.name == "diffusion") {
      v = diffusion_reg(phi.displacement());
    } else if (term.name == "dice") {
      const auto cf = sample.fixed_labels->classes();
      const auto cm = sample.moving_labels->classes();
      std::set<std::int32_t> all(cf.begin(), cf.end());
      all.insert(cm.begin(), cm.end());
      const std::vector<std::int32_t> classes(all.begin(), all.end());
      if (classes.empty()) throw UsageError("dice term: sample '" + sample.name + "' has no foreground labels");
      v = dice_loss(one_hot<T>(*sample.fixed_labels, classes), warp(one_hot<T>(*sample.moving_labels, classes), phi));
    } else if (term.name == "tre") {
      v = tre_loss(phi, *sample.keypoints);
    }
    out.terms.push_back(v);
    const Var<T> weighted = mul_scalar(v, static_cast<T>(term.weight));
    out.total = out.total.defined() ? add(out.total, weighted) : weighted;
  }
  return out;
}

namespace {

template <typename T>
std::string displacement_stats(const Registration<T>& reg) {
  std::ostringstream os;
  for (std::size_t k = 0; k < reg.transforms.size(); ++k) {
    const auto u = reg.transforms[k].displacement().data();
    const auto lu = reg.traces[k].local_displacement.data();
    double mx = 0, mean = 0, lmx = 0;
    std::int64_t bad = 0;
    for (T v : u) {
      if (!std::isfinite(static_cast<double>(v))) {
        ++bad;
        continue;
      }
      mx = std::max(mx, std::abs(static_cast<double>(v)));
      mean += std::abs(static_cast<double>(v));
    }
    for (T v : lu)
      if (std::isfinite(static_cast<double>(v))) lmx = std::max(lmx, std::abs(static_cast<double>(v)));
    mean /= static_cast<double>(std::max<std::size_t>(u.size(), 1));
    os << "\n  level " << (reg.transforms.size() - 1 - k) << ' ' << to_string(reg.transforms[k].displacement().shape())
       << ": max|u| " << mx << ", mean|u| " << mean << ", non-finite " << bad << ", max|local u| " << lmx;
  }
  return os.str();
}

}  // namespace

template <typename T>
StepReport train_step(VfaModel<T>& model, Adam<T>& opt, const Sample<T>& sample, const LossRecipe& recipe) {
  LossValue<T> loss = evaluate_loss(model, sample, recipe);
  StepReport r;
  r.total = static_cast<double>(loss.total.item());
  for (const auto& t : loss.terms) r.terms.push_back(static_cast<double>(t.item()));
  if (!std::isfinite(r.total)) {
    std::ostringstream os;
    os << "non-finite loss on sample '" << sample.name << "' (";
    for (std::size_t i = 0; i < r.terms.size(); ++i) os << (i ? ", " : "") << recipe.terms[i].name << '=' << r.terms[i];
    os << "), beta " << static_cast<double>(model.beta().item()) << "; displacement per level:"
       << displacement_stats(loss.registration);
    throw NumericalError(os.str());
  }
  backward(loss.total);
  opt.step();
  r.beta = static_cast<double>(model.beta().item());
  return r;
}

// ---- augmentation ----------------------------------------------------------

namespace {

template <typename V>
std::vector<V> flip_array(const std::vector<V>& v, std::int64_t channels, const Extents3& e,
                          const std::vector<bool>& axes) {
  std::vector<V> out(v.size());
  const std::int64_t N = e.count();
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t i = 0; i < e.n[0]; ++i)
      for (std::int64_t j = 0; j < e.n[1]; ++j)
        for (std::int64_t l = 0; l < e.n[2]; ++l) {
          std::int64_t s[3] = {i, j, l};
          for (int a = 0; a < e.dims; ++a)
            if (axes[a]) s[a] = e.n[a] - 1 - s[a];
          out[c * N + (i * e.n[1] + j) * e.n[2] + l] = v[c * N + (s[0] * e.n[1] + s[1]) * e.n[2] + s[2]];
        }
  return out;
}

template <typename T>
Var<T> flip_var(const Var<T>& x, const std::vector<bool>& axes) {
  const Extents3 e = spatial_extents(x.shape());
  std::vector<T> v(x.data().begin(), x.data().end());
  return Var<T>::from(x.shape(), flip_array(v, x.dim(0), e, axes));
}

LabelMap flip_labels(const LabelMap& m, const std::vector<bool>& axes) {
  Shape s{1};
  s.insert(s.end(), m.extents.begin(), m.extents.end());
  LabelMap out;
  out.extents = m.extents;
  out.labels = flip_array(m.labels, 1, spatial_extents(s), axes);
  return out;
}

}  // namespace

template <typename T>
Sample<T> flip_sample(const Sample<T>& sample, const std::vector<bool>& axes) {
  const auto ext = spatial_shape(sample.fixed.shape());
  if (axes.size() != ext.size()) throw DimensionError("flip_sample: one flag per spatial axis required");
  Sample<T> out = sample;
  out.fixed = flip_var(sample.fixed, axes);
  out.moving = flip_var(sample.moving, axes);
  if (sample.fixed_labels) out.fixed_labels = flip_labels(*sample.fixed_labels, axes);
  if (sample.moving_labels) out.moving_labels = flip_labels(*sample.moving_labels, axes);
  if (sample.keypoints) {
    KeypointSet& kp = *out.keypoints;
    const int d = kp.dims;
    for (std::size_t p = 0; p < kp.size(); ++p)
      for (int a = 0; a < d; ++a) {
        if (!axes[a]) continue;
        const double n1 = static_cast<double>(ext[a] - 1);
        kp.fixed[p * d + a] = n1 - kp.fixed[p * d + a];
        kp.moving[p * d + a] = n1 - kp.moving[p * d + a];
      }
  }
  return out;
}

template <typename T>
double validation_metric(const VfaModel<T>& model, const Sample<T>& sample, int ncc_window) {
  const Registration<T> reg = model.register_pair(sample.fixed.detach(), sample.moving.detach());
  if (sample.fixed_labels && sample.moving_labels) {
    const auto field = DisplacementVolume::from(reg.phi);
    const double d = dice_score(*sample.fixed_labels, warp_labels_nearest(*sample.moving_labels, field)).mean;
    if (std::isfinite(d)) return d;
  }
  const Var<T> warped = warp(sample.moving, reg.phi);
  return -static_cast<double>(ncc_loss(sample.fixed, warped, ncc_window).item());
}

// ---- history ---------------------------------------------------------------

std::string History::header_comment() const { return "# preset=" + recipe.preset + " terms=" + recipe.terms_string(); }

std::string History::header() const {
  std::string h = "step,epoch";
  for (const auto& t : recipe.terms) h += "," + t.name;
  return h + ",total,beta,val_metric";
}

void History::write_csv(std::ostream& os) const {
  os << header_comment() << '\n' << header() << '\n';
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.step << ',' << r.epoch;
    for (double v : r.terms) os << ',' << v;
    os << ',' << r.total << ',' << r.beta << ',';
    if (r.val_metric) os << *r.val_metric;
    os << '\n';
  }
}

// ---- fit -------------------------------------------------------------------

template <typename T>
void load_values(const VfaModel<T>& model, const std::vector<std::vector<T>>& values) {
  auto params = model.parameters();
  if (params.size() != values.size()) throw UsageError("load_values: parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto dst = params[k].second.mutable_data();
    if (dst.size() != values[k].size()) throw DimensionError("load_values: size mismatch for " + params[k].first);
    std::copy(values[k].begin(), values[k].end(), dst.begin());
  }
}

template <typename T>
FitResult<T> fit(VfaModel<T>& model, const std::vector<Sample<T>>& train, const std::vector<Sample<T>>& validation,
                 const TrainConfig& cfg, const StepCallback& on_step) {
  if (train.empty()) throw UsageError("fit: the training set is empty");
  if (cfg.epochs < 1) throw ParameterError("fit: epochs must be >= 1");
  cfg.recipe.validate();
  std::mt19937_64 rng(cfg.seed);
  Adam<T> opt(model.parameters(), cfg.adam);
  FitResult<T> result;
  result.history.recipe = cfg.recipe;
  result.best_metric = -std::numeric_limits<double>::infinity();
  const auto& val_set = validation.empty() ? train : validation;
  const int dims = model.dims();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t step = 0;
  bool stop = false;
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < order.size(); ++k) {
      const Sample<T>* s = &train[order[k]];
      Sample<T> flipped;
      if (cfg.flip_augment) {
        std::vector<bool> axes(static_cast<std::size_t>(dims));
        std::bernoulli_distribution coin(0.5);
        for (int a = 0; a < dims; ++a) axes[a] = coin(rng);
        flipped = flip_sample(*s, axes);
        s = &flipped;
      }
      const StepReport rep = train_step(model, opt, *s, cfg.recipe);
      HistoryRow row{step, epoch, rep.terms, rep.total, rep.beta, std::nullopt};
      ++step;
      const bool last_in_epoch = k + 1 == order.size();
      const bool capped = cfg.max_steps > 0 && step >= cfg.max_steps;
      if (last_in_epoch || capped) {
        double m = 0;
        for (const auto& v : val_set) m += validation_metric(model, v, cfg.recipe.ncc_window);
        m /= static_cast<double>(val_set.size());
        row.val_metric = m;
        if (m > result.best_metric) {
          result.best_metric = m;
          result.best_epoch = epoch;
          result.best_values.clear();
          for (const auto& [name, p] : model.parameters()) {
            result.best_values.emplace_back(p.data().begin(), p.data().end());
          }
        }
      }
      result.history.rows.push_back(row);
      if (on_step && !on_step(result.history.rows.back())) stop = true;
      if (capped) stop = true;
      if (stop) break;
    }
  }
  return result;
}

#define VFA_INSTANTIATE(T)                                                                                 \
  template class Adam<T>;                                                                                  \
  template LossValue<T> evaluate_loss(const VfaModel<T>&, const Sample<T>&, const LossRecipe&);            \
  template StepReport train_step(VfaModel<T>&, Adam<T>&, const Sample<T>&, const LossRecipe&);             \
  template Sample<T> flip_sample(const Sample<T>&, const std::vector<bool>&);                               \
  template double validation_metric(const VfaModel<T>&, const Sample<T>&, int);                            \
  template FitResult<T> fit(VfaModel<T>&, const std::vector<Sample<T>>&, const std::vector<Sample<T>>&,    \
                            const TrainConfig&, const StepCallback&);                                      \
  template void load_values(const VfaModel<T>&, const std::vector<std::vector<T>>&);

VFA_INSTANTIATE(float)
VFA_INSTANTIATE(double)

}  // namespace vfa
