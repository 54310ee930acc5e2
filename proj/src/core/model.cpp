#include "vfa/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vfa/error.hpp"

namespace vfa {

void ModelConfig::validate() const {
  extractor.validate();
  attention.validate();
  if (!std::isfinite(beta0)) throw ParameterError("beta0 must be finite");
  if (integration_steps < 1) throw ParameterError("integration_steps must be >= 1");
}

template <typename T>
TransformGrid<T> advance_level(const TransformGrid<T>* prev_upsampled, const Var<T>& u, const Var<T>& beta,
                               bool diffeomorphic, int integration_steps) {
  const TransformGrid<T> local =
      diffeomorphic ? scaling_and_squaring(mul(u, beta), integration_steps) : apply_beta(u, beta);
  if (prev_upsampled == nullptr) return local;
  return compose(local, *prev_upsampled);
}

template <typename T>
VfaModel<T>::VfaModel(const ModelConfig& cfg, int dims) : cfg_(cfg), dims_(dims) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  fixed_net_ = FeatureExtractor<T>(cfg_.extractor, dims, rng);
  if (!cfg_.extractor.shared_weights) moving_net_ = FeatureExtractor<T>(cfg_.extractor, dims, rng);
  const int L = cfg_.levels();
  match_fixed_.resize(L);
  match_moving_.resize(L);
  const auto& ex = cfg_.extractor;
  for (int i = 0; i < L; ++i) {
    init_conv(match_fixed_[i].w, match_fixed_[i].b, ex.match_channels, ex.channels[i], ex.kernel, dims, 1.0, rng);
    init_conv(match_moving_[i].w, match_moving_[i].b, ex.match_channels, ex.channels[i], ex.kernel, dims, 1.0, rng);
  }
  beta_ = Var<T>::scalar(static_cast<T>(cfg_.beta0), true);
}

namespace {

template <typename T>
std::int64_t count_non_finite(const Var<T>& v) {
  std::int64_t n = 0;
  for (T x : v.data()) n += !std::isfinite(static_cast<double>(x));
  return n;
}

template <typename T>
double max_abs(const Var<T>& v) {
  double m = 0;
  for (T x : v.data()) m = std::max(m, std::abs(static_cast<double>(x)));
  return m;
}

}  // namespace

template <typename T>
void VfaModel<T>::set_beta(double beta) {
  beta_.mutable_data()[0] = static_cast<T>(beta);
}

template <typename T>
Registration<T> VfaModel<T>::register_pair(const Var<T>& fixed, const Var<T>& moving) const {
  if (fixed.shape() != moving.shape()) {
    throw InputError("fixed and moving images differ in shape: " + to_string(fixed.shape()) + " vs " +
                     to_string(moving.shape()));
  }
  if (const auto bad = count_non_finite(fixed)) {
    throw InputError("fixed image holds " + std::to_string(bad) + " non-finite values");
  }
  if (const auto bad = count_non_finite(moving)) {
    throw InputError("moving image holds " + std::to_string(bad) + " non-finite values");
  }
  const FeatureExtractor<T>& mnet = cfg_.extractor.shared_weights ? fixed_net_ : moving_net_;
  auto [F, M] = extract_pair(fixed_net_, mnet, fixed, moving);
  const int L = cfg_.levels();
  Registration<T> out;
  TransformGrid<T> prev_up;
  for (int i = L - 1; i >= 0; --i) {
    Var<T> m = M[i];
    if (i < L - 1) {
      prev_up = upsample_transform(out.transforms.back());
      m = warp(m, prev_up);
    }
    const Var<T> fq = conv_same(F[i], match_fixed_[i].w, match_fixed_[i].b);
    const Var<T> mk = conv_same(m, match_moving_[i].w, match_moving_[i].b);
    auto att = vfa_attention(fq, mk, cfg_.attention);
    if (const auto bad = count_non_finite(att.displacement)) {
      std::ostringstream os;
      os << "non-finite displacement at level " << i << " (" << bad << " values), beta "
         << static_cast<double>(beta_.item()) << ", max|feature| fixed " << max_abs(fq) << " moving " << max_abs(mk);
      for (std::size_t k = 0; k < out.transforms.size(); ++k) {
        os << "; level " << (L - 1 - static_cast<int>(k)) << " max|u| " << max_abs(out.transforms[k].displacement());
      }
      throw NumericalError(os.str());
    }
    out.transforms.push_back(advance_level(i < L - 1 ? &prev_up : nullptr, att.displacement, beta_,
                                           cfg_.diffeomorphic, cfg_.integration_steps));
    out.traces.push_back({att.displacement, att.weights});
  }
  out.phi = out.transforms.back();
  return out;
}

template <typename T>
NamedParams<T> VfaModel<T>::parameters() const {
  NamedParams<T> p = fixed_net_.parameters(cfg_.extractor.shared_weights ? "extractor." : "extractor_fixed.");
  if (!cfg_.extractor.shared_weights) {
    auto m = moving_net_.parameters("extractor_moving.");
    p.insert(p.end(), m.begin(), m.end());
  }
  for (std::size_t i = 0; i < match_fixed_.size(); ++i) {
    const std::string lvl = std::to_string(i);
    p.emplace_back("match_fixed" + lvl + ".w", match_fixed_[i].w);
    p.emplace_back("match_fixed" + lvl + ".b", match_fixed_[i].b);
    p.emplace_back("match_moving" + lvl + ".w", match_moving_[i].w);
    p.emplace_back("match_moving" + lvl + ".b", match_moving_[i].b);
  }
  p.emplace_back("beta", beta_);
  return p;
}

template <typename T>
std::int64_t VfaModel<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, v] : parameters()) n += v.numel();
  return n;
}

template <typename T>
std::string VfaModel<T>::describe() const {
  std::ostringstream os;
  const auto& ex = cfg_.extractor;
  os << dims_ << "-D model, " << ex.levels() << " levels, channels";
  for (auto c : ex.channels) os << ' ' << c;
  os << ", match_channels " << ex.match_channels << ", " << (ex.shared_weights ? "shared" : "separate")
     << " extractor weights\n";
  os << "similarity " << to_string(cfg_.attention.similarity) << ", window " << cfg_.attention.window
     << ", temperature ";
  if (cfg_.attention.temperature) {
    os << *cfg_.attention.temperature;
  } else {
    os << "sqrt(C)";
  }
  os << ", beta " << static_cast<double>(beta_.item()) << (cfg_.diffeomorphic ? ", diffeomorphic" : "") << '\n';
  os << "parameters: " << parameter_count() << " (extractor " << fixed_net_.parameter_count()
     << (ex.shared_weights ? "" : " x2") << ")\n";
  return os.str();
}

#define VFA_INSTANTIATE(T)                                                                                   \
  template class VfaModel<T>;                                                                                \
  template TransformGrid<T> advance_level(const TransformGrid<T>*, const Var<T>&, const Var<T>&, bool, int);

VFA_INSTANTIATE(float)
VFA_INSTANTIATE(double)

}  // namespace vfa
