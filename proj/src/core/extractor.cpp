#include "vfa/extractor.hpp"

#include <algorithm>
#include <cmath>

#include "vfa/error.hpp"

namespace vfa {

ExtractorConfig ExtractorConfig::halved() const {
  ExtractorConfig c = *this;
  for (auto& ch : c.channels) ch = std::max<std::int64_t>(1, ch / 2);
  c.match_channels = std::max<std::int64_t>(1, match_channels / 2);
  return c;
}

void ExtractorConfig::validate() const {
  if (channels.empty()) throw ParameterError("extractor needs at least one level");
  if (channels.size() > 8) throw ParameterError("extractor supports at most 8 levels");
  for (auto c : channels) {
    if (c <= 0) throw ParameterError("extractor channel widths must be positive");
  }
  if (match_channels <= 0) throw ParameterError("match_channels must be positive");
  if (kernel < 1 || kernel % 2 == 0) throw ParameterError("extractor kernel must be odd");
  if (!(leaky_slope >= 0 && leaky_slope < 1)) throw ParameterError("leaky slope must lie in [0, 1)");
}

void check_divisible(const std::vector<std::int64_t>& extents, std::int64_t divisor) {
  for (std::size_t a = 0; a < extents.size(); ++a) {
    if (extents[a] % divisor != 0) {
      throw InputError("image extents " + to_string(extents) + " are not divisible by " + std::to_string(divisor) +
                       " along axis " + std::to_string(a) + "; pad the images to a multiple of " +
                       std::to_string(divisor));
    }
  }
}

template <typename T>
void init_conv(Var<T>& w, Var<T>& b, std::int64_t c_out, std::int64_t c_in, int kernel, int dims, double slope,
               std::mt19937_64& rng) {
  Shape ws{c_out, c_in};
  std::int64_t taps = 1;
  for (int a = 0; a < dims; ++a) {
    ws.push_back(kernel);
    taps *= kernel;
  }
  const double fan_in = static_cast<double>(c_in * taps);
  const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
  const double bound = gain * std::sqrt(3.0 / fan_in);
  std::uniform_real_distribution<double> wd(-bound, bound);
  std::vector<T> wv(static_cast<std::size_t>(numel(ws)));
  for (auto& v : wv) v = static_cast<T>(wd(rng));
  const double bb = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> bd(-bb, bb);
  std::vector<T> bv(static_cast<std::size_t>(c_out));
  for (auto& v : bv) v = static_cast<T>(bd(rng));
  w = Var<T>::from(std::move(ws), std::move(wv), true);
  b = Var<T>::from(Shape{c_out}, std::move(bv), true);
}

template <typename T>
FeatureExtractor<T>::FeatureExtractor(const ExtractorConfig& cfg, int dims, std::mt19937_64& rng)
    : cfg_(cfg), dims_(dims) {
  cfg_.validate();
  if (dims < 2 || dims > 3) throw ParameterError("extractor supports 2-D and 3-D images");
  const int L = cfg_.levels();
  const auto& ch = cfg_.channels;
  enc_.resize(L);
  for (int i = 0; i < L; ++i) {
    const std::int64_t in = i == 0 ? 1 : ch[i - 1];
    init_conv(enc_[i].w, enc_[i].b, ch[i], in, cfg_.kernel, dims, cfg_.leaky_slope, rng);
  }
  up_.resize(L - 1);
  dec_.resize(L - 1);
  for (int i = L - 2; i >= 0; --i) {
    init_conv(up_[i].w, up_[i].b, ch[i], ch[i + 1], cfg_.kernel, dims, cfg_.leaky_slope, rng);
    init_conv(dec_[i].w, dec_[i].b, ch[i], 2 * ch[i], cfg_.kernel, dims, cfg_.leaky_slope, rng);
  }
}

template <typename T>
FeaturePyramid<T> FeatureExtractor<T>::extract(const Var<T>& img) const {
  if (enc_.empty()) throw UsageError("extractor is not initialised");
  if (img.rank() != dims_ + 1 || img.dim(0) != 1) {
    throw InputError("extractor expects a single-channel " + std::to_string(dims_) + "-D image, got shape " +
                     to_string(img.shape()));
  }
  check_divisible(spatial_shape(img.shape()), cfg_.divisor());
  const int L = cfg_.levels();
  const T slope = static_cast<T>(cfg_.leaky_slope);
  std::vector<Var<T>> enc(L);
  Var<T> x = img;
  for (int i = 0; i < L; ++i) {
    if (i > 0) x = downsample2(x);
    x = leaky_relu(conv_same(x, enc_[i].w, enc_[i].b), slope);
    enc[i] = x;
  }
  FeaturePyramid<T> out(L);
  out[L - 1] = enc[L - 1];
  for (int i = L - 2; i >= 0; --i) {
    const Var<T> up = leaky_relu(conv_same(upsample2(out[i + 1]), up_[i].w, up_[i].b), slope);
    out[i] = leaky_relu(conv_same(concat_channels(enc[i], up), dec_[i].w, dec_[i].b), slope);
  }
  return out;
}

template <typename T>
NamedParams<T> FeatureExtractor<T>::parameters(const std::string& prefix) const {
  NamedParams<T> p;
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    p.emplace_back(prefix + "enc" + std::to_string(i) + ".w", enc_[i].w);
    p.emplace_back(prefix + "enc" + std::to_string(i) + ".b", enc_[i].b);
  }
  for (std::size_t i = 0; i < up_.size(); ++i) {
    p.emplace_back(prefix + "up" + std::to_string(i) + ".w", up_[i].w);
    p.emplace_back(prefix + "up" + std::to_string(i) + ".b", up_[i].b);
    p.emplace_back(prefix + "dec" + std::to_string(i) + ".w", dec_[i].w);
    p.emplace_back(prefix + "dec" + std::to_string(i) + ".b", dec_[i].b);
  }
  return p;
}

template <typename T>
std::int64_t FeatureExtractor<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, v] : parameters("")) n += v.numel();
  return n;
}

std::int64_t extractor_parameter_count(const ExtractorConfig& cfg, int dims) {
  cfg.validate();
  std::int64_t taps = 1;
  for (int a = 0; a < dims; ++a) taps *= cfg.kernel;
  const auto conv = [&](std::int64_t out, std::int64_t in) { return out * in * taps + out; };
  const auto& ch = cfg.channels;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < ch.size(); ++i) n += conv(ch[i], i == 0 ? 1 : ch[i - 1]);
  for (std::size_t i = 0; i + 1 < ch.size(); ++i) n += conv(ch[i], ch[i + 1]) + conv(ch[i], 2 * ch[i]);
  return n;
}

template <typename T>
std::pair<FeaturePyramid<T>, FeaturePyramid<T>> extract_pair(const FeatureExtractor<T>& fixed_net,
                                                             const FeatureExtractor<T>& moving_net,
                                                             const Var<T>& fixed, const Var<T>& moving) {
  if (fixed.shape() != moving.shape()) {
    throw InputError("fixed and moving images differ in shape: " + to_string(fixed.shape()) + " vs " +
                     to_string(moving.shape()));
  }
  return {fixed_net.extract(fixed), moving_net.extract(moving)};
}

#define VFA_INSTANTIATE(T)                                                                                   \
  template class FeatureExtractor<T>;                                                                        \
  template void init_conv(Var<T>&, Var<T>&, std::int64_t, std::int64_t, int, int, double, std::mt19937_64&); \
  template std::pair<FeaturePyramid<T>, FeaturePyramid<T>> extract_pair(                                     \
      const FeatureExtractor<T>&, const FeatureExtractor<T>&, const Var<T>&, const Var<T>&);

VFA_INSTANTIATE(float)
VFA_INSTANTIATE(double)

}  // namespace vfa
