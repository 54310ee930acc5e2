#include "vfa/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vfa/error.hpp"
#include "vfa/geometry.hpp"

namespace vfa {

std::string to_string(SynthKind k) {
  switch (k) {
    case SynthKind::Blobs: return "blobs";
    case SynthKind::CheckerOrgans: return "checker-organs";
    case SynthKind::Texture: return "texture";
  }
  return "?";
}

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "blobs") return SynthKind::Blobs;
  if (name == "checker-organs") return SynthKind::CheckerOrgans;
  if (name == "texture") return SynthKind::Texture;
  throw ParameterError("unknown synthetic image kind '" + name + "' (expected blobs, checker-organs or texture)");
}

void SynthSpec::validate() const {
  if (extents.size() < 2 || extents.size() > 3) throw ParameterError("synthetic images must be 2-D or 3-D");
  for (auto e : extents) {
    if (e < 4) throw ParameterError("synthetic extents must be >= 4");
  }
  if (!(smoothness > 0)) throw ParameterError("smoothness must be positive");
  if (!(max_displacement >= 0) || !std::isfinite(max_displacement)) {
    throw ParameterError("max displacement must be finite and nonnegative");
  }
  if (keypoints < 0) throw ParameterError("keypoint count must be nonnegative");
  if (max_attempts < 1) throw ParameterError("max_attempts must be >= 1");
}

namespace {

struct Dom {
  int d;
  std::int64_t n[3] = {1, 1, 1};
  std::int64_t count() const { return n[0] * n[1] * n[2]; }
};

Dom dom_of(const std::vector<std::int64_t>& ext) {
  Dom g{static_cast<int>(ext.size())};
  for (int a = 0; a < g.d; ++a) g.n[a] = ext[a];
  return g;
}

template <typename F>
void for_each_voxel(const Dom& g, F&& f) {
  std::int64_t p = 0;
  for (std::int64_t i = 0; i < g.n[0]; ++i)
    for (std::int64_t j = 0; j < g.n[1]; ++j)
      for (std::int64_t l = 0; l < g.n[2]; ++l, ++p) {
        const double x[3] = {static_cast<double>(i), static_cast<double>(j), static_cast<double>(l)};
        f(p, x);
      }
}

// Separable Gaussian smoothing with reflected borders, in place.
void gaussian_smooth(std::vector<double>& v, const Dom& g, double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double ks = 0;
  for (int t = -r; t <= r; ++t) ks += k[t + r] = std::exp(-0.5 * t * t / (sigma * sigma));
  for (auto& w : k) w /= ks;
  std::vector<double> line, out;
  for (int a = 0; a < g.d; ++a) {
    const std::int64_t n = g.n[a];
    std::int64_t stride = 1;
    for (int b = a + 1; b < 3; ++b) stride *= g.n[b];
    line.resize(n);
    out.resize(n);
    const std::int64_t lines = g.count() / n;
    for (std::int64_t t = 0; t < lines; ++t) {
      const std::int64_t base = (t / stride) * n * stride + t % stride;
      for (std::int64_t q = 0; q < n; ++q) line[q] = v[base + q * stride];
      for (std::int64_t q = 0; q < n; ++q) {
        double s = 0;
        for (int o = -r; o <= r; ++o) {
          std::int64_t idx = n == 1 ? 0 : q + o;
          // reflect without repeating the edge sample
          while (idx < 0 || idx >= n) idx = idx < 0 ? -idx : 2 * (n - 1) - idx;
          s += k[o + r] * line[idx];
        }
        out[q] = s;
      }
      for (std::int64_t q = 0; q < n; ++q) v[base + q * stride] = out[q];
    }
  }
}

void normalise01(std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, b = *hi;
  for (auto& x : v) x = b > a ? (x - a) / (b - a) : 0.0;
}

struct Drawn {
  std::vector<double> image;
  std::optional<std::vector<std::int32_t>> labels;
};

Drawn draw_image(const SynthSpec& spec, const Dom& g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  Drawn out;
  out.image.assign(static_cast<std::size_t>(g.count()), 0.0);
  auto& img = out.image;
  double nmin = 1e30;
  for (int a = 0; a < g.d; ++a) nmin = std::min(nmin, static_cast<double>(g.n[a]));
  switch (spec.kind) {
    case SynthKind::Blobs: {
      const int count = 6 + static_cast<int>(U(rng) * 6);
      for (int b = 0; b < count; ++b) {
        double c[3], s[3];
        for (int a = 0; a < g.d; ++a) {
          c[a] = (0.1 + 0.8 * U(rng)) * static_cast<double>(g.n[a] - 1);
          s[a] = nmin * (0.05 + 0.1 * U(rng));
        }
        const double amp = (U(rng) < 0.25 ? -0.5 : 1.0) * (0.4 + 0.6 * U(rng));
        for_each_voxel(g, [&](std::int64_t p, const double* x) {
          double e = 0;
          for (int a = 0; a < g.d; ++a) e += (x[a] - c[a]) * (x[a] - c[a]) / (s[a] * s[a]);
          img[p] += amp * std::exp(-0.5 * e);
        });
      }
      normalise01(img);
      std::vector<std::int32_t> lab(img.size());
      for (std::size_t p = 0; p < img.size(); ++p) lab[p] = img[p] > 0.6 ? 2 : (img[p] > 0.35 ? 1 : 0);
      out.labels = std::move(lab);
      break;
    }
    case SynthKind::CheckerOrgans: {
      std::vector<std::int32_t> lab(img.size(), 0);
      const int organs = 3 + static_cast<int>(U(rng) * 3);
      const double period = std::max(2.0, nmin / 8.0);
      for_each_voxel(g, [&](std::int64_t p, const double* x) {
        int parity = 0;
        for (int a = 0; a < g.d; ++a) parity += static_cast<int>(std::floor(x[a] / period));
        img[p] = 0.1 + 0.05 * (parity & 1);
      });
      for (int o = 1; o <= organs; ++o) {
        double c[3], rad[3];
        for (int a = 0; a < g.d; ++a) {
          c[a] = (0.2 + 0.6 * U(rng)) * static_cast<double>(g.n[a] - 1);
          rad[a] = nmin * (0.1 + 0.12 * U(rng));
        }
        const double level = 0.3 + 0.7 * static_cast<double>(o) / organs;
        for_each_voxel(g, [&](std::int64_t p, const double* x) {
          double e = 0;
          int parity = 0;
          for (int a = 0; a < g.d; ++a) {
            e += (x[a] - c[a]) * (x[a] - c[a]) / (rad[a] * rad[a]);
            parity += static_cast<int>(std::floor(x[a] / (period * 0.5)));
          }
          if (e <= 1.0) {
            lab[p] = o;
            img[p] = level - 0.1 * (parity & 1);
          }
        });
      }
      gaussian_smooth(img, g, 0.7);
      normalise01(img);
      out.labels = std::move(lab);
      break;
    }
    case SynthKind::Texture: {
      std::normal_distribution<double> N(0.0, 1.0);
      for (auto& x : img) x = N(rng);
      gaussian_smooth(img, g, std::max(1.0, nmin / 24.0));
      normalise01(img);
      break;
    }
  }
  return out;
}

}  // namespace

SynthPair gen_synthetic_pair(const SynthSpec& spec) {
  spec.validate();
  const Dom g = dom_of(spec.extents);
  const std::int64_t N = g.count();
  std::mt19937_64 rng(spec.seed);
  Drawn moving = draw_image(spec, g, rng);

  SynthPair out;
  DisplacementVolume phi = DisplacementVolume::identity(spec.extents);
  bool ok = false;
  for (int attempt = 1; attempt <= spec.max_attempts && !ok; ++attempt) {
    out.attempts = attempt;
    if (spec.max_displacement == 0) {
      ok = true;
      break;
    }
    std::normal_distribution<double> Nd(0.0, 1.0);
    for (auto& x : phi.u) x = Nd(rng);
    for (int a = 0; a < g.d; ++a) {
      std::vector<double> ch(phi.u.begin() + a * N, phi.u.begin() + (a + 1) * N);
      gaussian_smooth(ch, g, spec.smoothness);
      std::copy(ch.begin(), ch.end(), phi.u.begin() + a * N);
    }
    double peak = 0;
    for (std::int64_t p = 0; p < N; ++p) {
      double s = 0;
      for (int a = 0; a < g.d; ++a) s += phi.u[a * N + p] * phi.u[a * N + p];
      peak = std::max(peak, std::sqrt(s));
    }
    if (peak == 0) continue;
    for (auto& x : phi.u) x *= spec.max_displacement / peak;
    ok = nd_voxels(phi).count == 0;
  }
  if (!ok) {
    throw ParameterError("could not draw a fold-free displacement in " + std::to_string(spec.max_attempts) +
                         " attempts; lower the maximum displacement or raise the smoothness");
  }
  out.phi_gt = phi;

  Shape shape{1};
  shape.insert(shape.end(), spec.extents.begin(), spec.extents.end());
  out.moving = Var<double>::from(shape, moving.image);
  out.fixed = warp(out.moving, phi.to_transform<double>());
  out.fixed = out.fixed.detach();
  if (moving.labels) {
    LabelMap ml{spec.extents, *moving.labels};
    out.fixed_labels = warp_labels_nearest(ml, phi);
    out.moving_labels = std::move(ml);
  }
  if (spec.keypoints > 0) {
    KeypointSet kp;
    kp.dims = g.d;
    kp.spacing.assign(static_cast<std::size_t>(g.d), 1.0);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int k = 0; k < spec.keypoints; ++k) {
      double f[3];
      for (int a = 0; a < g.d; ++a) f[a] = 1.0 + U(rng) * static_cast<double>(g.n[a] - 3);
      const auto u = sample_displacement(phi, std::span<const double>(f, static_cast<std::size_t>(g.d)));
      for (int a = 0; a < g.d; ++a) {
        kp.fixed.push_back(f[a]);
        kp.moving.push_back(f[a] + u[a]);
      }
    }
    out.keypoints = std::move(kp);
  }
  return out;
}

template <typename T>
Sample<T> to_sample(const SynthPair& pair, const std::string& name) {
  Sample<T> s;
  s.name = name;
  const auto conv = [](const Var<double>& v) {
    return Var<T>::from(v.shape(), std::vector<T>(v.data().begin(), v.data().end()));
  };
  s.fixed = conv(pair.fixed);
  s.moving = conv(pair.moving);
  s.fixed_labels = pair.fixed_labels;
  s.moving_labels = pair.moving_labels;
  s.keypoints = pair.keypoints;
  return s;
}

template Sample<float> to_sample<float>(const SynthPair&, const std::string&);
template Sample<double> to_sample<double>(const SynthPair&, const std::string&);

}  // namespace vfa
