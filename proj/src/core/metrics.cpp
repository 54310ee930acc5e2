#include "vfa/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <iterator>
#include <set>

#include "vfa/error.hpp"

namespace vfa {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Grid {
  int d = 0;
  std::int64_t n[3] = {1, 1, 1};
  std::int64_t count() const { return n[0] * n[1] * n[2]; }
  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t l) const { return (i * n[1] + j) * n[2] + l; }
};

Grid grid_of(const std::vector<std::int64_t>& extents) {
  if (extents.empty() || extents.size() > 3) throw DimensionError("expected 1 to 3 spatial axes");
  Grid g;
  g.d = static_cast<int>(extents.size());
  for (int a = 0; a < g.d; ++a) g.n[a] = extents[a];
  return g;
}

void require_same_extents(const LabelMap& a, const LabelMap& b) {
  if (a.extents != b.extents) {
    throw DimensionError("label maps differ in shape: " + to_string(a.extents) + " vs " + to_string(b.extents));
  }
}

// 1-D squared Euclidean distance transform (lower envelope of parabolas).
void edt_1d(const double* f, std::int64_t n, std::int64_t stride, double spacing, double* out,
            std::vector<std::int64_t>& v, std::vector<double>& z) {
  v.resize(n);
  z.resize(n + 1);
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == kInf) continue;
    const double xq = static_cast<double>(q) * spacing;
    while (k >= 0) {
      const double xv = static_cast<double>(v[k]) * spacing;
      const double s = ((fq + xq * xq) - (f[v[k] * stride] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k]) {
        --k;
      } else {
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
    }
  }
  if (k < 0) {
    for (std::int64_t q = 0; q < n; ++q) out[q] = kInf;
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    const double x = static_cast<double>(q) * spacing;
    while (z[j + 1] < x) ++j;
    const double dx = x - static_cast<double>(v[j]) * spacing;
    out[q] = dx * dx + f[v[j] * stride];
  }
}

// Squared distance from every voxel to the nearest seed voxel.
std::vector<double> squared_edt(const Grid& g, const std::vector<char>& seeds, std::span<const double> spacing) {
  std::vector<double> f(static_cast<std::size_t>(g.count()));
  for (std::int64_t i = 0; i < g.count(); ++i) f[i] = seeds[i] ? 0.0 : kInf;
  std::vector<std::int64_t> v;
  std::vector<double> z, line, out;
  for (int a = 0; a < g.d; ++a) {
    const std::int64_t n = g.n[a];
    std::int64_t stride = 1;
    for (int b = a + 1; b < 3; ++b) stride *= g.n[b];
    line.resize(n);
    out.resize(n);
    const std::int64_t lines = g.count() / n;
    for (std::int64_t t = 0; t < lines; ++t) {
      // base offset of line t when axis a is removed
      const std::int64_t outer = t / stride, inner = t % stride;
      const std::int64_t base = outer * n * stride + inner;
      for (std::int64_t q = 0; q < n; ++q) line[q] = f[base + q * stride];
      edt_1d(line.data(), n, 1, spacing[a], out.data(), v, z);
      for (std::int64_t q = 0; q < n; ++q) f[base + q * stride] = out[q];
    }
  }
  return f;
}

std::vector<char> boundary_of(const Grid& g, const std::vector<char>& mask) {
  std::vector<char> b(mask.size(), 0);
  for (std::int64_t i = 0; i < g.n[0]; ++i)
    for (std::int64_t j = 0; j < g.n[1]; ++j)
      for (std::int64_t l = 0; l < g.n[2]; ++l) {
        const std::int64_t p = g.index(i, j, l);
        if (!mask[p]) continue;
        const std::int64_t c[3] = {i, j, l};
        bool edge = false;
        for (int a = 0; a < g.d && !edge; ++a) {
          for (int s = -1; s <= 1; s += 2) {
            std::int64_t nb[3] = {c[0], c[1], c[2]};
            nb[a] += s;
            if (nb[a] < 0 || nb[a] >= g.n[a] || !mask[g.index(nb[0], nb[1], nb[2])]) {
              edge = true;
              break;
            }
          }
        }
        b[p] = edge;
      }
  return b;
}

// Value of channel a of the displacement at voxel p.
inline double disp(const DisplacementVolume& f, std::int64_t N, int a, std::int64_t p) { return f.u[a * N + p]; }

double det2(const double m[2][2]) { return m[0][0] * m[1][1] - m[0][1] * m[1][0]; }

double det3(const double m[3][3]) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

}  // namespace

// ---- types -----------------------------------------------------------------

std::int64_t LabelMap::voxels() const {
  std::int64_t n = 1;
  for (auto e : extents) n *= e;
  return n;
}

std::vector<std::int32_t> LabelMap::classes() const {
  std::set<std::int32_t> s;
  for (auto l : labels)
    if (l != 0) s.insert(l);
  return {s.begin(), s.end()};
}

std::int32_t LabelMap::max_label() const {
  std::int32_t m = 0;
  for (auto l : labels) m = std::max(m, l);
  return m;
}

void LabelMap::validate() const {
  if (static_cast<std::int64_t>(labels.size()) != voxels()) {
    throw DimensionError("label map holds " + std::to_string(labels.size()) + " labels for extents " +
                         to_string(extents));
  }
  for (auto l : labels) {
    if (l < 0) throw InputError("label maps must not contain negative classes");
  }
}

void KeypointSet::validate() const {
  if (dims < 1 || dims > 3) throw DimensionError("keypoints must be 1- to 3-D");
  if (fixed.size() != moving.size()) {
    throw DimensionError("fixed and moving keypoint lists differ in length");
  }
  if (fixed.size() % static_cast<std::size_t>(dims) != 0) throw DimensionError("ragged keypoint coordinates");
  if (spacing.size() != static_cast<std::size_t>(dims)) throw DimensionError("keypoint spacing needs one entry per axis");
  for (double v : fixed)
    if (!std::isfinite(v)) throw InputError("non-finite fixed keypoint coordinate");
  for (double v : moving)
    if (!std::isfinite(v)) throw InputError("non-finite moving keypoint coordinate");
}

std::int64_t DisplacementVolume::voxels() const {
  std::int64_t n = 1;
  for (auto e : extents) n *= e;
  return n;
}

void DisplacementVolume::validate() const {
  if (extents.empty() || extents.size() > 3) throw DimensionError("displacement volume must be 1- to 3-D");
  if (static_cast<std::int64_t>(u.size()) != voxels() * dims()) {
    throw DimensionError("displacement volume holds " + std::to_string(u.size()) + " values for extents " +
                         to_string(extents));
  }
}

DisplacementVolume DisplacementVolume::identity(std::vector<std::int64_t> extents) {
  DisplacementVolume f;
  f.extents = std::move(extents);
  f.u.assign(static_cast<std::size_t>(f.voxels() * f.dims()), 0.0);
  return f;
}

template <typename T>
DisplacementVolume DisplacementVolume::from(const TransformGrid<T>& phi) {
  DisplacementVolume f;
  f.extents = phi.extents();
  auto d = phi.displacement().data();
  f.u.assign(d.begin(), d.end());
  return f;
}

template <typename T>
TransformGrid<T> DisplacementVolume::to_transform() const {
  validate();
  Shape shape{dims()};
  shape.insert(shape.end(), extents.begin(), extents.end());
  std::vector<T> v(u.begin(), u.end());
  return TransformGrid<T>::from_displacement(Var<T>::from(std::move(shape), std::move(v)));
}

template DisplacementVolume DisplacementVolume::from<float>(const TransformGrid<float>&);
template DisplacementVolume DisplacementVolume::from<double>(const TransformGrid<double>&);
template TransformGrid<float> DisplacementVolume::to_transform<float>() const;
template TransformGrid<double> DisplacementVolume::to_transform<double>() const;

// ---- overlap ---------------------------------------------------------------

DiceResult dice_score(const LabelMap& a, const LabelMap& b) {
  require_same_extents(a, b);
  std::map<std::int32_t, std::array<std::int64_t, 3>> counts;  // |A|, |B|, |A n B|
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const auto la = a.labels[i], lb = b.labels[i];
    if (la != 0) counts[la][0]++;
    if (lb != 0) counts[lb][1]++;
    if (la != 0 && la == lb) counts[la][2]++;
  }
  DiceResult r;
  double acc = 0;
  for (const auto& [label, c] : counts) {
    const double dsc = 2.0 * static_cast<double>(c[2]) / static_cast<double>(c[0] + c[1]);
    r.per_class[label] = dsc;
    acc += dsc;
  }
  r.mean = counts.empty() ? std::numeric_limits<double>::quiet_NaN() : acc / static_cast<double>(counts.size());
  return r;
}

std::optional<double> hd95(const LabelMap& a, const LabelMap& b, std::int32_t label, std::span<const double> spacing) {
  require_same_extents(a, b);
  const Grid g = grid_of(a.extents);
  if (spacing.size() != static_cast<std::size_t>(g.d)) throw DimensionError("hd95: spacing needs one entry per axis");
  std::vector<char> ma(a.labels.size()), mb(b.labels.size());
  bool any_a = false, any_b = false;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    ma[i] = a.labels[i] == label;
    mb[i] = b.labels[i] == label;
    any_a |= ma[i] != 0;
    any_b |= mb[i] != 0;
  }
  if (!any_a || !any_b) return std::nullopt;
  const auto ba = boundary_of(g, ma);
  const auto bb = boundary_of(g, mb);
  const auto da = squared_edt(g, ba, spacing);
  const auto db = squared_edt(g, bb, spacing);
  std::vector<double> pooled;
  for (std::size_t i = 0; i < ba.size(); ++i) {
    if (ba[i]) pooled.push_back(std::sqrt(db[i]));
    if (bb[i]) pooled.push_back(std::sqrt(da[i]));
  }
  std::sort(pooled.begin(), pooled.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(pooled.size())));
  return pooled[std::max<std::size_t>(rank, 1) - 1];
}

std::optional<double> mean_hd95(const LabelMap& a, const LabelMap& b, std::span<const double> spacing) {
  const auto ca = a.classes();
  const auto cb = b.classes();
  std::vector<std::int32_t> both;
  std::set_intersection(ca.begin(), ca.end(), cb.begin(), cb.end(), std::back_inserter(both));
  if (both.empty()) return std::nullopt;
  double acc = 0;
  for (auto c : both) acc += *hd95(a, b, c, spacing);
  return acc / static_cast<double>(both.size());
}

// ---- transform regularity --------------------------------------------------

std::vector<double> jacobian_determinant(const DisplacementVolume& phi) {
  phi.validate();
  const Grid g = grid_of(phi.extents);
  if (g.d < 2) throw DimensionError("jacobian_determinant: needs 2 or 3 spatial axes");
  for (int a = 0; a < g.d; ++a) {
    if (g.n[a] < 3) throw DimensionError("jacobian_determinant: extents must be >= 3 along every axis");
  }
  const std::int64_t N = g.count();
  const std::int64_t lo2 = g.d == 3 ? 1 : 0;
  const std::int64_t hi2 = g.d == 3 ? g.n[2] - 1 : 1;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>((g.n[0] - 2) * (g.n[1] - 2) * (hi2 - lo2)));
  for (std::int64_t i = 1; i < g.n[0] - 1; ++i)
    for (std::int64_t j = 1; j < g.n[1] - 1; ++j)
      for (std::int64_t l = lo2; l < hi2; ++l) {
        const std::int64_t c[3] = {i, j, l};
        double m[3][3] = {};
        for (int b = 0; b < g.d; ++b) {
          std::int64_t lo[3] = {c[0], c[1], c[2]}, hi[3] = {c[0], c[1], c[2]};
          lo[b] -= 1;
          hi[b] += 1;
          const std::int64_t plo = g.index(lo[0], lo[1], lo[2]);
          const std::int64_t phi_ = g.index(hi[0], hi[1], hi[2]);
          for (int a = 0; a < g.d; ++a) {
            m[a][b] = (a == b ? 1.0 : 0.0) + 0.5 * (disp(phi, N, a, phi_) - disp(phi, N, a, plo));
          }
        }
        if (g.d == 2) {
          const double m2[2][2] = {{m[0][0], m[0][1]}, {m[1][0], m[1][1]}};
          out.push_back(det2(m2));
        } else {
          out.push_back(det3(m));
        }
      }
  return out;
}

FoldCount nd_voxels(const DisplacementVolume& phi) {
  const auto det = jacobian_determinant(phi);
  FoldCount r;
  for (double v : det)
    if (v <= 0) ++r.count;
  r.percent = det.empty() ? 0.0 : 100.0 * static_cast<double>(r.count) / static_cast<double>(det.size());
  return r;
}

FoldVolume nd_volume(const DisplacementVolume& phi) {
  phi.validate();
  const Grid g = grid_of(phi.extents);
  if (g.d < 2) throw DimensionError("nd_volume: needs 2 or 3 spatial axes");
  for (int a = 0; a < g.d; ++a) {
    if (g.n[a] < 2) throw DimensionError("nd_volume: extents must be >= 2 along every axis");
  }
  const std::int64_t N = g.count();
  // Axis permutations with their signs; each defines one simplex of the
  // cell as the monotone corner path 0 -> e_p0 -> e_p0 + e_p1 (-> 1).
  std::vector<std::pair<std::array<int, 3>, double>> perms;
  if (g.d == 2) {
    perms = {{{0, 1, 2}, 1.0}, {{1, 0, 2}, -1.0}};
  } else {
    perms = {{{0, 1, 2}, 1.0},  {{0, 2, 1}, -1.0}, {{1, 0, 2}, -1.0},
             {{1, 2, 0}, 1.0},  {{2, 0, 1}, 1.0},  {{2, 1, 0}, -1.0}};
  }
  const double simplex_norm = g.d == 2 ? 0.5 : 1.0 / 6.0;
  const std::int64_t c2 = g.d == 3 ? g.n[2] - 1 : 1;
  double folded = 0;
  for (std::int64_t i = 0; i < g.n[0] - 1; ++i)
    for (std::int64_t j = 0; j < g.n[1] - 1; ++j)
      for (std::int64_t l = 0; l < c2; ++l) {
        for (const auto& [perm, sign] : perms) {
          std::int64_t cur[3] = {i, j, l};
          double edges[3][3] = {};
          for (int s = 0; s < g.d; ++s) {
            std::int64_t nxt[3] = {cur[0], cur[1], cur[2]};
            nxt[perm[s]] += 1;
            const std::int64_t p0 = g.index(cur[0], cur[1], cur[2]);
            const std::int64_t p1 = g.index(nxt[0], nxt[1], nxt[2]);
            for (int a = 0; a < g.d; ++a) {
              edges[a][s] = (a == perm[s] ? 1.0 : 0.0) + disp(phi, N, a, p1) - disp(phi, N, a, p0);
            }
            std::copy(nxt, nxt + 3, cur);
          }
          double vol;
          if (g.d == 2) {
            const double m2[2][2] = {{edges[0][0], edges[0][1]}, {edges[1][0], edges[1][1]}};
            vol = sign * det2(m2) * simplex_norm;
          } else {
            vol = sign * det3(edges) * simplex_norm;
          }
          if (vol < 0) folded -= vol;
        }
      }
  double total = 1;
  for (int a = 0; a < g.d; ++a) total *= static_cast<double>(g.n[a] - 1);
  return {folded, 100.0 * folded / total};
}

double sdlogj(const DisplacementVolume& phi) {
  const auto det = jacobian_determinant(phi);
  if (det.empty()) return 0.0;
  double mean = 0;
  std::vector<double> logs(det.size());
  for (std::size_t i = 0; i < det.size(); ++i) {
    logs[i] = std::log(std::max(det[i], kLogJacobianFloor));
    mean += logs[i];
  }
  mean /= static_cast<double>(logs.size());
  double var = 0;
  for (double v : logs) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(logs.size()));
}

// ---- landmarks -------------------------------------------------------------

std::vector<double> sample_displacement(const DisplacementVolume& phi, std::span<const double> point) {
  const Grid g = grid_of(phi.extents);
  const std::int64_t N = g.count();
  std::int64_t lo[3] = {0, 0, 0}, hi[3] = {0, 0, 0};
  double fr[3] = {0, 0, 0};
  for (int a = 0; a < g.d; ++a) {
    const std::int64_t n = g.n[a];
    const double c = std::clamp(point[a], 0.0, static_cast<double>(n - 1));
    if (n == 1) continue;
    std::int64_t i0 = static_cast<std::int64_t>(std::floor(c));
    if (i0 > n - 2) i0 = n - 2;
    lo[a] = i0;
    hi[a] = i0 + 1;
    fr[a] = c - static_cast<double>(i0);
  }
  std::vector<double> out(g.d, 0.0);
  const int corners = 1 << g.d;
  for (int k = 0; k < corners; ++k) {
    std::int64_t idx[3] = {0, 0, 0};
    double w = 1;
    for (int a = 0; a < g.d; ++a) {
      const bool up = (k >> (g.d - 1 - a)) & 1;
      idx[a] = up ? hi[a] : lo[a];
      w *= up ? fr[a] : 1.0 - fr[a];
    }
    const std::int64_t p = g.index(idx[0], idx[1], idx[2]);
    for (int a = 0; a < g.d; ++a) out[a] += w * phi.u[a * N + p];
  }
  return out;
}

std::vector<double> tre(const DisplacementVolume& phi, const KeypointSet& kp) {
  kp.validate();
  if (kp.dims != phi.dims()) throw DimensionError("tre: keypoint and transform dimensionality differ");
  const int d = kp.dims;
  std::vector<double> out;
  out.reserve(kp.size());
  for (std::size_t p = 0; p < kp.size(); ++p) {
    std::span<const double> f(kp.fixed.data() + p * d, d);
    const auto u = sample_displacement(phi, f);
    double s = 0;
    for (int a = 0; a < d; ++a) {
      const double e = (f[a] + u[a] - kp.moving[p * d + a]) * kp.spacing[a];
      s += e * e;
    }
    out.push_back(std::sqrt(s));
  }
  return out;
}

double mean_tre(const DisplacementVolume& phi, const KeypointSet& kp) {
  const auto t = tre(phi, kp);
  if (t.empty()) throw UsageError("mean_tre: keypoint set is empty");
  return std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
}

double tre30(std::span<const double> case_means) {
  if (case_means.empty()) throw UsageError("tre30: needs at least one case");
  std::vector<double> v(case_means.begin(), case_means.end());
  std::sort(v.begin(), v.end());
  const auto k = static_cast<std::size_t>(std::ceil(0.3 * static_cast<double>(v.size())));
  return std::accumulate(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / static_cast<double>(k);
}

LabelMap warp_labels_nearest(const LabelMap& moving, const DisplacementVolume& phi) {
  if (moving.extents != phi.extents) {
    throw DimensionError("warp_labels_nearest: label map " + to_string(moving.extents) + " vs transform " +
                         to_string(phi.extents));
  }
  const Grid g = grid_of(phi.extents);
  const std::int64_t N = g.count();
  LabelMap out;
  out.extents = moving.extents;
  out.labels.resize(static_cast<std::size_t>(N));
  for (std::int64_t i = 0; i < g.n[0]; ++i)
    for (std::int64_t j = 0; j < g.n[1]; ++j)
      for (std::int64_t l = 0; l < g.n[2]; ++l) {
        const std::int64_t p = g.index(i, j, l);
        const std::int64_t c[3] = {i, j, l};
        std::int64_t s[3] = {0, 0, 0};
        for (int a = 0; a < g.d; ++a) {
          const double x = static_cast<double>(c[a]) + phi.u[a * N + p];
          s[a] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(x + 0.5)), 0, g.n[a] - 1);
        }
        out.labels[p] = moving.labels[g.index(s[0], s[1], s[2])];
      }
  return out;
}

}  // namespace vfa
