#include <cmath>
#include <cstring>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "vfa/error.hpp"
#include "vfa/extractor.hpp"
#include "vfa/losses.hpp"
#include "vfa/model.hpp"
#include "vfa/simd/kernels.hpp"

using namespace vfa;

namespace {

template <typename T>
Var<T> random_image(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(0, 1);
  std::vector<T> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<T>(d(rng));
  return Var<T>::from(std::move(shape), std::move(v));
}

ModelConfig small_config(std::vector<std::int64_t> channels = {4, 8, 8}) {
  ModelConfig c;
  c.extractor.channels = std::move(channels);
  c.extractor.match_channels = 8;
  c.seed = 3;
  return c;
}

template <typename T>
bool same_bits(const Var<T>& a, const Var<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), sizeof(T) * a.numel()) == 0;
}

}  // namespace

TEST_SUITE("extractor") {
  TEST_CASE("pyramid levels halve extents and follow the channel schedule") {
    ExtractorConfig cfg;
    std::mt19937_64 rng(1);
    FeatureExtractor<float> net(cfg, 2, rng);
    const auto pyr = net.extract(random_image<float>({1, 32, 32}, 2));
    REQUIRE(pyr.size() == 5);
    for (int i = 0; i < 5; ++i) CHECK(pyr[i].shape() == Shape{cfg.channels[i], 32 >> i, 32 >> i});
  }

  TEST_CASE("3-D pyramid") {
    ExtractorConfig cfg;
    cfg.channels = {4, 8, 16};
    std::mt19937_64 rng(1);
    FeatureExtractor<float> net(cfg, 3, rng);
    const auto pyr = net.extract(random_image<float>({1, 8, 12, 16}, 2));
    REQUIRE(pyr.size() == 3);
    CHECK(pyr[0].shape() == Shape{4, 8, 12, 16});
    CHECK(pyr[2].shape() == Shape{16, 2, 3, 4});
  }

  TEST_CASE("indivisible extents raise an input error naming the pad multiple") {
    ExtractorConfig cfg;
    std::mt19937_64 rng(1);
    FeatureExtractor<float> net(cfg, 2, rng);
    try {
      net.extract(random_image<float>({1, 30, 32}, 2));
      FAIL("expected InputError");
    } catch (const InputError& e) {
      CHECK(std::string(e.what()).find("16") != std::string::npos);
      CHECK(std::string(e.what()).find("pad") != std::string::npos);
    }
  }

  TEST_CASE("a constant zero image gives finite features") {
    ExtractorConfig cfg;
    std::mt19937_64 rng(1);
    FeatureExtractor<float> net(cfg, 2, rng);
    for (const auto& level : net.extract(Var<float>::zeros(Shape{1, 16, 16})))
      for (float v : level.data()) CHECK(std::isfinite(v));
  }

  TEST_CASE("parameter counts") {
    ExtractorConfig cfg;
    std::mt19937_64 rng(1);
    FeatureExtractor<float> net(cfg, 2, rng);
    CHECK(net.parameter_count() == extractor_parameter_count(cfg, 2));
    const double ratio = static_cast<double>(extractor_parameter_count(cfg.halved(), 2)) /
                         static_cast<double>(extractor_parameter_count(cfg, 2));
    CHECK(ratio > 0.2);
    CHECK(ratio < 0.3);
    // One conv at the first encoder level: 8 * 1 * 9 weights + 8 biases.
    ExtractorConfig one;
    one.channels = {8};
    CHECK(extractor_parameter_count(one, 2) == 8 * 9 + 8);
  }

  TEST_CASE("initialisation is seeded") {
    ExtractorConfig cfg;
    cfg.channels = {4, 8};
    std::mt19937_64 r1(5), r2(5), r3(6);
    FeatureExtractor<double> a(cfg, 2, r1), b(cfg, 2, r2), c(cfg, 2, r3);
    const auto pa = a.parameters(""), pb = b.parameters(""), pc = c.parameters("");
    REQUIRE(pa.size() == pb.size());
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].first == pb[i].first);
      CHECK(same_bits(pa[i].second, pb[i].second));
      differs = differs || !same_bits(pa[i].second, pc[i].second);
    }
    CHECK(differs);
  }

  TEST_CASE("configuration validation") {
    ExtractorConfig c;
    c.channels = {};
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c.channels = {1, 1, 1, 1, 1, 1, 1, 1, 1};
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c.channels = {4, 0};
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c.channels = {4, 8};
    c.kernel = 2;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    CHECK(ExtractorConfig{}.divisor() == 16);
  }
}

TEST_SUITE("model") {
  TEST_CASE("beta = 0 yields the identity transform bitwise") {
    VfaModel<float> model(small_config(), 2);
    model.set_beta(0.0);
    const auto f = random_image<float>({1, 16, 16}, 1), m = random_image<float>({1, 16, 16}, 2);
    const auto reg = model.register_pair(f, m);
    CHECK(same_bits(reg.phi.absolute(), identity_coordinates<float>({16, 16})));
    for (float v : reg.phi.displacement().data()) CHECK(v == 0.0f);
    CHECK(same_bits(warp(m, reg.phi), m));
  }

  TEST_CASE("registration exposes one transform per level, coarsest first") {
    VfaModel<float> model(small_config(), 2);
    const auto reg = model.register_pair(random_image<float>({1, 16, 16}, 1), random_image<float>({1, 16, 16}, 2));
    REQUIRE(reg.transforms.size() == 3);
    REQUIRE(reg.traces.size() == 3);
    CHECK(reg.transforms[0].extents() == std::vector<std::int64_t>{4, 4});
    CHECK(reg.transforms[1].extents() == std::vector<std::int64_t>{8, 8});
    CHECK(reg.transforms[2].extents() == std::vector<std::int64_t>{16, 16});
    CHECK(reg.traces[0].weights.shape() == Shape{16, 9});
    CHECK(same_bits(reg.phi.displacement(), reg.transforms.back().displacement()));
  }

  TEST_CASE("each level composes its local step with the upsampled coarser transform") {
    VfaModel<double> model(small_config(), 2);
    model.set_beta(0.7);
    const auto reg = model.register_pair(random_image<double>({1, 16, 16}, 3), random_image<double>({1, 16, 16}, 4));
    for (std::size_t i = 1; i < reg.transforms.size(); ++i) {
      const auto up = upsample_transform(reg.transforms[i - 1]);
      const auto again = advance_level(&up, reg.traces[i].local_displacement, model.beta(), false, 7);
      CHECK(same_bits(again.displacement(), reg.transforms[i].displacement()));
    }
    const auto first = advance_level<double>(nullptr, reg.traces[0].local_displacement, model.beta(), false, 7);
    CHECK(same_bits(first.displacement(), reg.transforms[0].displacement()));
  }

  TEST_CASE("saturated attention reaches 2^L - 1 voxels per axis") {
    for (int L = 2; L <= 5; ++L) {
      const std::int64_t n = std::int64_t{1} << (L + 2);
      const auto beta = Var<double>::scalar(1.0);
      TransformGrid<double> phi;
      for (int i = L - 1; i >= 0; --i) {
        const std::int64_t e = n >> i;
        const auto u = Var<double>::full(Shape{2, e, e}, 1.0);
        if (i == L - 1) {
          phi = advance_level<double>(nullptr, u, beta, false, 7);
        } else {
          const auto up = upsample_transform(phi);
          phi = advance_level(&up, u, beta, false, 7);
        }
      }
      for (double v : phi.displacement().data()) CHECK(v == static_cast<double>((1 << L) - 1));
    }
  }

  TEST_CASE("every parameter receives a gradient") {
    VfaModel<double> model(small_config({4, 8}), 2);
    const auto f = random_image<double>({1, 8, 8}, 5), m = random_image<double>({1, 8, 8}, 6);
    const auto reg = model.register_pair(f, m);
    backward(add(ncc_loss(f, warp(m, reg.phi), 3), diffusion_reg(reg.phi.displacement())));
    for (const auto& [name, p] : model.parameters()) {
      INFO(name);
      REQUIRE(p.has_grad());
      double g = 0;
      for (double v : p.grad()) g += std::abs(v);
      CHECK(g > 0);
    }
  }

  TEST_CASE("parameter names are stable and unique") {
    ModelConfig cfg = small_config({4, 8});
    VfaModel<float> shared(cfg, 2);
    cfg.extractor.shared_weights = false;
    VfaModel<float> separate(cfg, 2);
    std::set<std::string> names;
    for (const auto& [n, p] : separate.parameters()) CHECK(names.insert(n).second);
    CHECK(names.count("extractor_fixed.enc0.w") == 1);
    CHECK(names.count("extractor_moving.enc0.w") == 1);
    CHECK(names.count("match_moving1.b") == 1);
    CHECK(shared.parameters().front().first == "extractor.enc0.w");
    CHECK(shared.parameters().back().first == "beta");
    CHECK(separate.parameter_count() - shared.parameter_count() ==
          extractor_parameter_count(cfg.extractor, 2));
    CHECK(shared.describe().find("2 levels") != std::string::npos);
  }

  TEST_CASE("diffeomorphic mode integrates the scaled field") {
    ModelConfig cfg = small_config({4, 8});
    cfg.diffeomorphic = true;
    VfaModel<double> model(cfg, 2);
    model.set_beta(0.5);
    const auto reg = model.register_pair(random_image<double>({1, 8, 8}, 1), random_image<double>({1, 8, 8}, 2));
    const auto local = scaling_and_squaring(mul(reg.traces[0].local_displacement, model.beta()), 7);
    CHECK(same_bits(local.displacement(), reg.transforms[0].displacement()));
  }

  TEST_CASE("same seed gives the same registration") {
    const auto f = random_image<float>({1, 16, 16}, 7), m = random_image<float>({1, 16, 16}, 8);
    VfaModel<float> a(small_config(), 2), b(small_config(), 2);
    CHECK(same_bits(a.register_pair(f, m).phi.displacement(), b.register_pair(f, m).phi.displacement()));
  }

  TEST_CASE("instruction sets agree on a full forward pass") {
    if (!simd::isa_supported(simd::Isa::Avx2)) return;
    const auto f = random_image<float>({1, 16, 16}, 7), m = random_image<float>({1, 16, 16}, 8);
    VfaModel<float> model(small_config(), 2);
    model.set_beta(1.0);
    const simd::Isa before = simd::active_isa();
    simd::set_isa(simd::Isa::Scalar);
    const auto s = model.register_pair(f, m).phi.displacement();
    simd::set_isa(simd::Isa::Avx2);
    const auto a = model.register_pair(f, m).phi.displacement();
    simd::set_isa(before);
    for (std::int64_t i = 0; i < s.numel(); ++i) CHECK(std::abs(s.at(i) - a.at(i)) < 1e-4);
  }

  TEST_CASE("mismatched pair shapes are rejected") {
    VfaModel<float> model(small_config(), 2);
    CHECK_THROWS_AS(model.register_pair(random_image<float>({1, 16, 16}, 1), random_image<float>({1, 16, 8}, 2)),
                    InputError);
    ModelConfig bad = small_config();
    bad.integration_steps = 0;
    CHECK_THROWS_AS(VfaModel<float>(bad, 2), ParameterError);
  }
}
