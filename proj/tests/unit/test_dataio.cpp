#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "vfa/checkpoint.hpp"
#include "vfa/dataio.hpp"
#include "vfa/error.hpp"
#include "vfa/synth.hpp"

using namespace vfa;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("vfa_unit_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
}

template <typename E>
std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const E& e) {
    return e.what();
  }
  return "<no exception>";
}

}  // namespace

TEST_SUITE("dataio") {
  TEST_CASE("volumes round trip exactly for every dtype") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> d(-5, 5);
    for (Dtype dt : {Dtype::F32, Dtype::F64, Dtype::I32}) {
      Volume v;
      v.shape = {{3, 4, 5}, {0.7, 1.1, 2.3}};
      v.channels = 2;
      v.dtype = dt;
      for (std::int64_t i = 0; i < v.numel(); ++i) {
        double x = d(rng);
        if (dt == Dtype::F32) x = static_cast<float>(x);
        if (dt == Dtype::I32) x = std::round(x);
        v.values.push_back(x);
      }
      const auto p = scratch("rt_" + to_string(dt) + ".vol");
      write_volume(p, v);
      const Volume back = read_volume(p);
      CHECK(back.shape.extents == v.shape.extents);
      CHECK(back.shape.spacing == v.shape.spacing);
      CHECK(back.channels == 2);
      CHECK(back.dtype == dt);
      CHECK(back.values == v.values);
    }
  }

  TEST_CASE("tensor, label and displacement views convert losslessly") {
    const auto img = Var<float>::from(Shape{1, 2, 3}, {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f});
    const Volume v = Volume::from_var(img, {1.0, 1.0}, Dtype::F32);
    const auto back = v.to_var<float>();
    CHECK(std::memcmp(back.data().data(), img.data().data(), sizeof(float) * 6) == 0);
    const LabelMap lm{{2, 2}, {0, 3, 1, 2}};
    CHECK(Volume::from_labels(lm, {1, 1}).to_labels().labels == lm.labels);
    DisplacementVolume u{{2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}};
    CHECK(Volume::from_displacement(u, {1, 1}, Dtype::F64).to_displacement().u == u.u);
    Volume one = Volume::from_var(img, {1, 1}, Dtype::F32);
    CHECK_THROWS_AS(one.to_displacement(), FormatError);
    one.values[0] = 0.5;
    CHECK_THROWS_AS(one.to_labels(), FormatError);
  }

  TEST_CASE("header errors report file and line") {
    const auto p = scratch("bad.vol");
    write_text(p, "VFAVOL 1\ndims 4 0\nspacing 1 1\nchannels 1\ndtype f32\nbyteorder little\nend\n");
    const std::string msg = message_of<FormatError>([&] { read_volume(p); });
    CHECK(msg.find(p.string() + ":2:") != std::string::npos);
    write_text(p, "VFAVOL 2\n");
    CHECK(message_of<FormatError>([&] { read_volume(p); }).find(":1:") != std::string::npos);
    write_text(p, "VFAVOL 1\ndims 2 2\nspacing 1 1\nchannels 1\ndtype f16\nbyteorder little\nend\n");
    CHECK(message_of<FormatError>([&] { read_volume(p); }).find(":5: unknown dtype") != std::string::npos);
    write_text(p, "VFAVOL 1\ndims 2 2\nspacing 1 1\nchannels 1\ndtype f32\nbyteorder big\nend\n");
    CHECK_THROWS_AS(read_volume(p), FormatError);
    write_text(p, "VFAVOL 1\ndims 2 2\nspacing 1 -1\nchannels 1\ndtype f32\nbyteorder little\nend\n");
    CHECK_THROWS_AS(read_volume(p), FormatError);
    CHECK_THROWS_AS(read_volume(scratch("missing.vol")), IoError);
  }

  TEST_CASE("truncated payload names both byte counts") {
    const auto p = scratch("trunc.vol");
    write_text(p, "VFAVOL 1\ndims 2 3\nspacing 1 1\nchannels 1\ndtype f32\nbyteorder little\nend\n" + std::string(20, '\0'));
    const std::string msg = message_of<FormatError>([&] { read_volume(p); });
    CHECK(msg.find("corrupt payload, expected 24 bytes, found 20") != std::string::npos);
  }

  TEST_CASE("keypoint files") {
    const auto p = scratch("kp.csv");
    write_text(p, "# landmarks\nfx,fy,mx,my\n1,2,3,4\n\n5.5,6,7,8\n");
    auto r = read_keypoints(p);
    CHECK(r.keypoints.dims == 2);
    CHECK(r.keypoints.size() == 2);
    CHECK(r.keypoints.fixed == std::vector<double>{1, 2, 5.5, 6});
    CHECK(r.keypoints.moving == std::vector<double>{3, 4, 7, 8});
    CHECK(r.warnings.empty());

    write_text(p, "1,2,3,4,5,6\n");
    CHECK(read_keypoints(p).keypoints.dims == 3);

    write_text(p, "fx,fy,mx,my\n1,2,3,4\n1,2,3\n");
    CHECK(message_of<FormatError>([&] { read_keypoints(p); }).find(":3: ragged row") != std::string::npos);
    write_text(p, "1,2,3,x\n");
    CHECK(message_of<FormatError>([&] { read_keypoints(p); }).find(":1: non-numeric value 'x'") != std::string::npos);
    write_text(p, "fx,fy,mx,my\n");
    r = read_keypoints(p);
    CHECK(r.keypoints.empty());
    CHECK(r.warnings.size() == 1);
    write_text(p, "1,2,3\n");
    CHECK_THROWS_AS(read_keypoints(p), FormatError);

    KeypointSet kp{3, {0.1, 0.2, 0.3}, {1.0 / 3, 2, 3}, {1, 1, 1}};
    write_keypoints(p, kp);
    const auto back = read_keypoints(p).keypoints;
    CHECK(back.fixed == kp.fixed);
    CHECK(back.moving == kp.moving);
  }

  TEST_CASE("run config parsing") {
    const auto c = parse_run_config("# comment\nlr = 0.001\npreset=multimodal  # trailing\n\nlr = 0.002\n");
    CHECK(c.at("lr") == "0.002");
    CHECK(c.at("preset") == "multimodal");
    CHECK(message_of<FormatError>([] { parse_run_config("a = 1\nbroken\n", "cfg"); }).find("cfg:2:") != std::string::npos);
    CHECK_THROWS_AS(parse_run_config(" = 3\n"), FormatError);
  }

  TEST_CASE("pgm output") {
    const auto p = scratch("m.pgm");
    write_pgm(p, {0, 1, 2, 4}, 2, 2);
    std::ifstream is(p, std::ios::binary);
    std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    CHECK(s.substr(0, 11) == "P5\n2 2\n255\n");
    CHECK(static_cast<unsigned char>(s[11 + 3]) == 255);
    CHECK(static_cast<unsigned char>(s[11]) == 0);
    CHECK_THROWS_AS(write_pgm(p, {0, 1}, 2, 2), DimensionError);
  }
}

TEST_SUITE("synth") {
  TEST_CASE("pairs are consistent with their ground truth") {
    for (SynthKind kind : {SynthKind::Blobs, SynthKind::CheckerOrgans, SynthKind::Texture}) {
      SynthSpec s;
      s.kind = kind;
      s.extents = {32, 32};
      s.max_displacement = 3;
      s.keypoints = 6;
      s.seed = 4;
      const auto pr = gen_synthetic_pair(s);
      // Largest displacement norm equals the requested magnitude.
      double mx = 0;
      const std::int64_t N = 32 * 32;
      for (std::int64_t p = 0; p < N; ++p) mx = std::max(mx, std::hypot(pr.phi_gt.u[p], pr.phi_gt.u[N + p]));
      CHECK(mx == doctest::Approx(3.0).epsilon(1e-9));
      CHECK(nd_voxels(pr.phi_gt).count == 0);
      // I_f = I_m o (id + u).
      const auto w = warp(pr.moving, pr.phi_gt.to_transform<double>());
      for (std::int64_t i = 0; i < N; ++i) CHECK(w.at(i) == doctest::Approx(pr.fixed.at(i)).epsilon(1e-12));
      for (double v : pr.moving.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      CHECK(pr.keypoints->size() == 6);
      CHECK(mean_tre(pr.phi_gt, *pr.keypoints) == doctest::Approx(0.0).epsilon(1e-9));
      CHECK(pr.fixed_labels.has_value() == (kind != SynthKind::Texture));
    }
  }

  TEST_CASE("generation is seeded and validates its spec") {
    SynthSpec s;
    s.extents = {16, 16};
    const auto a = gen_synthetic_pair(s), b = gen_synthetic_pair(s);
    CHECK(a.phi_gt.u == b.phi_gt.u);
    s.seed = 1;
    CHECK(gen_synthetic_pair(s).phi_gt.u != a.phi_gt.u);
    SynthSpec bad = s;
    bad.smoothness = 0;
    CHECK_THROWS_AS(gen_synthetic_pair(bad), ParameterError);
    bad = s;
    bad.extents = {2, 16};
    CHECK_THROWS_AS(gen_synthetic_pair(bad), ParameterError);
    CHECK_THROWS_AS(parse_synth_kind("noise"), ParameterError);
  }

  TEST_CASE("a field that always folds exhausts its attempts") {
    SynthSpec s;
    s.extents = {16, 16};
    s.smoothness = 0.5;
    s.max_displacement = 6;
    s.max_attempts = 2;
    CHECK_THROWS_AS(gen_synthetic_pair(s), ParameterError);
  }

  TEST_CASE("3-D pairs") {
    SynthSpec s;
    s.extents = {12, 12, 12};
    s.smoothness = 3;
    s.max_displacement = 1.5;
    const auto pr = gen_synthetic_pair(s);
    CHECK(pr.fixed.shape() == Shape{1, 12, 12, 12});
    CHECK(pr.phi_gt.u.size() == 3 * 12 * 12 * 12);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("save and load reproduce the model") {
    ModelConfig cfg;
    cfg.extractor.channels = {4, 8};
    cfg.extractor.match_channels = 6;
    cfg.extractor.shared_weights = false;
    cfg.attention.temperature = 0.5;
    cfg.attention.similarity = Similarity::Cosine;
    cfg.diffeomorphic = true;
    cfg.seed = 3;
    VfaModel<float> model(cfg, 2);
    model.set_beta(0.37);
    const auto p = scratch("m.ckpt");
    save_checkpoint(p, model, {{"note", "x"}});
    Metadata meta;
    const auto back = load_checkpoint<float>(p, &meta);
    CHECK(meta.at("note") == "x");
    CHECK(back.dims() == 2);
    CHECK(back.config().diffeomorphic);
    CHECK(*back.config().attention.temperature == 0.5);
    CHECK(back.config().attention.similarity == Similarity::Cosine);
    CHECK_FALSE(back.config().extractor.shared_weights);
    const auto pa = model.parameters(), pb = back.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].first == pb[i].first);
      CHECK(std::memcmp(pa[i].second.data().data(), pb[i].second.data().data(), sizeof(float) * pa[i].second.numel()) == 0);
    }
  }

  TEST_CASE("default temperature survives the config round trip") {
    ModelConfig cfg;
    const auto back = model_config_from_json(model_config_json(cfg));
    CHECK_FALSE(back.attention.temperature.has_value());
    CHECK(back.extractor.channels == cfg.extractor.channels);
    CHECK(back.beta0 == cfg.beta0);
  }

  TEST_CASE("corrupt checkpoints are rejected") {
    ModelConfig cfg;
    cfg.extractor.channels = {4, 8};
    VfaModel<float> model(cfg, 2);
    const auto p = scratch("c.ckpt");
    save_checkpoint(p, model);
    const auto size = fs::file_size(p);
    fs::resize_file(p, size - 4);
    CHECK(message_of<FormatError>([&] { load_checkpoint<float>(p); }).find("corrupt payload") != std::string::npos);
    write_text(p, "NOTACKPT\n{}\n");
    CHECK_THROWS_AS(load_checkpoint<float>(p), FormatError);
    CHECK_THROWS_AS(load_checkpoint<float>(scratch("nope.ckpt")), IoError);
  }
}
