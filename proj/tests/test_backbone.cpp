#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "afine/backbone.hpp"
#include "afine/model.hpp"

using namespace afine;

namespace {

FeaturePyramid extract(Tape& tape, const Image& img, const ModelParameters& m) {
  BoundParams bound = BoundParams::bind_frozen(tape, m.params);
  return extract_pyramid(tape, img, m.config, bound);
}

}  // namespace

TEST_CASE("toy pyramid grids halve per stage") {
  ModelParameters m = init_model(BackboneConfig::toy(7));
  Image img = synthetic_content(32, 32, 1);
  Tape tape(false);
  FeaturePyramid pyr = extract(tape, img, m);

  REQUIRE(pyr.stages.size() == 4);  // raw image + 3 conv stages
  REQUIRE(pyr.stages[0].stage_index == 0);
  REQUIRE(tape.value(pyr.stages[0].features).shape == std::vector<std::size_t>{3, 32, 32});
  REQUIRE(tape.value(pyr.stage(1).features).shape == std::vector<std::size_t>{8, 16, 16});
  REQUIRE(tape.value(pyr.stage(2).features).shape == std::vector<std::size_t>{16, 8, 8});
  REQUIRE(tape.value(pyr.stage(3).features).shape == std::vector<std::size_t>{32, 4, 4});
}

TEST_CASE("toy pyramid handles non-square and odd sizes") {
  ModelParameters m = init_model(BackboneConfig::toy(7));
  Image img = synthetic_content(21, 34, 2);
  Tape tape(false);
  FeaturePyramid pyr = extract(tape, img, m);
  // ceil halving from conv stride 2, pad 1, kernel 3
  REQUIRE(tape.value(pyr.stage(1).features).shape == std::vector<std::size_t>{8, 11, 17});
  REQUIRE(tape.value(pyr.stage(2).features).shape == std::vector<std::size_t>{16, 6, 9});
  REQUIRE(tape.value(pyr.stage(3).features).shape == std::vector<std::size_t>{32, 3, 5});
}

TEST_CASE("transformer stages expose a patch-grid of embed_dim channels") {
  ModelParameters m = init_model(BackboneConfig::tiny_transformer(3));
  SECTION("resolution matching the positional grid") {
    Image img = synthetic_content(32, 32, 4);
    Tape tape(false);
    FeaturePyramid pyr = extract(tape, img, m);
    for (int id : m.config.tapped_stage_ids())
      REQUIRE(tape.value(pyr.stage(id).features).shape == std::vector<std::size_t>{16, 4, 4});
  }
  SECTION("larger resolution interpolates the positional grid") {
    Image img = synthetic_content(64, 64, 5);
    Tape tape(false);
    FeaturePyramid pyr = extract(tape, img, m);
    REQUIRE(tape.value(pyr.stage(4).features).shape == std::vector<std::size_t>{16, 8, 8});
  }
  SECTION("token count is floor(H/p) * floor(W/p) for arbitrary sizes") {
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<int> dim(8, 61);
    for (int trial = 0; trial < 5; ++trial) {
      int h = dim(rng), w = dim(rng);
      Image img = synthetic_content(h, w, 100 + trial);
      Tape tape(false);
      FeaturePyramid pyr = extract(tape, img, m);
      const Tensor& f = tape.value(pyr.stage(1).features);
      REQUIRE(f.dim(1) == std::size_t(h / 8));
      REQUIRE(f.dim(2) == std::size_t(w / 8));
      REQUIRE(f.dim(0) == 16);
    }
  }
}

TEST_CASE("vit-b/32 geometry at 224x224") {
  // Full-size instantiation; verifies the 7x7x768 stage layout of the
  // default transformer.
  ModelParameters m = init_model(BackboneConfig::vit_b32(0));
  Image img = synthetic_content(224, 224, 6);
  Tape tape(false);
  FeaturePyramid pyr = extract(tape, img, m);
  REQUIRE(pyr.stages.size() == 13);  // raw + 12 blocks
  for (int id : {3, 6, 9, 12})
    REQUIRE(tape.value(pyr.stage(id).features).shape == std::vector<std::size_t>{768, 7, 7});
}

TEST_CASE("extraction is deterministic") {
  ModelParameters m = init_model(BackboneConfig::toy(11));
  Image img = synthetic_content(24, 24, 12);
  Tape t1(false), t2(false);
  FeaturePyramid p1 = extract(t1, img, m);
  FeaturePyramid p2 = extract(t2, img, m);
  for (std::size_t s = 0; s < p1.stages.size(); ++s) {
    const Tensor& a = t1.value(p1.stages[s].features);
    const Tensor& b = t2.value(p2.stages[s].features);
    REQUIRE(a.data == b.data);
  }
}

TEST_CASE("extraction input validation") {
  ModelParameters m = init_model(BackboneConfig::toy(1));
  Tape tape(false);
  BoundParams bound = BoundParams::bind_frozen(tape, m.params);

  Image tiny = synthetic_content(4, 4, 1);
  REQUIRE_THROWS_AS(extract_pyramid(tape, tiny, m.config, bound), DimensionError);

  Image bad = synthetic_content(16, 16, 1);
  bad.data[0] = 1.5;
  REQUIRE_THROWS_AS(extract_pyramid(tape, bad, m.config, bound), DataError);

  BackboneConfig cfg = m.config;
  cfg.fidelity_stage_ids = {1, 5};  // beyond depth
  REQUIRE_THROWS_AS(extract_pyramid(tape, synthetic_content(16, 16, 1), cfg, bound), ConfigError);

  cfg = m.config;
  cfg.naturalness_stage_ids = {2, 2};  // not strictly increasing
  REQUIRE_THROWS_AS(extract_pyramid(tape, synthetic_content(16, 16, 1), cfg, bound), ConfigError);
}

TEST_CASE("positional grid interpolation") {
  SECTION("identity at matching size is exact") {
    Tensor g({5, 5, 3});
    std::mt19937_64 rng(5);
    g.fill_uniform(rng, -1.0, 1.0);
    Tensor out = interpolate_positional_grid(g, 5, 5);
    REQUIRE(out.data == g.data);
  }
  SECTION("2x2 scalars to 3x3 puts the average at the center") {
    Tensor g({2, 2, 1});
    g.data = {0.0, 1.0, 2.0, 3.0};
    Tensor out = interpolate_positional_grid(g, 3, 3);
    REQUIRE_THAT(out[4], Catch::Matchers::WithinAbs(1.5, 1e-12));
  }
  SECTION("7x7 to 16x16 preserves corner vectors exactly") {
    Tensor g({7, 7, 4});
    std::mt19937_64 rng(6);
    g.fill_uniform(rng, -1.0, 1.0);
    Tensor out = interpolate_positional_grid(g, 16, 16);
    auto vec_at = [](const Tensor& t, std::size_t y, std::size_t x, std::size_t w) {
      std::vector<double> v(t.dim(2));
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = t[(y * w + x) * t.dim(2) + k];
      return v;
    };
    REQUIRE(vec_at(out, 0, 0, 16) == vec_at(g, 0, 0, 7));
    REQUIRE(vec_at(out, 0, 15, 16) == vec_at(g, 0, 6, 7));
    REQUIRE(vec_at(out, 15, 0, 16) == vec_at(g, 6, 0, 7));
    REQUIRE(vec_at(out, 15, 15, 16) == vec_at(g, 6, 6, 7));
  }
  SECTION("source grid must be at least 2x2") {
    Tensor g({1, 2, 1});
    g.data = {0.0, 1.0};
    REQUIRE_THROWS_AS(interpolate_positional_grid(g, 3, 3), DimensionError);
  }
}

TEST_CASE("stage statistics") {
  SECTION("constant map against itself") {
    Tensor x({1, 2, 2}, 0.7);
    ChannelStats st = stage_statistics(x, x);
    REQUIRE_THAT(st.mean_x[0], Catch::Matchers::WithinAbs(0.7, 1e-15));
    REQUIRE_THAT(st.var_x[0], Catch::Matchers::WithinAbs(0.0, 1e-15));
    REQUIRE_THAT(st.cov_xy[0], Catch::Matchers::WithinAbs(0.0, 1e-15));
  }
  SECTION("hand-computed covariance") {
    Tensor x({1, 1, 4});
    x.data = {1, 2, 3, 4};
    Tensor y({1, 1, 4});
    y.data = {4, 3, 2, 1};
    ChannelStats st = stage_statistics(x, y);
    REQUIRE_THAT(st.mean_x[0], Catch::Matchers::WithinAbs(2.5, 1e-12));
    REQUIRE_THAT(st.mean_y[0], Catch::Matchers::WithinAbs(2.5, 1e-12));
    REQUIRE_THAT(st.var_x[0], Catch::Matchers::WithinAbs(1.25, 1e-12));
    REQUIRE_THAT(st.var_y[0], Catch::Matchers::WithinAbs(1.25, 1e-12));
    REQUIRE_THAT(st.cov_xy[0], Catch::Matchers::WithinAbs(-1.25, 1e-12));
  }
  SECTION("self-covariance equals variance on random maps") {
    std::mt19937_64 rng(17);
    Tensor x({4, 6, 5});
    x.fill_uniform(rng, -2.0, 2.0);
    ChannelStats st = stage_statistics(x, x);
    for (std::size_t c = 0; c < 4; ++c)
      REQUIRE_THAT(st.cov_xy[c], Catch::Matchers::WithinAbs(st.var_x[c], 1e-9));
  }
  SECTION("shape mismatch raises") {
    Tensor x({1, 2, 2}), y({1, 2, 3});
    REQUIRE_THROWS_AS(stage_statistics(x, y), DimensionError);
  }
}
