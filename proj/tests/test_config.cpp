#include <catch2/catch_amalgamated.hpp>

#include "sfda/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

using namespace sfda;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

TEST_CASE("fnv1a64 matches published test vectors") {
  REQUIRE(fnv1a64(std::string("")) == 0xcbf29ce484222325ULL);
  REQUIRE(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cULL);
  REQUIRE(fnv1a64(std::string("foobar")) == 0x85944171f73967e8ULL);
  REQUIRE(hex64(0xaf63dc4c8601ec8cULL) == "af63dc4c8601ec8c");
}

TEST_CASE("format_double round-trips exactly") {
  std::vector<double> cases = {0.0,    1.0,       -1.0,   0.1,         0.30000000000000004,
                               3.1415926535897931, 1e-300, 1e300, -2.2250738585072014e-308,
                               42.0,   1.0 / 3.0};
  for (double v : cases) {
    std::string s = format_double(v);
    double back = std::strtod(s.c_str(), nullptr);
    REQUIRE(back == v);
  }
}

TEST_CASE("rng streams are reproducible") {
  Rng a(123), b(123), c(124);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    double va = a.uniform(), vb = b.uniform(), vc = c.uniform();
    all_equal = all_equal && va == vb;
    any_diff = any_diff || va != vc;
    REQUIRE(va >= 0.0);
    REQUIRE(va < 1.0);
  }
  REQUIRE(all_equal);
  REQUIRE(any_diff);
}

TEST_CASE("rng split derives independent child streams") {
  Rng root(7);
  Rng c1 = root.split(1);
  Rng c2 = root.split(2);
  Rng c1_again = root.split(1);
  REQUIRE(c1.uniform() == c1_again.uniform());
  REQUIRE(c1.seed() != c2.seed());
  Rng named = root.split("stage2/domain1");
  Rng named_again = root.split("stage2/domain1");
  REQUIRE(named.uniform() == named_again.uniform());
}

TEST_CASE("rng distributions have sane support and moments") {
  Rng rng(99);
  double nsum = 0.0, nsq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double v = rng.normal();
    REQUIRE(std::isfinite(v));
    nsum += v;
    nsq += v * v;
  }
  REQUIRE_THAT(nsum / n, WithinAbs(0.0, 0.05));
  REQUIRE_THAT(nsq / n, WithinAbs(1.0, 0.05));

  double gsum = 0.0;
  for (int i = 0; i < n; ++i) {
    double v = rng.gamma(0.75);
    REQUIRE(v > 0.0);
    gsum += v;
  }
  REQUIRE_THAT(gsum / n, WithinAbs(0.75, 0.05));  // mean of gamma(alpha,1) is alpha

  double bsum = 0.0;
  for (int i = 0; i < n; ++i) {
    double v = rng.beta(0.75, 0.75);
    REQUIRE(v > 0.0);
    REQUIRE(v < 1.0);
    bsum += v;
  }
  REQUIRE_THAT(bsum / n, WithinAbs(0.5, 0.02));  // symmetric beta is centered

  REQUIRE_THROWS_AS(rng.gamma(0.0), ValidationError);
  REQUIRE_THROWS_AS(rng.uniform_int(0), ValidationError);
}

TEST_CASE("rng shuffle is a deterministic permutation") {
  Rng a(5), b(5);
  std::vector<int> v1 = range_indices(50);
  std::vector<int> v2 = range_indices(50);
  a.shuffle(v1);
  b.shuffle(v2);
  REQUIRE(v1 == v2);
  std::set<int> seen(v1.begin(), v1.end());
  REQUIRE(seen.size() == 50);
  REQUIRE(*seen.begin() == 0);
  REQUIRE(*seen.rbegin() == 49);
  REQUIRE(v1 != range_indices(50));
}

TEST_CASE("default config validates and hashes stably") {
  AdaptationConfig a, b;
  REQUIRE_NOTHROW(a.validate());
  REQUIRE(a.canonical() == b.canonical());
  REQUIRE(a.hash() == b.hash());
  REQUIRE(a.hash().size() == 16);

  b.set("optim.lr", "0.02");
  REQUIRE(a.hash() != b.hash());
  REQUIRE(b.lr == 0.02);
}

TEST_CASE("config rejects unknown keys and malformed values") {
  AdaptationConfig cfg;
  REQUIRE_THROWS_MATCHES(cfg.set("optim.learning_rate", "0.1"), ValidationError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("optim.learning_rate")));
  REQUIRE_THROWS_AS(cfg.set("optim.lr", "fast"), ValidationError);
  REQUIRE_THROWS_AS(cfg.set("train.batch_size", "3.5"), ValidationError);
  REQUIRE_THROWS_AS(cfg.set("seed", "-1"), ValidationError);
  REQUIRE_THROWS_AS(AdaptationConfig::from_string("no_equals_here\n"), ValidationError);
}

TEST_CASE("config validation enforces ranges") {
  AdaptationConfig cfg;
  cfg.batch_size = 1;
  REQUIRE_THROWS_AS(cfg.validate(), ValidationError);
  cfg = AdaptationConfig{};
  cfg.lr = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), ValidationError);
  cfg = AdaptationConfig{};
  cfg.backbone_id = "resnet50";
  REQUIRE_THROWS_AS(cfg.validate(), ValidationError);
  cfg = AdaptationConfig{};
  cfg.loss_weights.lambda_pl = -0.1;
  REQUIRE_THROWS_AS(cfg.validate(), ValidationError);
  cfg = AdaptationConfig{};
  cfg.plr_alpha = 1.5;
  REQUIRE_THROWS_AS(cfg.validate(), ValidationError);
  cfg = AdaptationConfig{};
  cfg.stage2_objective = "entropy";
  REQUIRE_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("config file round-trip preserves the hash") {
  namespace fs = std::filesystem;
  AdaptationConfig cfg;
  cfg.set("optim.lr", format_double(0.1 + 0.2));  // value without a short decimal form
  cfg.set("target_domains", "domain1,domain2");
  cfg.set("loss.lambda_pl", "0.35");
  cfg.set("aug.strong", "hflip,randaug2");

  fs::path path = fs::temp_directory_path() / "sfda_config_roundtrip.cfg";
  cfg.save(path.string());
  AdaptationConfig loaded = AdaptationConfig::load(path.string());
  REQUIRE(loaded.canonical() == cfg.canonical());
  REQUIRE(loaded.hash() == cfg.hash());
  REQUIRE(loaded.lr == 0.1 + 0.2);
  REQUIRE(loaded.target_domains == std::vector<std::string>{"domain1", "domain2"});
  fs::remove(path);

  REQUIRE_THROWS_AS(AdaptationConfig::load("/nonexistent/sfda.cfg"), IoError);
}

TEST_CASE("config text accepts comments and blank lines") {
  AdaptationConfig cfg = AdaptationConfig::from_string(
      "# stage-2 sweep\n"
      "\n"
      "optim.lr = 0.005\n"
      "  loss.lambda_cons =  2.0  \n");
  REQUIRE(cfg.lr == 0.005);
  REQUIRE(cfg.loss_weights.lambda_cons == 2.0);
}

TEST_CASE("synthetic spec derivation scales corruption by magnitude") {
  AdaptationConfig cfg;
  cfg.synth_magnitudes = {0.0, 0.5, 1.0, 2.0};
  SyntheticShiftSpec spec = cfg.synthetic_spec();
  REQUIRE_NOTHROW(spec.validate());
  REQUIRE(spec.corruption.size() == 4);
  REQUIRE(spec.corruption[0].rotation_deg == 0.0);  // clean source domain
  REQUIRE(spec.corruption[0].noise_sigma == 0.0);
  REQUIRE_THAT(spec.corruption[1].rotation_deg, WithinAbs(cfg.synth_base.rotation_deg * 0.5, 1e-12));
  REQUIRE_THAT(spec.corruption[3].hue_deg, WithinAbs(cfg.synth_base.hue_deg * 2.0, 1e-12));

  SyntheticShiftSpec bad = spec;
  bad.num_classes = 1;
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = spec;
  bad.samples_per_domain = 2;
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = spec;
  bad.corruption.pop_back();
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
}
