#include <catch2/catch_amalgamated.hpp>

#include "sfda/augment.hpp"
#include "sfda/data.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

using namespace sfda;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;
using Catch::Matchers::WithinAbs;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("sfda_data_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Image solid(double r, double g, double b) {
  Image im(3, 4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      im.at(0, y, x) = r;
      im.at(1, y, x) = g;
      im.at(2, y, x) = b;
    }
  return im;
}

bool images_equal(const Image& a, const Image& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.px.size(); ++i)
    if (a.px[i] != b.px[i]) return false;
  return true;
}

double max_abs_diff(const Image& a, const Image& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (std::size_t i = 0; i < a.px.size(); ++i) m = std::max(m, std::abs(a.px[i] - b.px[i]));
  return m;
}

SyntheticShiftSpec small_spec(std::uint64_t seed, int domains, int per_domain) {
  SyntheticShiftSpec spec;
  spec.num_domains = domains;
  spec.num_classes = 4;
  spec.samples_per_domain = per_domain;
  spec.image_size = 32;
  spec.seed = seed;
  spec.corruption.assign(static_cast<std::size_t>(domains), SyntheticCorruption{});
  return spec;
}

// Nearest-template classifier: squared error against each class template over
// a grid of integer shifts. Stands in for the Bayes rule on clean renders,
// whose only nuisances are small translations, symmetric flips, and mild
// color jitter.
int template_classify(const Image& img, const std::vector<Image>& templates, int max_shift) {
  int best_class = -1;
  double best_score = 1e300;
  for (std::size_t k = 0; k < templates.size(); ++k) {
    const Image& t = templates[k];
    for (int dy = -max_shift; dy <= max_shift; ++dy)
      for (int dx = -max_shift; dx <= max_shift; ++dx) {
        double ssd = 0.0;
        for (int ch = 0; ch < img.c; ++ch)
          for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
              int ty = std::min(t.h - 1, std::max(0, y - dy));
              int tx = std::min(t.w - 1, std::max(0, x - dx));
              double d = img.at(ch, y, x) - t.at(ch, ty, tx);
              ssd += d * d;
            }
        if (ssd < best_score) {
          best_score = ssd;
          best_class = static_cast<int>(k);
        }
      }
  }
  return best_class;
}

template <typename T, typename = void>
struct exposes_labels : std::false_type {};
template <typename T>
struct exposes_labels<T, std::void_t<decltype(std::declval<const T&>().label(0))>>
    : std::true_type {};

}  // namespace

TEST_CASE("ppm files round-trip quantized pixel values") {
  fs::path dir = fresh_dir("ppm");
  Image im(3, 5, 7);
  for (std::size_t i = 0; i < im.px.size(); ++i)
    im.px[i] = static_cast<double>((i * 13) % 256) / 255.0;
  write_ppm(im, (dir / "a.ppm").string());
  Image back = read_ppm((dir / "a.ppm").string());
  REQUIRE(back.c == 3);
  REQUIRE(back.h == 5);
  REQUIRE(back.w == 7);
  REQUIRE(images_equal(im, back));

  Image off(3, 2, 2, 0.4999);
  write_ppm(off, (dir / "b.ppm").string());
  Image back2 = read_ppm((dir / "b.ppm").string());
  REQUIRE(max_abs_diff(off, back2) <= 0.5 / 255.0 + 1e-12);

  REQUIRE_THROWS_AS(read_ppm((dir / "missing.ppm").string()), IoError);
}

TEST_CASE("image ops behave as documented") {
  Image im(3, 4, 4);
  for (std::size_t i = 0; i < im.px.size(); ++i) im.px[i] = static_cast<double>(i) / 50.0;

  REQUIRE(images_equal(hflip(hflip(im)), im));

  Image sh = shift(im, 0, 1);
  REQUIRE(sh.at(0, 2, 3) == im.at(0, 2, 2));
  REQUIRE(sh.at(0, 2, 0) == im.at(0, 2, 0));  // edge replicated

  Image er = erase_rect(im, 1, 1, 2, 2, 0.5);
  REQUIRE(er.at(1, 1, 1) == 0.5);
  REQUIRE(er.at(1, 0, 0) == im.at(1, 0, 0));

  Image po = posterize(im, 4);
  for (double v : po.px) {
    double scaled = v * 3.0;
    REQUIRE_THAT(scaled, WithinAbs(std::round(scaled), 1e-12));
  }

  // Gray pixels sit on the rotation axis of the hue transform.
  Image gray = solid(0.3, 0.3, 0.3);
  REQUIRE(max_abs_diff(hue_rotate(gray, 40.0), gray) <= 1e-12);
  Image colored = solid(0.8, 0.2, 0.2);
  REQUIRE(max_abs_diff(hue_rotate(colored, 40.0), colored) > 0.01);
}

TEST_CASE("folder loader assigns class indices by sorted directory name") {
  fs::path root = fresh_dir("loader");
  fs::create_directories(root / "domainA" / "zebra");
  fs::create_directories(root / "domainA" / "apple");
  for (int i = 0; i < 3; ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "img%d.ppm", i);
    write_ppm(solid(0.1 * i, 0.2, 0.3), (root / "domainA" / "apple" / name).string());
    write_ppm(solid(0.4, 0.1 * i, 0.3), (root / "domainA" / "zebra" / name).string());
  }

  DomainDataset ds = load_image_folder(root, "domainA");
  REQUIRE(ds.size() == 6);
  REQUIRE(ds.num_classes() == 2);
  REQUIRE(ds.class_names() == std::vector<std::string>{"apple", "zebra"});
  REQUIRE(ds.key(0) == "domainA/apple/img0.ppm");
  REQUIRE(ds.label(0) == 0);
  REQUIRE(ds.key(3) == "domainA/zebra/img0.ppm");
  REQUIRE(ds.label(3) == 1);

  DomainDataset again = load_image_folder(root, "domainA");
  REQUIRE(again.size() == ds.size());
  for (int i = 0; i < ds.size(); ++i) {
    REQUIRE(again.key(i) == ds.key(i));
    REQUIRE(again.label(i) == ds.label(i));
  }
}

TEST_CASE("folder loader reports missing, empty, and unreadable inputs") {
  fs::path root = fresh_dir("loader_err");
  REQUIRE_THROWS_MATCHES(load_image_folder(root, "nope"), IoError,
                         MessageMatches(ContainsSubstring("nope")));

  fs::create_directories(root / "domainB" / "empty_class");
  REQUIRE_THROWS_MATCHES(load_image_folder(root, "domainB"), IoError,
                         MessageMatches(ContainsSubstring("empty_class")));

  std::ofstream(root / "domainB" / "empty_class" / "bad.ppm") << "not a ppm";
  REQUIRE_THROWS_AS(load_image_folder(root, "domainB"), IoError);
}

TEST_CASE("synthetic suite is bitwise reproducible per seed") {
  SyntheticShiftSpec spec = small_spec(11, 2, 16);
  spec.corruption[1].rotation_deg = 10.0;
  spec.corruption[1].noise_sigma = 0.05;

  std::vector<DomainDataset> a = make_synthetic_suite(spec);
  std::vector<DomainDataset> b = make_synthetic_suite(spec);
  REQUIRE(a.size() == 2);
  for (std::size_t d = 0; d < a.size(); ++d) {
    REQUIRE(a[d].domain_id() == b[d].domain_id());
    for (int i = 0; i < a[d].size(); ++i) {
      REQUIRE(a[d].key(i) == b[d].key(i));
      REQUIRE(a[d].label(i) == b[d].label(i));
      REQUIRE(images_equal(a[d].image(i), b[d].image(i)));
    }
  }

  spec.seed = 12;
  std::vector<DomainDataset> c = make_synthetic_suite(spec);
  bool any_diff = false;
  for (int i = 0; i < c[0].size() && !any_diff; ++i)
    any_diff = !images_equal(a[0].image(i), c[0].image(i));
  REQUIRE(any_diff);
}

TEST_CASE("synthetic suite layout: keys, balanced labels, class names") {
  std::vector<DomainDataset> suite = make_synthetic_suite(small_spec(3, 2, 10));
  REQUIRE(suite[0].domain_id() == "domain0");
  REQUIRE(suite[1].domain_id() == "domain1");
  REQUIRE(suite[0].key(0) == "domain0/000000");
  REQUIRE(suite[0].key(9) == "domain0/000009");
  for (int i = 0; i < 10; ++i) REQUIRE(suite[0].label(i) == i % 4);
  REQUIRE(suite[0].class_names() ==
          std::vector<std::string>{"c0_disk", "c1_square", "c2_plus", "c3_stripes"});
  REQUIRE(synthetic_class_names(6)[4] == "c4_disk");

  SyntheticShiftSpec bad = small_spec(3, 2, 10);
  bad.num_classes = 1;
  REQUIRE_THROWS_AS(make_synthetic_suite(bad), ValidationError);
  bad = small_spec(3, 2, 3);
  REQUIRE_THROWS_AS(make_synthetic_suite(bad), ValidationError);
  bad = small_spec(3, 2, 10);
  bad.corruption.pop_back();
  REQUIRE_THROWS_AS(make_synthetic_suite(bad), ValidationError);
}

TEST_CASE("zero corruption leaves domains identically distributed") {
  std::vector<DomainDataset> suite = make_synthetic_suite(small_spec(5, 2, 600));
  // Different sample streams, so pixels differ...
  REQUIRE(!images_equal(suite[0].image(0), suite[1].image(0)));
  // ...but per-class mean images agree closely.
  for (int k = 0; k < 4; ++k) {
    Image mean0(3, 32, 32), mean1(3, 32, 32);
    int n0 = 0, n1 = 0;
    for (int i = 0; i < suite[0].size(); ++i) {
      if (suite[0].label(i) == k) {
        const Image& im = suite[0].image(i);
        for (std::size_t p = 0; p < im.px.size(); ++p) mean0.px[p] += im.px[p];
        ++n0;
      }
      if (suite[1].label(i) == k) {
        const Image& im = suite[1].image(i);
        for (std::size_t p = 0; p < im.px.size(); ++p) mean1.px[p] += im.px[p];
        ++n1;
      }
    }
    double diff = 0.0;
    for (std::size_t p = 0; p < mean0.px.size(); ++p)
      diff += std::abs(mean0.px[p] / n0 - mean1.px[p] / n1);
    diff /= static_cast<double>(mean0.px.size());
    REQUIRE(diff < 0.02);
  }
}

TEST_CASE("weak augmentation keeps shape classes recoverable") {
  std::vector<DomainDataset> suite = make_synthetic_suite(small_spec(21, 1, 300));
  const DomainDataset& clean = suite[0];

  std::vector<Image> templates;
  for (int k = 0; k < 4; ++k) templates.push_back(synthetic_class_template(k, 32));

  AugmentationPair weak_only{parse_aug_ops("hflip,crop4"), {}};
  Rng rng(99);
  int correct = 0;
  for (int i = 0; i < clean.size(); ++i) {
    Image aug = apply_pipeline(clean.image(i), weak_only.weak_ops, rng);
    REQUIRE(aug.h == 32);
    REQUIRE(aug.w == 32);
    if (template_classify(aug, templates, 8) == clean.label(i)) ++correct;
  }
  double acc = static_cast<double>(correct) / clean.size();
  REQUIRE(acc >= 0.99);
}

TEST_CASE("augment pair: identity, reproducibility, strong view differs") {
  std::vector<DomainDataset> suite = make_synthetic_suite(small_spec(8, 1, 100));
  const DomainDataset& ds = suite[0];

  AugmentationPair identity{{}, {}};
  Rng r0(1);
  auto [w0, s0] = augment_pair(ds.image(0), identity, r0);
  REQUIRE(images_equal(w0, ds.image(0)));
  REQUIRE(images_equal(s0, ds.image(0)));

  AugmentationPair full{parse_aug_ops("hflip,crop4"),
                        parse_aug_ops("hflip,crop4,randaug2,erase")};
  Rng ra(42), rb(42);
  auto [wa, sa] = augment_pair(ds.image(1), full, ra);
  auto [wb, sb] = augment_pair(ds.image(1), full, rb);
  REQUIRE(images_equal(wa, wb));
  REQUIRE(images_equal(sa, sb));

  Rng rc(7);
  int differing = 0;
  for (int i = 0; i < 100; ++i) {
    auto [w, s] = augment_pair(ds.image(i), full, rc);
    REQUIRE(w.h == 32);
    REQUIRE(s.h == 32);
    if (!images_equal(w, s)) ++differing;
  }
  REQUIRE(differing >= 99);

  REQUIRE_THROWS_MATCHES(parse_aug_ops("hflip,wiggle"), ValidationError,
                         MessageMatches(ContainsSubstring("wiggle")));
  REQUIRE(parse_aug_ops("none").empty());
  REQUIRE(parse_aug_ops("").empty());
}

TEST_CASE("unlabeled view strips labels at the type level and reads are audited") {
  STATIC_REQUIRE(exposes_labels<DomainDataset>::value);
  STATIC_REQUIRE(!exposes_labels<UnlabeledView>::value);

  std::vector<DomainDataset> suite = make_synthetic_suite(small_spec(2, 1, 8));
  const DomainDataset& ds = suite[0];
  REQUIRE(ds.image_reads() == 0);
  ds.image(0);
  ds.image(1);
  REQUIRE(ds.image_reads() == 2);

  UnlabeledView view(ds);
  REQUIRE(view.size() == 8);
  REQUIRE(view.key(3) == ds.key(3));
  view.image(2);
  REQUIRE(ds.image_reads() == 3);

  EvalChannel eval(ds);
  REQUIRE(eval.size() == 8);
  REQUIRE(eval.label_of(ds.key(5)) == ds.label(5));
  REQUIRE_THROWS_MATCHES(eval.label_of("domain9/000000"), ValidationError,
                         MessageMatches(ContainsSubstring("domain9/000000")));
  // The audit counter ignores label lookups.
  REQUIRE(ds.image_reads() == 3);
}

TEST_CASE("exported synthetic domain reloads through the folder path") {
  std::vector<DomainDataset> suite = make_synthetic_suite(small_spec(13, 1, 12));
  fs::path root = fresh_dir("export");
  export_domain(suite[0], root);

  DomainDataset back = load_image_folder(root, "domain0");
  REQUIRE(back.size() == 12);
  REQUIRE(back.num_classes() == 4);
  REQUIRE(back.class_names() == suite[0].class_names());

  // Folder order groups by class; match by the index embedded in the name.
  int matched = 0;
  for (int i = 0; i < back.size(); ++i) {
    std::string file = back.key(i).substr(back.key(i).rfind('/') + 1);
    int orig = std::stoi(file.substr(0, 6));
    REQUIRE(back.label(i) == suite[0].label(orig));
    REQUIRE(max_abs_diff(back.image(i), suite[0].image(orig)) <= 0.5 / 255.0 + 1e-12);
    ++matched;
  }
  REQUIRE(matched == 12);
}

TEST_CASE("batch index lists cover every sample and avoid singleton tails") {
  Rng rng(5);
  auto batches = make_batches(5, 2, rng);
  REQUIRE(batches.size() == 2);
  REQUIRE(batches[0].size() == 2);
  REQUIRE(batches[1].size() == 3);
  std::set<int> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  REQUIRE(seen == std::set<int>{0, 1, 2, 3, 4});

  Rng r1(9), r2(9);
  REQUIRE(make_batches(100, 32, r1) == make_batches(100, 32, r2));

  Rng r3(9);
  auto one = make_batches(1, 4, r3);
  REQUIRE(one.size() == 1);
  REQUIRE(one[0] == std::vector<int>{0});
  REQUIRE_THROWS_AS(make_batches(4, 0, r3), ValidationError);
}
