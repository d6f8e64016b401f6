#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "asen/dataset.hpp"
#include "asen/error.hpp"
#include "support.hpp"

using namespace asen;

namespace {

DatasetManifest small_manifest(std::size_t images, std::size_t attributes = 2, std::size_t values = 3) {
  DatasetManifest m;
  for (std::size_t a = 0; a < attributes; ++a) {
    AttributeInfo info{"attr" + std::to_string(a), {}};
    for (std::size_t v = 0; v < values; ++v) info.values.push_back("val" + std::to_string(v));
    m.vocabulary.attributes.push_back(info);
  }
  for (std::size_t i = 0; i < images; ++i) {
    AnnotationRecord r{"im" + std::to_string(i), {}};
    for (std::size_t a = 0; a < attributes; ++a) r.labels.push_back({a, (i + a) % values});
    m.records.push_back(r);
  }
  return m;
}

std::string read_error(const std::string& text) {
  std::istringstream in(text);
  try {
    read_manifest(in);
  } catch (const FormatError& e) {
    return e.what();
  }
  return {};
}

const char* kHeader =
    "[vocabulary]\n"
    "attribute collar round v_neck\n"
    "attribute sleeve short long sleeveless\n"
    "[records]\n";

// Mean colour of one quadrant of a 3 x s x s image.
std::array<Real, 3> quadrant_colour(const Tensor& img, std::size_t quadrant) {
  const std::size_t s = img.dim(1), half = s / 2;
  const std::size_t y0 = (quadrant / 2) * half, x0 = (quadrant % 2) * half;
  std::array<Real, 3> mean{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t y = 0; y < half; ++y)
      for (std::size_t x = 0; x < half; ++x) mean[ch] += img.at(ch, y0 + y, x0 + x);
    mean[ch] /= static_cast<Real>(half * half);
  }
  return mean;
}

// Nearest-centroid classifier of attribute `attr` from quadrant `quadrant`; trains on the
// first half of the images and reports accuracy on the second half.
Real quadrant_classifier_accuracy(const Dataset& ds, std::size_t attr, std::size_t quadrant,
                                  std::size_t values) {
  const std::size_t n = ds.inputs.size(), half = n / 2;
  std::vector<std::array<Real, 3>> centroid(values, std::array<Real, 3>{});
  std::vector<std::size_t> count(values, 0);
  for (std::size_t i = 0; i < half; ++i) {
    const std::size_t v = *ds.manifest.records[i].value_of(attr);
    const auto c = quadrant_colour(ds.inputs[i], quadrant);
    for (std::size_t ch = 0; ch < 3; ++ch) centroid[v][ch] += c[ch];
    ++count[v];
  }
  for (std::size_t v = 0; v < values; ++v)
    for (auto& x : centroid[v]) x /= static_cast<Real>(std::max<std::size_t>(1, count[v]));
  std::size_t correct = 0;
  for (std::size_t i = half; i < n; ++i) {
    const auto c = quadrant_colour(ds.inputs[i], quadrant);
    std::size_t best = 0;
    Real best_d = INFINITY;
    for (std::size_t v = 0; v < values; ++v) {
      Real d = 0;
      for (std::size_t ch = 0; ch < 3; ++ch) d += (c[ch] - centroid[v][ch]) * (c[ch] - centroid[v][ch]);
      if (d < best_d) best_d = d, best = v;
    }
    correct += best == *ds.manifest.records[i].value_of(attr);
  }
  return static_cast<Real>(correct) / static_cast<Real>(n - half);
}

}  // namespace

TEST_CASE("manifest round trip") {
  SplitResult split = split_dataset(small_manifest(40), {{8, 1, 1}, 0.25, 3});
  std::stringstream s;
  write_manifest(s, split.manifest);
  CHECK(read_manifest(s) == split.manifest);

  DatasetManifest unsplit = small_manifest(5);
  unsplit.source = ImageSource::features;
  const auto path = std::filesystem::temp_directory_path() / "asen_unit_manifest.txt";
  save_manifest(path, unsplit);
  CHECK(load_manifest(path) == unsplit);

  std::istringstream multi(std::string(kHeader) + "a 0:1 1:2\nb 1:0\nc\n");
  DatasetManifest m = read_manifest(multi);
  CHECK(m.records.size() == 3);
  CHECK(m.records[1].value_of(0) == std::nullopt);
  CHECK(m.records[1].value_of(1) == 0u);
}

TEST_CASE("manifest errors carry line numbers") {
  const std::string dup = read_error(std::string(kHeader) + "a 0:1\nshirt_9 0:1 0:2\n");
  CHECK(dup.find("line 6") != std::string::npos);
  CHECK(dup.find("shirt_9") != std::string::npos);

  CHECK(read_error(std::string(kHeader) + "a 2:0\n").find("line 5: unknown attribute") != std::string::npos);
  CHECK(read_error(std::string(kHeader) + "a 0:3\n").find("line 5: unknown value") != std::string::npos);
  CHECK(read_error(std::string(kHeader) + "a 0-1\n").find("line 5") != std::string::npos);
  CHECK(read_error(std::string(kHeader) + "a x:1\n").find("line 5") != std::string::npos);
  CHECK(read_error("[meta]\nsource somewhere\n").find("line 2") != std::string::npos);
  CHECK(read_error("[bogus]\n").find("line 1") != std::string::npos);
  CHECK(read_error("[records]\na\n").find("empty attribute vocabulary") != std::string::npos);
  CHECK(read_error("[vocabulary]\nattribute only_one v\n").find("at least two values") != std::string::npos);
  CHECK(read_error("[vocabulary]\nattribute a x y\nattribute a x y\n").find("duplicate attribute") !=
        std::string::npos);
  CHECK(read_error(std::string(kHeader) + "a 0:1\na 1:0\n").find("line 6: duplicate image id") != std::string::npos);
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec spec;
  spec.quadrants = {0, 1, 1, 3};
  CHECK_THROWS_AS(spec.validate(), SpecError);
  spec = {};
  spec.values_per_attribute = 1;
  CHECK_THROWS_AS(spec.validate(), SpecError);
  spec = {};
  spec.image_size = 30 + 1;
  CHECK_THROWS_AS(spec.validate(), SpecError);
  spec = {};
  spec.quadrants = {0, 1, 2};
  CHECK_THROWS_AS(spec.validate(), SpecError);
  CHECK_NOTHROW(SyntheticSpec{}.validate());
}

TEST_CASE("synthetic generation is deterministic and labelled") {
  SyntheticSpec spec;
  spec.images = 50;
  spec.seed = 21;
  Dataset a = generate_synthetic_dataset(spec), b = generate_synthetic_dataset(spec);
  CHECK(a.manifest == b.manifest);
  CHECK(a.inputs == b.inputs);
  CHECK(a.manifest.records[7].image_id == "img_00007");
  CHECK(a.manifest.vocabulary.names() == std::vector<std::string>{"top_left", "top_right", "bottom_left", "bottom_right"});
  for (const auto& img : a.inputs) {
    CHECK(img.shape() == Shape{3, 32, 32});
    for (Real x : img.data()) CHECK((x >= 0.0 && x <= 1.0));
  }
  spec.seed = 22;
  CHECK_FALSE(generate_synthetic_dataset(spec).inputs == a.inputs);

  SyntheticSpec clean;
  clean.noise = 0;
  const std::size_t values[] = {1, 3, 0, 2};
  CHECK(render_synthetic_image(clean, values, 5) == render_synthetic_image(clean, values, 99));
}

TEST_CASE("a value only changes pixels inside its attribute's quadrant") {
  SyntheticSpec clean;
  clean.noise = 0;
  const std::size_t base[] = {0, 1, 2, 3};
  const Tensor ref = render_synthetic_image(clean, base, 0);
  for (std::size_t a = 0; a < 4; ++a) {
    std::vector<std::size_t> changed(base, base + 4);
    changed[a] = (changed[a] + 1) % 4;
    const Tensor img = render_synthetic_image(clean, changed, 0);
    std::size_t differing = 0;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) {
          if (img.at(ch, y, x) == ref.at(ch, y, x)) continue;
          ++differing;
          CHECK(quadrant_of(y, x, 32, 32) == a);
        }
    CHECK(differing > 0);
  }
}

TEST_CASE("values are predictable from the owned quadrant only") {
  SyntheticSpec spec;
  spec.images = 2000;
  spec.seed = 4;
  spec.noise = 0;
  const Dataset clean = generate_synthetic_dataset(spec);
  spec.noise = 0.1;
  const Dataset noisy = generate_synthetic_dataset(spec);
  // Binomial 3-sigma band around chance for 1000 test images.
  const Real chance = 0.25, band = 3 * std::sqrt(chance * (1 - chance) / 1000);
  for (std::size_t a = 0; a < 4; ++a) {
    CAPTURE(a);
    CHECK(quadrant_classifier_accuracy(clean, a, a, 4) > 0.9);
    CHECK(quadrant_classifier_accuracy(noisy, a, a, 4) > 0.9);
    const std::size_t wrong = (a + 1) % 4;
    CHECK(std::abs(quadrant_classifier_accuracy(clean, a, wrong, 4) - chance) < band);
  }
}

TEST_CASE("split examples") {
  SplitResult ten = split_dataset(small_manifest(10), {{8, 1, 1}, 0.2, 0});
  CHECK(ten.counts == std::array<std::size_t, 3>{8, 1, 1});
  CHECK(ten.manifest.indices(Split::train).size() == 8);

  SplitResult again = split_dataset(small_manifest(10), {{8, 1, 1}, 0.2, 0});
  CHECK(again.manifest == ten.manifest);
  CHECK_FALSE(split_dataset(small_manifest(10), {{8, 1, 1}, 0.2, 1}).manifest.splits == ten.manifest.splits);

  // 10000 images at 8:1:1 leave 1000 images in each of val and test.
  SplitResult big = split_dataset(small_manifest(10000), {{8, 1, 1}, 0.2, 5});
  CHECK(big.counts == std::array<std::size_t, 3>{8000, 1000, 1000});
  CHECK(big.val_roles == std::array<std::size_t, 2>{200, 800});
  CHECK(big.test_roles == std::array<std::size_t, 2>{200, 800});
  CHECK(big.manifest.indices(Split::test, Role::query).size() == 200);
  CHECK(big.manifest.indices(Split::val, Role::candidate).size() == 800);

  SplitResult thousand = split_dataset(small_manifest(1000), {{8, 1, 1}, 0.2, 5});
  CHECK(thousand.val_roles == std::array<std::size_t, 2>{20, 80});
  CHECK(thousand.manifest.ratios[0] == doctest::Approx(0.8));

  CHECK_THROWS_AS(split_dataset(small_manifest(10), {{8, 0, 1}, 0.2, 0}), ContractError);
  CHECK_THROWS_AS(split_dataset(small_manifest(10), {{8, 1, 1}, 1.0, 0}), ContractError);
}

TEST_CASE("splits partition the records and roles cover val and test") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SplitResult r = split_dataset(small_manifest(97), {{8, 1, 1}, 0.2, seed});
    const auto& m = r.manifest;
    CHECK(m.indices(Split::train).size() + m.indices(Split::val).size() + m.indices(Split::test).size() == 97);
    for (std::size_t i = 0; i < 97; ++i) {
      CHECK(m.splits[i] != Split::none);
      CHECK((m.splits[i] == Split::train) == (m.roles[i] == Role::none));
    }
  }
}

TEST_CASE("values missing from the train split produce warnings") {
  DatasetManifest m = small_manifest(20, 1, 2);
  m.vocabulary.attributes[0].values.push_back("rare");
  m.records[13].labels[0].value = 2;
  bool saw_warning = false, saw_clean = false;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    SplitResult r = split_dataset(m, {{8, 1, 1}, 0.2, seed});
    const bool rare_in_train = r.manifest.splits[13] == Split::train;
    CHECK(r.warnings.empty() == rare_in_train);
    if (!rare_in_train) {
      REQUIRE(r.warnings.size() == 1);
      CHECK(r.warnings[0].find("'rare'") != std::string::npos);
      saw_warning = true;
    } else {
      saw_clean = true;
    }
  }
  CHECK(saw_warning);
  CHECK(saw_clean);
}

TEST_CASE("quadrant helpers") {
  CHECK(quadrant_of(0, 0, 4, 4) == 0);
  CHECK(quadrant_of(1, 2, 4, 4) == 1);
  CHECK(quadrant_of(2, 1, 4, 4) == 2);
  CHECK(quadrant_of(3, 3, 4, 4) == 3);
  Tensor w(Shape{4, 4}, 1.0 / 16);
  for (std::size_t q = 0; q < 4; ++q) CHECK(quadrant_mass(w, q) == doctest::Approx(0.25));
}

TEST_CASE("ppm round trip") {
  SyntheticSpec spec;
  spec.images = 3;
  Dataset ds = generate_synthetic_dataset(spec);
  const auto dir = std::filesystem::temp_directory_path() / "asen_unit_ppm";
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < 3; ++i) write_ppm(dir / (ds.manifest.records[i].image_id + ".ppm"), ds.inputs[i]);
  save_manifest(dir / "manifest.txt", ds.manifest);
  Dataset back = load_raster_dataset(dir / "manifest.txt", dir);
  REQUIRE(back.inputs.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.inputs[i].shape() == ds.inputs[i].shape());
    CHECK(test::max_abs_diff(back.inputs[i].data(), ds.inputs[i].data()) <= 0.5 / 255 + 1e-12);
  }
  std::ofstream(dir / "broken.ppm") << "P3\n1 1\n255\n0 0 0\n";
  CHECK_THROWS_AS(read_ppm(dir / "broken.ppm"), FormatError);
}
