#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "bcnn/dataset.hpp"
#include "test_support.hpp"

using namespace bcnn;
using bcnn::testing::TempDir;
using Catch::Approx;

namespace {

Manifest numbered_manifest(std::size_t n) {
  Manifest m;
  for (std::size_t i = 0; i < n; ++i) m.records.push_back({"img" + std::to_string(i) + ".ppm", static_cast<int>(i % 3 == 0)});
  return m;
}

std::vector<std::uint8_t> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("manifest parsing", "[dataset][manifest]") {
  const auto m = parse_manifest("a/1.ppm,1\r\nb.ppm,0\n\nc,d.ppm,1");
  REQUIRE(m.size() == 3);
  CHECK(m.records[0] == ManifestRecord{"a/1.ppm", 1});
  CHECK(m.records[1] == ManifestRecord{"b.ppm", 0});
  CHECK(m.records[2] == ManifestRecord{"c,d.ppm", 1});
  CHECK(m.count_label(1) == 2);
  CHECK(parse_manifest(format_manifest(m)) == m);

  SECTION("errors name the offending line") {
    try {
      (void)parse_manifest("a.ppm,0\nb.ppm,2\n");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_manifest("no_comma\n"), DataError);
    CHECK_THROWS_AS(parse_manifest(",1\n"), DataError);
    CHECK_THROWS_AS(parse_manifest("a.ppm,\n"), DataError);
    CHECK_THROWS_AS(parse_manifest("a.ppm,1\na.ppm,0\n"), DataError);
  }
  SECTION("single-class manifests cannot train") {
    CHECK_THROWS_AS(parse_manifest("a,1\nb,1\n").require_both_classes(), DataError);
    CHECK_NOTHROW(parse_manifest("a,1\nb,0\n").require_both_classes());
  }
}

TEST_CASE("pixmap codec", "[dataset][image]") {
  Frame f(3, 2);
  for (std::size_t i = 0; i < f.rgb.size(); ++i) f.rgb[i] = static_cast<std::uint8_t>(i * 11);
  CHECK(decode_image(encode_image(f)) == f);

  SECTION("gray maps to three equal channels") {
    const auto g = decode_image(bytes_of(std::string("P5\n2 1\n255\n") + '\x07' + '\xff'));
    CHECK(g.at(0, 0, 0) == 7);
    CHECK(g.at(0, 0, 2) == 7);
    CHECK(g.at(0, 1, 1) == 255);
  }
  SECTION("comments in the header are skipped") {
    const auto g = decode_image(bytes_of(std::string("P5 # note\n1 # w\n1\n255\n") + '\x05'));
    CHECK(g.width == 1);
    CHECK(g.at(0, 0, 0) == 5);
  }
  SECTION("malformed input") {
    CHECK_THROWS_AS(decode_image(bytes_of("P3\n1 1\n255\n0 0 0")), DataError);
    CHECK_THROWS_AS(decode_image(bytes_of("P6\n1 1\n65535\n")), DataError);
    CHECK_THROWS_AS(decode_image(bytes_of("P6\n2 2\n255\nabc")), DataError);
    CHECK_THROWS_AS(decode_image(bytes_of("P6\n0 2\n255\n")), DataError);
    CHECK_THROWS_AS(decode_image(bytes_of("P6\n1")), DataError);
    CHECK_THROWS_AS(decode_image(bytes_of("")), DataError);
  }
}

TEST_CASE("bilinear resize", "[dataset][resize]") {
  SECTION("corners are preserved and a constant frame stays constant") {
    Frame f(5, 4);
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 5; ++x) {
        f.at(y, x, 0) = static_cast<std::uint8_t>(10 * x + y);
        f.at(y, x, 1) = 77;
        f.at(y, x, 2) = static_cast<std::uint8_t>(200 - 5 * x);
      }
    }
    const auto t = resize_bilinear(f, 9, 13);
    REQUIRE(t.shape() == Shape4{1, 3, 9, 13});
    CHECK(t(0, 0, 0, 0) == 0.0);
    CHECK(t(0, 0, 8, 12) == 43.0);
    CHECK(t(0, 0, 0, 12) == 40.0);
    for (double v : std::span<const double>(t.plane(0, 1), 9 * 13)) CHECK(v == Approx(77.0).epsilon(1e-14));
  }
  SECTION("linear ramps are reproduced") {
    Frame f(4, 2);
    for (std::size_t x = 0; x < 4; ++x) f.at(0, x, 0) = f.at(1, x, 0) = static_cast<std::uint8_t>(30 * x);
    const auto t = resize_bilinear(f, 2, 7);
    for (std::size_t ox = 0; ox < 7; ++ox) CHECK(t(0, 0, 0, ox) == Approx(15.0 * static_cast<double>(ox)));
  }
  SECTION("network input is scaled to unit range") {
    Frame f(128, 128);
    std::fill(f.rgb.begin(), f.rgb.end(), 255);
    const auto t = resize_to_input(f);
    REQUIRE(t.shape() == Shape4{1, 3, 118, 118});
    for (double v : t.values()) CHECK(v == Approx(1.0).epsilon(1e-14));
    InputOptions centered{true};
    const auto c = resize_to_input(f, centered);
    for (double v : c.values()) CHECK(v == Approx(0.0).margin(1e-12));
  }
  SECTION("degenerate frames are rejected") { CHECK_THROWS_AS(resize_bilinear(Frame(1, 5), 3, 3), DataError); }
}

TEST_CASE("seeded split", "[dataset][split]") {
  const auto m = numbered_manifest(10);
  const auto s = split_and_shuffle(m, 5, 0.7);
  CHECK(s.train.size() == 7);
  CHECK(s.test.size() == 3);

  SECTION("deterministic for a seed and sensitive to it") {
    CHECK(split_and_shuffle(m, 5, 0.7).train == s.train);
    bool differs = false;
    for (std::uint64_t seed = 6; seed < 12 && !differs; ++seed) {
      differs = !(split_and_shuffle(m, seed, 0.7).train == s.train);
    }
    CHECK(differs);
  }
  SECTION("disjoint cover with the held-out side in manifest order") {
    std::set<std::string> seen;
    for (const auto& r : s.train.records) seen.insert(r.path);
    for (const auto& r : s.test.records) CHECK(seen.insert(r.path).second);
    CHECK(seen.size() == 10);
    std::size_t last = 0;
    for (const auto& r : s.test.records) {
      const std::size_t idx = std::stoul(r.path.substr(3));
      CHECK(idx >= last);
      last = idx;
    }
  }
  SECTION("rounding and degenerate fractions") {
    CHECK(split_and_shuffle(numbered_manifest(2000), 1, 0.8).train.size() == 1600);
    CHECK(split_and_shuffle(numbered_manifest(5), 1, 0.5).train.size() == 3);
    CHECK_THROWS_AS(split_and_shuffle(m, 1, 0.0), ValueError);
    CHECK_THROWS_AS(split_and_shuffle(m, 1, 1.0), ValueError);
    CHECK_THROWS_AS(split_and_shuffle(m, 1, 0.01), DataError);
  }
}

TEST_CASE("frames are loaded relative to the manifest root", "[dataset]") {
  TempDir dir("dataset");
  Frame f(4, 4);
  std::fill(f.rgb.begin(), f.rgb.end(), 9);
  write_file(dir / "a.ppm", encode_image(f));
  Manifest m;
  m.records = {{"a.ppm", 1}};
  const auto data = load_frames(m, dir.path());
  REQUIRE(data.size() == 1);
  CHECK(data.frames[0] == f);
  CHECK(data.labels[0] == 1);

  m.records.push_back({"missing.ppm", 0});
  try {
    (void)load_frames(m, dir.path());
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("missing.ppm") != std::string::npos);
  }
  CHECK_THROWS_AS(load_manifest(dir / "nope.csv"), DataError);
}

TEST_CASE("synthetic corpus", "[dataset][synth]") {
  SECTION("frames are deterministic and the label changes the picture") {
    CHECK(synth_frame(3, 10, true) == synth_frame(3, 10, true));
    CHECK_FALSE(synth_frame(3, 10, true) == synth_frame(3, 11, true));
    const auto neg = synth_frame(3, 10, false);
    const auto pos = synth_frame(3, 10, true);
    CHECK(neg.width == 128);
    CHECK(neg.height == 128);
    // The positive carries a brighter region on top of the same background.
    std::size_t brighter = 0;
    for (std::size_t i = 0; i < neg.rgb.size(); ++i) brighter += pos.rgb[i] > neg.rgb[i] + 30 ? 1 : 0;
    CHECK(brighter > 100);
  }
  SECTION("generated directory round-trips through the manifest") {
    TempDir dir("synth");
    const auto m = synth_generate(dir.path(), 20, 0.25, 42);
    CHECK(m.size() == 20);
    CHECK(m.count_label(1) == 5);
    CHECK(load_manifest(dir / "manifest.csv") == m);
    const auto data = load_frames(m, dir.path());
    CHECK(data.frames[7] == synth_frame(42, 7, m.records[7].label == 1));

    TempDir again("synth");
    CHECK(synth_generate(again.path(), 20, 0.25, 42) == m);
    CHECK(read_file(again / "frame_000003.ppm") == read_file(dir / "frame_000003.ppm"));
  }
  SECTION("invalid arguments") {
    TempDir dir("synth");
    CHECK_THROWS_AS(synth_generate(dir.path(), 1, 0.5, 1), ValueError);
    CHECK_THROWS_AS(synth_generate(dir.path(), 10, 1.5, 1), ValueError);
  }
}

TEST_CASE("random streams", "[rng]") {
  Rng a = make_rng(1, Stream::kInit), b = make_rng(1, Stream::kShuffle);
  CHECK(a() != b());
  Rng r(3);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) ++hits[uniform_index(r, 7)];
  for (int h : hits) CHECK(h > 850);
  for (int i = 0; i < 1000; ++i) {
    const double u = uniform01(r);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}
