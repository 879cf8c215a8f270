#include "m2v/common.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

using namespace m2v;

TEST_CASE("rng is reproducible for a seed and differs across seeds") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
}

TEST_CASE("uniform_open stays strictly inside (0, 1)") {
  Rng rng(7);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform_open();
    REQUIRE(u > 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(sum / 100000.0 == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("normal draws have unit variance") {
  Rng rng(3);
  const int n = 200000;
  double s = 0.0, ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    ss += x * x;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(ss / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("below is unbiased over a small range") {
  Rng rng(11);
  std::vector<int> counts(6, 0);
  for (int i = 0; i < 60000; ++i) ++counts[rng.below(6)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("sample_without_replacement returns distinct in-range indices") {
  Rng rng(5);
  for (std::size_t k : {0u, 1u, 7u, 20u}) {
    const auto s = rng.sample_without_replacement(20, k);
    CHECK(s.size() == k);
    std::set<std::size_t> uniq(s.begin(), s.end());
    CHECK(uniq.size() == k);
    for (auto v : s) CHECK(v < 20);
  }
  CHECK_THROWS(rng.sample_without_replacement(3, 4));
}

TEST_CASE("derive_seed separates streams and indices") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t stream = 0; stream < 10; ++stream) {
    for (std::uint64_t idx = 0; idx < 10; ++idx) seen.insert(derive_seed(1, stream, idx));
  }
  CHECK(seen.size() == 100);
  CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
}

TEST_CASE("fnv1a matches published test vectors") {
  CHECK(fnv1a({}) == 0xcbf29ce484222325ULL);
  const unsigned char a[] = {'a'};
  CHECK(fnv1a(a) == 0xaf63dc4c8601ec8cULL);
  const std::string foobar = "foobar";
  CHECK(fnv1a({reinterpret_cast<const unsigned char*>(foobar.data()), foobar.size()}) ==
        0x85944171f73967e8ULL);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("hash_matrix depends on shape and values") {
  Matrix a = Matrix::Zero(2, 3);
  Matrix b = Matrix::Zero(3, 2);
  CHECK(hash_matrix(a) != hash_matrix(b));
  Matrix c = a;
  c(1, 2) = 1e-300;
  CHECK(hash_matrix(a) != hash_matrix(c));
}

TEST_CASE("format_double round-trips exactly") {
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const double v = (rng.normal() * 1e3) / 7.0;
    CHECK(std::stod(format_double(v)) == v);
  }
}

TEST_CASE("key-value files round-trip and skip comments") {
  const auto path = std::filesystem::temp_directory_path() / "m2v_test_kv.txt";
  write_key_values(path, {{"alpha", "0.5"}, {"name", "x y"}});
  const KeyValues kv = read_key_values(path);
  CHECK(kv.at("alpha") == "0.5");
  CHECK(kv.at("name") == "x y");
  std::istringstream in("# comment\n\n a = 1 \nb=two\n");
  const KeyValues parsed = parse_key_values(in, "inline");
  CHECK(parsed.at("a") == "1");
  CHECK(parsed.at("b") == "two");
  std::istringstream bad("novalue\n");
  CHECK_THROWS_AS(parse_key_values(bad, "inline"), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("require_finite rejects NaN and infinity") {
  Matrix m = Matrix::Ones(2, 2);
  CHECK_NOTHROW(require_finite(m, "m"));
  m(0, 1) = std::nan("");
  CHECK_THROWS_AS(require_finite(m, "m"), DataError);
  m(0, 1) = INFINITY;
  CHECK_THROWS_AS(require_finite(m, "m"), DataError);
}
