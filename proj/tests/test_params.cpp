#include "m2v/params.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace m2v;
namespace fs = std::filesystem;

TEST_CASE("parameter store lookup and errors") {
  ParamStore p;
  p.add("a", Matrix::Ones(2, 3));
  p.add("b", Matrix::Zero(1, 1));
  CHECK(p.size() == 2);
  CHECK(p.scalar_count() == 7);
  CHECK(p.names() == std::vector<std::string>{"a", "b"});
  CHECK(p.grad("a").isZero());
  CHECK_THROWS_AS(p.add("a", Matrix::Zero(1, 1)), std::invalid_argument);
  CHECK_THROWS_AS(p.value("missing"), std::out_of_range);
  const auto h = p.hash();
  p.value("b")(0, 0) = 1.0;
  CHECK(p.hash() != h);
}

TEST_CASE("adam matches a scalar reference over several steps") {
  ParamStore p;
  p.add("x", Matrix::Constant(1, 1, 1.0));
  AdamState s;
  s.lr = 0.1;
  double x = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    const double g = 2.0 * x;  // d/dx of x^2
    p.grad("x")(0, 0) = 2.0 * p.value("x")(0, 0);
    adam_step(p, s);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(p.value("x")(0, 0) == doctest::Approx(x).epsilon(1e-14));
    CHECK(p.grad("x")(0, 0) == 0.0);
  }
  CHECK(s.step == 5);
  // First step moves by lr regardless of gradient scale.
  ParamStore q;
  q.add("y", Matrix::Zero(1, 1));
  q.grad("y")(0, 0) = 1e-6;
  AdamState s2;
  s2.lr = 0.01;
  adam_step(q, s2);
  CHECK(q.value("y")(0, 0) == doctest::Approx(-0.01).epsilon(1e-3));
}

TEST_CASE("adam rejects non-finite gradients without modifying state") {
  ParamStore p;
  p.add("a", Matrix::Ones(1, 2));
  p.add("b", Matrix::Ones(1, 1));
  p.grad("a")(0, 0) = 0.5;
  p.grad("b")(0, 0) = std::nan("");
  AdamState s;
  CHECK_THROWS_AS(adam_step(p, s), NumericalError);
  CHECK(s.step == 0);
  CHECK(p.value("a") == Matrix::Ones(1, 2));
  CHECK(s.m.empty());
}

TEST_CASE("archive round-trips tensors and text exactly") {
  const fs::path path = fs::temp_directory_path() / "m2v_test_archive.bin";
  Archive a;
  Matrix m(2, 3);
  m << 1.0 / 3.0, -0.0, 1e-310, 4, 5, 6;
  a.tensors.emplace_back("w", m);
  a.tensors.emplace_back("empty", Matrix(0, 4));
  a.texts.emplace_back("config", "alpha = 0.5\nbeta = x\n");
  write_archive(path, a);
  const Archive b = read_archive(path);
  REQUIRE(b.find_tensor("w"));
  CHECK(*b.find_tensor("w") == m);
  CHECK(std::signbit((*b.find_tensor("w"))(0, 1)));
  CHECK(b.find_tensor("empty")->rows() == 0);
  CHECK(b.find_tensor("empty")->cols() == 4);
  CHECK(*b.find_text("config") == "alpha = 0.5\nbeta = x\n");
  CHECK(b.find_tensor("nope") == nullptr);
  fs::remove(path);
}

TEST_CASE("archive truncation and corruption are data errors") {
  const fs::path path = fs::temp_directory_path() / "m2v_test_archive_trunc.bin";
  Archive a;
  a.tensors.emplace_back("w", Matrix::Ones(8, 8));
  write_archive(path, a);
  const auto size = fs::file_size(path);
  for (std::uintmax_t cut : {std::uintmax_t{3}, std::uintmax_t{12}, size / 2, size - 1}) {
    write_archive(path, a);
    fs::resize_file(path, cut);
    CHECK_THROWS_AS(read_archive(path), DataError);
  }
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTANARCHIVE";
  }
  CHECK_THROWS_AS(read_archive(path), DataError);
  write_archive(path, a);
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << "junk";
  }
  CHECK_THROWS_AS(read_archive(path), DataError);
  fs::remove(path);
  CHECK_THROWS_AS(read_archive(path), DataError);
}
