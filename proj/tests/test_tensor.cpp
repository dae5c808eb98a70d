#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vmrfa/rng.hpp"
#include "vmrfa/serialize.hpp"
#include "vmrfa/tensor.hpp"

using namespace vmrfa;

TEST_CASE("tensor shape and data length stay consistent") {
  Tensor t(Shape{2, 3, 4});
  REQUIRE(t.numel() == 24);
  REQUIRE(t.rank() == 3);
  REQUIRE_THROWS_AS(Tensor(Shape{2, 3}, std::vector<float>(5)), DimensionError);
  REQUIRE_THROWS_AS(Tensor(Shape{2, 0, 3}), DimensionError);
  REQUIRE_THROWS_AS(t.reshaped(Shape{5, 5}), DimensionError);
  REQUIRE(t.reshaped(Shape{6, 4}).dim(0) == 6);
}

TEST_CASE("tensor indexing is row-major") {
  Tensor t(Shape{2, 3});
  t.at(1, 2) = 7.0f;
  REQUIRE(t[5] == 7.0f);
  t.at(0, 1) = 3.0f;
  REQUIRE(t[1] == 3.0f);
}

TEST_CASE("finite check") {
  Tensor t(Shape{3}, 1.0f);
  REQUIRE(t.all_finite());
  t[1] = std::numeric_limits<float>::infinity();
  REQUIRE_FALSE(t.all_finite());
}

TEST_CASE("portable tensor file round-trips bitwise") {
  Rng rng(42);
  Tensor t(Shape{3, 5, 2});
  t.fill_normal(rng, 0.0f, 10.0f);

  std::stringstream buffer;
  write_tensor(buffer, t);
  const Tensor back = read_tensor(buffer);
  REQUIRE(back.shape() == t.shape());
  REQUIRE(std::memcmp(back.data(), t.data(),
                      sizeof(float) * static_cast<std::size_t>(t.numel())) == 0);
}

TEST_CASE("tensor file header layout is as documented") {
  Tensor t(Shape{2}, std::vector<float>{1.0f, 2.0f});
  std::stringstream buffer;
  write_tensor(buffer, t);
  const std::string bytes = buffer.str();
  REQUIRE(bytes.size() == 4 + 4 + 4 + 4 + 8);
  REQUIRE(bytes.substr(0, 4) == "VTNS");
  // version 1, rank 1, dim 2, little-endian
  REQUIRE(static_cast<unsigned char>(bytes[4]) == 1);
  REQUIRE(static_cast<unsigned char>(bytes[8]) == 1);
  REQUIRE(static_cast<unsigned char>(bytes[12]) == 2);
}

TEST_CASE("malformed tensor files are rejected with offsets") {
  Tensor t(Shape{4}, 1.5f);
  std::stringstream buffer;
  write_tensor(buffer, t);
  std::string bytes = buffer.str();

  SECTION("bad magic") {
    bytes[0] = 'X';
    std::stringstream in(bytes);
    REQUIRE_THROWS_AS(read_tensor(in), FormatError);
  }
  SECTION("truncated payload") {
    std::stringstream in(bytes.substr(0, bytes.size() - 3));
    REQUIRE_THROWS_WITH(read_tensor(in), Catch::Matchers::ContainsSubstring("offset"));
  }
  SECTION("bad version") {
    bytes[4] = 9;
    std::stringstream in(bytes);
    REQUIRE_THROWS_AS(read_tensor(in), FormatError);
  }
}

TEST_CASE("rng streams are deterministic and independent") {
  Rng a = Rng::stream(7, 1, 2);
  Rng b = Rng::stream(7, 1, 2);
  Rng c = Rng::stream(7, 1, 3);
  REQUIRE(a.u64() == b.u64());
  REQUIRE(a.u64() == b.u64());
  Rng a2 = Rng::stream(7, 1, 2);
  REQUIRE_FALSE(a2.u64() == c.u64());
}

TEST_CASE("rng normal moments are sane") {
  Rng rng(123);
  double sum = 0.0, sum2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal(0.0, 1.0);
    sum += v;
    sum2 += v * v;
  }
  REQUIRE(std::fabs(sum / n) < 0.02);
  REQUIRE(std::fabs(sum2 / n - 1.0) < 0.02);
}
