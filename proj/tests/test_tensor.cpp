#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "mlbss/io.hpp"
#include "mlbss/tensor.hpp"
#include "oracles.hpp"

using namespace mlbss;
namespace fs = std::filesystem;

namespace {

Tensor iota_tensor(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> data(n);
  std::iota(data.begin(), data.end(), 1.0);
  return Tensor::from_data(shape, std::move(data));
}

fs::path temp_file(const char* name) {
  return fs::temp_directory_path() / name;
}

}  // namespace

// ===========================================================================
// Construction and element access
// ===========================================================================

TEST_CASE("tensor construction validates shape") {
  CHECK_THROWS_AS(Tensor(std::vector<std::size_t>{}), ArgumentError);
  CHECK_THROWS_AS(Tensor({2, 0, 3}), ArgumentError);
  CHECK_THROWS_AS(Tensor({2, 2, 2, 2, 2, 2}), ArgumentError);  // order 6 > max 5
  CHECK_NOTHROW(Tensor({2, 2, 2, 2, 2}));                      // order 5 is the cap
  CHECK_THROWS_AS(Tensor::from_data({2, 3}, std::vector<double>(5)), ArgumentError);
}

TEST_CASE("element access and flat layout agree") {
  Tensor t = iota_tensor({2, 3, 4});
  // First index fastest: (1,0,0) is the second stored value.
  CHECK(t(1, 0, 0) == 2.0);
  CHECK(t(0, 1, 0) == 3.0);
  CHECK(t(0, 0, 1) == 7.0);
  CHECK(t(1, 2, 3) == 24.0);
  std::vector<std::size_t> ix{1, 2, 3};
  CHECK(t.at(ix) == 24.0);
  std::vector<std::size_t> bad{2, 0, 0};
  CHECK_THROWS_AS(t.at(bad), ArgumentError);
  std::vector<std::size_t> short_ix{1, 1};
  CHECK_THROWS_AS(t.at(short_ix), ArgumentError);
}

TEST_CASE("reshape preserves data and validates size") {
  Tensor t = iota_tensor({2, 3, 4});
  Tensor r = t.reshaped({6, 4});
  CHECK(r.order() == 2);
  CHECK(r(0, 0) == 1.0);
  CHECK(r(5, 3) == 24.0);
  CHECK_THROWS_AS(t.reshaped({5, 5}), ArgumentError);
}

// ===========================================================================
// Unfold / fold
// ===========================================================================

TEST_CASE("unfold of all-ones 2x3x4 along mode 0 is a 2x12 ones matrix") {
  Tensor t = Tensor::from_data({2, 3, 4}, std::vector<double>(24, 1.0));
  Matrix m = unfold(t, 0);
  REQUIRE(m.rows() == 2);
  REQUIRE(m.cols() == 12);
  CHECK(m.minCoeff() == 1.0);
  CHECK(m.maxCoeff() == 1.0);
  // First element of the matricization is the first tensor element.
  CHECK(m(0, 0) == t(0, 0, 0));
}

TEST_CASE("unfold matches the index-map oracle on every mode") {
  std::mt19937_64 rng(7);
  const std::vector<std::vector<std::size_t>> shapes = {
      {3, 4},       {2, 3, 4},    {3, 4, 5},      {5, 2, 3, 4},
      {2, 3, 2, 4}, {6, 1, 4, 2}, {2, 3, 2, 2, 3}};
  for (const auto& shape : shapes) {
    Tensor t = oracles::random_tensor(rng, shape);
    for (std::size_t mode = 0; mode < shape.size(); ++mode) {
      Matrix got = unfold(t, mode);
      Matrix want = oracles::naive_unfold(t, mode);
      CHECK((got - want).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("fold inverts unfold exactly for random shapes of orders 2-5") {
  std::mt19937_64 rng(11);
  const std::vector<std::vector<std::size_t>> shapes = {
      {4, 6}, {2, 3, 4}, {6, 5, 4}, {3, 2, 4, 2}, {2, 3, 2, 2, 2}, {1, 4, 3}, {4, 1, 3, 2}};
  for (const auto& shape : shapes) {
    Tensor t = oracles::random_tensor(rng, shape);
    for (std::size_t mode = 0; mode < shape.size(); ++mode) {
      Tensor back = fold(unfold(t, mode), mode, shape);
      CHECK(back == t);  // bitwise
    }
  }
}

TEST_CASE("unfold/fold validate mode and shape") {
  Tensor t = iota_tensor({2, 3, 4});
  CHECK_THROWS_AS(unfold(t, 3), ArgumentError);
  Matrix m = unfold(t, 1);
  CHECK_THROWS_AS(fold(m, 0, {2, 3, 4}), ArgumentError);   // wrong orientation
  CHECK_THROWS_AS(fold(m, 1, {2, 3, 5}), ArgumentError);   // wrong target shape
}

// ===========================================================================
// Khatri-Rao and Kronecker
// ===========================================================================

TEST_CASE("khatri_rao columns are column Kronecker products") {
  std::mt19937_64 rng(13);
  Matrix a = oracles::random_matrix(rng, 4, 3);
  Matrix b = oracles::random_matrix(rng, 5, 3);
  Matrix kr = khatri_rao(a, b);
  REQUIRE(kr.rows() == 20);
  REQUIRE(kr.cols() == 3);
  for (Eigen::Index r = 0; r < 3; ++r) {
    Matrix col = oracles::naive_kron(a.col(r), b.col(r));
    CHECK((kr.col(r) - col).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK_THROWS_AS(khatri_rao(a, oracles::random_matrix(rng, 5, 2)), ArgumentError);
}

TEST_CASE("kron of small integer matrices matches the oracle") {
  Matrix a(2, 2), b(2, 1);
  a << 1, 2, 3, 4;
  b << 5, 6;
  Matrix got = kron(a, b);
  Matrix want = oracles::naive_kron(a, b);
  CHECK((got - want).cwiseAbs().maxCoeff() == 0.0);
  // kron(I2, I3) = I6
  Matrix i6 = kron(Matrix::Identity(2, 2), Matrix::Identity(3, 3));
  CHECK((i6 - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff() == 0.0);
}

// ===========================================================================
// Kruskal reconstruction and the mode-0 matricization identity
// ===========================================================================

TEST_CASE("rank-1 kruskal tensor from integer vectors") {
  Matrix a(2, 1), b(2, 1), c(2, 1);
  a << 1, 2;
  b << 3, 5;
  c << 7, 11;
  Vector lambda = Vector::Ones(1);
  Tensor t = kruskal_to_tensor({a, b, c}, lambda);
  CHECK(t(0, 0, 0) == 21.0);
  CHECK(t(1, 0, 0) == 42.0);
  CHECK(t(0, 1, 0) == 35.0);
  CHECK(t(1, 1, 1) == 110.0);
}

TEST_CASE("kruskal_to_tensor matches the elementwise oracle for orders 3-5") {
  std::mt19937_64 rng(17);
  const std::vector<std::vector<std::size_t>> shapes = {{4, 5, 3}, {3, 2, 4, 2}, {2, 3, 2, 2, 2}};
  for (const auto& shape : shapes) {
    std::vector<Matrix> factors;
    for (auto d : shape) factors.push_back(oracles::random_matrix(rng, static_cast<Eigen::Index>(d), 3));
    Vector lambda(3);
    lambda << 0.5, -1.25, 2.0;
    Tensor got = kruskal_to_tensor(factors, lambda);
    Tensor want = oracles::naive_kruskal_full(factors, lambda);
    CHECK(max_abs_diff(got, want) < 1e-13);
  }
}

TEST_CASE("mode-0 matricization of a Kruskal tensor equals A diag(l) (C kr B)^T") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix a = oracles::random_matrix(rng, 6, 4);
    Matrix b = oracles::random_matrix(rng, 5, 4);
    Matrix c = oracles::random_matrix(rng, 4, 4);
    Vector lambda(4);
    lambda << 1.0, -0.5, 0.25, 3.0;
    Tensor t = kruskal_to_tensor({a, b, c}, lambda);
    Matrix lhs = unfold(t, 0);
    Matrix rhs = a * lambda.asDiagonal() * khatri_rao(c, b).transpose();
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("frobenius norm of a constant tensor") {
  Tensor t = Tensor::from_data({3, 4, 5}, std::vector<double>(60, 2.0));
  CHECK(frobenius_norm(t) == doctest::Approx(2.0 * std::sqrt(60.0)).epsilon(1e-14));
}

// ===========================================================================
// fold_volume_sequence
// ===========================================================================

TEST_CASE("fold_volume_sequence stacks mode-0 matricizations") {
  std::mt19937_64 rng(23);
  const std::vector<std::size_t> vshape{4, 3, 2};
  std::vector<std::vector<Tensor>> subjects(2);
  for (auto& series : subjects)
    for (int n = 0; n < 3; ++n) series.push_back(oracles::random_tensor(rng, vshape));
  Tensor folded = fold_volume_sequence(subjects);
  REQUIRE(folded.shape() == std::vector<std::size_t>{4, 6, 3, 2});
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t n = 0; n < 3; ++n) {
      Matrix slice = oracles::naive_unfold(subjects[s][n], 0);
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 6; ++j)
          CHECK(folded(i, j, n, s) ==
                slice(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
}

TEST_CASE("folding a 60x60x40 volume yields a 60x2400 frontal-slice matricization") {
  std::mt19937_64 rng(29);
  std::vector<Tensor> series;
  series.push_back(oracles::random_tensor(rng, {60, 60, 40}));
  series.push_back(oracles::random_tensor(rng, {60, 60, 40}));
  Tensor folded = fold_volume_sequence(series);
  REQUIRE(folded.shape() == std::vector<std::size_t>{60, 2400, 2});
  // Frontal slices concatenate left to right: slice k occupies columns [60k, 60k+60).
  const Tensor& v = series[0];
  CHECK(folded(10, 0, 0) == v(10, 0, 0));
  CHECK(folded(10, 60, 0) == v(10, 0, 1));
  CHECK(folded(59, 2399, 0) == v(59, 59, 39));
}

TEST_CASE("fold_volume_sequence is linear in its input volumes") {
  std::mt19937_64 rng(31);
  const std::vector<std::size_t> vshape{3, 4, 2};
  Tensor u = oracles::random_tensor(rng, vshape);
  Tensor w = oracles::random_tensor(rng, vshape);
  std::vector<double> sum_data(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) sum_data[i] = 2.0 * u.data()[i] + 3.0 * w.data()[i];
  Tensor uw = Tensor::from_data(vshape, std::move(sum_data));
  Tensor fu = fold_volume_sequence(std::vector<Tensor>{u});
  Tensor fw = fold_volume_sequence(std::vector<Tensor>{w});
  Tensor fuw = fold_volume_sequence(std::vector<Tensor>{uw});
  for (std::size_t i = 0; i < fu.size(); ++i)
    CHECK(fuw.data()[i] == doctest::Approx(2.0 * fu.data()[i] + 3.0 * fw.data()[i]).epsilon(1e-15));
}

TEST_CASE("fold_volume_sequence rejects inhomogeneous input") {
  std::mt19937_64 rng(37);
  std::vector<std::vector<Tensor>> subjects(2);
  subjects[0].push_back(oracles::random_tensor(rng, {3, 4, 2}));
  subjects[1].push_back(oracles::random_tensor(rng, {3, 4, 3}));
  CHECK_THROWS_AS(fold_volume_sequence(subjects), ArgumentError);
  std::vector<std::vector<Tensor>> ragged(2);
  ragged[0].push_back(oracles::random_tensor(rng, {3, 4, 2}));
  ragged[1].push_back(oracles::random_tensor(rng, {3, 4, 2}));
  ragged[1].push_back(oracles::random_tensor(rng, {3, 4, 2}));
  CHECK_THROWS_AS(fold_volume_sequence(ragged), ArgumentError);
  CHECK_THROWS_AS(fold_volume_sequence(std::vector<Tensor>{}), ArgumentError);
}

// ===========================================================================
// Serialization
// ===========================================================================

TEST_CASE("tensor container round trip is bitwise exact and deterministic") {
  std::mt19937_64 rng(41);
  Tensor t = oracles::random_tensor(rng, {5, 4, 3, 2});
  const fs::path p1 = temp_file("mlbss_t1.tnsr");
  const fs::path p2 = temp_file("mlbss_t2.tnsr");
  io::write_tensor(p1, t);
  io::write_tensor(p2, t);
  Tensor back = io::read_tensor(p1);
  REQUIRE(back.same_shape(t));
  CHECK(std::memcmp(back.data(), t.data(), t.size() * sizeof(double)) == 0);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("tensor container rejects bad magic") {
  const fs::path p = temp_file("mlbss_bad.tnsr");
  {
    std::ofstream os(p, std::ios::binary);
    os << "NOTMAGIC" << std::string(64, '\0');
  }
  CHECK_THROWS_AS(io::read_tensor(p), ArgumentError);
  fs::remove(p);
}

TEST_CASE("matrix CSV round trip preserves doubles exactly") {
  std::mt19937_64 rng(43);
  Matrix m = oracles::random_matrix(rng, 7, 3);
  m(0, 0) = 1.0 / 3.0;
  m(1, 1) = -1e-17;
  const fs::path p = temp_file("mlbss_m.csv");
  io::write_matrix_csv(p, m);
  Matrix back = io::read_matrix_csv(p);
  REQUIRE(back.rows() == m.rows());
  REQUIRE(back.cols() == m.cols());
  CHECK((back - m).cwiseAbs().maxCoeff() == 0.0);
  fs::remove(p);
}

TEST_CASE("pgm writer emits a scaled 8-bit graymap") {
  Matrix img(2, 3);
  img << 0.0, 0.5, 1.0, 1.0, 0.25, 0.0;
  const fs::path p = temp_file("mlbss_img.pgm");
  io::write_pgm(p, img);
  std::ifstream is(p, std::ios::binary);
  std::string magic, dims1, dims2, maxval;
  is >> magic >> dims1 >> dims2 >> maxval;
  CHECK(magic == "P5");
  CHECK(dims1 == "3");
  CHECK(dims2 == "2");
  CHECK(maxval == "255");
  is.get();  // single whitespace after header
  unsigned char px[6];
  is.read(reinterpret_cast<char*>(px), 6);
  CHECK(px[0] == 0);
  CHECK(px[1] == 128);
  CHECK(px[2] == 255);
  CHECK(px[3] == 255);
  CHECK(px[5] == 0);
  fs::remove(p);
}
