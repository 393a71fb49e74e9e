#include "mlbss/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <vector>

namespace mlbss::io {

namespace {

constexpr char kTensorMagic[9] = "MLBSSTN1";
constexpr char kBtdMagic[9] = "MLBSSBM1";

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

void put_doubles(std::ostream& os, const double* p, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_f64(os, p[i]);
  }
}

void get_doubles(std::istream& is, double* p, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < n; ++i) p[i] = get_f64(is);
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ArgumentError("cannot open for writing: " + path.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArgumentError("cannot open for reading: " + path.string());
  return is;
}

void expect_magic(std::istream& is, const char* magic, const std::filesystem::path& path) {
  char buf[8];
  is.read(buf, 8);
  if (!is || !std::equal(buf, buf + 8, magic))
    throw ArgumentError("bad container magic in " + path.string());
}

void put_matrix(std::ostream& os, const Matrix& m) {
  put_doubles(os, m.data(), static_cast<std::size_t>(m.size()));
}

Matrix get_matrix(std::istream& is, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  get_doubles(is, m.data(), rows * cols);
  return m;
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os = open_out(path);
  os.write(kTensorMagic, 8);
  put_u32(os, static_cast<std::uint32_t>(t.order()));
  for (std::size_t d : t.shape()) put_u64(os, d);
  put_doubles(os, t.data(), t.size());
  if (!os) throw NumericalError("short write to " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  expect_magic(is, kTensorMagic, path);
  const std::uint32_t order = get_u32(is);
  if (order == 0 || order > 5) throw ArgumentError("corrupt tensor order in " + path.string());
  std::vector<std::size_t> shape(order);
  for (auto& d : shape) d = static_cast<std::size_t>(get_u64(is));
  Tensor t(shape);
  get_doubles(is, t.data(), t.size());
  if (!is) throw ArgumentError("truncated tensor container: " + path.string());
  return t;
}

void write_btd_model(const std::filesystem::path& path, const BtdModel& m) {
  std::ofstream os = open_out(path);
  os.write(kBtdMagic, 8);
  put_u32(os, m.four_way() ? 1u : 0u);
  put_u32(os, static_cast<std::uint32_t>(m.terms.size()));
  for (const BtdTerm& term : m.terms) {
    put_u32(os, static_cast<std::uint32_t>(term.L));
    put_u32(os, term.empty ? 1u : 0u);
    put_u64(os, static_cast<std::uint64_t>(term.X.rows()));
    put_u64(os, static_cast<std::uint64_t>(term.Y.rows()));
    put_u64(os, static_cast<std::uint64_t>(term.b.size()));
    put_u64(os, static_cast<std::uint64_t>(term.c.size()));
    put_matrix(os, term.X);
    put_matrix(os, term.Y);
    put_doubles(os, term.b.data(), static_cast<std::size_t>(term.b.size()));
    if (term.c.size() > 0) put_doubles(os, term.c.data(), static_cast<std::size_t>(term.c.size()));
  }
  if (!os) throw NumericalError("short write to " + path.string());
}

BtdModel read_btd_model(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  expect_magic(is, kBtdMagic, path);
  get_u32(is);  // four_way flag; implied by per-term c lengths
  const std::uint32_t nterms = get_u32(is);
  BtdModel m;
  for (std::uint32_t i = 0; i < nterms; ++i) {
    BtdTerm term;
    term.L = get_u32(is);
    term.empty = get_u32(is) != 0;
    const std::size_t i1 = static_cast<std::size_t>(get_u64(is));
    const std::size_t i2 = static_cast<std::size_t>(get_u64(is));
    const std::size_t i3 = static_cast<std::size_t>(get_u64(is));
    const std::size_t i4 = static_cast<std::size_t>(get_u64(is));
    term.X = get_matrix(is, i1, term.L);
    term.Y = get_matrix(is, i2, term.L);
    term.b = Vector(i3);
    get_doubles(is, term.b.data(), i3);
    if (i4 > 0) {
      term.c = Vector(i4);
      get_doubles(is, term.c.data(), i4);
    }
    m.terms.push_back(std::move(term));
  }
  if (!is) throw ArgumentError("truncated model container: " + path.string());
  return m;
}

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ArgumentError("cannot open for writing: " + path.string());
  os.precision(17);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) os << ',';
      os << m(r, c);
    }
    os << '\n';
  }
}

Matrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ArgumentError("cannot open for reading: " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (!rows.empty() && row.size() != rows.front().size())
      throw ArgumentError("ragged CSV: " + path.string());
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ArgumentError("empty CSV: " + path.string());
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows.front().size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return m;
}

void write_pgm(const std::filesystem::path& path, const Matrix& image) {
  if (image.size() == 0) throw ArgumentError("write_pgm: empty image");
  std::ofstream os = open_out(path);
  const double lo = image.minCoeff(), hi = image.maxCoeff();
  const double scale = (hi > lo) ? 255.0 / (hi - lo) : 0.0;
  os << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(image.cols()));
  for (Eigen::Index r = 0; r < image.rows(); ++r) {
    for (Eigen::Index c = 0; c < image.cols(); ++c)
      row[static_cast<std::size_t>(c)] =
          static_cast<unsigned char>(std::lround((image(r, c) - lo) * scale));
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

}  // namespace mlbss::io
