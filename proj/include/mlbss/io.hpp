#pragma once

#include <filesystem>
#include <string>

#include "mlbss/btd.hpp"
#include "mlbss/tensor.hpp"

namespace mlbss::io {

// Binary tensor container: magic "MLBSSTN1", u32 order, u64 dims[order],
// little-endian IEEE-754 doubles in the tensor's flat layout (first index
// fastest). Byte-identical output for identical tensors on any host.
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// Block-term model container: magic "MLBSSBM1", u32 four_way flag, u32 term
// count, then per term u32 L, u32 empty flag, u64 I1,I2,I3,I4 (I4=0 when
// absent) followed by X, Y, b, c as little-endian doubles (column-major).
void write_btd_model(const std::filesystem::path& path, const BtdModel& m);
BtdModel read_btd_model(const std::filesystem::path& path);

// Plain CSV, full double precision; read_matrix_csv accepts any rectangular
// numeric CSV with optional trailing newline.
void write_matrix_csv(const std::filesystem::path& path, const Matrix& m);
Matrix read_matrix_csv(const std::filesystem::path& path);

// 8-bit binary portable graymap, min-max scaled over the matrix; row 0 of the
// matrix ends up as the top image row.
void write_pgm(const std::filesystem::path& path, const Matrix& image);

}  // namespace mlbss::io
