#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace coeforge {

/// Dense row-major matrix. Rows index sequence positions throughout the library.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace coeforge
