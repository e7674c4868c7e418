// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

namespace ulab::kernels::detail {

// rows x cols -> cols x rows
std::vector<double> transpose(const double* src, std::size_t rows, std::size_t cols);

}  // namespace ulab::kernels::detail
