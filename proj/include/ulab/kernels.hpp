// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string_view>

// Dense arithmetic kernels behind every tensor op. Each kernel has a scalar
// reference implementation and an AVX2/FMA variant; the active table is
// chosen once at startup from CPU features, overridable with ULAB_ISA=scalar.
//
// All matrices are row-major and densely packed.
namespace ulab::kernels {

enum class Isa { scalar, avx2 };

struct Table {
  Isa isa;
  // c[m,n] (+)= op(a) * op(b), op(a) is m x k, op(b) is k x n.
  // trans_a: a is stored k x m. trans_b: b is stored n x k.
  void (*gemm)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const double* a, const double* b, double* c, bool accumulate);
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y = x * y elementwise scale by scalar
  void (*scale)(double alpha, double* y, std::size_t n);
};

const Table& scalar_table();
const Table& avx2_table();

bool cpu_supports(Isa isa);

// The table used by the tensor library.
const Table& active();
Isa active_isa();
// Force a table (tests). Throws if the CPU lacks the ISA.
void select(Isa isa);

std::string_view isa_name(Isa isa);

}  // namespace ulab::kernels
