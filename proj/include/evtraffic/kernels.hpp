#pragma once

// Dense matrix kernels behind the autodiff engine.
//
// Every routine exists twice: `serial::` is the plain reference loop nest and
// `parallel::` is the OpenMP version used in production. Both accumulate each
// output element over the reduction index in the same order, so results are
// bitwise identical and tests compare them with ==.
//
// Batched layout: operand X of batch item `b` starts at `x + b * x_stride`;
// a stride of 0 shares one matrix across the batch. When the output stride is
// 0 the batch is reduced into a single output matrix (batch-major order).

#include <cstddef>

namespace evtraffic::kernels {

struct GemmDims {
  std::size_t batch = 1;
  std::size_t m = 0;
  std::size_t k = 0;
  std::size_t n = 0;
};

struct BatchStrides {
  std::size_t a = 0;
  std::size_t b = 0;
  std::size_t c = 0;
};

enum class Exec { serial, parallel };

namespace serial {
/// C[m×n] (+)= A[m×k] · B[k×n]
void gemm_nn(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s, bool accumulate);
/// C[k×n] += A[m×k]ᵀ · B[m×n]
void gemm_tn(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s);
/// C[m×k] += A[m×n] · B[k×n]ᵀ
void gemm_nt(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s);
}  // namespace serial

namespace parallel {
void gemm_nn(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s, bool accumulate);
void gemm_tn(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s);
void gemm_nt(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s);
}  // namespace parallel

/// Number of OpenMP threads the parallel kernels will use.
int max_threads();

}  // namespace evtraffic::kernels
