#include "evtraffic/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <vector>

namespace evtraffic::kernels {

namespace {
// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1u << 15;
}  // namespace

int max_threads() { return omp_get_max_threads(); }

namespace serial {

void gemm_nn(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s, bool accumulate) {
  if (!accumulate) {
    if (s.c == 0) {
      std::fill(c, c + d.m * d.n, 0.0);
    } else {
      std::fill(c, c + d.batch * s.c, 0.0);
    }
  }
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    const double* ab = a + bi * s.a;
    const double* bb = b + bi * s.b;
    double* cb = c + bi * s.c;
    for (std::size_t i = 0; i < d.m; ++i) {
      for (std::size_t j = 0; j < d.n; ++j) {
        double acc = cb[i * d.n + j];
        for (std::size_t p = 0; p < d.k; ++p) acc += ab[i * d.k + p] * bb[p * d.n + j];
        cb[i * d.n + j] = acc;
      }
    }
  }
}

void gemm_tn(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s) {
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    const double* ab = a + bi * s.a;
    const double* bb = b + bi * s.b;
    double* cb = c + bi * s.c;
    for (std::size_t p = 0; p < d.k; ++p) {
      for (std::size_t j = 0; j < d.n; ++j) {
        double acc = cb[p * d.n + j];
        for (std::size_t i = 0; i < d.m; ++i) acc += ab[i * d.k + p] * bb[i * d.n + j];
        cb[p * d.n + j] = acc;
      }
    }
  }
}

void gemm_nt(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s) {
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    const double* ab = a + bi * s.a;
    const double* bb = b + bi * s.b;
    double* cb = c + bi * s.c;
    for (std::size_t i = 0; i < d.m; ++i) {
      for (std::size_t q = 0; q < d.k; ++q) {
        double acc = cb[i * d.k + q];
        for (std::size_t j = 0; j < d.n; ++j) acc += ab[i * d.n + j] * bb[q * d.n + j];
        cb[i * d.k + q] = acc;
      }
    }
  }
}

}  // namespace serial

namespace parallel {

void gemm_nn(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s, bool accumulate) {
  const std::size_t work = d.batch * d.m * d.k * d.n;
  if (s.c == 0) {
    // Output shared across the batch: split rows, keep batch order per element.
    if (!accumulate) std::fill(c, c + d.m * d.n, 0.0);
    const auto rows = static_cast<std::ptrdiff_t>(d.m);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      double* crow = c + i * d.n;
      for (std::size_t bi = 0; bi < d.batch; ++bi) {
        const double* arow = a + bi * s.a + i * d.k;
        const double* bb = b + bi * s.b;
        for (std::size_t p = 0; p < d.k; ++p) {
          const double av = arow[p];
          const double* brow = bb + p * d.n;
          for (std::size_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
        }
      }
    }
    return;
  }
  // Blocks of four rows share each streamed row of B.
  constexpr std::size_t kRows = 4;
  const std::size_t blocks_per_batch = (d.m + kRows - 1) / kRows;
  const auto total_blocks = static_cast<std::ptrdiff_t>(d.batch * blocks_per_batch);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::ptrdiff_t bb_i = 0; bb_i < total_blocks; ++bb_i) {
    const auto blk = static_cast<std::size_t>(bb_i);
    const std::size_t bi = blk / blocks_per_batch;
    const std::size_t i0 = (blk % blocks_per_batch) * kRows;
    const std::size_t rows = std::min(kRows, d.m - i0);
    const double* ab = a + bi * s.a + i0 * d.k;
    const double* bb = b + bi * s.b;
    double* cb = c + bi * s.c + i0 * d.n;
    if (!accumulate) std::fill(cb, cb + rows * d.n, 0.0);
    if (rows == kRows) {
      double* __restrict c0 = cb;
      double* __restrict c1 = cb + d.n;
      double* __restrict c2 = cb + 2 * d.n;
      double* __restrict c3 = cb + 3 * d.n;
      for (std::size_t p = 0; p < d.k; ++p) {
        const double a0 = ab[p], a1 = ab[d.k + p], a2 = ab[2 * d.k + p], a3 = ab[3 * d.k + p];
        const double* __restrict brow = bb + p * d.n;
        for (std::size_t j = 0; j < d.n; ++j) {
          const double bv = brow[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        double* crow = cb + r * d.n;
        for (std::size_t p = 0; p < d.k; ++p) {
          const double av = ab[r * d.k + p];
          const double* brow = bb + p * d.n;
          for (std::size_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

void gemm_tn(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s) {
  const std::size_t work = d.batch * d.m * d.k * d.n;
  const std::size_t out_batches = s.c == 0 ? 1 : d.batch;
  // Each thread owns a contiguous block of output rows p and streams the
  // input rows i through it, so C stays cache resident.
  const std::size_t rows = out_batches * d.k;
#pragma omp parallel if (work > kParallelWork)
  {
    const std::size_t nt = static_cast<std::size_t>(omp_get_num_threads());
    const std::size_t t = static_cast<std::size_t>(omp_get_thread_num());
    const std::size_t r0 = rows * t / nt, r1 = rows * (t + 1) / nt;
    for (std::size_t ob = r0 / d.k; ob < out_batches && ob * d.k < r1; ++ob) {
      const std::size_t p0 = std::max(r0, ob * d.k) - ob * d.k;
      const std::size_t p1 = std::min(r1, (ob + 1) * d.k) - ob * d.k;
      const std::size_t b_begin = s.c == 0 ? 0 : ob;
      const std::size_t b_end = s.c == 0 ? d.batch : ob + 1;
      double* cb = c + ob * s.c;
      for (std::size_t bi = b_begin; bi < b_end; ++bi) {
        const double* ab = a + bi * s.a;
        const double* bb = b + bi * s.b;
        for (std::size_t i = 0; i < d.m; ++i) {
          const double* arow = ab + i * d.k;
          const double* brow = bb + i * d.n;
          for (std::size_t p = p0; p < p1; ++p) {
            const double av = arow[p];
            double* crow = cb + p * d.n;
            for (std::size_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
          }
        }
      }
    }
  }
}

void gemm_nt(const GemmDims& d, const double* a, const double* b, double* c, BatchStrides s) {
  const std::size_t work = d.batch * d.m * d.k * d.n;
  const std::size_t out_batches = s.c == 0 ? 1 : d.batch;
  // Transposed copies of B turn the inner dot product into a vector update
  // over q while keeping the j order of every sum.
  const std::size_t b_count = s.b == 0 ? 1 : d.batch;
  std::vector<double> bt(b_count * d.k * d.n);
  for (std::size_t bi = 0; bi < b_count; ++bi) {
    const double* bb = b + bi * s.b;
    double* tb = bt.data() + bi * d.k * d.n;
    for (std::size_t q = 0; q < d.k; ++q) {
      for (std::size_t j = 0; j < d.n; ++j) tb[j * d.k + q] = bb[q * d.n + j];
    }
  }
  const auto total_rows = static_cast<std::ptrdiff_t>(out_batches * d.m);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::ptrdiff_t rr = 0; rr < total_rows; ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const std::size_t ob = r / d.m;
    const std::size_t i = r % d.m;
    const std::size_t b_begin = s.c == 0 ? 0 : ob;
    const std::size_t b_end = s.c == 0 ? d.batch : ob + 1;
    double* crow = c + ob * s.c + i * d.k;
    for (std::size_t bi = b_begin; bi < b_end; ++bi) {
      const double* arow = a + bi * s.a + i * d.n;
      const double* tb = bt.data() + (s.b == 0 ? 0 : bi) * d.k * d.n;
      for (std::size_t j = 0; j < d.n; ++j) {
        const double av = arow[j];
        const double* trow = tb + j * d.k;
        for (std::size_t q = 0; q < d.k; ++q) crow[q] += av * trow[q];
      }
    }
  }
}

}  // namespace parallel

}  // namespace evtraffic::kernels
