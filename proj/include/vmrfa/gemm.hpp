#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

namespace vmrfa {
namespace detail {

// Dot product with eight independent accumulators. The fixed lane structure
// keeps results bitwise reproducible while letting the compiler vectorize
// the reduction without relaxed floating-point flags.
inline float dot8(const float* a, const float* b, std::int64_t n) {
  float s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 += a[i + 0] * b[i + 0];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
    s4 += a[i + 4] * b[i + 4];
    s5 += a[i + 5] * b[i + 5];
    s6 += a[i + 6] * b[i + 6];
    s7 += a[i + 7] * b[i + 7];
  }
  float tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return (((s0 + s4) + (s1 + s5)) + ((s2 + s6) + (s3 + s7))) + tail;
}

inline void axpy(float* y, float a, const float* x, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// C[m x n] = A[m x k] * B[k x n], row-major. accumulate keeps existing C.
inline void matmul_nn(float* c, const float* a, const float* b, int m, int n, int k,
                      bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::int64_t>(i) * n;
    const float* arow = a + static_cast<std::int64_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      axpy(crow, arow[p], b + static_cast<std::int64_t>(p) * n, n);
    }
  }
}

// C[m x n] = A[m x k] * B^T, with B stored [n x k] row-major.
inline void matmul_nt(float* c, const float* a, const float* b, int m, int n, int k,
                      bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::int64_t>(i) * k;
    float* crow = c + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float d = dot8(arow, b + static_cast<std::int64_t>(j) * k, k);
      crow[j] = accumulate ? crow[j] + d : d;
    }
  }
}

// C[m x n] = A^T * B, with A stored [k x m] row-major.
inline void matmul_tn(float* c, const float* a, const float* b, int m, int n, int k,
                      bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<std::size_t>(m) * n);
  for (int p = 0; p < k; ++p) {
    const float* arow = a + static_cast<std::int64_t>(p) * m;
    const float* brow = b + static_cast<std::int64_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      axpy(c + static_cast<std::int64_t>(i) * n, arow[i], brow, n);
    }
  }
}

// Unrolls conv patches of one image into a [C*kh*kw x out_h*out_w] matrix.
inline void im2col(const float* img, int channels, int height, int width, int kh,
                   int kw, int stride_h, int stride_w, int pad_h, int pad_w,
                   int out_h, int out_w, float* col) {
  const std::int64_t out_plane = static_cast<std::int64_t>(out_h) * out_w;
  std::int64_t row = 0;
  for (int c = 0; c < channels; ++c) {
    const float* plane = img + static_cast<std::int64_t>(c) * height * width;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        float* dst = col + row * out_plane;
        for (int ho = 0; ho < out_h; ++ho) {
          const int h = ho * stride_h - pad_h + ki;
          if (h < 0 || h >= height) {
            std::memset(dst + static_cast<std::int64_t>(ho) * out_w, 0,
                        sizeof(float) * static_cast<std::size_t>(out_w));
            continue;
          }
          const float* src_row = plane + static_cast<std::int64_t>(h) * width;
          float* dst_row = dst + static_cast<std::int64_t>(ho) * out_w;
          for (int wo = 0; wo < out_w; ++wo) {
            const int w = wo * stride_w - pad_w + kj;
            dst_row[wo] = (w >= 0 && w < width) ? src_row[w] : 0.0f;
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col.
inline void col2im(const float* col, int channels, int height, int width, int kh,
                   int kw, int stride_h, int stride_w, int pad_h, int pad_w,
                   int out_h, int out_w, float* img) {
  const std::int64_t out_plane = static_cast<std::int64_t>(out_h) * out_w;
  std::int64_t row = 0;
  for (int c = 0; c < channels; ++c) {
    float* plane = img + static_cast<std::int64_t>(c) * height * width;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        const float* src = col + row * out_plane;
        for (int ho = 0; ho < out_h; ++ho) {
          const int h = ho * stride_h - pad_h + ki;
          if (h < 0 || h >= height) continue;
          float* dst_row = plane + static_cast<std::int64_t>(h) * width;
          const float* src_row = src + static_cast<std::int64_t>(ho) * out_w;
          for (int wo = 0; wo < out_w; ++wo) {
            const int w = wo * stride_w - pad_w + kj;
            if (w >= 0 && w < width) dst_row[w] += src_row[wo];
          }
        }
      }
    }
  }
}

}  // namespace detail
}  // namespace vmrfa
