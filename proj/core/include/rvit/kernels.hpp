#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace rvit::kernels {

// Forward kernels templated on the element type so the recorded graph can be
// re-executed in double precision. Reductions accumulate in double either way.

template <class T>
void matmul(const T* a, const T* b, T* o, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      const T* ai = a + static_cast<int64_t>(i) * k;
      for (int t = 0; t < k; ++t) acc += static_cast<double>(ai[t]) * static_cast<double>(b[static_cast<int64_t>(t) * n + j]);
      o[static_cast<int64_t>(i) * n + j] = static_cast<T>(acc);
    }
  }
}

template <class T>
void transpose(const T* a, T* o, int m, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) o[static_cast<int64_t>(j) * m + i] = a[static_cast<int64_t>(i) * n + j];
}

enum class EwOp { Add, Sub, Mul, Div };

template <class T>
void elementwise(EwOp op, const T* a, const T* b, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    double x = a[i], y = b[i];
    double r = 0.0;
    switch (op) {
      case EwOp::Add: r = x + y; break;
      case EwOp::Sub: r = x - y; break;
      case EwOp::Mul: r = x * y; break;
      case EwOp::Div: r = x / y; break;
    }
    o[i] = static_cast<T>(r);
  }
}

// b is a rank-1 vector broadcast across the rows of a (rows x cols).
template <class T>
void elementwise_rowbcast(EwOp op, const T* a, const T* b, T* o, int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) {
      double x = a[i * cols + j], y = b[j];
      double r = 0.0;
      switch (op) {
        case EwOp::Add: r = x + y; break;
        case EwOp::Sub: r = x - y; break;
        case EwOp::Mul: r = x * y; break;
        case EwOp::Div: r = x / y; break;
      }
      o[i * cols + j] = static_cast<T>(r);
    }
  }
}

template <class T>
void scale(const T* a, T* o, int64_t n, double alpha) {
  for (int64_t i = 0; i < n; ++i) o[i] = static_cast<T>(static_cast<double>(a[i]) * alpha);
}

template <class T>
void softmax_lastdim(const T* a, T* o, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = a + r * cols;
    T* y = o + r * cols;
    double mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, static_cast<double>(x[j]));
    double sum = 0.0;
    std::vector<double> e(static_cast<size_t>(cols));
    for (int64_t j = 0; j < cols; ++j) {
      e[static_cast<size_t>(j)] = std::exp(static_cast<double>(x[j]) - mx);
      sum += e[static_cast<size_t>(j)];
    }
    for (int64_t j = 0; j < cols; ++j) y[j] = static_cast<T>(e[static_cast<size_t>(j)] / sum);
  }
}

inline constexpr double kLayerNormEps = 1e-8;

template <class T>
void layernorm(const T* a, T* o, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = a + r * cols;
    double mu = 0.0;
    for (int64_t j = 0; j < cols; ++j) mu += x[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      double d = static_cast<double>(x[j]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int64_t j = 0; j < cols; ++j) o[r * cols + j] = static_cast<T>((static_cast<double>(x[j]) - mu) * inv);
  }
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_derivative(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
  const double Phi = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  return Phi + x * phi;
}

template <class T>
void gelu(const T* a, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = static_cast<T>(gelu_value(static_cast<double>(a[i])));
}

template <class T>
void unary_exp(const T* a, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = static_cast<T>(std::exp(static_cast<double>(a[i])));
}

template <class T>
void unary_log(const T* a, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = static_cast<T>(std::log(static_cast<double>(a[i])));
}

template <class T>
void unary_sqrt(const T* a, T* o, int64_t n) {
  for (int64_t i = 0; i < n; ++i) o[i] = static_cast<T>(std::sqrt(static_cast<double>(a[i])));
}

template <class T>
double reduce_sum(const T* a, int64_t n) {
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += a[i];
  return acc;
}

template <class T>
double mse_value(const T* a, const T* b, int64_t n) {
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(n);
}

template <class T>
double cross_entropy_value(const T* logits, const int* labels, int rows, int cols) {
  double acc = 0.0;
  for (int r = 0; r < rows; ++r) {
    const T* x = logits + static_cast<int64_t>(r) * cols;
    double mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, static_cast<double>(x[j]));
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) sum += std::exp(static_cast<double>(x[j]) - mx);
    acc += mx + std::log(sum) - static_cast<double>(x[labels[r]]);
  }
  return acc / static_cast<double>(rows);
}

template <class T>
void gather_rows(const T* a, const int* idx, T* o, int k, int64_t cols) {
  for (int r = 0; r < k; ++r) {
    const T* src = a + static_cast<int64_t>(idx[r]) * cols;
    T* dst = o + static_cast<int64_t>(r) * cols;
    for (int64_t j = 0; j < cols; ++j) dst[j] = src[j];
  }
}

// Row-major H x W x C image into (H/P * W/P) x (P*P*C) patches.
template <class T>
void patchify(const T* img, T* o, int h, int w, int c, int p) {
  const int gw = w / p;
  const int gh = h / p;
  const int pd = p * p * c;
  for (int by = 0; by < gh; ++by) {
    for (int bx = 0; bx < gw; ++bx) {
      T* dst = o + static_cast<int64_t>(by * gw + bx) * pd;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < c; ++ch)
            dst[(py * p + px) * c + ch] = img[((static_cast<int64_t>(by) * p + py) * w + (bx * p + px)) * c + ch];
    }
  }
}

template <class T>
void unpatchify(const T* patches, T* o, int h, int w, int c, int p) {
  const int gw = w / p;
  const int gh = h / p;
  const int pd = p * p * c;
  for (int by = 0; by < gh; ++by) {
    for (int bx = 0; bx < gw; ++bx) {
      const T* src = patches + static_cast<int64_t>(by * gw + bx) * pd;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < c; ++ch)
            o[((static_cast<int64_t>(by) * p + py) * w + (bx * p + px)) * c + ch] = src[(py * p + px) * c + ch];
    }
  }
}

}  // namespace rvit::kernels
