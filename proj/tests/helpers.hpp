#pragma once

#include <cmath>
#include <vector>

#include "rvit/rng.hpp"
#include "rvit/tensor.hpp"

namespace testutil {

using rvit::Rng;
using rvit::Shape;
using rvit::Tensor;

inline Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_image(int h, int w, int c, Rng& rng) { return random_tensor({h, w, c}, rng, 0.0f, 1.0f); }

// Independent triple-loop matmul in double precision.
inline std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t)
        acc += static_cast<double>(a.data()[i * k + t]) * static_cast<double>(b.data()[t * n + j]);
      out[static_cast<size_t>(i) * n + j] = acc;
    }
  return out;
}

inline double cosine_similarity(const double* a, const double* b, int d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < d; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt((na + 1e-12) * (nb + 1e-12));
}

// Brute-force soft-nearest-neighbor loss: double loops straight from the
// definition, cosine distance, anchors without positives skipped.
inline double snn_brute_force(const Tensor& z, const std::vector<int>& y, double tau) {
  const int n = z.dim(0), d = z.dim(1);
  std::vector<std::vector<double>> rows(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(d)));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) rows[static_cast<size_t>(i)][static_cast<size_t>(j)] = z.data()[i * d + j];
  double acc = 0.0;
  int used = 0;
  for (int i = 0; i < n; ++i) {
    double num = 0.0, den = 0.0;
    int positives = 0;
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      const double dist =
          1.0 - cosine_similarity(rows[static_cast<size_t>(i)].data(), rows[static_cast<size_t>(k)].data(), d);
      const double w = std::exp(-dist / tau);
      den += w;
      if (y[static_cast<size_t>(k)] == y[static_cast<size_t>(i)]) {
        num += w;
        ++positives;
      }
    }
    if (positives == 0) continue;
    acc += std::log(num / den);
    ++used;
  }
  return -acc / used;
}

// Brute-force SimCLR-style contrastive loss; row i pairs with i +/- B.
inline double contrastive_brute_force(const Tensor& z, double tau) {
  const int n = z.dim(0), d = z.dim(1);
  const int b = n / 2;
  std::vector<std::vector<double>> rows(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(d)));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) rows[static_cast<size_t>(i)][static_cast<size_t>(j)] = z.data()[i * d + j];
  auto ell = [&](int i, int j) {
    double den = 0.0;
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      den += std::exp(cosine_similarity(rows[static_cast<size_t>(i)].data(), rows[static_cast<size_t>(k)].data(), d) / tau);
    }
    const double pos =
        std::exp(cosine_similarity(rows[static_cast<size_t>(i)].data(), rows[static_cast<size_t>(j)].data(), d) / tau);
    return -std::log(pos / den);
  };
  double acc = 0.0;
  for (int k = 0; k < b; ++k) acc += ell(k, k + b) + ell(k + b, k);
  return acc / n;
}

}  // namespace testutil
