#pragma once

// Independent reference implementations used only by tests.

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <vector>

#include "audistill/autodiff.hpp"
#include "audistill/rng.hpp"

namespace oracle {

inline std::vector<std::complex<double>> naive_dft(const std::vector<double>& x, std::size_t n) {
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t t = 0; t < std::min(n, x.size()); ++t) {
      acc += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * double(k * t) / double(n));
    }
    out[k] = acc;
  }
  return out;
}

inline std::vector<double> naive_dct2_ortho(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += x[i] * std::cos(std::numbers::pi * double(k) * (2.0 * double(i) + 1.0) / (2.0 * double(n)));
    }
    out[k] = acc * std::sqrt((k == 0 ? 1.0 : 2.0) / double(n));
  }
  return out;
}

template <class T>
using Fn = std::function<audistill::ad::BasicTensor<T>(const std::vector<audistill::ad::BasicTensor<T>>&)>;

/// Norm-wise relative error between analytic gradients of f and central
/// finite differences, taken over all inputs jointly.
template <class T>
double gradcheck(const Fn<T>& f, const std::vector<audistill::ad::BasicTensor<T>>& inputs, double eps) {
  using namespace audistill::ad;
  std::vector<BasicTensor<T>> leaves;
  for (const auto& x : inputs) leaves.push_back(x.detach(true));
  const auto analytic = grad(f(leaves), leaves);

  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    for (std::size_t j = 0; j < leaves[i].numel(); ++j) {
      auto eval = [&](double delta) {
        std::vector<BasicTensor<T>> args = leaves;
        std::vector<T> v = leaves[i].vec();
        v[j] = static_cast<T>(v[j] + delta);
        args[i] = BasicTensor<T>(leaves[i].shape(), v, true);
        return static_cast<double>(f(args).item());
      };
      const double numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
      const double a = analytic[i][j];
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
    }
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
  return std::sqrt(diff) / scale;
}

template <class T>
audistill::ad::BasicTensor<T> random_tensor(audistill::Rng& rng, const audistill::ad::Shape& shape,
                                            double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(audistill::ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return audistill::ad::BasicTensor<T>(shape, std::move(v));
}

/// Values bounded away from zero (keeps relu away from its kink under FD).
template <class T>
audistill::ad::BasicTensor<T> random_away_from_zero(audistill::Rng& rng,
                                                    const audistill::ad::Shape& shape) {
  std::vector<T> v(audistill::ad::numel(shape));
  for (auto& x : v) {
    const double m = rng.uniform(0.1, 1.0);
    x = static_cast<T>(rng.uniform() < 0.5 ? -m : m);
  }
  return audistill::ad::BasicTensor<T>(shape, std::move(v));
}

/// Scalar probe sum(out * R) with R fixed by the seed.
template <class T>
audistill::ad::BasicTensor<T> probe(const audistill::ad::BasicTensor<T>& out, std::uint64_t seed) {
  audistill::Rng rng(seed);
  return audistill::ad::sum(audistill::ad::mul(out, random_tensor<T>(rng, out.shape())));
}

/// Best value over all subsets of size k (indices ascending), by enumeration.
template <class Score>
std::vector<std::size_t> best_subset(std::size_t n, std::size_t k, Score score) {
  std::vector<std::size_t> best, cur;
  double best_score = INFINITY;
  std::function<void(std::size_t)> rec = [&](std::size_t start) {
    if (cur.size() == k) {
      const double s = score(cur);
      if (s < best_score - 1e-12) {
        best_score = s;
        best = cur;
      }
      return;
    }
    for (std::size_t i = start; i < n; ++i) {
      cur.push_back(i);
      rec(i + 1);
      cur.pop_back();
    }
  };
  rec(0);
  return best;
}

}  // namespace oracle
