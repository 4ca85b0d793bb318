#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "audistill/error.hpp"
#include "audistill/matrix.hpp"

namespace audistill::dsp {

using Complex = std::complex<double>;

enum class Window { hann, hamming };

inline const char* to_string(Window w) { return w == Window::hann ? "hann" : "hamming"; }

inline Window window_from_string(const std::string& s) {
  if (s == "hann") return Window::hann;
  if (s == "hamming") return Window::hamming;
  throw ParameterError("unknown window '" + s + "'");
}

struct StftConfig {
  std::size_t frame_len = 160;
  std::size_t hop_len = 80;
  std::size_t fft_len = 256;
  Window window = Window::hamming;

  std::size_t num_bins() const { return fft_len / 2 + 1; }

  void validate() const {
    if (hop_len == 0 || hop_len > frame_len || frame_len > fft_len) {
      throw ParameterError("StftConfig requires 0 < hop_len <= frame_len <= fft_len");
    }
    if ((fft_len & (fft_len - 1)) != 0) throw ParameterError("fft_len must be a power of two");
  }

  /// Frames produced for a signal of `len` samples (0 if shorter than a frame).
  std::size_t num_frames(std::size_t len) const {
    return len < frame_len ? 0 : (len - frame_len) / hop_len + 1;
  }
  /// Samples spanned by `frames` frames.
  std::size_t signal_length(std::size_t frames) const {
    return frames == 0 ? 0 : (frames - 1) * hop_len + frame_len;
  }

  bool operator==(const StftConfig&) const = default;
};

/// Non-negative frequency half of a framed DFT: num_bins() rows, one column
/// per frame.
struct Spectrogram {
  Matrix<Complex> bins;
  StftConfig config;

  std::size_t frames() const { return bins.cols(); }
};

struct MelFilterbank {
  Matrix<double> weights;  // n_mels x num_bins
  double f_min = 0.0;
  double f_max = 0.0;
  std::vector<double> peak_hz;
  /// Half-open bin range [first, last) holding each row's nonzero weights.
  std::vector<std::pair<std::size_t, std::size_t>> support;

  std::size_t n_mels() const { return weights.rows(); }
  std::size_t n_bins() const { return weights.cols(); }
};

// ---------------------------------------------------------------------------
// Windows and framing

inline std::vector<double> make_window(Window kind, std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n < 2) return w;
  const double denom = static_cast<double>(n - 1);
  const double a0 = kind == Window::hann ? 0.5 : 0.54;
  const double a1 = 1.0 - a0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = a0 - a1 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / denom);
  }
  return w;
}

inline std::vector<double> pre_emphasis(std::span<const double> x, double coeff) {
  std::vector<double> y(x.size());
  if (x.empty()) return y;
  y[0] = x[0];
  for (std::size_t t = 1; t < x.size(); ++t) y[t] = x[t] - coeff * x[t - 1];
  return y;
}

/// Inverse of pre_emphasis: x[0] = y[0], x[t] = y[t] + coeff * x[t-1].
inline std::vector<double> de_emphasis(std::span<const double> y, double coeff) {
  std::vector<double> x(y.size());
  if (y.empty()) return x;
  x[0] = y[0];
  for (std::size_t t = 1; t < y.size(); ++t) x[t] = y[t] + coeff * x[t - 1];
  return x;
}

/// Rows are windowed frames (T x frame_len).
inline Matrix<double> frame_and_window(std::span<const double> x, const StftConfig& cfg) {
  cfg.validate();
  if (x.size() < cfg.frame_len) {
    throw TooShortError("signal of " + std::to_string(x.size()) +
                        " samples is shorter than one frame (" +
                        std::to_string(cfg.frame_len) + ")");
  }
  const std::size_t frames = cfg.num_frames(x.size());
  const auto win = make_window(cfg.window, cfg.frame_len);
  Matrix<double> out(frames, cfg.frame_len);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* src = x.data() + t * cfg.hop_len;
    auto dst = out.row(t);
    for (std::size_t i = 0; i < cfg.frame_len; ++i) dst[i] = src[i] * win[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// FFT (iterative radix-2)

namespace detail {

struct FftPlan {
  std::size_t n = 0;
  std::vector<std::size_t> bitrev;
  std::vector<Complex> twiddle;  // exp(-2 pi i k / n), k < n/2

  explicit FftPlan(std::size_t size) : n(size), bitrev(size), twiddle(size / 2) {
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1u) << (bits - 1 - b);
      bitrev[i] = r;
    }
    for (std::size_t k = 0; k < n / 2; ++k) {
      twiddle[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) /
                                       static_cast<double>(n));
    }
  }
};

inline const FftPlan& fft_plan(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::unique_ptr<FftPlan>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<FftPlan>(n);
  return *slot;
}

}  // namespace detail

/// In-place complex DFT of power-of-two length. `inverse` applies the
/// conjugate kernel and the 1/n scale.
inline void fft_inplace(std::span<Complex> a, bool inverse = false) {
  const std::size_t n = a.size();
  if (n <= 1) return;
  if ((n & (n - 1)) != 0) throw ParameterError("FFT length must be a power of two");
  const auto& plan = detail::fft_plan(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < plan.bitrev[i]) std::swap(a[i], a[plan.bitrev[i]]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t stride = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        Complex w = plan.twiddle[k * stride];
        if (inverse) w = std::conj(w);
        const Complex u = a[start + k];
        const Complex v = a[start + k + half] * w;
        a[start + k] = u + v;
        a[start + k + half] = u - v;
      }
    }
  }
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(n);
    for (auto& v : a) v *= scale;
  }
}

/// Non-negative-frequency bins of the DFT of `frame` zero-padded to `fft_len`.
inline std::vector<Complex> rfft(std::span<const double> frame, std::size_t fft_len) {
  std::vector<Complex> buf(fft_len);
  for (std::size_t i = 0; i < frame.size() && i < fft_len; ++i) buf[i] = frame[i];
  fft_inplace(buf);
  buf.resize(fft_len / 2 + 1);
  return buf;
}

/// Real signal of length `fft_len` whose spectrum is the Hermitian extension
/// of `half`. Imaginary parts of the DC and Nyquist bins are ignored.
inline std::vector<double> irfft(std::span<const Complex> half, std::size_t fft_len) {
  std::vector<Complex> buf(fft_len);
  const std::size_t bins = fft_len / 2 + 1;
  for (std::size_t k = 0; k < bins; ++k) buf[k] = half[k];
  buf[0] = buf[0].real();
  buf[fft_len / 2] = buf[fft_len / 2].real();
  for (std::size_t k = 1; k < fft_len / 2; ++k) buf[fft_len - k] = std::conj(half[k]);
  fft_inplace(buf, /*inverse=*/true);
  std::vector<double> out(fft_len);
  for (std::size_t i = 0; i < fft_len; ++i) out[i] = buf[i].real();
  return out;
}

// ---------------------------------------------------------------------------
// STFT / iSTFT

inline Spectrogram stft(std::span<const double> x, const StftConfig& cfg) {
  const Matrix<double> frames = frame_and_window(x, cfg);
  Spectrogram s{Matrix<Complex>(cfg.num_bins(), frames.rows()), cfg};
  for (std::size_t t = 0; t < frames.rows(); ++t) {
    const auto spec = rfft(frames.row(t), cfg.fft_len);
    for (std::size_t k = 0; k < spec.size(); ++k) s.bins(k, t) = spec[k];
  }
  return s;
}

/// Least-squares weighted overlap-add inverse: each frame is windowed again
/// and the sum is divided by the accumulated squared window. Samples whose
/// window sum is below 1e-8 are set to zero.
inline std::vector<double> istft(const Spectrogram& s) {
  const StftConfig& cfg = s.config;
  cfg.validate();
  if (s.bins.rows() != cfg.num_bins()) {
    throw ShapeError("spectrogram has " + std::to_string(s.bins.rows()) + " rows, expected " +
                     std::to_string(cfg.num_bins()));
  }
  const std::size_t frames = s.frames();
  const std::size_t len = cfg.signal_length(frames);
  const auto win = make_window(cfg.window, cfg.frame_len);
  std::vector<double> y(len, 0.0), wsum(len, 0.0);
  std::vector<Complex> col(cfg.num_bins());
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < col.size(); ++k) col[k] = s.bins(k, t);
    const auto frame = irfft(col, cfg.fft_len);
    const std::size_t off = t * cfg.hop_len;
    for (std::size_t i = 0; i < cfg.frame_len; ++i) {
      y[off + i] += frame[i] * win[i];
      wsum[off + i] += win[i] * win[i];
    }
  }
  for (std::size_t i = 0; i < len; ++i) y[i] = wsum[i] >= 1e-8 ? y[i] / wsum[i] : 0.0;
  return y;
}

/// Squared-window overlap-add envelope used by istft.
inline std::vector<double> window_sum(const StftConfig& cfg, std::size_t frames) {
  const auto win = make_window(cfg.window, cfg.frame_len);
  std::vector<double> wsum(cfg.signal_length(frames), 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < cfg.frame_len; ++i) wsum[t * cfg.hop_len + i] += win[i] * win[i];
  }
  return wsum;
}

/// |X|^2 of each frame (num_bins x T).
inline Matrix<double> power_spectrum(const Spectrogram& s) {
  Matrix<double> p(s.bins.rows(), s.bins.cols());
  for (std::size_t i = 0; i < p.size(); ++i) p.data()[i] = std::norm(s.bins.data()[i]);
  return p;
}

// ---------------------------------------------------------------------------
// Mel filterbank (HTK mel scale, unit-peak triangles)

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

inline MelFilterbank mel_filterbank(std::size_t n_mels, const StftConfig& cfg, double sample_rate,
                                    double f_min, double f_max) {
  cfg.validate();
  if (n_mels < 2) throw ParameterError("mel filterbank needs at least 2 filters");
  if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0)) {
    throw ParameterError("mel band edges must satisfy 0 <= f_min < f_max <= sample_rate/2");
  }
  const double m_lo = hz_to_mel(f_min);
  const double m_hi = hz_to_mel(f_max);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * static_cast<double>(i) /
                                     static_cast<double>(n_mels + 1));
  }
  MelFilterbank fb;
  fb.f_min = f_min;
  fb.f_max = f_max;
  fb.weights = Matrix<double>(n_mels, cfg.num_bins());
  fb.peak_hz.assign(edges.begin() + 1, edges.end() - 1);
  fb.support.resize(n_mels);
  const double bin_hz = sample_rate / static_cast<double>(cfg.fft_len);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    std::size_t first = cfg.num_bins(), last = 0;
    double total = 0.0;
    for (std::size_t k = 0; k < cfg.num_bins(); ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      const double w = std::max(0.0, std::min((f - lo) / (mid - lo), (hi - f) / (hi - mid)));
      if (w > 0.0) {
        fb.weights(m, k) = w;
        first = std::min(first, k);
        last = k + 1;
        total += w;
      }
    }
    if (total <= 0.0) {
      throw ParameterError("mel filter " + std::to_string(m) +
                           " covers no FFT bin; use fewer mels or a longer FFT");
    }
    fb.support[m] = {first, last};
  }
  return fb;
}

/// weights * column for every column of `power` (num_bins x T -> n_mels x T).
inline Matrix<double> apply_filterbank(const MelFilterbank& fb, const Matrix<double>& power) {
  if (power.rows() != fb.n_bins()) throw ShapeError("power spectrum rows do not match filterbank");
  Matrix<double> out(fb.n_mels(), power.cols());
  for (std::size_t m = 0; m < fb.n_mels(); ++m) {
    const auto [first, last] = fb.support[m];
    for (std::size_t t = 0; t < power.cols(); ++t) {
      double acc = 0.0;
      for (std::size_t k = first; k < last; ++k) acc += fb.weights(m, k) * power(k, t);
      out(m, t) = acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orthonormal DCT-II and its inverse

namespace detail {

/// basis(k, n) = s_k cos(pi k (2n+1) / 2N), s_0 = sqrt(1/N), s_k = sqrt(2/N).
inline const Matrix<double>& dct_basis(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::unique_ptr<Matrix<double>>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[n];
  if (!slot) {
    slot = std::make_unique<Matrix<double>>(n, n);
    const double nn = static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double s = k == 0 ? std::sqrt(1.0 / nn) : std::sqrt(2.0 / nn);
      for (std::size_t i = 0; i < n; ++i) {
        (*slot)(k, i) = s * std::cos(std::numbers::pi * static_cast<double>(k) *
                                     (2.0 * static_cast<double>(i) + 1.0) / (2.0 * nn));
      }
    }
  }
  return *slot;
}

}  // namespace detail

inline std::vector<double> dct2_ortho(std::span<const double> v) {
  const auto& basis = detail::dct_basis(v.size());
  std::vector<double> c(v.size(), 0.0);
  for (std::size_t k = 0; k < v.size(); ++k) {
    double acc = 0.0;
    const auto row = basis.row(k);
    for (std::size_t i = 0; i < v.size(); ++i) acc += row[i] * v[i];
    c[k] = acc;
  }
  return c;
}

/// Orthonormal DCT-III. `c` may be shorter than `out_len`; missing
/// coefficients are treated as zero.
inline std::vector<double> idct(std::span<const double> c, std::size_t out_len) {
  if (c.size() > out_len) throw ShapeError("idct: more coefficients than output samples");
  const auto& basis = detail::dct_basis(out_len);
  std::vector<double> v(out_len, 0.0);
  for (std::size_t k = 0; k < c.size(); ++k) {
    const auto row = basis.row(k);
    for (std::size_t i = 0; i < out_len; ++i) v[i] += c[k] * row[i];
  }
  return v;
}

inline std::vector<double> idct(std::span<const double> c) { return idct(c, c.size()); }

// ---------------------------------------------------------------------------
// Power <-> decibels

inline constexpr double kPowerFloor = 1e-10;

inline double power_to_db(double p, double ref = 1.0) {
  return 10.0 * std::log10(std::max(p, kPowerFloor) / ref);
}

inline double db_to_power(double d, double ref = 1.0) { return ref * std::pow(10.0, d / 10.0); }

}  // namespace audistill::dsp
