#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "audistill/audio_io.hpp"
#include "audistill/dsp.hpp"
#include "audistill/error.hpp"
#include "audistill/features.hpp"
#include "audistill/matrix.hpp"
#include "audistill/rng.hpp"

namespace audistill {

/// Target STFT magnitudes for phase recovery.
struct MagnitudeSpec {
  Matrix<double> mags;  // num_bins x T, nonnegative
  dsp::StftConfig config;
};

/// Griffin-Lim iterate plus the inconsistency measured after every step.
struct GlaState {
  dsp::Spectrogram current;
  std::vector<double> residual_history;
};

struct NnlsResult {
  std::vector<double> solution;
  std::vector<double> objective;  // ||W s - p||^2 after each iteration
};

struct ReconstructParams {
  FeatureParams features;
  std::size_t gla_iters = 60;
  std::size_t nnls_iters = 200;

  /// Analysis/synthesis pair used by phase recovery: the feature frame
  /// timing with a Hann window.
  dsp::StftConfig synthesis_config() const {
    dsp::StftConfig c = features.stft;
    c.window = dsp::Window::hann;
    return c;
  }
};

/// Inverts the cepstral block of an FD-MFCC map to dB mel energies. Only the
/// first C rows are used; coefficients C..n_mels-1 are taken as zero.
inline Matrix<double> fdmfcc_to_db_mel(const FeatureMap& map, std::size_t n_mels) {
  if (map.rows() % 3 != 0) throw ShapeError("FD-MFCC row count must be a multiple of 3");
  const std::size_t c = map.n_coef();
  if (c > n_mels) throw ShapeError("more cepstral coefficients than mel bands");
  Matrix<double> out(n_mels, map.cols());
  std::vector<double> coef(c);
  for (std::size_t t = 0; t < map.cols(); ++t) {
    for (std::size_t k = 0; k < c; ++k) coef[k] = map.values(k, t);
    out.set_column(t, dsp::idct(coef, n_mels));
  }
  return out;
}

namespace detail {

inline void fb_forward(const dsp::MelFilterbank& fb, std::span<const double> s,
                       std::span<double> out) {
  for (std::size_t m = 0; m < fb.n_mels(); ++m) {
    const auto [first, last] = fb.support[m];
    double acc = 0.0;
    for (std::size_t k = first; k < last; ++k) acc += fb.weights(m, k) * s[k];
    out[m] = acc;
  }
}

inline void fb_adjoint(const dsp::MelFilterbank& fb, std::span<const double> r,
                       std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t m = 0; m < fb.n_mels(); ++m) {
    const auto [first, last] = fb.support[m];
    for (std::size_t k = first; k < last; ++k) out[k] += fb.weights(m, k) * r[m];
  }
}

}  // namespace detail

/// Largest eigenvalue of W^T W by power iteration.
inline double gram_spectral_norm(const dsp::MelFilterbank& fb, std::size_t iters = 100) {
  std::vector<double> v(fb.n_bins(), 1.0), wv(fb.n_mels()), next(fb.n_bins());
  double lambda = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    detail::fb_forward(fb, v, wv);
    detail::fb_adjoint(fb, wv, next);
    double norm = 0.0;
    for (double x : next) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    double dot = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * next[i];
    double vnorm = 0.0;
    for (double x : v) vnorm += x * x;
    lambda = dot / vnorm;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = next[i] / norm;
  }
  return lambda;
}

/// min_{s >= 0} ||W s - p||^2 by projected gradient with step 1/L.
/// The start point W^T (p / rowsum(W)) lies in the row space of W, so an
/// unconstrained optimum is approached along the minimum-norm direction.
inline NnlsResult nnls_projected_gradient(const dsp::MelFilterbank& fb, std::span<const double> p,
                                          std::size_t iters, double lipschitz) {
  if (p.size() != fb.n_mels()) throw ShapeError("mel power length does not match filterbank");
  const std::size_t bins = fb.n_bins();
  NnlsResult res;
  res.objective.reserve(iters);
  std::vector<double> scaled(fb.n_mels());
  for (std::size_t m = 0; m < fb.n_mels(); ++m) {
    double rowsum = 0.0;
    for (double w : fb.weights.row(m)) rowsum += w;
    scaled[m] = p[m] / rowsum;
  }
  res.solution.assign(bins, 0.0);
  detail::fb_adjoint(fb, scaled, res.solution);
  for (auto& v : res.solution) v = std::max(0.0, v);
  if (lipschitz <= 0.0) return res;

  const double step = 1.0 / lipschitz;
  std::vector<double> resid(fb.n_mels()), gradient(bins);
  for (std::size_t it = 0; it < iters; ++it) {
    detail::fb_forward(fb, res.solution, resid);
    for (std::size_t m = 0; m < resid.size(); ++m) resid[m] -= p[m];
    detail::fb_adjoint(fb, resid, gradient);
    for (std::size_t k = 0; k < bins; ++k) {
      res.solution[k] = std::max(0.0, res.solution[k] - step * gradient[k]);
    }
    detail::fb_forward(fb, res.solution, resid);
    double obj = 0.0;
    for (std::size_t m = 0; m < resid.size(); ++m) obj += (resid[m] - p[m]) * (resid[m] - p[m]);
    res.objective.push_back(obj);
  }
  return res;
}

/// dB mel energies -> approximate STFT magnitudes via per-frame NNLS.
inline MagnitudeSpec mel_to_stft_mag(const Matrix<double>& db_mel, const dsp::MelFilterbank& fb,
                                     const dsp::StftConfig& config, double db_ref = 1.0,
                                     std::size_t nnls_iters = 200) {
  if (db_mel.rows() != fb.n_mels()) throw ShapeError("dB-mel rows do not match filterbank");
  if (config.num_bins() != fb.n_bins()) throw ShapeError("filterbank does not match fft_len");
  const double lipschitz = gram_spectral_norm(fb);
  MagnitudeSpec out{Matrix<double>(fb.n_bins(), db_mel.cols()), config};
  std::vector<double> p(fb.n_mels());
  for (std::size_t t = 0; t < db_mel.cols(); ++t) {
    for (std::size_t m = 0; m < p.size(); ++m) p[m] = dsp::db_to_power(db_mel(m, t), db_ref);
    const auto s = nnls_projected_gradient(fb, p, nnls_iters, lipschitz).solution;
    for (std::size_t k = 0; k < s.size(); ++k) out.mags(k, t) = std::sqrt(s[k]);
  }
  return out;
}

/// Replaces magnitudes by A and keeps phases; zero bins take phase 0.
inline dsp::Spectrogram project_magnitude(const dsp::Spectrogram& x, const MagnitudeSpec& a) {
  if (x.bins.rows() != a.mags.rows() || x.bins.cols() != a.mags.cols()) {
    throw ShapeError("spectrogram and magnitude shapes differ");
  }
  dsp::Spectrogram y{Matrix<dsp::Complex>(x.bins.rows(), x.bins.cols()), x.config};
  for (std::size_t i = 0; i < y.bins.size(); ++i) {
    const dsp::Complex v = x.bins.data()[i];
    const double mag = std::abs(v);
    const dsp::Complex unit = mag > 0.0 ? v / mag : dsp::Complex(1.0, 0.0);
    y.bins.data()[i] = a.mags.data()[i] * unit;
  }
  return y;
}

/// STFT(iSTFT(X)): nearest consistent spectrogram.
inline dsp::Spectrogram project_consistent(const dsp::Spectrogram& x) {
  return dsp::stft(dsp::istft(x), x.config);
}

inline dsp::Spectrogram gla_step(const dsp::Spectrogram& x, const MagnitudeSpec& a) {
  return project_consistent(project_magnitude(x, a));
}

/// || |X| - A || / ||A|| in the Frobenius norm of the full (Hermitian
/// extended) spectrum, i.e. interior bins count twice. This is the norm in
/// which both projections are orthogonal.
inline double magnitude_residual(const dsp::Spectrogram& x, const MagnitudeSpec& a) {
  const std::size_t bins = a.mags.rows();
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < bins; ++k) {
    const double w = (k == 0 || k + 1 == bins) ? 1.0 : 2.0;
    for (std::size_t t = 0; t < a.mags.cols(); ++t) {
      const double d = std::abs(x.bins(k, t)) - a.mags(k, t);
      num += w * d * d;
      den += w * a.mags(k, t) * a.mags(k, t);
    }
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

/// Random-phase start; residual_history[i] is measured on X^[i+1].
inline GlaState griffin_lim_state(const MagnitudeSpec& a, std::size_t iters, std::uint64_t seed) {
  if (iters == 0) throw ParameterError("griffin_lim needs at least one iteration");
  a.config.validate();
  Rng rng(seed);
  GlaState st{{Matrix<dsp::Complex>(a.mags.rows(), a.mags.cols()), a.config}, {}};
  for (std::size_t i = 0; i < st.current.bins.size(); ++i) {
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    st.current.bins.data()[i] = std::polar(a.mags.data()[i], phase);
  }
  st.residual_history.reserve(iters);
  for (std::size_t i = 0; i < iters; ++i) {
    st.current = gla_step(st.current, a);
    st.residual_history.push_back(magnitude_residual(st.current, a));
  }
  return st;
}

struct GlaResult {
  std::vector<double> waveform;
  std::vector<double> residual_history;
};

inline GlaResult griffin_lim(const MagnitudeSpec& a, std::size_t iters, std::uint64_t seed) {
  GlaState st = griffin_lim_state(a, iters, seed);
  return {dsp::istft(st.current), std::move(st.residual_history)};
}

struct Reconstruction {
  AudioClip clip;
  std::vector<double> residual_history;
};

/// Standardized FD-MFCC map -> waveform (destandardize, inverse DCT,
/// dB-to-power, mel-to-STFT NNLS, Griffin-Lim). The extractor's
/// pre-emphasis is undone on the output so re-extraction sees the same tilt.
inline Reconstruction reconstruct_clip(const FeatureMap& map, const FeatureStats& stats,
                                       const ReconstructParams& params, std::uint64_t seed) {
  const FeatureParams& fp = params.features;
  fp.validate();
  const FeatureMap raw = destandardize(map, stats);
  const Matrix<double> db = fdmfcc_to_db_mel(raw, fp.n_mels);
  const dsp::StftConfig synth = params.synthesis_config();
  const auto fb = dsp::mel_filterbank(fp.n_mels, synth, fp.sample_rate, fp.f_min, fp.upper_edge());
  const MagnitudeSpec a = mel_to_stft_mag(db, fb, synth, fp.db_ref, params.nnls_iters);
  GlaResult gla = griffin_lim(a, params.gla_iters, seed);
  Reconstruction r;
  r.clip.sample_rate = fp.sample_rate;
  r.clip.label = map.label;
  const auto wave = dsp::de_emphasis(gla.waveform, fp.pre_emphasis);
  r.clip.samples.assign(wave.begin(), wave.end());
  r.residual_history = std::move(gla.residual_history);
  return r;
}

}  // namespace audistill
