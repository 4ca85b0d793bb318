#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "audistill/audio_io.hpp"
#include "audistill/dsp.hpp"
#include "audistill/error.hpp"
#include "audistill/matrix.hpp"

namespace audistill {

/// Knobs of the fused-differential MFCC extractor.
struct FeatureParams {
  int sample_rate = 8000;
  double pre_emphasis = 0.97;
  dsp::StftConfig stft{160, 80, 256, dsp::Window::hamming};
  std::size_t n_mels = 64;
  std::size_t n_coef = 20;
  double f_min = 0.0;
  double f_max = 0.0;  // 0 selects sample_rate / 2
  double db_ref = 1.0;

  double upper_edge() const { return f_max > 0.0 ? f_max : sample_rate / 2.0; }
  std::size_t rows() const { return 3 * n_coef; }
  std::size_t frames(std::size_t clip_len) const { return stft.num_frames(clip_len); }

  void validate() const {
    stft.validate();
    if (sample_rate <= 0) throw ParameterError("sample_rate must be positive");
    if (pre_emphasis < 0.0 || pre_emphasis >= 1.0) {
      throw ParameterError("pre-emphasis coefficient must lie in [0, 1)");
    }
    if (n_coef == 0 || n_coef > n_mels) throw ParameterError("need 0 < n_coef <= n_mels");
    if (db_ref <= 0.0) throw ParameterError("db_ref must be positive");
  }
};

inline void to_json(nlohmann::json& j, const FeatureParams& p) {
  j = nlohmann::json{{"sample_rate", p.sample_rate},
                     {"pre_emphasis", p.pre_emphasis},
                     {"frame_len", p.stft.frame_len},
                     {"hop_len", p.stft.hop_len},
                     {"fft_len", p.stft.fft_len},
                     {"window", dsp::to_string(p.stft.window)},
                     {"n_mels", p.n_mels},
                     {"n_coef", p.n_coef},
                     {"f_min", p.f_min},
                     {"f_max", p.f_max},
                     {"db_ref", p.db_ref}};
}

inline void from_json(const nlohmann::json& j, FeatureParams& p) {
  p.sample_rate = j.at("sample_rate").get<int>();
  p.pre_emphasis = j.at("pre_emphasis").get<double>();
  p.stft.frame_len = j.at("frame_len").get<std::size_t>();
  p.stft.hop_len = j.at("hop_len").get<std::size_t>();
  p.stft.fft_len = j.at("fft_len").get<std::size_t>();
  p.stft.window = dsp::window_from_string(j.at("window").get<std::string>());
  p.n_mels = j.at("n_mels").get<std::size_t>();
  p.n_coef = j.at("n_coef").get<std::size_t>();
  p.f_min = j.at("f_min").get<double>();
  p.f_max = j.at("f_max").get<double>();
  p.db_ref = j.at("db_ref").get<double>();
}

/// FD-MFCC matrix: rows are [MFCC; delta; delta2] (3C rows), columns are frames.
struct FeatureMap {
  Matrix<double> values;
  int label = 0;
  dsp::StftConfig frame_config;

  std::size_t rows() const { return values.rows(); }
  std::size_t cols() const { return values.cols(); }
  std::size_t n_coef() const { return values.rows() / 3; }
};

struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> std;
};

inline constexpr double kStdFloor = 1e-6;

inline std::vector<double> to_double(std::span<const float> x) {
  return {x.begin(), x.end()};
}

/// Log mel energies in dB (n_mels x T): the input of the cepstral DCT.
inline Matrix<double> mel_db(std::span<const double> x, const FeatureParams& p) {
  p.validate();
  const auto emphasized = dsp::pre_emphasis(x, p.pre_emphasis);
  const auto spec = dsp::stft(emphasized, p.stft);
  const auto fb = dsp::mel_filterbank(p.n_mels, p.stft, p.sample_rate, p.f_min, p.upper_edge());
  Matrix<double> mel = dsp::apply_filterbank(fb, dsp::power_spectrum(spec));
  for (auto& v : mel.data()) v = dsp::power_to_db(v, p.db_ref);
  return mel;
}

/// Per-frame orthonormal DCT of a dB-mel matrix, truncated to `n_coef` rows.
inline Matrix<double> cepstrum(const Matrix<double>& db_mel, std::size_t n_coef) {
  Matrix<double> out(n_coef, db_mel.cols());
  for (std::size_t t = 0; t < db_mel.cols(); ++t) {
    const auto col = db_mel.column(t);
    const auto c = dsp::dct2_ortho(col);
    for (std::size_t k = 0; k < n_coef; ++k) out(k, t) = c[k];
  }
  return out;
}

/// C x T cepstral coefficients.
inline Matrix<double> mfcc(const AudioClip& clip, const FeatureParams& p) {
  return cepstrum(mel_db(to_double(clip.samples), p), p.n_coef);
}

/// Forward difference halved along time; the last column repeats the last
/// frame and is therefore zero.
inline Matrix<double> delta(const Matrix<double>& m) {
  Matrix<double> out(m.rows(), m.cols(), 0.0);
  if (m.cols() == 0) return out;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t t = 0; t + 1 < m.cols(); ++t) out(r, t) = (m(r, t + 1) - m(r, t)) / 2.0;
  }
  return out;
}

/// Stacks a C x T cepstral block with its first and second differences.
inline Matrix<double> fuse_differences(const Matrix<double>& c) {
  const Matrix<double> d1 = delta(c);
  const Matrix<double> d2 = delta(d1);
  Matrix<double> out(3 * c.rows(), c.cols());
  for (std::size_t r = 0; r < c.rows(); ++r) {
    for (std::size_t t = 0; t < c.cols(); ++t) {
      out(r, t) = c(r, t);
      out(c.rows() + r, t) = d1(r, t);
      out(2 * c.rows() + r, t) = d2(r, t);
    }
  }
  return out;
}

inline FeatureMap extract_fd_mfcc(const AudioClip& clip, const FeatureParams& p) {
  return {fuse_differences(mfcc(clip, p)), clip.label, p.stft};
}

/// Per-row mean and population standard deviation over every frame of every map.
inline FeatureStats fit_stats(std::span<const FeatureMap> maps) {
  if (maps.empty()) throw PreconditionError("fit_stats needs at least one feature map");
  const std::size_t rows = maps.front().rows();
  std::vector<double> sum(rows, 0.0), sumsq(rows, 0.0);
  std::size_t count = 0;
  for (const auto& m : maps) {
    if (m.rows() != rows) throw ShapeError("feature maps disagree on row count");
    for (std::size_t r = 0; r < rows; ++r) {
      for (double v : m.values.row(r)) sum[r] += v;
    }
    count += m.cols();
  }
  FeatureStats s{std::vector<double>(rows), std::vector<double>(rows)};
  for (std::size_t r = 0; r < rows; ++r) s.mean[r] = sum[r] / static_cast<double>(count);
  for (const auto& m : maps) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (double v : m.values.row(r)) sumsq[r] += (v - s.mean[r]) * (v - s.mean[r]);
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    s.std[r] = std::max(kStdFloor, std::sqrt(sumsq[r] / static_cast<double>(count)));
  }
  return s;
}

inline FeatureMap standardize(FeatureMap m, const FeatureStats& s) {
  if (s.mean.size() != m.rows()) throw ShapeError("stats do not match feature rows");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (auto& v : m.values.row(r)) v = (v - s.mean[r]) / s.std[r];
  }
  return m;
}

inline FeatureMap destandardize(FeatureMap m, const FeatureStats& s) {
  if (s.mean.size() != m.rows()) throw ShapeError("stats do not match feature rows");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (auto& v : m.values.row(r)) v = v * s.std[r] + s.mean[r];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Feature tensor files: "FDMF", u16 version, u32 rows, u32 cols, u32 label,
// then rows*cols little-endian float-32 values in row-major order. A file may
// hold several records back to back.

inline constexpr std::uint16_t kFeatureFileVersion = 1;

inline void append_feature_record(std::vector<unsigned char>& out, const FeatureMap& m) {
  detail::put_tag(out, "FDMF");
  detail::put_u16(out, kFeatureFileVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.label));
  for (double v : m.values.data()) {
    const float f = static_cast<float>(v);
    std::uint32_t u;
    std::memcpy(&u, &f, sizeof u);
    detail::put_u32(out, u);
  }
}

inline std::vector<FeatureMap> decode_feature_records(const std::vector<unsigned char>& bytes,
                                                      const dsp::StftConfig& frame_config = {}) {
  constexpr std::size_t kHeader = 4 + 2 + 4 + 4 + 4;
  std::vector<FeatureMap> maps;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    if (bytes.size() - pos < kHeader || std::memcmp(bytes.data() + pos, "FDMF", 4) != 0) {
      throw FormatError("bad feature record header at byte " + std::to_string(pos));
    }
    const unsigned char* h = bytes.data() + pos;
    if (detail::read_u16(h + 4) != kFeatureFileVersion) {
      throw UnsupportedError("unsupported feature file version");
    }
    const std::size_t rows = detail::read_u32(h + 6);
    const std::size_t cols = detail::read_u32(h + 10);
    const int label = static_cast<int>(detail::read_u32(h + 14));
    pos += kHeader;
    if ((bytes.size() - pos) / 4 < rows * cols) throw FormatError("truncated feature record");
    FeatureMap m{Matrix<double>(rows, cols), label, frame_config};
    for (auto& v : m.values.data()) {
      float f;
      const std::uint32_t u = detail::read_u32(bytes.data() + pos);
      std::memcpy(&f, &u, sizeof f);
      v = f;
      pos += 4;
    }
    maps.push_back(std::move(m));
  }
  return maps;
}

inline void write_feature_file(std::span<const FeatureMap> maps,
                               const std::filesystem::path& path) {
  std::vector<unsigned char> bytes;
  for (const auto& m : maps) append_feature_record(bytes, m);
  detail::write_file_bytes(path, bytes);
}

inline std::vector<FeatureMap> read_feature_file(const std::filesystem::path& path,
                                                 const dsp::StftConfig& frame_config = {}) {
  return decode_feature_records(detail::read_file_bytes(path), frame_config);
}

inline void to_json(nlohmann::json& j, const FeatureStats& s) {
  j = nlohmann::json{{"mean", s.mean}, {"std", s.std}};
}

inline void from_json(const nlohmann::json& j, FeatureStats& s) {
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  if (s.mean.size() != s.std.size()) throw FormatError("stats mean/std length mismatch");
  for (double v : s.std) {
    if (!(v > 0.0)) throw FormatError("stats std must be positive");
  }
}

}  // namespace audistill
