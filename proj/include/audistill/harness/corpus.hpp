#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "audistill/audio_io.hpp"
#include "audistill/error.hpp"
#include "audistill/harness/config.hpp"
#include "audistill/rng.hpp"

namespace audistill {

inline const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names{"tone", "chirp_up", "chirp_down", "warble"};
  return names;
}

/// One seeded clip of the tone/chirp corpus. Every clip has a randomly
/// placed active segment, a faint interfering tone and white background
/// noise scaled by `noise`.
inline AudioClip synth_clip(int label, std::size_t len, int sample_rate, double noise, Rng& rng) {
  const double sr = sample_rate;
  const double pi2 = 2.0 * std::numbers::pi;
  const double amp = rng.uniform(0.2, 0.6);
  const double f_lo = rng.uniform(500.0, 1100.0);
  const double f_hi = f_lo * rng.uniform(1.4, 2.0);
  const double f_tone = rng.uniform(600.0, 1800.0);
  const double vib_depth = rng.uniform(80.0, 200.0);
  const double vib_rate = rng.uniform(6.0, 12.0);
  const double start = rng.uniform(0.0, 0.3) * static_cast<double>(len);
  const double dur = rng.uniform(0.5, 0.9) * static_cast<double>(len);
  const double end = std::min(static_cast<double>(len), start + dur);
  const double fade = 0.01 * sr;
  const double interf_f = rng.uniform(300.0, 3000.0);
  const double interf_a = amp * rng.uniform(0.0, 0.4);
  const double noise_sd = noise * rng.uniform(0.5, 1.5);

  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.label = label;
  clip.samples.resize(len);
  double phase = rng.uniform(0.0, pi2);
  double interf_phase = rng.uniform(0.0, pi2);
  for (std::size_t n = 0; n < len; ++n) {
    const double t = static_cast<double>(n);
    double v = 0.0;
    if (t >= start && t < end) {
      const double u = (t - start) / std::max(1.0, end - start);  // 0..1 across the segment
      double f = f_tone;
      switch (label) {
        case 0: f = f_tone; break;
        case 1: f = f_lo + (f_hi - f_lo) * u; break;
        case 2: f = f_hi - (f_hi - f_lo) * u; break;
        case 3: f = f_tone + vib_depth * std::sin(pi2 * vib_rate * (t - start) / sr); break;
        default: throw ParameterError("synthetic corpus has at most 4 classes");
      }
      phase += pi2 * f / sr;
      const double env = std::min({1.0, (t - start) / fade, (end - t) / fade});
      v = amp * env * std::sin(phase);
    }
    interf_phase += pi2 * interf_f / sr;
    v += interf_a * std::sin(interf_phase) + noise_sd * rng.normal();
    clip.samples[n] = static_cast<float>(std::clamp(v, -1.0, 1.0));
  }
  return clip;
}

/// Writes WAVs and a manifest (with a train/test split column) under `dir`.
inline Manifest write_synthetic_corpus(const RunConfig& cfg, const std::filesystem::path& dir) {
  if (cfg.synth_classes < 2 || cfg.synth_classes > synth_class_names().size()) {
    throw ParameterError("synth_classes must lie in [2, 4]");
  }
  std::filesystem::create_directories(dir / "wav");
  Manifest m;
  m.class_names.assign(synth_class_names().begin(),
                       synth_class_names().begin() + static_cast<std::ptrdiff_t>(cfg.synth_classes));
  m.sample_rate = cfg.sample_rate;
  m.target_len = cfg.target_len();
  m.base_dir = dir;
  std::size_t index = 0;
  for (const char* split : {"train", "test"}) {
    const std::size_t per_class =
        std::string(split) == "train" ? cfg.synth_train_per_class : cfg.synth_test_per_class;
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t c = 0; c < cfg.synth_classes; ++c, ++index) {
        Rng rng(derive_seed(cfg.seed, "synth-clip", index));
        AudioClip clip = synth_clip(static_cast<int>(c), m.target_len, cfg.sample_rate, cfg.synth_noise, rng);
        const std::string rel = "wav/" + std::string(split) + "_" + std::to_string(index) + "_" +
                                m.class_names[c] + ".wav";
        save_wav(clip, dir / rel);
        m.entries.push_back({rel, static_cast<int>(c), split});
      }
    }
  }
  write_manifest(m, dir / "manifest.jsonl");
  return m;
}

}  // namespace audistill
