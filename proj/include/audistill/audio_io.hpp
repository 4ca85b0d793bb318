#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "audistill/error.hpp"

namespace audistill {

/// Mono waveform at a fixed sample rate. Samples are float-32 so that the
/// float WAV container round-trips them exactly.
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 0;
  int label = 0;
  std::string source_id;
};

struct ManifestEntry {
  std::string path;
  int label = 0;
  std::string split;  // "train", "test" or empty (assigned later)
};

/// Dataset listing. `entries` paths are stored as written in the file; use
/// `resolve()` to obtain a path relative to the manifest location.
struct Manifest {
  std::vector<std::string> class_names;
  int sample_rate = 0;
  std::size_t target_len = 0;
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::size_t num_classes() const { return class_names.size(); }
  std::filesystem::path resolve(const ManifestEntry& e) const {
    std::filesystem::path p(e.path);
    return p.is_absolute() ? p : base_dir / p;
  }
};

namespace detail {

inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}
inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}
inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_tag(std::vector<unsigned char>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

/// Decodes a RIFF/WAVE byte buffer. Accepts PCM16 and IEEE float-32 (plain or
/// WAVE_FORMAT_EXTENSIBLE); channels are averaged to mono.
inline AudioClip decode_wav(const std::vector<unsigned char>& bytes,
                            std::string source_id = {}) {
  using detail::read_u16;
  using detail::read_u32;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("not a RIFF/WAVE file: " + source_id);
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t size = read_u32(hdr + 4);
    if (size > bytes.size() - pos - 8) {
      throw FormatError("chunk '" + std::string(reinterpret_cast<const char*>(hdr), 4) +
                        "' extends past end of file: " + source_id);
    }
    const unsigned char* body = hdr + 8;
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError("fmt chunk too small: " + source_id);
      format = read_u16(body);
      channels = read_u16(body + 2);
      rate = read_u32(body + 4);
      bits = read_u16(body + 14);
      if (format == 0xFFFE) {
        if (size < 40) throw FormatError("extensible fmt chunk too small: " + source_id);
        format = read_u16(body + 24);  // first two bytes of the subformat GUID
      }
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = body;
      data_size = size;
    }
    pos += 8 + size + (size & 1u);
  }
  if (!have_fmt || data == nullptr) throw FormatError("missing fmt or data chunk: " + source_id);
  if (channels == 0 || rate == 0) throw FormatError("zero channels or sample rate: " + source_id);

  const bool pcm16 = format == 1 && bits == 16;
  const bool float32 = format == 3 && bits == 32;
  if (!pcm16 && !float32) {
    throw UnsupportedError("unsupported WAV codec (format " + std::to_string(format) +
                           ", " + std::to_string(bits) + " bits): " + source_id);
  }
  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frame_bytes = bytes_per_sample * channels;
  const std::size_t frames = data_size / frame_bytes;

  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.source_id = std::move(source_id);
  clip.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + f * frame_bytes + c * bytes_per_sample;
      if (pcm16) {
        acc += static_cast<std::int16_t>(read_u16(p)) / 32768.0;
      } else {
        float v;
        const std::uint32_t u = read_u32(p);
        std::memcpy(&v, &u, sizeof v);
        acc += v;
      }
    }
    clip.samples[f] = static_cast<float>(channels == 1 ? acc : acc / channels);
  }
  return clip;
}

/// Encodes as mono IEEE float-32 WAV.
inline std::vector<unsigned char> encode_wav(const AudioClip& clip) {
  if (clip.sample_rate <= 0) throw PreconditionError("sample_rate must be positive");
  for (float s : clip.samples) {
    if (!std::isfinite(s)) throw PreconditionError("cannot encode non-finite sample");
  }
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 4);
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  detail::put_tag(out, "RIFF");
  detail::put_u32(out, 36 + data_bytes);
  detail::put_tag(out, "WAVE");
  detail::put_tag(out, "fmt ");
  detail::put_u32(out, 16);
  detail::put_u16(out, 3);  // IEEE float
  detail::put_u16(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * 4);
  detail::put_u16(out, 4);
  detail::put_u16(out, 32);
  detail::put_tag(out, "data");
  detail::put_u32(out, data_bytes);
  for (float s : clip.samples) {
    std::uint32_t u;
    std::memcpy(&u, &s, sizeof u);
    detail::put_u32(out, u);
  }
  return out;
}

inline AudioClip load_wav(const std::filesystem::path& path) {
  return decode_wav(detail::read_file_bytes(path), path.string());
}

inline void save_wav(const AudioClip& clip, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_wav(clip));
}

/// Truncates at the end or zero-pads at the end to exactly `target_len`.
inline AudioClip normalize_length(AudioClip clip, std::size_t target_len) {
  clip.samples.resize(target_len, 0.0f);
  return clip;
}

/// Parses the JSON-lines manifest. The header object (the line carrying
/// "classes") may appear anywhere but exactly once.
inline Manifest parse_manifest(std::istream& in, std::filesystem::path base_dir = {}) {
  Manifest m;
  m.base_dir = std::move(base_dir);
  bool have_header = false;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    if (j.contains("classes")) {
      if (have_header) throw FormatError("manifest has more than one header line");
      m.class_names = j.at("classes").get<std::vector<std::string>>();
      m.sample_rate = j.at("sample_rate").get<int>();
      m.target_len = j.at("target_len").get<std::size_t>();
      have_header = true;
      continue;
    }
    ManifestEntry e;
    try {
      e.path = j.at("path").get<std::string>();
      e.label = j.at("label").get<int>();
      if (j.contains("split")) e.split = j.at("split").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": " + ex.what());
    }
    if (!seen.insert(e.path).second) throw FormatError("duplicate manifest path: " + e.path);
    m.entries.push_back(std::move(e));
  }
  if (!have_header) throw FormatError("manifest header line with \"classes\" is missing");
  if (m.sample_rate <= 0 || m.target_len == 0) {
    throw FormatError("manifest sample_rate and target_len must be positive");
  }
  std::set<int> labels;
  for (const auto& e : m.entries) {
    if (e.label < 0 || e.label >= static_cast<int>(m.num_classes())) {
      throw FormatError("label " + std::to_string(e.label) + " outside [0, " +
                        std::to_string(m.num_classes()) + ")");
    }
    labels.insert(e.label);
  }
  if (labels.size() != m.num_classes()) {
    throw FormatError("manifest labels are not dense: " + std::to_string(labels.size()) +
                      " of " + std::to_string(m.num_classes()) + " classes present");
  }
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path());
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  nlohmann::json header{{"classes", m.class_names},
                        {"sample_rate", m.sample_rate},
                        {"target_len", m.target_len}};
  out << header.dump() << '\n';
  for (const auto& e : m.entries) {
    nlohmann::json j{{"path", e.path}, {"label", e.label}};
    if (!e.split.empty()) j["split"] = e.split;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

/// Loads one manifest entry, enforcing the dataset-wide sample rate and
/// normalizing its length.
inline AudioClip load_entry(const Manifest& m, const ManifestEntry& e) {
  AudioClip clip = load_wav(m.resolve(e));
  if (clip.sample_rate != m.sample_rate) {
    throw FormatError(e.path + ": sample rate " + std::to_string(clip.sample_rate) +
                      " differs from manifest rate " + std::to_string(m.sample_rate));
  }
  clip.label = e.label;
  clip.source_id = e.path;
  return normalize_length(std::move(clip), m.target_len);
}

}  // namespace audistill
