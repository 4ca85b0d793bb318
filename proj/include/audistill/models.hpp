#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include "audistill/audio_io.hpp"
#include "audistill/autodiff.hpp"
#include "audistill/error.hpp"
#include "audistill/features.hpp"
#include "audistill/rng.hpp"

namespace audistill {

/// ConvNet description: `depth` blocks of Conv3x3(same) -> ReLU -> AvgPool2,
/// then global average pooling and a linear head.
struct ArchDescriptor {
  std::string family = "convnet";
  std::size_t depth = 3;
  std::size_t width = 32;
  std::string pooling = "avg";
  std::string activation = "relu";
  std::size_t in_channels = 1;
  std::size_t in_height = 60;  // 3C
  std::size_t in_width = 99;   // T
  std::size_t n_classes = 10;

  std::string canonical() const {
    return family + "-d" + std::to_string(depth) + "-w" + std::to_string(width) + "-" + pooling +
           "-" + activation + "-in" + std::to_string(in_channels) + "x" +
           std::to_string(in_height) + "x" + std::to_string(in_width) + "-k" +
           std::to_string(n_classes);
  }

  static ArchDescriptor parse(const std::string& s) {
    static const std::regex re(R"(([a-z0-9]+)-d(\d+)-w(\d+)-([a-z]+)-([a-z]+)-in(\d+)x(\d+)x(\d+)-k(\d+))");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw ParameterError("malformed architecture string: " + s);
    ArchDescriptor a;
    a.family = m[1];
    a.depth = std::stoul(m[2]);
    a.width = std::stoul(m[3]);
    a.pooling = m[4];
    a.activation = m[5];
    a.in_channels = std::stoul(m[6]);
    a.in_height = std::stoul(m[7]);
    a.in_width = std::stoul(m[8]);
    a.n_classes = std::stoul(m[9]);
    return a;
  }

  void validate() const {
    if (family != "convnet") throw ParameterError("unsupported model family: " + family);
    if (pooling != "avg") throw ParameterError("unsupported pooling: " + pooling);
    if (activation != "relu") throw ParameterError("unsupported activation: " + activation);
    if (depth == 0) throw ParameterError("model depth must be at least 1");
    if (width == 0 || in_channels == 0 || n_classes < 2) {
      throw ParameterError("width, channels and class count must be positive (K >= 2)");
    }
    if ((in_height >> depth) == 0 || (in_width >> depth) == 0) {
      throw ParameterError("input " + std::to_string(in_height) + "x" + std::to_string(in_width) +
                           " too small for " + std::to_string(depth) + " pooling stages");
    }
  }

  ad::Shape input_shape() const { return {in_channels, in_height, in_width}; }

  bool operator==(const ArchDescriptor& o) const { return canonical() == o.canonical(); }
};

/// One parameter tensor inside the flat vector.
struct LayerSpec {
  std::string name;
  ad::Shape shape;
  std::size_t offset = 0;
  std::size_t fan_in = 0;  // 0 for biases
  std::size_t size() const { return ad::numel(shape); }
};

inline std::vector<LayerSpec> param_layout(const ArchDescriptor& arch) {
  arch.validate();
  std::vector<LayerSpec> layers;
  std::size_t offset = 0;
  auto push = [&](std::string name, ad::Shape shape, std::size_t fan_in) {
    LayerSpec l{std::move(name), std::move(shape), offset, fan_in};
    offset += l.size();
    layers.push_back(std::move(l));
  };
  std::size_t cin = arch.in_channels;
  for (std::size_t b = 0; b < arch.depth; ++b) {
    push("conv" + std::to_string(b) + ".weight", {arch.width, cin, 3, 3}, cin * 9);
    push("conv" + std::to_string(b) + ".bias", {arch.width}, 0);
    cin = arch.width;
  }
  push("head.weight", {arch.width, arch.n_classes}, arch.width);
  push("head.bias", {arch.n_classes}, 0);
  return layers;
}

inline std::size_t param_count(const ArchDescriptor& arch) {
  const auto layers = param_layout(arch);
  return layers.back().offset + layers.back().size();
}

struct ParamVector {
  std::vector<float> flat;
  ArchDescriptor arch;
  int epoch_tag = 0;

  bool operator==(const ParamVector& o) const {
    return arch == o.arch && epoch_tag == o.epoch_tag && flat == o.flat;
  }
};

using Trajectory = std::vector<ParamVector>;

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
inline ParamVector build(const ArchDescriptor& arch, std::uint64_t seed) {
  const auto layers = param_layout(arch);
  ParamVector p{std::vector<float>(param_count(arch), 0.0f), arch, 0};
  Rng rng(derive_seed(seed, "build"));
  for (const auto& l : layers) {
    if (l.fan_in == 0) continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(l.fan_in));
    for (std::size_t i = 0; i < l.size(); ++i) {
      p.flat[l.offset + i] = static_cast<float>(rng.uniform(-bound, bound));
    }
  }
  return p;
}

/// Logits [B, K] for a batch [B, C, H, W]; `theta` is the flat parameter
/// vector and may be a graph node.
template <class T>
ad::BasicTensor<T> forward(const ArchDescriptor& arch, const ad::BasicTensor<T>& theta,
                           const ad::BasicTensor<T>& batch) {
  using namespace ad;
  const auto layers = param_layout(arch);
  if (theta.rank() != 1 || theta.numel() != param_count(arch)) {
    throw ShapeError("parameter vector " + shape_str(theta.shape()) + " does not fit " +
                     arch.canonical());
  }
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != arch.input_shape()) {
    throw ShapeError("batch " + shape_str(batch.shape()) + " does not match input " +
                     shape_str(arch.input_shape()) + " of " + arch.canonical());
  }
  auto param = [&](const LayerSpec& l) { return reshape(slice(theta, l.offset, l.size()), l.shape); };
  BasicTensor<T> h = batch;
  for (std::size_t b = 0; b < arch.depth; ++b) {
    const auto& wl = layers[2 * b];
    const auto& bl = layers[2 * b + 1];
    h = conv2d(h, param(wl), 1, Padding::same);
    h = add(h, expand_channels(param(bl), h.shape()));
    h = avg_pool2d(relu(h), 2);
  }
  const auto pooled = spatial_mean(h);  // [B, width]
  const auto& hw = layers[2 * arch.depth];
  const auto& hb = layers[2 * arch.depth + 1];
  return add(matmul(pooled, param(hw)), broadcast_leading(param(hb), batch.dim(0)));
}

inline ad::Tensor forward(const ParamVector& params, const ad::Tensor& batch) {
  return forward(params.arch, ad::Tensor({params.flat.size()}, params.flat), batch);
}

/// Dense dataset in network layout: features [N, C, H, W] and labels.
struct LabeledSet {
  ad::Shape item_shape;  // C, H, W
  std::vector<float> features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t item_size() const { return ad::numel(item_shape); }

  ad::Tensor batch(std::span<const std::size_t> idx) const {
    std::vector<float> data(idx.size() * item_size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(features.begin() + idx[i] * item_size(), item_size(), data.begin() + i * item_size());
    }
    ad::Shape shape{idx.size()};
    shape.insert(shape.end(), item_shape.begin(), item_shape.end());
    return ad::Tensor(std::move(shape), std::move(data));
  }

  std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
  }

  ad::Tensor all() const {
    ad::Shape shape{size()};
    shape.insert(shape.end(), item_shape.begin(), item_shape.end());
    return ad::Tensor(std::move(shape), features);
  }

  std::vector<std::size_t> indices_of(int label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == label) out.push_back(i);
    }
    return out;
  }
};

/// Feature maps as single-channel images of shape (1, 3C, T).
inline LabeledSet to_labeled_set(std::span<const FeatureMap> maps) {
  if (maps.empty()) throw PreconditionError("empty feature map list");
  LabeledSet s;
  s.item_shape = {1, maps.front().rows(), maps.front().cols()};
  s.features.reserve(maps.size() * s.item_size());
  for (const auto& m : maps) {
    if (m.rows() != s.item_shape[1] || m.cols() != s.item_shape[2]) {
      throw ShapeError("feature maps differ in shape");
    }
    for (double v : m.values.data()) s.features.push_back(static_cast<float>(v));
    s.labels.push_back(m.label);
  }
  return s;
}

inline LabeledSet subset(const LabeledSet& s, std::span<const std::size_t> idx) {
  LabeledSet out{s.item_shape, {}, s.batch_labels(idx)};
  out.features = s.batch(idx).vec();
  return out;
}

inline float cross_entropy_loss(const ParamVector& p, const LabeledSet& data) {
  ad::NoGradGuard off;
  return ad::cross_entropy(forward(p, data.all()), data.labels).item();
}

inline std::vector<int> predict(const ParamVector& p, const LabeledSet& data, std::size_t chunk = 256) {
  ad::NoGradGuard off;
  const ad::Tensor theta({p.flat.size()}, p.flat);
  std::vector<int> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const auto logits = forward(p.arch, theta, data.batch(idx));
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const float* row = logits.data().data() + r * k;
      out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
  }
  return out;
}

inline double accuracy(const ParamVector& p, const LabeledSet& data) {
  if (data.size() == 0) throw PreconditionError("accuracy on an empty set");
  const auto pred = predict(p, data);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Plain minibatch SGD on cross-entropy. Snapshot 0 is the initialization,
/// snapshot e is taken after epoch e.
inline Trajectory train_epochs(const ParamVector& init, const LabeledSet& data, std::size_t epochs,
                               double lr, std::size_t batch_size, std::uint64_t seed) {
  if (data.size() == 0) throw PreconditionError("training set is empty");
  if (batch_size == 0) throw ParameterError("batch size must be positive");
  for (int l : data.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= init.arch.n_classes) {
      throw ParameterError("label " + std::to_string(l) + " outside the model's classes");
    }
  }
  Trajectory traj;
  traj.reserve(epochs + 1);
  traj.push_back(init);
  traj.back().epoch_tag = 0;
  std::vector<float> theta = init.flat;
  for (std::size_t e = 1; e <= epochs; ++e) {
    Rng rng(derive_seed(seed, "epoch", e));
    const auto order = rng.permutation(data.size());
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min(batch_size, order.size() - start));
      const ad::Tensor th({theta.size()}, theta, true);
      const auto loss = ad::cross_entropy(forward(init.arch, th, data.batch(idx)), data.batch_labels(idx));
      const auto g = ad::grad(loss, {th});
      for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] = static_cast<float>(theta[i] - lr * g[0][i]);
      }
    }
    traj.push_back({theta, init.arch, static_cast<int>(e)});
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line then param_count little-endian float-32
// values. A trajectory file is a sequence of checkpoints.

inline void append_checkpoint(std::vector<unsigned char>& out, const ParamVector& p) {
  const nlohmann::json header{{"arch", p.arch.canonical()},
                              {"epoch_tag", p.epoch_tag},
                              {"param_count", p.flat.size()}};
  const std::string line = header.dump() + "\n";
  out.insert(out.end(), line.begin(), line.end());
  for (float f : p.flat) {
    std::uint32_t u;
    std::memcpy(&u, &f, sizeof u);
    detail::put_u32(out, u);
  }
}

inline std::vector<ParamVector> decode_checkpoints(const std::vector<unsigned char>& bytes) {
  std::vector<ParamVector> out;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto nl = std::find(bytes.begin() + pos, bytes.end(), '\n');
    if (nl == bytes.end()) throw FormatError("checkpoint header is not terminated");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(bytes.begin() + pos, nl);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad checkpoint header: ") + e.what());
    }
    pos = static_cast<std::size_t>(nl - bytes.begin()) + 1;
    ParamVector p;
    p.arch = ArchDescriptor::parse(header.at("arch").get<std::string>());
    p.epoch_tag = header.at("epoch_tag").get<int>();
    const std::size_t count = header.at("param_count").get<std::size_t>();
    if (count != param_count(p.arch)) throw FormatError("checkpoint size does not match its architecture");
    if ((bytes.size() - pos) / 4 < count) throw FormatError("truncated checkpoint payload");
    p.flat.resize(count);
    for (auto& f : p.flat) {
      const std::uint32_t u = detail::read_u32(bytes.data() + pos);
      std::memcpy(&f, &u, sizeof f);
      pos += 4;
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline void save_checkpoint(const ParamVector& p, const std::filesystem::path& path) {
  std::vector<unsigned char> bytes;
  append_checkpoint(bytes, p);
  detail::write_file_bytes(path, bytes);
}

inline ParamVector load_checkpoint(const std::filesystem::path& path) {
  auto all = decode_checkpoints(detail::read_file_bytes(path));
  if (all.size() != 1) throw FormatError("expected exactly one checkpoint in " + path.string());
  return std::move(all.front());
}

inline void save_trajectory(const Trajectory& t, const std::filesystem::path& path) {
  std::vector<unsigned char> bytes;
  for (const auto& p : t) append_checkpoint(bytes, p);
  detail::write_file_bytes(path, bytes);
}

inline Trajectory load_trajectory(const std::filesystem::path& path) {
  return decode_checkpoints(detail::read_file_bytes(path));
}

}  // namespace audistill
