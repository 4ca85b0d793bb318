#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "audistill/autodiff.hpp"
#include "audistill/error.hpp"
#include "audistill/features.hpp"
#include "audistill/models.hpp"
#include "audistill/rng.hpp"

namespace audistill {

inline constexpr float kMinAlpha = 1e-6f;

/// Synthetic training set: K*CPC feature maps with balanced fixed labels and
/// the learned inner learning rate.
struct DistilledSet {
  std::size_t n_classes = 0;
  std::size_t cpc = 0;
  ad::Shape item_shape;  // (1, 3C, T)
  std::vector<float> features;
  std::vector<int> labels;
  float alpha = 0.01f;
  std::string method;
  nlohmann::json config;  // run configuration snapshot
  std::optional<FeatureStats> stats;

  std::size_t size() const { return labels.size(); }
  std::size_t item_size() const { return ad::numel(item_shape); }

  ad::Shape tensor_shape() const {
    ad::Shape s{size()};
    s.insert(s.end(), item_shape.begin(), item_shape.end());
    return s;
  }
  ad::Tensor tensor(bool requires_grad = false) const {
    return ad::Tensor(tensor_shape(), features, requires_grad);
  }
  LabeledSet labeled() const { return {item_shape, features, labels}; }

  /// Feature maps (rows x frames) for reconstruction.
  std::vector<FeatureMap> feature_maps(const dsp::StftConfig& frame_config = {}) const {
    std::vector<FeatureMap> out;
    const std::size_t rows = item_shape.at(1), cols = item_shape.at(2);
    for (std::size_t i = 0; i < size(); ++i) {
      FeatureMap m{Matrix<double>(rows, cols), labels[i], frame_config};
      for (std::size_t j = 0; j < rows * cols; ++j) m.values.data()[j] = features[i * rows * cols + j];
      out.push_back(std::move(m));
    }
    return out;
  }

  void validate() const {
    if (labels.size() != n_classes * cpc) throw ShapeError("distilled label count != K * CPC");
    if (features.size() != size() * item_size()) throw ShapeError("distilled feature size mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != static_cast<int>(i / cpc)) throw PreconditionError("distilled labels not balanced");
    }
    if (!(alpha >= kMinAlpha)) throw PreconditionError("alpha must be positive");
    for (float v : features) {
      if (!std::isfinite(v)) throw PreconditionError("distilled features are not finite");
    }
  }
};

inline std::vector<int> balanced_labels(std::size_t n_classes, std::size_t cpc) {
  std::vector<int> labels;
  for (std::size_t c = 0; c < n_classes; ++c) labels.insert(labels.end(), cpc, static_cast<int>(c));
  return labels;
}

/// Distilled set made of the given rows of a real set (rows ordered by class).
inline DistilledSet distilled_from_indices(const LabeledSet& real, std::size_t n_classes,
                                           std::size_t cpc, std::span<const std::size_t> idx,
                                           float alpha, std::string method) {
  DistilledSet d;
  d.n_classes = n_classes;
  d.cpc = cpc;
  d.item_shape = real.item_shape;
  d.features = real.batch(idx).vec();
  d.labels = real.batch_labels(idx);
  d.alpha = alpha;
  d.method = std::move(method);
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// DistilledSet file: JSON header line then K*CPC*prod(item_shape) float-32 LE.

inline std::vector<unsigned char> encode_distilled(const DistilledSet& d) {
  nlohmann::json header{{"format", "audistill-distilled"},
                        {"version", 1},
                        {"n_classes", d.n_classes},
                        {"cpc", d.cpc},
                        {"item_shape", d.item_shape},
                        {"alpha", d.alpha},
                        {"method", d.method},
                        {"config", d.config}};
  if (d.stats) header["stats"] = *d.stats;
  const std::string line = header.dump() + "\n";
  std::vector<unsigned char> out(line.begin(), line.end());
  for (float f : d.features) {
    std::uint32_t u;
    std::memcpy(&u, &f, sizeof u);
    detail::put_u32(out, u);
  }
  return out;
}

inline DistilledSet decode_distilled(const std::vector<unsigned char>& bytes) {
  const auto nl = std::find(bytes.begin(), bytes.end(), '\n');
  if (nl == bytes.end()) throw FormatError("distilled set header is not terminated");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin(), nl);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad distilled set header: ") + e.what());
  }
  if (h.value("format", "") != "audistill-distilled") throw FormatError("not a distilled set file");
  if (h.at("version").get<int>() != 1) throw UnsupportedError("unsupported distilled set version");
  DistilledSet d;
  d.n_classes = h.at("n_classes").get<std::size_t>();
  d.cpc = h.at("cpc").get<std::size_t>();
  d.item_shape = h.at("item_shape").get<ad::Shape>();
  d.alpha = h.at("alpha").get<float>();
  d.method = h.at("method").get<std::string>();
  d.config = h.at("config");
  if (h.contains("stats")) d.stats = h.at("stats").get<FeatureStats>();
  d.labels = balanced_labels(d.n_classes, d.cpc);
  std::size_t pos = static_cast<std::size_t>(nl - bytes.begin()) + 1;
  const std::size_t count = d.size() * d.item_size();
  if (bytes.size() - pos != 4 * count) throw FormatError("distilled payload size mismatch");
  d.features.resize(count);
  for (auto& f : d.features) {
    const std::uint32_t u = detail::read_u32(bytes.data() + pos);
    std::memcpy(&f, &u, sizeof f);
    pos += 4;
  }
  d.validate();
  return d;
}

inline void save_distilled(const DistilledSet& d, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_distilled(d));
}

inline DistilledSet load_distilled(const std::filesystem::path& path) {
  return decode_distilled(detail::read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Teacher trajectories

struct TrajectoryBuffer {
  std::vector<Trajectory> trajectories;

  const ArchDescriptor& arch() const {
    if (trajectories.empty() || trajectories.front().empty()) {
      throw BufferIntegrityError("trajectory buffer is empty");
    }
    return trajectories.front().front().arch;
  }

  /// All trajectories share one architecture, carry increasing epoch tags and
  /// are long enough for start epochs below `max_start` plus `target_steps`.
  void validate(std::size_t max_start = 0, std::size_t target_steps = 0) const {
    const ArchDescriptor& a = arch();
    for (const auto& t : trajectories) {
      if (t.size() < max_start + target_steps + 1) {
        throw BufferIntegrityError("trajectory of " + std::to_string(t.size()) +
                                   " snapshots is too short");
      }
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (!(t[i].arch == a)) {
          throw BufferIntegrityError("mixed architectures in buffer: " + a.canonical() + " vs " +
                                     t[i].arch.canonical());
        }
        if (i > 0 && t[i].epoch_tag <= t[i - 1].epoch_tag) {
          throw BufferIntegrityError("epoch tags not strictly increasing");
        }
        if (t[i].flat.size() != param_count(a)) throw BufferIntegrityError("snapshot size mismatch");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Trajectory matching loss

inline constexpr double kMinTrajectoryGap = 1e-12;

/// ||end - target||^2 / ||start - target||^2 over flat parameter vectors.
/// `start` and `target` are constants; `end` may be a graph node.
inline ad::Tensor mtt_loss(const ad::Tensor& student_end, std::span<const float> teacher_start,
                           std::span<const float> teacher_target) {
  if (student_end.numel() != teacher_start.size() || teacher_start.size() != teacher_target.size()) {
    throw ShapeError("trajectory matching needs parameter vectors of one architecture");
  }
  double den = 0.0;
  for (std::size_t i = 0; i < teacher_start.size(); ++i) {
    const double d = static_cast<double>(teacher_start[i]) - teacher_target[i];
    den += d * d;
  }
  if (!(den >= kMinTrajectoryGap)) {
    throw StagnantTeacherError("teacher start and target coincide (gap " + std::to_string(den) + ")");
  }
  const ad::Tensor target({teacher_target.size()},
                          std::vector<float>(teacher_target.begin(), teacher_target.end()));
  return ad::scale(ad::sq_norm(ad::sub(ad::reshape(student_end, {student_end.numel()}), target)),
                   1.0 / den);
}

inline double mtt_loss(const ParamVector& student_end, const ParamVector& teacher_start,
                       const ParamVector& teacher_target) {
  if (!(student_end.arch == teacher_start.arch) || !(teacher_start.arch == teacher_target.arch)) {
    throw ShapeError("trajectory matching across different architectures");
  }
  ad::NoGradGuard off;
  return mtt_loss(ad::Tensor({student_end.flat.size()}, student_end.flat), teacher_start.flat,
                  teacher_target.flat)
      .item();
}

struct MttParams {
  std::size_t outer_iters = 500;   // M_outer
  std::size_t inner_steps = 10;    // N
  std::size_t target_steps = 2;    // M_target
  std::size_t max_start = 10;      // T'
  double outer_lr = 100.0;         // feature step
  double alpha_lr = 1e-5;          // learning-rate step
  std::size_t batch_size = 0;      // 0: whole distilled set each inner step
  std::size_t max_retries = 32;    // start-epoch resampling bound

  void validate() const {
    if (inner_steps == 0) throw ParameterError("inner_steps must be at least 1");
    if (target_steps == 0) throw ParameterError("target_steps must be at least 1");
    if (max_start == 0) throw ParameterError("max_start must be at least 1");
    if (outer_lr < 0.0 || alpha_lr < 0.0) throw ParameterError("learning rates must be nonnegative");
  }
};

namespace detail {

/// Runs N differentiable student steps from `theta0` on the distilled
/// features and returns the final parameters.
inline ad::Tensor unroll_student(const ArchDescriptor& arch, const ad::Tensor& theta0,
                                 const ad::Tensor& features, const std::vector<int>& labels,
                                 const ad::Tensor& alpha, std::size_t steps, std::size_t batch_size,
                                 Rng* rng) {
  ad::Tensor theta = theta0;
  const std::size_t n = labels.size();
  for (std::size_t s = 0; s < steps; ++s) {
    ad::Tensor x = features;
    std::vector<int> y = labels;
    if (batch_size > 0 && batch_size < n && rng != nullptr) {
      auto perm = rng->permutation(n);
      perm.resize(batch_size);
      x = ad::gather_rows(features, perm);
      y.resize(batch_size);
      for (std::size_t i = 0; i < batch_size; ++i) y[i] = labels[perm[i]];
    }
    const auto loss = ad::cross_entropy(forward(arch, theta, x), y);
    theta = ad::sgd_step_differentiable<float>({theta}, loss, alpha)[0];
  }
  return theta;
}

}  // namespace detail

/// Matching loss for one start point, differentiable with respect to the
/// features and alpha tensors passed in.
inline ad::Tensor mtt_objective_at(const TrajectoryBuffer& buffer, std::size_t traj, std::size_t start,
                                   const ad::Tensor& features, const std::vector<int>& labels,
                                   const ad::Tensor& alpha, const MttParams& p, Rng* rng = nullptr) {
  const Trajectory& t = buffer.trajectories.at(traj);
  const ParamVector& from = t.at(start);
  const ParamVector& to = t.at(start + p.target_steps);
  // Checked before unrolling so degenerate starts cost nothing.
  (void)mtt_loss(ad::Tensor({from.flat.size()}, from.flat), from.flat, to.flat);
  const ad::Tensor theta0({from.flat.size()}, from.flat, true);
  const ad::Tensor end = detail::unroll_student(buffer.arch(), theta0, features, labels, alpha,
                                                p.inner_steps, p.batch_size, rng);
  return mtt_loss(end, from.flat, to.flat);
}

/// Mean matching loss over every trajectory and start epoch t < T' (stagnant
/// starts skipped), with the whole distilled set in every inner step.
inline double mtt_objective(const TrajectoryBuffer& buffer, const DistilledSet& d, const MttParams& p) {
  buffer.validate(p.max_start, p.target_steps);
  MttParams full = p;
  full.batch_size = 0;
  const ad::Tensor x = d.tensor();
  const ad::Tensor alpha = ad::Tensor::scalar(d.alpha);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < buffer.trajectories.size(); ++i) {
    for (std::size_t t = 0; t < p.max_start; ++t) {
      try {
        total += mtt_objective_at(buffer, i, t, x, d.labels, alpha, full).item();
        ++count;
      } catch (const StagnantTeacherError&) {
      }
    }
  }
  if (count == 0) throw StagnantTeacherError("every start epoch is stagnant");
  return total / static_cast<double>(count);
}

struct DistillTrace {
  std::vector<double> loss;   // per outer iteration
  std::vector<double> alpha;  // after each update
};

/// Trajectory matching: per outer iteration sample a teacher and a start
/// epoch, unroll N student steps from the teacher snapshot and take one
/// gradient step on the features and alpha.
inline DistilledSet mtt_distill(const TrajectoryBuffer& buffer, const DistilledSet& init,
                                const MttParams& p, std::uint64_t seed, DistillTrace* trace = nullptr) {
  p.validate();
  buffer.validate(p.max_start, p.target_steps);
  init.validate();
  if (!(buffer.arch().input_shape() == init.item_shape)) {
    throw ShapeError("distilled items do not match the teacher input shape");
  }
  DistilledSet d = init;
  Rng rng(derive_seed(seed, "mtt"));
  for (std::size_t it = 0; it < p.outer_iters; ++it) {
    const ad::Tensor x = d.tensor(true);
    const ad::Tensor alpha = ad::Tensor::scalar(d.alpha, true);
    ad::Tensor loss;
    for (std::size_t attempt = 0;; ++attempt) {
      const std::size_t traj = rng.below(buffer.trajectories.size());
      const std::size_t start = rng.below(p.max_start);
      try {
        loss = mtt_objective_at(buffer, traj, start, x, d.labels, alpha, p, &rng);
        break;
      } catch (const StagnantTeacherError&) {
        if (attempt + 1 >= p.max_retries) throw;
      }
    }
    const auto g = ad::grad(loss, {x, alpha});
    for (std::size_t i = 0; i < d.features.size(); ++i) {
      d.features[i] = static_cast<float>(d.features[i] - p.outer_lr * g[0][i]);
    }
    d.alpha = std::max(kMinAlpha, static_cast<float>(d.alpha - p.alpha_lr * g[1].item()));
    for (float v : d.features) {
      if (!std::isfinite(v)) throw PreconditionError("distilled features diverged");
    }
    if (trace) {
      trace->loss.push_back(loss.item());
      trace->alpha.push_back(d.alpha);
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Gradient matching

/// Sum over layers of || gr/||gr|| - gs/||gs|| ||^2. Layers where either
/// gradient vanishes are skipped. `synthetic` may be graph nodes.
inline ad::Tensor gradient_match_distance(const std::vector<ad::Tensor>& real,
                                          const std::vector<ad::Tensor>& synthetic) {
  if (real.size() != synthetic.size()) throw ShapeError("layer lists differ in length");
  ad::Tensor total = ad::Tensor::scalar(0.0f);
  for (std::size_t l = 0; l < real.size(); ++l) {
    const ad::Tensor nr = ad::sq_norm(real[l]);
    const ad::Tensor ns = ad::sq_norm(synthetic[l]);
    if (!(nr.item() > 0.0f) || !(ns.item() > 0.0f)) continue;
    const ad::Tensor ur = ad::mul_scalar(real[l], ad::rsqrt(nr));
    const ad::Tensor us = ad::mul_scalar(synthetic[l], ad::rsqrt(ns));
    total = ad::add(total, ad::sq_norm(ad::sub(ur, us)));
  }
  return total;
}

inline std::vector<ad::Tensor> split_layers(const ArchDescriptor& arch, const ad::Tensor& flat) {
  std::vector<ad::Tensor> out;
  for (const auto& l : param_layout(arch)) out.push_back(ad::slice(flat, l.offset, l.size()));
  return out;
}

struct DcgmParams {
  ArchDescriptor arch;
  std::size_t iters = 200;       // fresh networks
  std::size_t inner_loops = 5;   // match/update/train rounds per network
  std::size_t real_batch = 32;   // real samples per class per match
  double outer_lr = 0.1;         // feature step
  double net_lr = 0.01;          // network step on distilled data
};

/// Gradient matching per class on freshly initialised networks.
inline DistilledSet dcgm_distill(const LabeledSet& real, const DistilledSet& init, const DcgmParams& p,
                                 std::uint64_t seed, DistillTrace* trace = nullptr) {
  init.validate();
  if (!(p.arch.input_shape() == init.item_shape) || real.item_shape != init.item_shape) {
    throw ShapeError("real, distilled and model input shapes disagree");
  }
  std::vector<std::vector<std::size_t>> by_class(init.n_classes);
  for (std::size_t c = 0; c < init.n_classes; ++c) {
    by_class[c] = real.indices_of(static_cast<int>(c));
    if (by_class[c].empty()) throw ParameterError("class " + std::to_string(c) + " has no real samples");
  }
  DistilledSet d = init;
  Rng rng(derive_seed(seed, "dcgm"));
  for (std::size_t it = 0; it < p.iters; ++it) {
    std::vector<float> theta = build(p.arch, derive_seed(seed, "dcgm-net", it)).flat;
    for (std::size_t r = 0; r < p.inner_loops; ++r) {
      const ad::Tensor th({theta.size()}, theta, true);
      const ad::Tensor x = d.tensor(true);
      ad::Tensor total = ad::Tensor::scalar(0.0f);
      for (std::size_t c = 0; c < d.n_classes; ++c) {
        auto pool = by_class[c];
        rng.shuffle(pool.begin(), pool.end());
        pool.resize(std::min(pool.size(), p.real_batch));
        const auto g_real = ad::grad(
            ad::cross_entropy(forward(p.arch, th, real.batch(pool)), real.batch_labels(pool)), {th})[0];
        std::vector<std::size_t> rows(d.cpc);
        for (std::size_t i = 0; i < d.cpc; ++i) rows[i] = c * d.cpc + i;
        const auto syn = ad::gather_rows(x, rows);
        const auto g_syn = ad::grad(
            ad::cross_entropy(forward(p.arch, th, syn), std::vector<int>(d.cpc, static_cast<int>(c))), {th},
            true)[0];
        total = ad::add(total, gradient_match_distance(split_layers(p.arch, g_real), split_layers(p.arch, g_syn)));
      }
      const auto gx = ad::grad(total, {x})[0];
      for (std::size_t i = 0; i < d.features.size(); ++i) {
        d.features[i] = static_cast<float>(d.features[i] - p.outer_lr * gx[i]);
      }
      if (trace) trace->loss.push_back(total.item());
      // One network step on the updated distilled data.
      const ad::Tensor th2({theta.size()}, theta, true);
      const auto g = ad::grad(ad::cross_entropy(forward(p.arch, th2, d.tensor()), d.labels), {th2})[0];
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = static_cast<float>(theta[i] - p.net_lr * g[i]);
    }
  }
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Coresets

namespace detail {

inline std::vector<std::vector<std::size_t>> class_members(const std::vector<int>& labels,
                                                           std::size_t n_classes, std::size_t cpc) {
  std::vector<std::vector<std::size_t>> members(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes) {
      throw ParameterError("label " + std::to_string(labels[i]) + " out of range");
    }
    members[labels[i]].push_back(i);
  }
  if (cpc == 0) throw ParameterError("cpc must be positive");
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (members[c].size() < cpc) {
      throw ParameterError("class " + std::to_string(c) + " has " + std::to_string(members[c].size()) +
                           " samples, fewer than cpc = " + std::to_string(cpc));
    }
  }
  return members;
}

}  // namespace detail

/// Uniform selection without replacement, cpc per class, grouped by class.
inline std::vector<std::size_t> coreset_random(const std::vector<int>& labels, std::size_t n_classes,
                                               std::size_t cpc, std::uint64_t seed) {
  const auto members = detail::class_members(labels, n_classes, cpc);
  Rng rng(derive_seed(seed, "coreset-random"));
  std::vector<std::size_t> out;
  for (auto m : members) {
    rng.shuffle(m.begin(), m.end());
    out.insert(out.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(cpc));
  }
  return out;
}

/// Greedy herding per class: step j adds the unselected x minimising
/// ||mean - (sum_selected + x) / j||; ties go to the lowest index.
/// `points[i]` is the flattened feature vector of sample i.
inline std::vector<std::size_t> coreset_herding(const std::vector<std::vector<double>>& points,
                                                const std::vector<int>& labels, std::size_t n_classes,
                                                std::size_t cpc) {
  if (points.size() != labels.size()) throw ShapeError("points and labels differ in length");
  const auto members = detail::class_members(labels, n_classes, cpc);
  std::vector<std::size_t> out;
  for (const auto& m : members) {
    const std::size_t dim = points[m.front()].size();
    std::vector<double> mean(dim, 0.0), acc(dim, 0.0);
    for (std::size_t i : m) {
      for (std::size_t k = 0; k < dim; ++k) mean[k] += points[i][k];
    }
    for (auto& v : mean) v /= static_cast<double>(m.size());
    std::vector<bool> used(m.size(), false);
    for (std::size_t j = 1; j <= cpc; ++j) {
      std::size_t best = m.size();
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t q = 0; q < m.size(); ++q) {
        if (used[q]) continue;
        double dist = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          const double e = mean[k] - (acc[k] + points[m[q]][k]) / static_cast<double>(j);
          dist += e * e;
        }
        if (dist < best_d) {
          best_d = dist;
          best = q;
        }
      }
      used[best] = true;
      for (std::size_t k = 0; k < dim; ++k) acc[k] += points[m[best]][k];
      out.push_back(m[best]);
    }
  }
  return out;
}

inline std::vector<std::vector<double>> flatten_points(const LabeledSet& s) {
  std::vector<std::vector<double>> pts(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    pts[i].assign(s.features.begin() + i * s.item_size(), s.features.begin() + (i + 1) * s.item_size());
  }
  return pts;
}

/// Initial distilled set: `cpc` real samples per class chosen uniformly
/// (seeded), or standard normal noise.
inline DistilledSet init_distilled(const LabeledSet& real, std::size_t n_classes, std::size_t cpc,
                                   bool noise, float alpha, std::uint64_t seed) {
  const auto idx = coreset_random(real.labels, n_classes, cpc, derive_seed(seed, "init"));
  DistilledSet d = distilled_from_indices(real, n_classes, cpc, idx, alpha, "init");
  if (noise) {
    Rng rng(derive_seed(seed, "init-noise"));
    for (auto& v : d.features) v = static_cast<float>(rng.normal());
  }
  return d;
}

}  // namespace audistill
