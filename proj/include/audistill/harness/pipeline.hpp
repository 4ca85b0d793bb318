#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "audistill/audio_io.hpp"
#include "audistill/distill.hpp"
#include "audistill/error.hpp"
#include "audistill/features.hpp"
#include "audistill/harness/config.hpp"
#include "audistill/harness/corpus.hpp"
#include "audistill/models.hpp"
#include "audistill/reconstruct.hpp"

namespace audistill {

// ---------------------------------------------------------------------------
// Feature extraction

/// Standardized train/test FD-MFCC maps plus the training statistics.
struct FeatureDataset {
  std::vector<std::string> class_names;
  std::vector<FeatureMap> train;
  std::vector<FeatureMap> test;
  FeatureStats stats;

  std::size_t n_classes() const { return class_names.size(); }
  std::size_t frames() const { return train.at(0).cols(); }
  LabeledSet train_set() const { return to_labeled_set(train); }
  LabeledSet test_set() const { return to_labeled_set(test); }
};

/// Per-entry "train"/"test" flags: the manifest split column when present,
/// otherwise a seeded per-class holdout of `test_fraction`.
inline std::vector<bool> test_mask(const Manifest& m, const RunConfig& cfg) {
  std::vector<bool> is_test(m.entries.size(), false);
  bool any_split = false;
  for (const auto& e : m.entries) any_split = any_split || !e.split.empty();
  if (any_split) {
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      const auto& s = m.entries[i].split;
      if (s != "train" && s != "test") throw FormatError("split must be train or test: " + m.entries[i].path);
      is_test[i] = s == "test";
    }
    return is_test;
  }
  Rng rng(derive_seed(cfg.seed, "split"));
  for (std::size_t c = 0; c < m.num_classes(); ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      if (m.entries[i].label == static_cast<int>(c)) members.push_back(i);
    }
    rng.shuffle(members.begin(), members.end());
    const auto n_test = static_cast<std::size_t>(std::lround(cfg.test_fraction * members.size()));
    for (std::size_t i = 0; i < n_test && i < members.size(); ++i) is_test[members[i]] = true;
  }
  return is_test;
}

inline FeatureDataset prepare_features(const Manifest& m, const RunConfig& cfg) {
  const FeatureParams fp = cfg.feature_params();
  fp.validate();
  if (m.sample_rate != fp.sample_rate) {
    throw ParameterError("manifest sample rate " + std::to_string(m.sample_rate) +
                         " differs from configured " + std::to_string(fp.sample_rate));
  }
  const auto is_test = test_mask(m, cfg);
  FeatureDataset ds;
  ds.class_names = m.class_names;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    auto map = extract_fd_mfcc(load_entry(m, m.entries[i]), fp);
    (is_test[i] ? ds.test : ds.train).push_back(std::move(map));
  }
  if (ds.train.empty() || ds.test.empty()) throw PreconditionError("train and test splits must be nonempty");
  ds.stats = fit_stats(ds.train);
  for (auto& f : ds.train) f = standardize(std::move(f), ds.stats);
  for (auto& f : ds.test) f = standardize(std::move(f), ds.stats);
  return ds;
}

inline void save_feature_dataset(const FeatureDataset& ds, const RunConfig& cfg,
                                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_feature_file(ds.train, dir / "train.fdmf");
  write_feature_file(ds.test, dir / "test.fdmf");
  const nlohmann::json meta{{"config", cfg}, {"classes", ds.class_names}, {"stats", ds.stats}};
  std::ofstream(dir / "stats.json") << meta.dump(2) << '\n';
}

inline FeatureDataset load_feature_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "stats.json");
  if (!in) throw IoError("missing " + (dir / "stats.json").string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad stats.json: ") + e.what());
  }
  FeatureDataset ds;
  ds.class_names = meta.at("classes").get<std::vector<std::string>>();
  ds.stats = meta.at("stats").get<FeatureStats>();
  const auto stft = meta.at("config").get<RunConfig>().feature_params().stft;
  ds.train = read_feature_file(dir / "train.fdmf", stft);
  ds.test = read_feature_file(dir / "test.fdmf", stft);
  return ds;
}

// ---------------------------------------------------------------------------
// Teacher buffer

inline TrajectoryBuffer build_buffer(const LabeledSet& train, const ArchDescriptor& arch, const RunConfig& cfg) {
  TrajectoryBuffer b;
  for (std::size_t i = 0; i < cfg.n_teachers; ++i) {
    const std::uint64_t s = derive_seed(cfg.seed, "teacher", i);
    b.trajectories.push_back(
        train_epochs(build(arch, s), train, cfg.teacher_epochs, cfg.teacher_lr, cfg.batch_size, s));
  }
  b.validate(cfg.max_start, cfg.target_steps);
  return b;
}

inline void save_buffer(const TrajectoryBuffer& b, const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> files;
  for (std::size_t i = 0; i < b.trajectories.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "teacher_%03zu.traj", i);
    save_trajectory(b.trajectories[i], dir / name);
    files.emplace_back(name);
  }
  const nlohmann::json meta{{"config", cfg}, {"arch", b.arch().canonical()}, {"trajectories", files}};
  std::ofstream(dir / "buffer.json") << meta.dump(2) << '\n';
}

inline TrajectoryBuffer load_buffer(const std::filesystem::path& dir) {
  std::ifstream in(dir / "buffer.json");
  if (!in) throw IoError("missing " + (dir / "buffer.json").string());
  nlohmann::json meta;
  in >> meta;
  TrajectoryBuffer b;
  for (const auto& f : meta.at("trajectories")) b.trajectories.push_back(load_trajectory(dir / f.get<std::string>()));
  b.validate();
  if (b.arch().canonical() != meta.at("arch").get<std::string>()) {
    throw BufferIntegrityError("buffer.json architecture does not match trajectories");
  }
  return b;
}

// ---------------------------------------------------------------------------
// Distillation runs

/// Runs one method at one budget and stamps the result with the run config
/// and the feature statistics needed for reconstruction.
inline DistilledSet run_distill(const std::string& method, std::size_t cpc, const FeatureDataset& ds,
                                const TrajectoryBuffer* buffer, const RunConfig& cfg) {
  const LabeledSet train = ds.train_set();
  const ArchDescriptor arch = cfg.arch(ds.n_classes(), ds.frames());
  const std::uint64_t seed = derive_seed(cfg.seed, "distill-" + method, cpc);
  DistilledSet d;
  if (method == "random") {
    const auto idx = coreset_random(train.labels, ds.n_classes(), cpc, seed);
    d = distilled_from_indices(train, ds.n_classes(), cpc, idx, static_cast<float>(cfg.eval_lr), method);
  } else if (method == "herding") {
    const auto idx = coreset_herding(flatten_points(train), train.labels, ds.n_classes(), cpc);
    d = distilled_from_indices(train, ds.n_classes(), cpc, idx, static_cast<float>(cfg.eval_lr), method);
  } else if (method == "mtt") {
    if (buffer == nullptr) throw PreconditionError("mtt needs a teacher buffer");
    if (!(buffer->arch() == arch)) {
      throw BufferIntegrityError("buffer architecture " + buffer->arch().canonical() +
                                 " differs from configured " + arch.canonical());
    }
    const auto init = init_distilled(train, ds.n_classes(), cpc, cfg.init == "noise",
                                     static_cast<float>(cfg.alpha_init), seed);
    d = mtt_distill(*buffer, init, cfg.mtt_params(), seed);
  } else if (method == "dcgm") {
    const auto init = init_distilled(train, ds.n_classes(), cpc, cfg.init == "noise",
                                     static_cast<float>(cfg.eval_lr), seed);
    d = dcgm_distill(train, init, cfg.dcgm_params(arch), seed);
  } else {
    throw ParameterError("unknown method: " + method);
  }
  d.method = method;
  RunConfig stamped = cfg;
  stamped.method = method;
  stamped.cpc = cpc;
  d.config = stamped;
  d.config["arch"] = arch.canonical();
  d.stats = ds.stats;
  return d;
}

// ---------------------------------------------------------------------------
// Evaluation and reports

struct EvalRow {
  std::string dataset_tag;
  std::string method;
  std::string distill_arch;
  std::string eval_arch;
  std::size_t cpc = 0;
  std::size_t seeds = 0;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  std::vector<double> per_seed;

  bool operator==(const EvalRow&) const = default;
};

inline void to_json(nlohmann::json& j, const EvalRow& r) {
  j = nlohmann::json{{"dataset", r.dataset_tag}, {"method", r.method},     {"distill_arch", r.distill_arch},
                     {"eval_arch", r.eval_arch}, {"cpc", r.cpc},           {"seeds", r.seeds},
                     {"mean_acc", r.mean_acc},   {"std_acc", r.std_acc},   {"per_seed", r.per_seed}};
}

inline void from_json(const nlohmann::json& j, EvalRow& r) {
  r.dataset_tag = j.at("dataset").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.distill_arch = j.at("distill_arch").get<std::string>();
  r.eval_arch = j.at("eval_arch").get<std::string>();
  r.cpc = j.at("cpc").get<std::size_t>();
  r.seeds = j.at("seeds").get<std::size_t>();
  r.mean_acc = j.at("mean_acc").get<double>();
  r.std_acc = j.at("std_acc").get<double>();
  r.per_seed = j.value("per_seed", std::vector<double>{});
}

struct EvalReport {
  nlohmann::json config;
  std::vector<EvalRow> rows;

  void append(const std::vector<EvalRow>& more) { rows.insert(rows.end(), more.begin(), more.end()); }
  const EvalRow* find(const std::string& method, std::size_t cpc, const std::string& dataset = {}) const {
    for (const auto& r : rows) {
      if (r.method == method && r.cpc == cpc && (dataset.empty() || r.dataset_tag == dataset)) return &r;
    }
    return nullptr;
  }
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"config", r.config}, {"rows", r.rows}};
}
inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.config = j.at("config");
  r.rows = j.at("rows").get<std::vector<EvalRow>>();
}

inline EvalRow summarize(EvalRow row, const std::vector<double>& accs) {
  row.seeds = accs.size();
  row.per_seed = accs;
  double mean = 0.0;
  for (double a : accs) mean += a;
  mean /= static_cast<double>(accs.size());
  double var = 0.0;
  for (double a : accs) var += (a - mean) * (a - mean);
  row.mean_acc = mean;
  row.std_acc = accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) : 0.0;
  return row;
}

/// Trains a fresh `eval_arch` model per seed on `train` with a fixed
/// learning rate and returns the test accuracies.
inline std::vector<double> train_and_test(const LabeledSet& train, const LabeledSet& test,
                                          const ArchDescriptor& eval_arch, double lr, std::size_t n_seeds,
                                          std::size_t epochs, std::size_t batch, std::uint64_t seed) {
  std::vector<double> accs;
  for (std::size_t s = 0; s < n_seeds; ++s) {
    const std::uint64_t sd = derive_seed(seed, "eval", s);
    const auto traj = train_epochs(build(eval_arch, sd), train, epochs, lr,
                                   std::max<std::size_t>(1, std::min(batch, train.size())), sd);
    accs.push_back(accuracy(traj.back(), test));
  }
  return accs;
}

inline std::string distill_arch_of(const DistilledSet& d) {
  return d.config.is_object() && d.config.contains("arch") ? d.config["arch"].get<std::string>() : "-";
}

/// One row: fresh models trained on the distilled set with lr = its alpha.
inline EvalRow evaluate_distilled(const DistilledSet& d, const ArchDescriptor& eval_arch, const LabeledSet& test,
                                  std::size_t n_seeds, std::size_t epochs, const RunConfig& cfg,
                                  const std::string& dataset_tag) {
  const auto accs =
      train_and_test(d.labeled(), test, eval_arch, d.alpha, n_seeds, epochs, cfg.eval_batch, cfg.seed);
  return summarize({dataset_tag, d.method, distill_arch_of(d), eval_arch.canonical(), d.cpc}, accs);
}

/// Whole training set at the configured evaluation learning rate.
inline EvalRow evaluate_whole(const LabeledSet& train, const ArchDescriptor& eval_arch, const LabeledSet& test,
                              const RunConfig& cfg, const std::string& dataset_tag) {
  const auto accs = train_and_test(train, test, eval_arch, cfg.eval_lr, cfg.eval_seeds, cfg.eval_epochs,
                                   cfg.eval_batch, cfg.seed);
  return summarize({dataset_tag, "whole", "-", eval_arch.canonical(), 0}, accs);
}

/// Grid of distill architecture x evaluation architecture.
inline std::vector<EvalRow> cross_arch_matrix(const std::map<std::string, DistilledSet>& dsets,
                                              const std::vector<ArchDescriptor>& eval_archs,
                                              const LabeledSet& test, const RunConfig& cfg,
                                              const std::string& dataset_tag) {
  std::vector<EvalRow> rows;
  const ad::Shape* shape = nullptr;
  for (const auto& [name, d] : dsets) {
    if (shape && *shape != d.item_shape) throw ShapeError("distilled sets differ in feature dims");
    shape = &d.item_shape;
  }
  for (const auto& [name, d] : dsets) {
    for (const auto& a : eval_archs) {
      EvalRow r = evaluate_distilled(d, a, test, cfg.eval_seeds, cfg.eval_epochs, cfg, dataset_tag);
      r.distill_arch = name;
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Reconstruction and noise robustness

inline std::vector<Reconstruction> reconstruct_distilled(const DistilledSet& d, const RunConfig& cfg) {
  if (!d.stats) throw PreconditionError("distilled set carries no feature statistics");
  const auto rp = cfg.reconstruct_params();
  std::vector<Reconstruction> out;
  const auto maps = d.feature_maps(rp.features.stft);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    out.push_back(reconstruct_clip(maps[i], *d.stats, rp, derive_seed(cfg.seed, "gla", i)));
  }
  return out;
}

/// Re-extracts standardized features from waveforms (frame count must match).
inline LabeledSet reextract(const std::vector<AudioClip>& clips, const FeatureStats& stats,
                            const FeatureParams& fp, const ad::Shape& item_shape) {
  std::vector<FeatureMap> maps;
  for (const auto& c : clips) {
    auto m = standardize(extract_fd_mfcc(c, fp), stats);
    if (m.rows() != item_shape.at(1) || m.cols() != item_shape.at(2)) {
      throw ShapeError("re-extracted map " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                       " does not match distilled item shape");
    }
    maps.push_back(std::move(m));
  }
  return to_labeled_set(maps);
}

inline std::string sigma_tag(double sigma) {
  std::ostringstream os;
  os << sigma;
  return os.str();
}

/// One row per sigma: reconstruct, add N(0, sigma^2) noise, re-extract,
/// train on the result with lr = alpha and test.
inline std::vector<EvalRow> noise_robustness(const DistilledSet& d, const std::vector<double>& sigmas,
                                             const RunConfig& cfg, const LabeledSet& test,
                                             const ArchDescriptor& eval_arch, const std::string& dataset_tag,
                                             const std::vector<Reconstruction>* recon = nullptr) {
  std::vector<EvalRow> rows;
  if (sigmas.empty()) return rows;
  std::vector<Reconstruction> own;
  if (recon == nullptr) {
    own = reconstruct_distilled(d, cfg);
    recon = &own;
  }
  const auto fp = cfg.feature_params();
  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    std::vector<AudioClip> noisy;
    for (std::size_t i = 0; i < recon->size(); ++i) {
      AudioClip c = (*recon)[i].clip;
      Rng rng(derive_seed(derive_seed(cfg.seed, "noise", i), sigma_tag(sigmas[k])));
      for (auto& s : c.samples) s = static_cast<float>(s + sigmas[k] * rng.normal());
      noisy.push_back(std::move(c));
    }
    const LabeledSet train = reextract(noisy, *d.stats, fp, d.item_shape);
    const auto accs = train_and_test(train, test, eval_arch, d.alpha, cfg.eval_seeds, cfg.eval_epochs,
                                     cfg.eval_batch, cfg.seed);
    rows.push_back(summarize({dataset_tag + "/recon/sigma=" + sigma_tag(sigmas[k]), d.method,
                              distill_arch_of(d), eval_arch.canonical(), d.cpc},
                             accs));
  }
  return rows;
}

inline std::string format_fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string report_csv(const EvalReport& r) {
  std::string out = "dataset,method,distill_arch,eval_arch,cpc,seeds,mean_acc,std_acc\n";
  for (const auto& row : r.rows) {
    out += row.dataset_tag + "," + row.method + "," + row.distill_arch + "," + row.eval_arch + "," +
           std::to_string(row.cpc) + "," + std::to_string(row.seeds) + "," + format_fixed(row.mean_acc, 6) +
           "," + format_fixed(row.std_acc, 6) + "\n";
  }
  return out;
}

inline std::string report_markdown(const EvalReport& r) {
  std::string out = "| dataset | method | distill_arch | eval_arch | cpc | mean | std |\n";
  out += "|---|---|---|---|---|---|---|\n";
  for (const auto& row : r.rows) {
    out += "| " + row.dataset_tag + " | " + row.method + " | " + row.distill_arch + " | " + row.eval_arch +
           " | " + std::to_string(row.cpc) + " | " + format_fixed(100.0 * row.mean_acc, 2) + " | " +
           format_fixed(100.0 * row.std_acc, 2) + " |\n";
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

/// Writes <prefix>.csv, <prefix>.md and <prefix>.json.
inline void emit_report(const EvalReport& r, const std::filesystem::path& prefix) {
  if (r.rows.empty()) throw PreconditionError("refusing to emit an empty report");
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  write_text(prefix.string() + ".csv", report_csv(r));
  write_text(prefix.string() + ".md", report_markdown(r));
  write_text(prefix.string() + ".json", nlohmann::json(r).dump(2) + "\n");
}

inline EvalReport read_report(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open " + json_path.string());
  nlohmann::json j;
  in >> j;
  return j.get<EvalReport>();
}

/// sigma vs accuracy, for plotting.
inline std::string sweep_csv(const std::vector<double>& sigmas, const std::vector<EvalRow>& rows) {
  std::string out = "sigma,mean_acc,std_acc\n";
  for (std::size_t i = 0; i < rows.size() && i < sigmas.size(); ++i) {
    out += sigma_tag(sigmas[i]) + "," + format_fixed(rows[i].mean_acc, 6) + "," + format_fixed(rows[i].std_acc, 6) + "\n";
  }
  return out;
}

inline std::string residual_csv(const std::vector<Reconstruction>& recon) {
  std::string out = "item,iteration,residual\n";
  for (std::size_t i = 0; i < recon.size(); ++i) {
    for (std::size_t k = 0; k < recon[i].residual_history.size(); ++k) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g\n", i, k + 1, recon[i].residual_history[k]);
      out += buf;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full run

struct PipelineResult {
  EvalReport report;
  DistilledSet distilled;
  std::filesystem::path distilled_path;
  std::filesystem::path report_prefix;
};

/// corpus (synthesized when no manifest is set) -> features -> teachers ->
/// distill -> evaluate on features -> reconstruct + noise sweep -> report.
inline PipelineResult run_pipeline(const RunConfig& cfg, const std::filesystem::path& workdir) {
  cfg.validate();
  std::filesystem::create_directories(workdir);
  const Manifest m = cfg.manifest.empty() ? write_synthetic_corpus(cfg, workdir / "corpus")
                                          : read_manifest(cfg.manifest);
  const FeatureDataset ds = prepare_features(m, cfg);
  save_feature_dataset(ds, cfg, workdir / "features");
  const ArchDescriptor arch = cfg.arch(ds.n_classes(), ds.frames());
  const LabeledSet train = ds.train_set();
  const LabeledSet test = ds.test_set();

  TrajectoryBuffer buffer;
  if (cfg.method == "mtt") {
    buffer = build_buffer(train, arch, cfg);
    save_buffer(buffer, cfg, workdir / "buffer");
  }
  PipelineResult out;
  out.distilled = run_distill(cfg.method, cfg.cpc, ds, cfg.method == "mtt" ? &buffer : nullptr, cfg);
  out.distilled_path = workdir / (cfg.method + "_cpc" + std::to_string(cfg.cpc) + ".dset");
  save_distilled(out.distilled, out.distilled_path);

  out.report.config = cfg;
  for (const auto& a : cfg.eval_archs(arch)) {
    out.report.rows.push_back(
        evaluate_distilled(out.distilled, a, test, cfg.eval_seeds, cfg.eval_epochs, cfg, cfg.dataset_tag));
  }
  if (!cfg.sigmas.empty()) {
    const auto recon = reconstruct_distilled(out.distilled, cfg);
    out.report.append(noise_robustness(out.distilled, cfg.sigmas, cfg, test, arch, cfg.dataset_tag, &recon));
  }
  out.report_prefix = workdir / "report";
  emit_report(out.report, out.report_prefix);
  return out;
}

}  // namespace audistill
