#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <type_traits>
#include <vector>

#include "audistill/distill.hpp"
#include "audistill/error.hpp"
#include "audistill/features.hpp"
#include "audistill/models.hpp"
#include "audistill/reconstruct.hpp"

namespace audistill {

/// Every knob of a run. Field names double as JSON keys and as CLI flags
/// (underscores become dashes).
struct RunConfig {
  std::uint64_t seed = 0;
  std::string dataset_tag = "synth4";
  std::string manifest;
  double test_fraction = 0.2;  // holdout when the manifest has no split column

  // synthetic corpus
  std::size_t synth_classes = 4;
  std::size_t synth_train_per_class = 60;
  std::size_t synth_test_per_class = 40;
  double synth_seconds = 1.0;
  double synth_noise = 0.1;

  // features
  int sample_rate = 8000;
  double pre_emphasis = 0.97;
  std::size_t frame_len = 160;
  std::size_t hop_len = 80;
  std::size_t fft_len = 256;
  std::string window = "hamming";
  std::size_t n_mels = 64;
  std::size_t n_coef = 20;
  double f_min = 0.0;
  double f_max = 0.0;
  double db_ref = 1.0;

  // model used for teachers and distillation
  std::size_t depth = 3;
  std::size_t width = 32;
  std::string eval_arch;  // "d<depth>-w<width>" list separated by ';' (empty: same as above)

  // teachers
  std::size_t n_teachers = 3;
  std::size_t teacher_epochs = 20;
  double teacher_lr = 0.01;
  std::size_t batch_size = 32;

  // distillation
  std::string method = "mtt";
  std::size_t cpc = 10;
  std::string init = "real";
  double alpha_init = 0.01;
  std::size_t outer_iters = 500;
  std::size_t inner_steps = 10;
  std::size_t target_steps = 2;
  std::size_t max_start = 10;
  double outer_lr = 100.0;
  double alpha_lr = 1e-5;
  std::size_t mtt_batch = 0;
  std::size_t dcgm_iters = 200;
  std::size_t dcgm_inner = 5;
  std::size_t dcgm_real_batch = 32;
  double dcgm_outer_lr = 0.1;
  double dcgm_net_lr = 0.01;

  // evaluation
  std::size_t eval_epochs = 100;
  std::size_t eval_seeds = 5;
  std::size_t eval_batch = 256;
  double eval_lr = 0.01;

  // reconstruction and noise sweep
  std::size_t gla_iters = 60;
  std::size_t nnls_iters = 200;
  std::vector<double> sigmas{0.0, 0.005, 0.01};

  template <class Self, class V>
  static void visit(Self& c, V&& v) {
    v("seed", c.seed, "master seed");
    v("dataset_tag", c.dataset_tag, "label used in reports");
    v("manifest", c.manifest, "dataset manifest (JSON lines)");
    v("test_fraction", c.test_fraction, "holdout fraction when the manifest has no split");
    v("synth_classes", c.synth_classes, "synthetic corpus: number of classes (max 4)");
    v("synth_train_per_class", c.synth_train_per_class, "synthetic corpus: training clips per class");
    v("synth_test_per_class", c.synth_test_per_class, "synthetic corpus: test clips per class");
    v("synth_seconds", c.synth_seconds, "synthetic corpus: clip duration in seconds");
    v("synth_noise", c.synth_noise, "synthetic corpus: background noise level");
    v("sample_rate", c.sample_rate, "sample rate in Hz");
    v("pre_emphasis", c.pre_emphasis, "pre-emphasis coefficient");
    v("frame_len", c.frame_len, "STFT frame length (samples)");
    v("hop_len", c.hop_len, "STFT hop (samples)");
    v("fft_len", c.fft_len, "FFT size");
    v("window", c.window, "analysis window: hamming or hann");
    v("n_mels", c.n_mels, "mel bands");
    v("n_coef", c.n_coef, "cepstral coefficients C");
    v("f_min", c.f_min, "lowest mel edge (Hz)");
    v("f_max", c.f_max, "highest mel edge (Hz, 0 = Nyquist)");
    v("db_ref", c.db_ref, "dB reference power");
    v("depth", c.depth, "ConvNet blocks");
    v("width", c.width, "ConvNet channels");
    v("eval_arch", c.eval_arch, "evaluation architectures, e.g. d2-w16;d3-w32");
    v("n_teachers", c.n_teachers, "teacher trajectories");
    v("teacher_epochs", c.teacher_epochs, "teacher epochs T");
    v("teacher_lr", c.teacher_lr, "teacher SGD learning rate");
    v("batch_size", c.batch_size, "teacher minibatch size");
    v("method", c.method, "mtt, dcgm, random or herding");
    v("cpc", c.cpc, "clips per class");
    v("init", c.init, "distilled initialisation: real or noise");
    v("alpha_init", c.alpha_init, "initial trainable learning rate");
    v("outer_iters", c.outer_iters, "MTT outer iterations M_outer");
    v("inner_steps", c.inner_steps, "MTT student steps N");
    v("target_steps", c.target_steps, "MTT teacher epochs ahead M_target");
    v("max_start", c.max_start, "MTT start epochs sampled below T'");
    v("outer_lr", c.outer_lr, "MTT feature learning rate");
    v("alpha_lr", c.alpha_lr, "MTT learning rate for alpha");
    v("mtt_batch", c.mtt_batch, "MTT inner batch (0 = whole distilled set)");
    v("dcgm_iters", c.dcgm_iters, "DCGM fresh networks");
    v("dcgm_inner", c.dcgm_inner, "DCGM match/update rounds per network");
    v("dcgm_real_batch", c.dcgm_real_batch, "DCGM real samples per class per round");
    v("dcgm_outer_lr", c.dcgm_outer_lr, "DCGM feature learning rate");
    v("dcgm_net_lr", c.dcgm_net_lr, "DCGM network learning rate");
    v("eval_epochs", c.eval_epochs, "evaluation training epochs");
    v("eval_seeds", c.eval_seeds, "evaluation seeds");
    v("eval_batch", c.eval_batch, "evaluation minibatch size");
    v("eval_lr", c.eval_lr, "learning rate for coreset and whole-dataset arms");
    v("gla_iters", c.gla_iters, "Griffin-Lim iterations I");
    v("nnls_iters", c.nnls_iters, "mel-to-STFT NNLS iterations");
    v("sigmas", c.sigmas, "noise standard deviations for the robustness sweep");
  }

  FeatureParams feature_params() const {
    FeatureParams p;
    p.sample_rate = sample_rate;
    p.pre_emphasis = pre_emphasis;
    p.stft = {frame_len, hop_len, fft_len, dsp::window_from_string(window)};
    p.n_mels = n_mels;
    p.n_coef = n_coef;
    p.f_min = f_min;
    p.f_max = f_max;
    p.db_ref = db_ref;
    return p;
  }

  ReconstructParams reconstruct_params() const { return {feature_params(), gla_iters, nnls_iters}; }

  std::size_t target_len() const {
    return static_cast<std::size_t>(std::lround(synth_seconds * sample_rate));
  }

  ArchDescriptor arch(std::size_t n_classes, std::size_t frames) const {
    ArchDescriptor a;
    a.depth = depth;
    a.width = width;
    a.in_height = 3 * n_coef;
    a.in_width = frames;
    a.n_classes = n_classes;
    return a;
  }

  /// Parsed `eval_arch` list; defaults to the distillation architecture.
  std::vector<ArchDescriptor> eval_archs(const ArchDescriptor& base) const;

  MttParams mtt_params() const {
    MttParams p;
    p.outer_iters = outer_iters;
    p.inner_steps = inner_steps;
    p.target_steps = target_steps;
    p.max_start = max_start;
    p.outer_lr = outer_lr;
    p.alpha_lr = alpha_lr;
    p.batch_size = mtt_batch;
    return p;
  }

  DcgmParams dcgm_params(const ArchDescriptor& a) const {
    DcgmParams p;
    p.arch = a;
    p.iters = dcgm_iters;
    p.inner_loops = dcgm_inner;
    p.real_batch = dcgm_real_batch;
    p.outer_lr = dcgm_outer_lr;
    p.net_lr = dcgm_net_lr;
    return p;
  }

  void validate() const {
    feature_params().validate();
    if (method != "mtt" && method != "dcgm" && method != "random" && method != "herding") {
      throw ParameterError("unknown method: " + method);
    }
    if (init != "real" && init != "noise") throw ParameterError("init must be real or noise");
    if (cpc == 0) throw ParameterError("cpc must be positive");
    if (eval_seeds == 0) throw ParameterError("eval_seeds must be positive");
    if (!(alpha_init > 0.0)) throw ParameterError("alpha_init must be positive");
    if (teacher_epochs < max_start + target_steps) {
      throw ParameterError("teacher_epochs must be at least max_start + target_steps");
    }
    for (double s : sigmas) {
      if (s < 0.0) throw ParameterError("noise sigma must be nonnegative");
    }
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json::object();
  RunConfig::visit(c, [&j](const char* name, const auto& field, const char*) { j[name] = field; });
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ParameterError("configuration must be a JSON object");
  std::size_t known = 0;
  RunConfig::visit(c, [&](const char* name, auto& field, const char*) {
    if (!j.contains(name)) return;
    ++known;
    try {
      j.at(name).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw ParameterError(std::string("bad value for ") + name + ": " + e.what());
    }
  });
  if (known != j.size()) {
    RunConfig probe;
    nlohmann::json ref = probe;
    for (const auto& [key, value] : j.items()) {
      if (!ref.contains(key)) throw ParameterError("unknown configuration key: " + key);
    }
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad configuration file " + path.string() + ": " + e.what());
  }
  return j.get<RunConfig>();
}

inline std::vector<ArchDescriptor> RunConfig::eval_archs(const ArchDescriptor& base) const {
  std::vector<ArchDescriptor> out;
  if (eval_arch.empty()) return {base};
  std::size_t pos = 0;
  while (pos <= eval_arch.size()) {
    const std::size_t end = std::min(eval_arch.find(';', pos), eval_arch.size());
    const std::string item = eval_arch.substr(pos, end - pos);
    pos = end + 1;
    if (item.empty()) continue;
    ArchDescriptor a = base;
    if (item.rfind("convnet-", 0) == 0) {
      a = ArchDescriptor::parse(item);
    } else {
      unsigned d = 0, w = 0;
      if (std::sscanf(item.c_str(), "d%u-w%u", &d, &w) != 2) {
        throw ParameterError("eval architecture must look like d2-w16: " + item);
      }
      a.depth = d;
      a.width = w;
    }
    a.validate();
    out.push_back(a);
  }
  if (out.empty()) throw ParameterError("empty eval architecture list");
  return out;
}

}  // namespace audistill
