// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   acceptance --workdir DIR [--config desk.json] [--only 1,2,8]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ad_cases.hpp"
#include "audistill/audistill.hpp"
#include "oracles.hpp"
#include "toy_data.hpp"

using namespace audistill;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[violated] " << what << "; ";
    }
  }
  void note(const std::string& s) { detail << s << "; "; }
};

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> random_signal(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (auto& v : x) v = rng.uniform(-1.0, 1.0);
  return x;
}

std::vector<double> tone(double hz, std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t t = 0; t < n; ++t) x[t] = 0.5 * std::sin(2.0 * std::numbers::pi * hz * double(t) / 8000.0);
  return x;
}

MagnitudeSpec magnitudes_of(const dsp::Spectrogram& s) {
  MagnitudeSpec a{Matrix<double>(s.bins.rows(), s.bins.cols()), s.config};
  for (std::size_t i = 0; i < s.bins.size(); ++i) a.mags.data()[i] = std::abs(s.bins.data()[i]);
  return a;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Desk-scale experiment setup: four synthetic tone/chirp classes, 0.5 s hop-160
// features (60 x 49), ConvNet depth 3 width 16.
RunConfig desk_config() {
  RunConfig c;
  c.dataset_tag = "synth4";
  c.synth_classes = 4;
  c.frame_len = 320;
  c.hop_len = 160;
  c.fft_len = 512;
  c.width = 16;
  c.teacher_lr = 0.05;
  c.batch_size = 8;
  c.teacher_epochs = 20;
  c.outer_iters = 200;
  c.inner_steps = 10;
  c.target_steps = 2;
  c.max_start = 10;
  c.outer_lr = 1000.0;
  c.alpha_lr = 1e-4;
  c.alpha_init = 0.02;
  c.cpc = 10;
  c.eval_epochs = 100;
  c.eval_seeds = 5;
  c.eval_batch = 32;
  c.eval_lr = 0.05;
  return c;
}

// ---------------------------------------------------------------------------

Outcome dsp_round_trips() {
  Outcome o;
  double worst_istft = 0.0;
  const std::vector<dsp::StftConfig> cfgs{{160, 80, 256, dsp::Window::hann},
                                          {160, 80, 256, dsp::Window::hamming},
                                          {320, 160, 512, dsp::Window::hann},
                                          {128, 32, 128, dsp::Window::hamming}};
  std::uint64_t seed = 1;
  for (const auto& c : cfgs) {
    for (std::size_t len : {c.frame_len, std::size_t{1000}, std::size_t{8000}}) {
      const auto x = random_signal(len, seed++);
      const auto s = dsp::stft(x, c);
      const auto y = dsp::istft(s);
      const auto wsum = dsp::window_sum(c, s.frames());
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (wsum[i] >= 1e-8) worst_istft = std::max(worst_istft, std::abs(y[i] - x[i]));
      }
    }
  }
  o.check(worst_istft < 1e-5, "istft(stft(x)) interior error < 1e-5");
  o.note("istft max err " + num(worst_istft));

  double worst_dct = 0.0, worst_oracle = 0.0;
  for (std::size_t n : {1u, 2u, 13u, 20u, 40u, 64u}) {
    const auto v = random_signal(n, 100 + n);
    const auto c = dsp::dct2_ortho(v);
    const auto ref = oracle::naive_dct2_ortho(v);
    const auto back = dsp::idct(c);
    for (std::size_t k = 0; k < n; ++k) {
      worst_oracle = std::max(worst_oracle, std::abs(c[k] - ref[k]));
      worst_dct = std::max(worst_dct, std::abs(back[k] - v[k]));
    }
  }
  o.check(worst_oracle < 1e-9, "DCT matches naive O(n^2) oracle within 1e-9");
  o.check(worst_dct < 1e-9, "DCT round trip < 1e-9");
  o.note("dct vs oracle " + num(worst_oracle) + ", round trip " + num(worst_dct));

  double worst_db = 0.0;
  for (double p : {1e-9, 1e-4, 0.5, 1.0, 42.0, 1e6}) {
    for (double ref : {1.0, 0.01, 3.0}) {
      worst_db = std::max(worst_db, std::abs(dsp::db_to_power(dsp::power_to_db(p, ref), ref) / p - 1.0));
    }
  }
  for (double d : {-90.0, -3.0, 0.0, 17.5}) {
    worst_db = std::max(worst_db, std::abs(dsp::power_to_db(dsp::db_to_power(d)) - d));
  }
  o.check(worst_db < 1e-9, "dB and power conversions invert above the floor");
  o.note("dB inverse err " + num(worst_db));
  return o;
}

Outcome fdmfcc_contract() {
  Outcome o;
  FeatureParams p;
  AudioClip clip;
  clip.sample_rate = 8000;
  Rng rng(2);
  for (std::size_t t = 0; t < 8000; ++t) {
    clip.samples.push_back(static_cast<float>(0.3 * std::sin(2 * std::numbers::pi * 700.0 * t / 8000.0) +
                                              0.05 * rng.normal()));
  }
  const FeatureMap f = extract_fd_mfcc(clip, p);
  const auto m = mfcc(clip, p);
  const std::size_t C = p.n_coef;
  o.check(f.rows() == 3 * C, "3C rows");
  // Independent difference: (x[t+1] - x[t]) / 2, zero on the last frame.
  auto diff = [](const Matrix<double>& x) {
    Matrix<double> d(x.rows(), x.cols(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t t = 0; t + 1 < x.cols(); ++t) d(r, t) = (x(r, t + 1) - x(r, t)) / 2.0;
    }
    return d;
  };
  const auto d1 = diff(m);
  const auto d2 = diff(d1);
  double worst = 0.0;
  for (std::size_t r = 0; r < C; ++r) {
    for (std::size_t t = 0; t < f.cols(); ++t) {
      worst = std::max({worst, std::abs(f.values(r, t) - m(r, t)), std::abs(f.values(C + r, t) - d1(r, t)),
                        std::abs(f.values(2 * C + r, t) - d2(r, t))});
    }
  }
  o.check(worst < 1e-12, "[MFCC; delta; delta^2] block order");

  Matrix<double> ex(1, 3);
  ex(0, 0) = 0;
  ex(0, 1) = 2;
  ex(0, 2) = 4;
  const auto dex = delta(ex);
  o.check(dex(0, 0) == 1.0 && dex(0, 1) == 1.0 && dex(0, 2) == 0.0, "[0,2,4] -> [1,1,0]");

  const Matrix<double> flat(6, 9, -1.5);
  const auto dflat = delta(flat);
  bool zero = true;
  for (double v : dflat.data()) zero = zero && v == 0.0;
  o.check(zero, "delta of constant is zero");

  const FeatureMap again = extract_fd_mfcc(clip, p);
  o.check(again.values.data() == f.values.data(), "deterministic extraction");
  o.note(std::to_string(f.rows()) + "x" + std::to_string(f.cols()) + " map, layout err " + num(worst));
  return o;
}

Outcome griffin_lim_checks() {
  Outcome o;
  const dsp::StftConfig cfg = ReconstructParams{}.synthesis_config();

  const auto s = dsp::stft(random_signal(2000, 3), cfg);
  const auto fixed = gla_step(s, magnitudes_of(s));
  double worst = 0.0;
  for (std::size_t i = 0; i < s.bins.size(); ++i) worst = std::max(worst, std::abs(fixed.bins.data()[i] - s.bins.data()[i]));
  o.check(worst < 1e-5, "consistent X with |X| = A is a fixed point within 1e-5");
  o.note("fixed-point drift " + num(worst));

  bool monotone = true;
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    const auto a = magnitudes_of(dsp::stft(random_signal(4000, 10 + seed), cfg));
    const auto st = griffin_lim_state(a, 60, seed);
    for (std::size_t i = 1; i < st.residual_history.size(); ++i) {
      monotone = monotone && st.residual_history[i] <= st.residual_history[i - 1] + 1e-6;
    }
  }
  o.check(monotone, "residual non-increasing per iteration (tol 1e-6)");

  // 440 Hz tone, 1 s at 8 kHz, 60 iterations, seed 1.
  const auto a = magnitudes_of(dsp::stft(tone(440.0, 8000), cfg));
  const auto y = griffin_lim(a, 60, 1).waveform;
  const auto sy = dsp::stft(y, cfg);
  double num_ = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.mags.size(); ++i) {
    const double d = std::abs(sy.bins.data()[i]) - a.mags.data()[i];
    num_ += d * d;
    den += a.mags.data()[i] * a.mags.data()[i];
  }
  const double err = std::sqrt(num_ / den);
  o.check(err < 0.05, "tone magnitude error < 0.05 after 60 iterations");
  o.note("tone magnitude error " + num(err));
  return o;
}

Outcome nnls_checks() {
  Outcome o;
  const auto cfg = ReconstructParams{}.synthesis_config();
  double worst = 0.0;
  bool monotone = true;
  Rng rng(4);
  for (std::size_t n_mels : {16u, 24u}) {
    const auto fb = dsp::mel_filterbank(n_mels, cfg, 8000.0, 0.0, 4000.0);
    for (int trial = 0; trial < 5; ++trial) {
      // Nonnegative spectrum in the filterbank row space, then forward map.
      std::vector<double> z(fb.n_mels()), s(fb.n_bins(), 0.0), p(fb.n_mels(), 0.0);
      for (auto& v : z) v = rng.uniform(0.5, 2.0);
      for (std::size_t m = 0; m < fb.n_mels(); ++m) {
        for (std::size_t k = 0; k < fb.n_bins(); ++k) s[k] += fb.weights(m, k) * z[m];
      }
      for (std::size_t m = 0; m < fb.n_mels(); ++m) {
        for (std::size_t k = 0; k < fb.n_bins(); ++k) p[m] += fb.weights(m, k) * s[k];
      }
      const auto res = nnls_projected_gradient(fb, p, 200, gram_spectral_norm(fb));
      double e = 0.0, d = 0.0;
      for (std::size_t k = 0; k < s.size(); ++k) {
        e += (res.solution[k] - s[k]) * (res.solution[k] - s[k]);
        d += s[k] * s[k];
      }
      worst = std::max(worst, std::sqrt(e / d));
      for (std::size_t i = 1; i < res.objective.size(); ++i) {
        monotone = monotone && res.objective[i] <= res.objective[i - 1] * (1.0 + 1e-12);
      }
    }
  }
  o.check(worst < 1e-2, "forward-then-invert relative error < 1e-2");
  o.check(monotone, "NNLS objective non-increasing");
  o.note("worst relative error " + num(worst));
  return o;
}

Outcome autodiff_gradcheck() {
  Outcome o;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < adcases::cases().size(); ++i) {
    const auto& c = adcases::cases()[i];
    Rng rng(1000 + i);
    for (int rep = 0; rep < 5; ++rep) {
      const double err = oracle::gradcheck<float>(c.f32, adcases::make_inputs<float>(rng, c.shapes(rng)), 1e-3);
      worst = std::max(worst, err);
      o.check(err < 1e-2, std::string(c.name) + " rep " + std::to_string(rep) + " err " + num(err));
      ++checked;
    }
  }
  const auto f = adcases::unrolled_step_objective();
  Rng rng(77);
  for (int rep = 0; rep < 5; ++rep) {
    const std::size_t n = 1 + rng.below(6);
    const double err = oracle::gradcheck<float>(f, {oracle::random_tensor<float>(rng, {n})}, 1e-3);
    worst = std::max(worst, err);
    o.check(err < 1e-2, "unrolled SGD composite rep " + std::to_string(rep));
    ++checked;
  }
  o.note(std::to_string(adcases::cases().size()) + " primitives + unrolled SGD, " + std::to_string(checked) +
         " checks, worst rel err " + num(worst));
  return o;
}

ParamVector toy_params(std::vector<float> v) {
  const ArchDescriptor a = toy::toy_arch();
  ParamVector p{std::vector<float>(param_count(a), 0.f), a, 0};
  std::copy(v.begin(), v.end(), p.flat.begin());
  return p;
}

Outcome loss_anchors() {
  Outcome o;
  const auto start = toy_params({3.f, 1.f}), target = toy_params({1.f, 1.f});
  o.check(mtt_loss(target, start, target) == 0.0, "loss 0 when student end equals target");
  o.check(mtt_loss(start, start, target) == 1.0, "loss 1 when student end equals teacher start");
  const double q = mtt_loss(toy_params({2.f, 1.f}), start, target);
  o.check(std::abs(q - 0.25) < 1e-12, "(1,0)/(2,0) case = 0.25");
  Rng rng(6);
  const std::size_t n = param_count(toy::toy_arch());
  std::vector<float> e(n), s(n), t(n);
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = float(rng.normal());
    s[i] = float(rng.normal());
    t[i] = float(rng.normal());
  }
  const double base = mtt_loss(toy_params(e), toy_params(s), toy_params(t));
  double worst = 0.0;
  for (float c : {0.5f, 3.f, 10.f}) {
    auto sc = [c](std::vector<float> v) {
      for (auto& x : v) x *= c;
      return v;
    };
    worst = std::max(worst, std::abs(mtt_loss(toy_params(sc(e)), toy_params(sc(s)), toy_params(sc(t))) - base) / base);
  }
  o.check(worst < 1e-6, "invariant under joint scaling");
  o.note("scaling drift " + num(worst));
  return o;
}

Outcome meta_gradient() {
  Outcome o;
  const auto data = toy::two_blobs(8, 2);
  const auto buf = toy::toy_buffer(data, 1, 5);
  const auto init = init_distilled(data, 2, 1, false, 0.05f, 5);
  MttParams p;
  p.inner_steps = 2;
  p.target_steps = 2;
  p.max_start = 2;
  oracle::Fn<float> f = [&](const std::vector<ad::Tensor>& x) {
    return mtt_objective_at(buf, 0, 1, x[0], init.labels, ad::Tensor::scalar(init.alpha), p);
  };
  const double err = oracle::gradcheck<float>(f, {init.tensor()}, 1e-2);
  o.check(err < 5e-2, "dL/d(distilled features) matches finite differences within 5e-2");
  o.note("2-layer toy, N = 2, rel err " + num(err));
  return o;
}

double herding_gap(const std::vector<std::vector<double>>& p, const std::vector<std::size_t>& sel) {
  const std::size_t d = p[0].size();
  double gap = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0.0, ms = 0.0;
    for (const auto& x : p) mu += x[j] / double(p.size());
    for (auto i : sel) ms += p[i][j] / double(sel.size());
    gap += (ms - mu) * (ms - mu);
  }
  return gap;
}

Outcome herding_oracle() {
  Outcome o;
  auto as_points = [](std::initializer_list<double> v) {
    std::vector<std::vector<double>> p;
    for (double x : v) p.push_back({x});
    return p;
  };
  const auto ex = coreset_herding(as_points({0, 1, 2, 10}), {0, 0, 0, 0}, 1, 1);
  o.check(ex == std::vector<std::size_t>{2}, "{0,1,2,10} -> {2}");

  std::vector<std::vector<std::vector<double>>> classes{as_points({-1.0, 0.1, 1.0})};
  Rng rng(9);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + rng.below(7);
    std::vector<std::vector<double>> p(n, std::vector<double>(1 + rng.below(3)));
    for (auto& x : p) {
      for (auto& v : x) v = rng.normal();
    }
    classes.push_back(std::move(p));
  }
  std::size_t mismatches = 0, cases = 0;
  std::string first;
  for (const auto& p : classes) {
    for (std::size_t k = 1; k <= std::min<std::size_t>(2, p.size()); ++k) {
      const auto greedy = coreset_herding(p, std::vector<int>(p.size(), 0), 1, k);
      const auto best = oracle::best_subset(p.size(), k, [&](const auto& s) { return herding_gap(p, s); });
      ++cases;
      if (herding_gap(p, greedy) > herding_gap(p, best) + 1e-12) {
        if (mismatches++ == 0) {
          std::ostringstream os;
          os << "n=" << p.size() << " cpc=" << k << " greedy gap " << num(herding_gap(p, greedy)) << " vs optimum "
             << num(herding_gap(p, best));
          first = os.str();
        }
      }
    }
  }
  o.check(mismatches == 0, "greedy equals exhaustive optimum for cpc <= 2 on classes of <= 8 points");
  o.note(std::to_string(cases - mismatches) + "/" + std::to_string(cases) + " cases optimal" +
         (first.empty() ? "" : ", first gap: " + first));
  return o;
}

// ---------------------------------------------------------------------------
// Desk-scale experiment shared by the ordering and closure criteria.

struct Desk {
  RunConfig cfg;
  FeatureDataset ds;
  ArchDescriptor arch;
  DistilledSet mtt;
  EvalRow mtt_row, random_row, herding_row, whole_row;
  double seconds = 0.0;
};

const Desk& desk(const RunConfig& cfg, const fs::path& workdir) {
  static std::optional<Desk> d;
  if (d) return *d;
  const auto t0 = std::chrono::steady_clock::now();
  Desk r;
  r.cfg = cfg;
  r.ds = prepare_features(write_synthetic_corpus(cfg, workdir / "desk_corpus"), cfg);
  r.arch = cfg.arch(r.ds.n_classes(), r.ds.frames());
  const LabeledSet test = r.ds.test_set();
  const TrajectoryBuffer buffer = build_buffer(r.ds.train_set(), r.arch, cfg);
  r.mtt = run_distill("mtt", cfg.cpc, r.ds, &buffer, cfg);
  r.mtt_row = evaluate_distilled(r.mtt, r.arch, test, cfg.eval_seeds, cfg.eval_epochs, cfg, cfg.dataset_tag);
  for (const auto& [method, row] : {std::pair{"random", &r.random_row}, std::pair{"herding", &r.herding_row}}) {
    const DistilledSet c = run_distill(method, cfg.cpc, r.ds, nullptr, cfg);
    *row = evaluate_distilled(c, r.arch, test, cfg.eval_seeds, cfg.eval_epochs, cfg, cfg.dataset_tag);
  }
  r.whole_row = evaluate_whole(r.ds.train_set(), r.arch, test, cfg, cfg.dataset_tag);
  r.seconds = seconds_since(t0);
  EvalReport rep;
  rep.config = cfg;
  rep.rows = {r.mtt_row, r.random_row, r.herding_row, r.whole_row};
  emit_report(rep, workdir / "desk_report");
  d = std::move(r);
  return *d;
}

std::string acc(const EvalRow& r) { return num(100.0 * r.mean_acc, 4) + "+-" + num(100.0 * r.std_acc, 3); }

Outcome desk_ordering(const RunConfig& cfg, const fs::path& workdir) {
  Outcome o;
  const Desk& d = desk(cfg, workdir);
  o.check(d.mtt_row.mean_acc > d.random_row.mean_acc, "MTT(cpc=10) > random(cpc=10)");
  o.check(d.mtt_row.mean_acc > d.herding_row.mean_acc, "MTT(cpc=10) > herding(cpc=10)");
  o.check(d.whole_row.mean_acc > std::max({d.mtt_row.mean_acc, d.random_row.mean_acc, d.herding_row.mean_acc}),
          "whole dataset exceeds every cpc=10 arm");
  o.check(d.seconds <= 1800.0, "runtime <= 30 min");
  o.note("mtt " + acc(d.mtt_row) + ", random " + acc(d.random_row) + ", herding " + acc(d.herding_row) +
         ", whole " + acc(d.whole_row) + " (%, " + std::to_string(d.cfg.eval_seeds) + " seeds, " +
         num(d.seconds, 4) + " s)");
  return o;
}

Outcome reconstruction_closure(const RunConfig& cfg, const fs::path& workdir) {
  Outcome o;
  const Desk& d = desk(cfg, workdir);
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = noise_robustness(d.mtt, {0.0}, d.cfg, d.ds.test_set(), d.arch, d.cfg.dataset_tag);
  const double secs = seconds_since(t0);
  const double gap = std::abs(rows.at(0).mean_acc - d.mtt_row.mean_acc);
  o.check(gap <= 0.10, "re-extracted reconstruction within 10 points of distilled features");
  o.check(secs <= 900.0, "runtime <= 15 min");
  o.note("features " + acc(d.mtt_row) + ", reconstructed " + acc(rows[0]) + " (%, " + num(secs, 4) + " s)");
  return o;
}

Outcome determinism(const fs::path& workdir) {
  Outcome o;
  RunConfig c;
  c.synth_classes = 3;
  c.synth_train_per_class = 6;
  c.synth_test_per_class = 4;
  c.synth_seconds = 0.5;
  c.hop_len = 160;
  c.frame_len = 320;
  c.fft_len = 512;
  c.width = 8;
  c.depth = 2;
  c.n_teachers = 2;
  c.teacher_epochs = 6;
  c.batch_size = 6;
  c.max_start = 3;
  c.outer_iters = 5;
  c.inner_steps = 3;
  c.cpc = 2;
  c.eval_epochs = 5;
  c.eval_seeds = 2;
  c.sigmas = {0.0, 0.01};
  c.eval_arch = "d2-w8;d1-w8";
  const auto ra = run_pipeline(c, workdir / "determinism_a");
  const auto rb = run_pipeline(c, workdir / "determinism_b");
  for (const char* ext : {".json", ".csv", ".md"}) {
    const std::string a = slurp(workdir / "determinism_a" / (std::string("report") + ext));
    o.check(!a.empty() && a == slurp(workdir / "determinism_b" / (std::string("report") + ext)),
            std::string("report") + ext + " byte-identical");
  }
  const std::string da = slurp(ra.distilled_path);
  o.check(!da.empty() && da == slurp(rb.distilled_path), "DistilledSet file byte-identical");
  const std::string ba = slurp(workdir / "determinism_a" / "buffer" / "teacher_000.traj");
  o.check(!ba.empty() && ba == slurp(workdir / "determinism_b" / "buffer" / "teacher_000.traj"),
          "teacher trajectory byte-identical");
  o.note(std::to_string(ra.report.rows.size()) + " report rows, distilled file " + std::to_string(da.size()) +
         " bytes");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  fs::path workdir = fs::temp_directory_path() / "audistill_acceptance";
  std::string config_path;
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory");
  app.add_option("--config", config_path, "JSON overrides for the desk-scale experiment")->check(CLI::ExistingFile);
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  RunConfig cfg = desk_config();
  if (!config_path.empty()) {
    nlohmann::json j = cfg;
    std::ifstream in(config_path);
    j.merge_patch(nlohmann::json::parse(in));
    cfg = j.get<RunConfig>();
  }
  fs::remove_all(workdir);
  fs::create_directories(workdir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"DSP round trips", dsp_round_trips},
      {"FD-MFCC contract", fdmfcc_contract},
      {"Griffin-Lim", griffin_lim_checks},
      {"mel-to-STFT NNLS", nnls_checks},
      {"autodiff gradcheck", autodiff_gradcheck},
      {"trajectory loss anchors", loss_anchors},
      {"meta-gradient oracle", meta_gradient},
      {"desk-scale ordering", [&] { return desk_ordering(cfg, workdir); }},
      {"herding oracle", herding_oracle},
      {"reconstruction closure", [&] { return reconstruction_closure(cfg, workdir); }},
      {"determinism", [&] { return determinism(workdir); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = false;
    std::string detail;
    try {
      Outcome o = criteria[i].second();
      pass = o.pass;
      detail = o.detail.str();
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    failed += pass ? 0 : 1;
    std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << criteria[i].first << "  ("
              << detail << "elapsed " << num(seconds_since(t0), 3) << " s)" << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
