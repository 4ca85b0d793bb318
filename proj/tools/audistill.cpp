#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "audistill/audistill.hpp"

namespace fs = std::filesystem;
using namespace audistill;

namespace {

std::string flag_name(const char* field) {
  std::string s = "--";
  for (const char* p = field; *p; ++p) s += *p == '_' ? '-' : *p;
  return s;
}

struct Cli {
  RunConfig flags;
  std::vector<std::pair<std::string, CLI::Option*>> options;
  std::string config_path;

  void bind(CLI::App& app) {
    app.add_option("--config", config_path, "JSON run configuration (explicit flags win)")->check(CLI::ExistingFile);
    RunConfig::visit(flags, [&](const char* name, auto& field, const char* desc) {
      CLI::Option* opt = app.add_option(flag_name(name), field, desc);
      if constexpr (std::is_same_v<std::decay_t<decltype(field)>, std::vector<double>>) opt->delimiter(',');
      options.emplace_back(name, opt);
    });
  }

  /// defaults < --config file < explicit flags
  RunConfig resolve() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    nlohmann::json merged = cfg;
    const nlohmann::json given = flags;
    for (const auto& [name, opt] : options) {
      if (opt->count() > 0) merged[name] = given[name];
    }
    cfg = merged.get<RunConfig>();
    return cfg;
  }
};

FeatureDataset need_features(const std::string& dir) {
  if (dir.empty()) throw ParameterError("--features is required");
  return load_feature_dataset(dir);
}

void print_rows(const std::vector<EvalRow>& rows) {
  EvalReport r;
  r.rows = rows;
  std::cout << report_markdown(r);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio dataset distillation toolkit"};
  app.require_subcommand(1);
  Cli cli;
  cli.bind(app);

  std::string out, features_dir, buffer_dir, workdir;
  std::vector<std::string> distilled_paths, inputs;
  bool with_whole = false;

  auto* synth = app.add_subcommand("synth", "write the seeded tone/chirp corpus and its manifest");
  synth->add_option("--out", out, "output directory")->required();

  auto* extract = app.add_subcommand("extract", "manifest -> standardized FD-MFCC files + stats");
  extract->add_option("--out", out, "features directory")->required();

  auto* teachers = app.add_subcommand("teachers", "train teachers and write the trajectory buffer");
  teachers->add_option("--features", features_dir, "features directory")->required();
  teachers->add_option("--out", out, "buffer directory")->required();

  auto* distill = app.add_subcommand("distill", "produce a distilled set (--method, --cpc)");
  distill->add_option("--features", features_dir, "features directory")->required();
  distill->add_option("--buffer", buffer_dir, "buffer directory (mtt only)");
  distill->add_option("--out", out, "distilled set file")->required();

  auto* reconstruct = app.add_subcommand("reconstruct", "distilled set -> WAVs + residual CSV");
  reconstruct->add_option("--distilled", distilled_paths, "distilled set file")->required()->expected(1);
  reconstruct->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "train fresh models on distilled sets and test them");
  eval->add_option("--distilled", distilled_paths, "distilled set files")->expected(0, -1);
  eval->add_option("--features", features_dir, "features directory")->required();
  eval->add_flag("--whole", with_whole, "also evaluate the whole training set");
  eval->add_option("--out", out, "report prefix")->required();

  auto* noise = app.add_subcommand("noise", "reconstruct, add noise per sigma, re-extract, evaluate");
  noise->add_option("--distilled", distilled_paths, "distilled set file")->required()->expected(1);
  noise->add_option("--features", features_dir, "features directory")->required();
  noise->add_option("--out", out, "report prefix")->required();

  auto* report = app.add_subcommand("report", "merge report JSON files and re-emit CSV/markdown");
  report->add_option("--inputs", inputs, "report JSON files")->required()->check(CLI::ExistingFile);
  report->add_option("--out", out, "report prefix")->required();

  auto* run = app.add_subcommand("run", "full pipeline in one working directory");
  run->add_option("--workdir", workdir, "working directory")->required();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = cli.resolve();
    cfg.validate();

    if (synth->parsed()) {
      const Manifest m = write_synthetic_corpus(cfg, out);
      std::cout << "wrote " << m.entries.size() << " clips to " << out << "\n";
    } else if (extract->parsed()) {
      if (cfg.manifest.empty()) throw ParameterError("--manifest is required");
      const FeatureDataset ds = prepare_features(read_manifest(cfg.manifest), cfg);
      save_feature_dataset(ds, cfg, out);
      std::cout << "train " << ds.train.size() << ", test " << ds.test.size() << " maps -> " << out << "\n";
    } else if (teachers->parsed()) {
      const FeatureDataset ds = need_features(features_dir);
      const TrajectoryBuffer b = build_buffer(ds.train_set(), cfg.arch(ds.n_classes(), ds.frames()), cfg);
      save_buffer(b, cfg, out);
      std::cout << b.trajectories.size() << " trajectories (" << b.arch().canonical() << ") -> " << out << "\n";
    } else if (distill->parsed()) {
      const FeatureDataset ds = need_features(features_dir);
      TrajectoryBuffer b;
      if (cfg.method == "mtt") {
        if (buffer_dir.empty()) throw ParameterError("--buffer is required for mtt");
        b = load_buffer(buffer_dir);
      }
      const DistilledSet d = run_distill(cfg.method, cfg.cpc, ds, cfg.method == "mtt" ? &b : nullptr, cfg);
      save_distilled(d, out);
      std::cout << cfg.method << " cpc=" << cfg.cpc << " alpha=" << d.alpha << " -> " << out << "\n";
    } else if (reconstruct->parsed()) {
      const DistilledSet d = load_distilled(distilled_paths.front());
      const auto recon = reconstruct_distilled(d, cfg);
      fs::create_directories(out);
      for (std::size_t i = 0; i < recon.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "item_%04zu_class%d.wav", i, d.labels[i]);
        save_wav(recon[i].clip, fs::path(out) / name);
      }
      write_text(fs::path(out) / "residual.csv", residual_csv(recon));
      std::cout << recon.size() << " clips -> " << out << "\n";
    } else if (eval->parsed()) {
      const FeatureDataset ds = need_features(features_dir);
      const LabeledSet test = ds.test_set();
      const auto archs = cfg.eval_archs(cfg.arch(ds.n_classes(), ds.frames()));
      EvalReport r;
      r.config = cfg;
      for (const auto& p : distilled_paths) {
        const DistilledSet d = load_distilled(p);
        for (const auto& a : archs) {
          r.rows.push_back(evaluate_distilled(d, a, test, cfg.eval_seeds, cfg.eval_epochs, cfg, cfg.dataset_tag));
        }
      }
      if (with_whole) {
        const LabeledSet train = ds.train_set();
        for (const auto& a : archs) r.rows.push_back(evaluate_whole(train, a, test, cfg, cfg.dataset_tag));
      }
      emit_report(r, out);
      print_rows(r.rows);
    } else if (noise->parsed()) {
      const FeatureDataset ds = need_features(features_dir);
      const DistilledSet d = load_distilled(distilled_paths.front());
      EvalReport r;
      r.config = cfg;
      r.rows = noise_robustness(d, cfg.sigmas, cfg, ds.test_set(), cfg.arch(ds.n_classes(), ds.frames()),
                                cfg.dataset_tag);
      emit_report(r, out);
      write_text(out + "_sweep.csv", sweep_csv(cfg.sigmas, r.rows));
      print_rows(r.rows);
    } else if (report->parsed()) {
      EvalReport r;
      for (const auto& p : inputs) {
        const EvalReport part = read_report(p);
        if (r.config.is_null()) r.config = part.config;
        r.append(part.rows);
      }
      emit_report(r, out);
      print_rows(r.rows);
    } else if (run->parsed()) {
      const PipelineResult res = run_pipeline(cfg, workdir);
      print_rows(res.report.rows);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
