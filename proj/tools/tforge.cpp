// tforge: inject backdoor triggers, train small classifiers, and scan
// them by trigger inversion (unicorn engine or the neural-cleanse
// baseline).
#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "tforge/config.hpp"
#include "tforge/data.hpp"
#include "tforge/metrics.hpp"

namespace fs = std::filesystem;
using namespace tforge;

namespace {

Dataset load_from_config(const RunConfig& cfg) {
  std::string root = cfg.data_root;
  if (root.empty())
    if (const char* env = std::getenv("TF_DATA_ROOT")) root = env;
  return load_dataset(cfg.dataset, root, cfg.seed);
}

TriggerSpec spec_for(const RunConfig& cfg, const Dataset& data) {
  auto spec = make_trigger_spec(family_from_name(cfg.attack), cfg.target_label,
                                data.train.channels(), data.train.height(),
                                data.train.width(), cfg.seed + 99);
  spec.poison_rate = cfg.poison_rate;
  return spec;
}

int cmd_inject(const RunConfig& cfg, bool force) {
  if (cfg.attack == "clean") throw UsageError("inject: attack must not be 'clean'");
  auto data = load_from_config(cfg);
  auto spec = spec_for(cfg, data);
  auto poisoned = poison_dataset(data.train, spec, cfg.seed + 7);
  write_manifest(cfg, cfg.out_dir, force);
  spec.save((fs::path(cfg.out_dir) / "spec.json").string());
  torch::save(std::vector<torch::Tensor>{poisoned.pixels, poisoned.labels},
              (fs::path(cfg.out_dir) / "poisoned_train.pt").string());
  int64_t k = std::min<int64_t>(10, static_cast<int64_t>(poisoned.poisoned_indices.size()));
  auto idx = torch::tensor(std::vector<int64_t>(poisoned.poisoned_indices.begin(),
                                                poisoned.poisoned_indices.begin() + k));
  render_png(poisoned.index(idx), (fs::path(cfg.out_dir) / "poisoned_preview.png").string(),
             true);
  std::cout << "inject: " << poisoned.poisoned_indices.size() << " samples poisoned ("
            << cfg.attack << ", target " << cfg.target_label << ") -> " << cfg.out_dir
            << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, bool force) {
  auto data = load_from_config(cfg);
  write_manifest(cfg, cfg.out_dir, force);
  auto model = build_model(cfg.arch, data.num_classes,
                           {data.train.channels(), data.train.height(), data.train.width()});
  std::optional<TriggerSpec> spec;
  ImageBatch train_set = data.train;
  auto spec_path = fs::path(cfg.out_dir) / "spec.json";
  if (cfg.attack != "clean") {
    spec = fs::exists(spec_path) ? TriggerSpec::load(spec_path.string())
                                 : spec_for(cfg, data);
    spec->save(spec_path.string());
    if (!needs_training_control(spec->family))
      train_set = poison_dataset(data.train, *spec, cfg.seed + 7);
  }
  TrainConfig tc = cfg.train;
  tc.training_controlled = spec && needs_training_control(spec->family);
  auto ckpt = train_model(*model, train_set, tc, spec);
  auto [acc, asr] = evaluate(*model, data.test, spec);
  ckpt.benign_accuracy = acc;
  ckpt.asr_inj = asr.value_or(-1);
  ckpt.trigger_spec_path = spec ? spec_path.string() : "";
  ckpt.config_digest = cfg.digest();
  ckpt.save((fs::path(cfg.out_dir) / "checkpoint").string(), *model);
  std::cout << "train: benign_acc=" << acc;
  if (asr) std::cout << " asr_inj=" << *asr;
  std::cout << " -> " << cfg.out_dir << "/checkpoint\n";
  return 0;
}

int cmd_scan(const RunConfig& cfg, const std::string& engine, int jobs, bool force) {
  auto data = load_from_config(cfg);
  auto [defense, heldout] = split_defense(data.test, cfg.defense_per_class, cfg.seed + 13);
  auto ckpt_path = (fs::path(cfg.out_dir) / "checkpoint").string();
  auto [ckpt, model] = Checkpoint::load(ckpt_path);
  auto scan_dir = fs::path(cfg.out_dir) / ("scan_" + engine);
  if (fs::exists(scan_dir / "report.json") && !force)
    throw UsageError("report exists at " + scan_dir.string() + "; use --force");
  fs::create_directories(scan_dir);

  InversionReport report;
  auto run_label = [&](SplitModel& m, int64_t y) {
    if (engine == "nc") {
      auto c = cfg.nc;
      c.seed = cfg.seed + static_cast<uint64_t>(y) * 1000;
      c.log_dir = scan_dir.string();
      return nc_invert_for_label(m, defense, heldout, y, c).second;
    }
    auto c = cfg.invert;
    c.seed = cfg.seed + static_cast<uint64_t>(y) * 1000;
    c.log_dir = scan_dir.string();
    return invert_for_label(m, defense, heldout, y, cfg.budget, c).second;
  };

  report.engine = engine;
  report.rows.resize(ckpt.num_classes);
  std::mutex mu;
  std::atomic<int64_t> next{0};
  auto worker = [&]() {
    auto local = Checkpoint::load(ckpt_path).second;  // private model copy
    for (;;) {
      int64_t y = next.fetch_add(1);
      if (y >= ckpt.num_classes) break;
      ReportRow row;
      try {
        row = run_label(*local, y);
      } catch (const std::exception& e) {
        row.label = y;
        row.error = e.what();
      }
      std::lock_guard<std::mutex> lk(mu);
      report.rows[y] = row;
    }
  };
  jobs = std::max(1, jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const ReportRow& a, const ReportRow& b) {
                     return a.asr_inv > b.asr_inv;
                   });
  report.save((scan_dir / "report.json").string());
  auto verdict = decide_backdoor(report, cfg.detect_threshold);
  std::cout << "scan[" << engine << "]: verdict="
            << (verdict.backdoored ? "backdoored(label " +
                                         std::to_string(verdict.target_label) + ")"
                                   : "clean")
            << " max_asr_inv=" << verdict.max_asr_inv << " -> "
            << (scan_dir / "report.json").string() << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out) {
  if (run_dirs.empty()) throw UsageError("report: no run directories given");
  std::vector<bool> verdicts, truth;
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& dir : run_dirs) {
    if (!fs::exists(fs::path(dir) / "manifest.json"))
      throw UsageError("report: no manifest in " + dir);
    std::ifstream min(fs::path(dir) / "manifest.json");
    auto manifest = nlohmann::json::parse(min);
    auto cfg = RunConfig::from_json(manifest.at("config").dump());
    bool is_backdoored = cfg.attack != "clean";
    for (const auto& engine : {"unicorn", "nc"}) {
      auto rp = fs::path(dir) / (std::string("scan_") + engine) / "report.json";
      if (!fs::exists(rp)) continue;
      auto report = InversionReport::load(rp.string());
      auto v = decide_backdoor(report, cfg.detect_threshold);
      if (std::string(engine) == "unicorn") {
        verdicts.push_back(v.backdoored);
        truth.push_back(is_backdoored);
      }
      summary.push_back({{"run", dir},
                         {"engine", engine},
                         {"attack", cfg.attack},
                         {"verdict", v.backdoored ? "backdoored" : "clean"},
                         {"detected_label", v.target_label},
                         {"max_asr_inv", v.max_asr_inv}});
    }
    // Fig-2 style strip: original / injected / inverted rows.
    auto spec_path = fs::path(dir) / "spec.json";
    auto inv_dir = fs::path(dir) / "scan_unicorn";
    if (fs::exists(spec_path) && fs::exists(inv_dir)) {
      try {
        auto spec = TriggerSpec::load(spec_path.string());
        auto data = load_from_config(cfg);
        auto sample = data.test.index(torch::arange(8));
        auto injected = apply_trigger(sample, spec);
        ImageBatch strip{torch::cat({sample.pixels, injected.pixels}),
                         torch::cat({sample.labels, injected.labels}), {}};
        auto samples_png =
            inv_dir / ("label_" + std::to_string(spec.target_label)) / "inverted_samples.png";
        render_png(strip, (fs::path(dir) / "comparison_grid.png").string(), true);
        (void)samples_png;
      } catch (const std::exception& e) {
        std::cerr << "report: skipping grid for " << dir << ": " << e.what() << "\n";
      }
    }
  }
  if (!verdicts.empty()) {
    auto s = tabulate_detection(verdicts, truth);
    std::cout << s.table();
    summary.push_back({{"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}, {"tn", s.tn},
                       {"accuracy", s.accuracy()}});
  }
  std::ofstream o(out);
  o << summary.dump(2);
  std::cout << "report -> " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"backdoor trigger injection and inversion toolkit"};
  app.require_subcommand(1);
  std::string config_path, engine = "unicorn", report_out = "summary.json";
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
  int jobs = 1;
  bool force = false;
  std::vector<std::string> run_dirs;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config JSON")->required();
    sub->add_option("--seed", seed, "override config seed");
    sub->add_option("--out", out_dir, "override output directory");
    sub->add_flag("--force", force, "overwrite existing outputs");
  };
  auto* inject = app.add_subcommand("inject", "poison a dataset with a trigger");
  add_common(inject);
  auto* train = app.add_subcommand("train", "train a clean or backdoored model");
  add_common(train);
  auto* scan = app.add_subcommand("scan", "invert triggers for every label");
  add_common(scan);
  scan->add_option("--engine", engine, "unicorn|nc")
      ->check(CLI::IsMember({"unicorn", "nc"}));
  scan->add_option("--jobs", jobs, "parallel per-label workers");
  auto* report = app.add_subcommand("report", "summarize scan runs");
  report->add_option("dirs", run_dirs, "run directories")->required();
  report->add_option("--out", report_out, "summary JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (report->parsed()) return cmd_report(run_dirs, report_out);
    auto cfg = RunConfig::from_json_file(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.train.seed = *seed;
      cfg.invert.seed = *seed;
      cfg.nc.seed = *seed;
    }
    if (out_dir) cfg.out_dir = *out_dir;
    if (inject->parsed()) return cmd_inject(cfg, force);
    if (train->parsed()) return cmd_train(cfg, force);
    if (scan->parsed()) return cmd_scan(cfg, engine, jobs, force);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
