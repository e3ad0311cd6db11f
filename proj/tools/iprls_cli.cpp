#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "iprls/checkpoint.hpp"
#include "iprls/config_io.hpp"
#include "iprls/gradient_suite.hpp"
#include "iprls/report.hpp"
#include "iprls/studies.hpp"
#include "iprls/task_data.hpp"

namespace fs = std::filesystem;
using namespace iprls;

namespace {

/// `--config FILE` plus one `--<key>` flag per configuration key. Precedence:
/// defaults < config file < flags.
struct ConfigOptions {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key = value configuration file")->check(CLI::ExistingFile);
    for (const auto& k : config_schema()) {
      options[k.key] = app->add_option("--" + k.key, values[k.key], k.help);
    }
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_file.empty()) apply_config_file(cfg, config_file);
    for (const auto& k : config_schema()) {
      if (options.at(k.key)->count() > 0) k.set(cfg, values.at(k.key));
    }
    cfg.validate();
    return cfg;
  }
};

void print_run(const RunOutcome& run) {
  std::cout << run.label << ": final average " << TransferMatrix::format4(run.final_average()) << ", BWT "
            << TransferMatrix::format4(run.bwt()) << " (" << TransferMatrix::format4(run.seconds) << " s)\n";
}

/// Runs `repeats` seeds of one configuration, writing each run's artifacts
/// (and checkpoints when asked) plus a mean/sd summary for repeats > 1.
std::vector<RunOutcome> run_group(const std::string& label, const RunConfig& cfg, const TaskStream& stream,
                                  std::size_t repeats, const fs::path& dir, bool checkpoints) {
  std::vector<RunOutcome> runs;
  for (std::size_t r = 0; r < repeats; ++r) {
    RunConfig c = cfg;
    c.train.seed = cfg.train.seed + r;
    const fs::path run_dir = repeats == 1 ? dir : dir / ("seed" + std::to_string(c.train.seed));
    std::optional<CheckpointWriter<float>> writer;
    if (checkpoints) writer.emplace(run_dir / "checkpoints");
    RunOutcome run = run_labeled<float>(repeats == 1 ? label : label + ".seed" + std::to_string(c.train.seed), c,
                                        stream, writer ? &*writer : nullptr);
    write_run_artifacts(run_dir, run);
    print_run(run);
    runs.push_back(std::move(run));
  }
  if (repeats > 1) {
    const RepeatSummary s = summarize_repeats(runs);
    write_text(dir / "summary.csv", repeat_csv_header() + repeat_csv_row(label, runs.size(), s));
    write_text(dir / "summary.json", repeat_json(s).dump(2) + "\n");
    std::cout << label << ": final average " << TransferMatrix::format4(s.final_average.mean) << " +- "
              << TransferMatrix::format4(s.final_average.sd) << " over " << runs.size() << " seeds\n";
  }
  return runs;
}

int cmd_train(const RunConfig& cfg, const fs::path& out, std::size_t repeats, bool checkpoints, bool reinit) {
  const TaskStream stream = build_stream(cfg);
  auto runs = run_group("iprls", cfg, stream, repeats, out, checkpoints);
  if (reinit) {
    const auto deltas = forward_transfer_vs_reinit<float>(cfg, stream, runs.front().result);
    write_text(out / "reinit.csv", reinit_csv(deltas));
    std::cout << reinit_csv(deltas);
  }
  write_text(out / "timing.json", timing_json(runs).dump(2) + "\n");
  return 0;
}

int cmd_eval(const fs::path& checkpoint, int task, const std::string& split, const std::string& tsv) {
  const Learner<float> learner = load_checkpoint<float>(checkpoint);
  if (task < 1 || task > learner.tasks_completed()) {
    std::cerr << "checkpoint holds tasks 1.." << learner.tasks_completed() << "\n";
    return 2;
  }
  std::vector<Example> examples;
  if (!tsv.empty()) {
    for (const auto& r : read_tsv(tsv)) examples.push_back(encode_example(r, learner.config().encoder));
  } else {
    const TaskStream stream = build_stream(learner.config());
    const TaskSpec& spec = stream.tasks.at(static_cast<std::size_t>(task - 1));
    examples = split == "dev" ? spec.dev : split == "train" ? spec.train : spec.test;
  }
  const Accuracy acc = learner.evaluate(examples, task);
  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint.string();
  j["task"] = task;
  j["split"] = tsv.empty() ? split : tsv;
  j["correct"] = acc.correct;
  j["total"] = acc.total;
  j["accuracy"] = round4(acc.accuracy());
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const fs::path& out, std::size_t repeats) {
  const TaskStream stream = build_stream(cfg);
  std::vector<RunOutcome> firsts, all;
  std::string summary = repeat_csv_header();
  nlohmann::ordered_json joint = nlohmann::ordered_json::object();
  for (const auto& v : ablation_variants(cfg.train.flags)) {
    RunConfig c = cfg;
    c.train.flags = v.flags;
    auto runs = run_group(v.label, c, stream, repeats, out / v.label, false);
    const RepeatSummary s = summarize_repeats(runs);
    summary += repeat_csv_row(v.label, runs.size(), s);
    joint[v.label] = repeat_json(s);
    RunOutcome first = runs.front();
    first.label = v.label;
    firsts.push_back(first);
    all.insert(all.end(), runs.begin(), runs.end());
  }
  write_text(out / "curves.csv", curves_csv(firsts));
  write_text(out / "ablation.csv", summary);
  write_text(out / "ablation.json", joint.dump(2) + "\n");
  write_text(out / "timing.json", timing_json(all).dump(2) + "\n");
  std::cout << curves_csv(firsts);
  return 0;
}

int cmd_orders(const RunConfig& cfg, const fs::path& out, std::size_t n_orders, std::uint64_t order_seed,
               std::size_t repeats) {
  const TaskStream base = build_stream(cfg);
  const auto orderings = sample_orderings(base.size(), n_orders, order_seed);
  std::ostringstream table;
  table << "label,order,final_average_mean,final_average_sd,bwt_mean,bwt_sd\n";
  std::vector<RunOutcome> all;
  nlohmann::ordered_json joint = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < orderings.size(); ++i) {
    const std::string label = "order" + std::to_string(i + 1);
    const TaskStream s = permute_stream(base, orderings[i]);
    auto runs = run_group(label, cfg, s, repeats, out / label, false);
    const RepeatSummary sum = summarize_repeats(runs);
    std::string order;
    for (std::size_t k = 0; k < orderings[i].size(); ++k) order += (k ? " " : "") + std::to_string(orderings[i][k]);
    table << label << ',' << order << ',' << TransferMatrix::format4(sum.final_average.mean) << ','
          << TransferMatrix::format4(sum.final_average.sd) << ',' << TransferMatrix::format4(sum.bwt.mean) << ','
          << TransferMatrix::format4(sum.bwt.sd) << '\n';
    nlohmann::ordered_json e = repeat_json(sum);
    e["label"] = label;
    e["order"] = orderings[i];
    joint.push_back(std::move(e));
    all.insert(all.end(), runs.begin(), runs.end());
  }
  write_text(out / "orders.csv", table.str());
  write_text(out / "orders.json", joint.dump(2) + "\n");
  write_text(out / "timing.json", timing_json(all).dump(2) + "\n");
  std::cout << table.str();
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  const GradSuiteResult r = run_gradient_suite(seed);
  std::printf("%-20s %-14s %-10s %s\n", "case", "max_rel_err", "status", "worst_input");
  for (const auto& c : r.cases) {
    std::printf("%-20s %-14.3e %-10s %s\n", c.name.c_str(), c.max_rel_error, c.max_rel_error < r.tolerance ? "ok" : "FAIL",
                c.worst_input.c_str());
  }
  std::printf("total %.2f s, tolerance %.0e: %s\n", r.seconds(), r.tolerance, r.passed() ? "PASS" : "FAIL");
  return r.passed() ? 0 : 1;
}

int cmd_gen_data(const RunConfig& cfg, const fs::path& out) {
  const auto raw = generate_synthetic_raw(cfg.stream.tasks, cfg.stream.data_seed, cfg.stream.shared_signal,
                                          cfg.stream.domain_drift, cfg.stream.train_size, cfg.stream.dev_size,
                                          cfg.stream.test_size);
  fs::create_directories(out);
  std::ostringstream manifest;
  manifest << "# name path\n";
  for (const auto& t : raw) {
    std::vector<RawExample> rows = t.train;
    rows.insert(rows.end(), t.dev.begin(), t.dev.end());
    rows.insert(rows.end(), t.test.begin(), t.test.end());
    const std::string file = t.name + ".tsv";
    write_tsv(out / file, rows);
    manifest << t.name << ' ' << file << '\n';
  }
  write_text(out / "manifest.txt", manifest.str());
  std::cout << "wrote " << raw.size() << " tasks to " << out.string() << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const fs::path& out) {
  std::vector<RunOutcome> runs;
  for (const auto& path : inputs) {
    const Json j = Json::parse(read_text(path));
    RunOutcome r;
    r.label = j.value("label", fs::path(path).stem().string());
    r.task_names = j.at("task_names").get<std::vector<std::string>>();
    r.result.matrix = matrix_from_report(j);
    std::cout << "# " << r.label << " (" << path << ")\n" << r.result.matrix.to_csv(r.task_names);
    std::cout << "final average " << TransferMatrix::format4(r.final_average()) << ", BWT "
              << TransferMatrix::format4(r.bwt()) << "\n\n";
    runs.push_back(std::move(r));
  }
  const std::string curves = curves_csv(runs);
  std::cout << curves;
  if (!out.empty()) write_text(out, curves);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifelong text classification with iterative pruning and uncertainty regularization"};
  app.require_subcommand(1);

  ConfigOptions train_cfg, ablate_cfg, orders_cfg, gen_cfg;
  std::string out = "run";
  std::size_t repeats = 1;
  bool no_checkpoints = false, reinit = false;
  auto* train = app.add_subcommand("train", "learn a task stream and write its transfer matrix and report");
  train_cfg.attach(train);
  train->add_option("--out", out, "output directory");
  train->add_option("--repeats", repeats, "runs with consecutive seeds, summarized as mean +- sd")->check(CLI::PositiveNumber);
  train->add_flag("--no-checkpoints", no_checkpoints, "skip per-task checkpoints");
  train->add_flag("--reinit", reinit, "also train a fresh model per task and report the difference");

  std::string checkpoint, split = "test", tsv;
  int task = 1;
  auto* eval = app.add_subcommand("eval", "evaluate one task of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--task", task, "task id (1-based)")->required();
  eval->add_option("--split", split, "train|dev|test of the checkpoint's stream")->check(CLI::IsMember({"train", "dev", "test"}));
  eval->add_option("--tsv", tsv, "evaluate on a label<TAB>text file instead")->check(CLI::ExistingFile);

  auto* ablate = app.add_subcommand("ablate", "full, no_IP, no_REG and no_PRF runs on the same data and seeds");
  ablate_cfg.attach(ablate);
  ablate->add_option("--out", out, "output directory");
  ablate->add_option("--repeats", repeats, "seeds per variant")->check(CLI::PositiveNumber);

  std::size_t n_orders = 5;
  std::uint64_t order_seed = 1;
  auto* orders = app.add_subcommand("orders", "runs over randomly sampled task orderings");
  orders_cfg.attach(orders);
  orders->add_option("--out", out, "output directory");
  orders->add_option("--n-orders", n_orders, "number of orderings")->check(CLI::PositiveNumber);
  orders->add_option("--order-seed", order_seed, "ordering sampler seed");
  orders->add_option("--repeats", repeats, "seeds per ordering")->check(CLI::PositiveNumber);

  std::uint64_t grad_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  gradcheck->add_option("--seed", grad_seed, "seed of the random test points");

  std::string data_out = "data";
  auto* gen = app.add_subcommand("gen-data", "write the synthetic stream as TSV files plus a manifest");
  gen_cfg.attach(gen);
  gen->add_option("--out", data_out, "output directory");

  std::vector<std::string> inputs;
  std::string curves_out;
  auto* report = app.add_subcommand("report", "summarize RunReport files and print their curves side by side");
  report->add_option("inputs", inputs, "report.json files")->required()->check(CLI::ExistingFile);
  report->add_option("--curves", curves_out, "also write the side-by-side curves CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_cfg.resolve(), out, repeats, !no_checkpoints, reinit);
    if (eval->parsed()) return cmd_eval(checkpoint, task, split, tsv);
    if (ablate->parsed()) return cmd_ablate(ablate_cfg.resolve(), out, repeats);
    if (orders->parsed()) return cmd_orders(orders_cfg.resolve(), out, n_orders, order_seed, repeats);
    if (gradcheck->parsed()) return cmd_gradcheck(grad_seed);
    if (gen->parsed()) return cmd_gen_data(gen_cfg.resolve(), data_out);
    if (report->parsed()) return cmd_report(inputs, curves_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
