// Command-line entry point: gen-world, train, eval, annotate, ablate, and the
// stub-judge testing aid. Binds the library modules into reproducible,
// file-backed experiments.

#include <cstdio>
#include <unistd.h>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "steptool/io.hpp"
#include "steptool/judge.hpp"
#include "steptool/oracle.hpp"

namespace fs = std::filesystem;
using namespace steptool;

namespace {

int log_verbosity() {
  const char* env = std::getenv("STEPTOOL_LOG");
  std::string lvl = env ? env : "info";
  if (lvl == "quiet") return 0;
  if (lvl == "debug") return 2;
  return 1;
}

void log_info(const std::string& msg) {
  if (log_verbosity() >= 1) std::cerr << "[steptool] " << msg << "\n";
}

ToolWorld load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open world file: " + path);
  nlohmann::json j;
  in >> j;
  return world_from_json(j);
}

std::pair<PolicyParams, ValueParams> load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint file: " + path);
  nlohmann::json j;
  in >> j;
  return checkpoint_from_json(j);
}

// ---------------------------------------------------------------------------
// train / ablate internals

struct TrainArtifacts {
  TrainResult result;
  ToolWorld world;
};

TrainArtifacts run_training(const ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  RunLock lock(out_dir);

  ToolWorld world = generate_world(cfg.world, cfg.world_seed);
  atomic_write(out_dir / "world.json", world_to_canonical_json(world) + "\n");
  atomic_write(out_dir / "resolved_config.json", experiment_config_to_json(cfg).dump(2) + "\n");

  std::ostringstream csv;
  csv << metrics_csv_header() << "\n";
  JsonlWriter events(out_dir / "events.jsonl");

  TrainResult result = train(
      world, cfg.train,
      [&](int iter, const PolicyParams& p, const ValueParams& v, const MetricsRow& row) {
        csv << metrics_csv_row(row) << "\n";
        events.write({{"event", "iteration"},
                      {"iteration", row.iteration},
                      {"mean_return", row.mean_return},
                      {"pass_rate", row.pass_rate},
                      {"tool_success_rate", row.tool_success_rate},
                      {"mean_kl", row.mean_kl},
                      {"clip_fraction", row.clip_fraction},
                      {"value_loss", row.value_loss}});
        if ((iter + 1) % cfg.checkpoint_interval == 0)
          atomic_write(out_dir / ("checkpoint_" + std::to_string(iter + 1) + ".json"),
                       checkpoint_to_json(p, v).dump() + "\n");
        if (log_verbosity() >= 2)
          std::cerr << "[steptool] iter " << iter << " pass_rate " << row.pass_rate << "\n";
      });

  atomic_write(out_dir / "metrics.csv", csv.str());
  atomic_write(out_dir / "checkpoint.json",
               checkpoint_to_json(result.params, result.vparams).dump() + "\n");
  events.flush();
  return {std::move(result), std::move(world)};
}

int first_iteration_reaching(const std::vector<MetricsRow>& rows, double threshold) {
  for (const MetricsRow& r : rows)
    if (r.pass_rate >= threshold) return r.iteration;
  return -1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"step-grained tool-learning experiments"};
  app.require_subcommand(1);

  // gen-world -------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-world", "generate a world and print/write its JSON");
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 7;
  gen->add_option("--config", gen_config, "experiment config JSON (world section used)");
  gen->add_option("--seed", gen_seed, "world seed (overrides the config)");
  gen->add_option("--out", gen_out, "output path (stdout when omitted)");

  // train -------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "train a policy and write run artifacts");
  std::string tr_config, tr_out;
  tr->add_option("--config", tr_config, "experiment config JSON")->required();
  tr->add_option("--out-dir", tr_out, "output directory (overrides config io.out_dir)");

  // eval --------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a world");
  std::string ev_world, ev_ckpt, ev_strategy = "sequential", ev_decode = "grammar", ev_out;
  int ev_runs = 3, ev_width = 3, ev_budget = 24;
  bool ev_greedy = false;
  double ev_unsure = 0.0, ev_temperature = 1.0;
  std::uint64_t ev_seed = 11;
  ev->add_option("--world", ev_world, "world JSON path")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint JSON path")->required();
  ev->add_option("--strategy", ev_strategy, "sequential | dfs");
  ev->add_flag("--greedy", ev_greedy, "greedy decoding (sequential strategy)");
  ev->add_option("--width", ev_width, "dfs beam width");
  ev->add_option("--budget", ev_budget, "dfs expansion budget");
  ev->add_option("--runs", ev_runs, "rollouts per task");
  ev->add_option("--seed", ev_seed, "evaluation rng seed");
  ev->add_option("--decode", ev_decode, "free | grammar");
  ev->add_option("--temperature", ev_temperature, "softmax temperature");
  ev->add_option("--unsure-weight", ev_unsure, "pass-rate credit for Unsure outcomes");
  ev->add_option("--out", ev_out, "report path (stdout when omitted)");
  std::string ev_dump;
  ev->add_option("--dump-trajectories", ev_dump,
                 "also write one greedy sequential trajectory per task as JSONL");

  // annotate ------------------------------------------------------------
  auto* an = app.add_subcommand("annotate", "annotate trajectories with step rewards");
  std::string an_world, an_traj, an_mode = "oracle", an_judge, an_out;
  double an_alpha = 1.0;
  an->add_option("--world", an_world, "world JSON path")->required();
  an->add_option("--trajectories", an_traj, "trajectory JSONL path")->required();
  an->add_option("--mode", an_mode, "oracle | external");
  an->add_option("--judge-cmd", an_judge, "external judge command (reads prompt on stdin)");
  an->add_option("--alpha", an_alpha, "SuccCalling weight in the normalization");
  an->add_option("--out", an_out, "output JSONL path (stdout when omitted)");

  // ablate -----------------------------------------------------------------
  auto* ab = app.add_subcommand("ablate", "train all ablation modes on shared seeds");
  std::string ab_config, ab_out;
  double ab_threshold = 0.9;
  ab->add_option("--config", ab_config, "experiment config JSON")->required();
  ab->add_option("--out-dir", ab_out, "output directory")->required();
  ab->add_option("--threshold", ab_threshold, "pass-rate threshold for the comparison table");

  // stub-judge ---------------------------------------------------------
  auto* sj = app.add_subcommand(
      "stub-judge", "deterministic external-judge stand-in: prompt on stdin, JSON on stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      ExperimentConfig cfg;
      if (!gen_config.empty()) cfg = load_experiment_config(gen_config);
      if (gen->count("--seed") || gen_config.empty()) cfg.world_seed = gen_seed;
      ToolWorld world = generate_world(cfg.world, cfg.world_seed);
      std::string text = world_to_canonical_json(world) + "\n";
      if (gen_out.empty())
        std::cout << text;
      else
        atomic_write(gen_out, text);
      return 0;
    }

    if (tr->parsed()) {
      ExperimentConfig cfg = load_experiment_config(tr_config);
      if (!tr_out.empty()) cfg.out_dir = tr_out;
      log_info("training into " + cfg.out_dir);
      TrainArtifacts art = run_training(cfg, cfg.out_dir);
      log_info("final pass_rate " +
               std::to_string(art.result.metrics.empty() ? 0.0
                                                         : art.result.metrics.back().pass_rate));
      return 0;
    }

    if (ev->parsed()) {
      ToolWorld world = load_world(ev_world);
      auto [params, vparams] = load_checkpoint(ev_ckpt);
      (void)vparams;
      StrategySpec strat;
      strat.kind = ev_strategy;
      if (strat.kind != "sequential" && strat.kind != "dfs")
        throw ConfigError("eval strategy must be 'sequential' or 'dfs'");
      strat.greedy = ev_greedy;
      strat.width = ev_width;
      strat.budget = ev_budget;
      strat.unsure_weight = ev_unsure;
      strat.decode.mode = decode_mode_from_string(ev_decode);
      strat.decode.temperature = ev_temperature;
      std::vector<int> tasks;
      for (size_t i = 0; i < world.tasks.size(); ++i) tasks.push_back(static_cast<int>(i));
      Rng rng(ev_seed);
      EvalReport rep = pass_rate(world, params, tasks, strat, ev_runs, rng);
      if (!ev_dump.empty()) {
        std::ostringstream lines;
        for (int task : tasks) {
          Rng dump_rng(ev_seed);
          Trajectory traj =
              rollout_sequential(world, params, task, dump_rng, /*greedy=*/true, strat.decode);
          lines << trajectory_to_json(world, traj, /*alpha=*/1.0).dump() << "\n";
        }
        atomic_write(ev_dump, lines.str());
      }
      std::string text = eval_report_to_json(rep).dump(2) + "\n";
      if (ev_out.empty())
        std::cout << text;
      else
        atomic_write(ev_out, text);
      return 0;
    }

    if (an->parsed()) {
      if (an_mode != "oracle" && an_mode != "external")
        throw ConfigError("annotate mode must be 'oracle' or 'external'");
      if (an_mode == "external" && an_judge.empty())
        throw ConfigError("annotate --mode external requires --judge-cmd");
      ToolWorld world = load_world(an_world);
      std::ifstream in(an_traj);
      if (!in) throw IoError("cannot open trajectory file: " + an_traj);
      std::ostringstream out;
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        Trajectory traj = trajectory_from_json(world, nlohmann::json::parse(line));
        AnnotationRecord rec;
        if (an_mode == "oracle") {
          rec = oracle_annotation(world, traj);
        } else {
          AnnotationRequest req = serialize_annotation_request(world, traj);
          rec = parse_annotation_response(run_judge_command(an_judge, req.prompt));
        }
        traj.rewards = apply_annotation(traj, rec, an_alpha);
        nlohmann::json j;
        j["task_id"] = traj.task_id;
        j["succeed_tool_calling"] = rec.succeed_tool_calling;
        j["contribution_to_final_answer"] = rec.contribution_to_final_answer;
        j["final_answer_status"] = to_string(rec.final_answer_status);
        nlohmann::json norm = nlohmann::json::array();
        for (const StepReward& r : traj.rewards) norm.push_back(r.normalized);
        j["normalized_rewards"] = norm;
        j["alpha"] = an_alpha;
        out << j.dump() << "\n";
      }
      if (an_out.empty())
        std::cout << out.str();
      else
        atomic_write(an_out, out.str());
      return 0;
    }

    if (ab->parsed()) {
      ExperimentConfig cfg = load_experiment_config(ab_config);
      std::ostringstream cmp;
      cmp << "mode,final_pass_rate,iterations_to_threshold\n";
      for (AblationMode mode : {AblationMode::None, AblationMode::ZeroStepRewards,
                                AblationMode::SubTrajectoryPpo}) {
        ExperimentConfig run_cfg = cfg;  // shared world/policy/rollout seeds
        run_cfg.train.ablation_mode = mode;
        fs::path dir = fs::path(ab_out) / to_string(mode);
        log_info(std::string("ablation mode ") + to_string(mode));
        TrainArtifacts art = run_training(run_cfg, dir);
        const double final_pr =
            art.result.metrics.empty() ? 0.0 : art.result.metrics.back().pass_rate;
        cmp << to_string(mode) << ',' << final_pr << ','
            << first_iteration_reaching(art.result.metrics, ab_threshold) << "\n";
      }
      fs::create_directories(ab_out);
      atomic_write(fs::path(ab_out) / "comparison.csv", cmp.str());
      return 0;
    }

    if (sj->parsed()) {
      std::ostringstream buf;
      buf << std::cin.rdbuf();
      std::cout << stub_judge(buf.str()) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
