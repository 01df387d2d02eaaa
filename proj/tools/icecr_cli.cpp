// Command-line driver: generate-truth, train, sweep, evaluate, plot.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "icecr/experiment.hpp"
#include "icecr/io.hpp"

namespace fs = std::filesystem;
using namespace icecr;

namespace {

enum ExitCode { ok = 0, failure = 1, usage = 2, unconverged = 3, io_error = 4 };

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> observer, shape, activation, optimizer;
  std::optional<double> noise;
  std::optional<int> max_iterations;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON experiment config (defaults when omitted)");
    app->add_option("--seed", seed, "network initialization seed");
    app->add_option("--observer", observer, "interior | surface | surface-borehole");
    app->add_option("--noise", noise, "observation noise proportion");
    app->add_option("--shape", shape, "hidden widths, e.g. 4x4");
    app->add_option("--activation", activation, "tanh | relu | softplus");
    app->add_option("--optimizer", optimizer, "bfgs | tr-bfgs");
    app->add_option("--max-iterations", max_iterations, "optimizer iteration cap");
  }

  /// Flags take precedence over config keys.
  [[nodiscard]] ExperimentFile load() const {
    ExperimentFile e = config.empty() ? ExperimentFile{} : load_experiment(config);
    auto& t = e.training;
    if (seed) t.seed = *seed;
    if (observer) t.observer = parse_observer(*observer);
    if (noise) t.noise = *noise;
    if (shape) t.hidden = parse_shape(*shape);
    if (activation) t.activation = parse_activation(*activation);
    if (optimizer) t.optimizer = parse_optimizer(*optimizer);
    if (max_iterations) t.optimizer_settings.max_iterations = *max_iterations;
    return e;
  }
};

TruthData obtain_truth(const std::string& truth_dir, const ExperimentFile& e) {
  if (!truth_dir.empty()) {
    auto t = load_truth(truth_dir);
    t.experiment.training = e.training;
    t.experiment.sweep = e.sweep;
    return t;
  }
  return generate_truth(e);
}

void write_run(const fs::path& out, const TruthData& truth, const RunArtifacts& a) {
  write_text_file_atomic(out / "record.json", to_json(a.record).dump(2) + "\n");
  Table rmse{{"j2", "phi", "error"}, {}};
  for (Eigen::Index k = 0; k < a.invariant.nodes.rows(); ++k)
    rmse.rows.push_back({a.invariant.nodes(k, 0), a.invariant.nodes(k, 1), a.invariant.error(k)});
  write_text_file_atomic(out / "rmse_map.csv", format_table(rmse));
  write_text_file_atomic(out / "topology.csv", format_table(topology_table(truth.disc->mesh())));
  if (a.delta_phi.size() > 0) {
    write_text_file_atomic(out / "delta_phi.csv", format_table(vertex_table(truth.disc->mesh(), a.delta_phi, "delta_phi")));
    fs::create_directories(out / "fields");
    dump_fields(out / "fields", *truth.disc, a.final_state);
  }
}

RunRecord load_record(const std::string& path) {
  try {
    return run_record_from_json(json::parse(read_text_file(path)));
  } catch (const json::exception& e) {
    throw IoError("malformed run record '" + path + "': " + e.what());
  }
}

void plot_dir(const fs::path& dir) {
  int made = 0;
  if (fs::exists(dir / "correlation.csv")) {
    std::map<std::string, svg::Series> by_observer;
    std::istringstream in(read_text_file(dir / "correlation.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string obs, noise, e, i;
      std::getline(ss, obs, ',');
      std::getline(ss, noise, ',');
      std::getline(ss, e, ',');
      std::getline(ss, i, ',');
      auto& s = by_observer[obs];
      s.label = obs;
      s.x.push_back(std::stod(e));
      s.y.push_back(std::stod(i));
    }
    std::vector<svg::Series> series;
    for (auto& [k, s] : by_observer) series.push_back(s);
    write_text_file_atomic(dir / "correlation.svg",
                           svg::scatter_loglog(series, "final experimental loss", "final invariant loss"));
    ++made;
  }
  if (fs::exists(dir / "rmse_map.csv")) {
    const auto t = load_table(dir / "rmse_map.csv");
    write_text_file_atomic(dir / "rmse_map.svg", svg::grid_heatmap(t.values("j2"), t.values("phi"), t.values("error"),
                                                                   "J2", "phi", "learned minus true rate"));
    ++made;
  }
  if (fs::exists(dir / "delta_phi.csv") && fs::exists(dir / "topology.csv")) {
    const auto d = load_table(dir / "delta_phi.csv");
    const auto topo = load_table(dir / "topology.csv");
    std::vector<Eigen::Vector2d> v;
    for (const auto& r : d.rows) v.emplace_back(r[0], r[1]);
    std::vector<std::array<int, 3>> tris;
    for (const auto& r : topo.rows) tris.push_back({int(r[1]), int(r[2]), int(r[3])});
    write_text_file_atomic(dir / "delta_phi.svg", svg::triangle_field(v, tris, d.values("delta_phi"), "delta phi"));
    ++made;
  }
  if (made == 0) throw IoError("no plottable tables in '" + dir.string() + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Damage constitutive relation learning on a 2D ice dome"};
  app.require_subcommand(1);

  Overrides gen_o, train_o, sweep_o, eval_o;
  std::string gen_out, train_out, train_truth, sweep_out, sweep_truth, eval_truth, eval_record, plot_in;
  int sweep_threads = 0;
  bool eval_ground_truth = false;
  std::string train_init = "random";

  auto* gen = app.add_subcommand("generate-truth", "solve the dome with the ground-truth rate and save it");
  gen_o.add(gen);
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train one network");
  train_o.add(train);
  train->add_option("--truth", train_truth, "directory from generate-truth (regenerated when omitted)");
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--init", train_init, "random (seeded, then made feasible) | zero")
      ->check(CLI::IsMember({"random", "zero"}));

  auto* sweep = app.add_subcommand("sweep", "run the hyperparameter sweep (resumable)");
  sweep_o.add(sweep);
  sweep->add_option("--truth", sweep_truth, "directory from generate-truth (regenerated when omitted)");
  sweep->add_option("--out", sweep_out, "output directory")->required();
  sweep->add_option("--threads", sweep_threads, "worker threads (default: ICECR_THREADS or 1)");

  auto* eval = app.add_subcommand("evaluate", "recompute losses of a saved run record");
  eval_o.add(eval);
  eval->add_option("--truth", eval_truth, "directory from generate-truth")->required();
  auto* rec_opt = eval->add_option("--record", eval_record, "record.json from train or sweep");
  auto* gt_flag = eval->add_flag("--ground-truth", eval_ground_truth, "score the ground-truth rate itself");
  rec_opt->excludes(gt_flag);
  eval->callback([&] {
    if (eval_record.empty() && !eval_ground_truth) throw CLI::RequiredError("--record or --ground-truth");
  });

  auto* plot = app.add_subcommand("plot", "render SVG figures from tables in a directory");
  plot->add_option("--in", plot_in, "directory with correlation.csv, rmse_map.csv or delta_phi.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ok : usage;
  }

  try {
    if (*gen) {
      const auto e = gen_o.load();
      const auto t = generate_truth(e);
      save_truth(gen_out, t);
      std::cout << "truth: " << t.outcome.newton_iterations << " Newton iterations, relative residual "
                << format_double(t.outcome.relative_residual) << ", " << t.samples.size() << " invariant samples\n";
    } else if (*train) {
      const auto e = train_o.load();
      const auto t = obtain_truth(train_truth, e);
      const auto a = train_init == "zero"
                         ? train_from(t, e.training, MlpParams::from_hidden(e.training.hidden, e.training.activation))
                         : icecr::train(t, e.training);
      write_run(train_out, t, a);
      std::cout << a.record.key() << ": exp " << format_double(a.record.final_exp_loss) << " inv "
                << format_double(a.record.final_inv_loss) << " " << to_string(a.record.termination) << "\n";
    } else if (*sweep) {
      const auto e = sweep_o.load();
      const auto t = obtain_truth(sweep_truth, e);
      const int threads = sweep_threads > 0 ? sweep_threads : sweep_thread_count();
      const auto records = run_sweep(t, e.sweep, e.training, fs::path(sweep_out) / "runs", threads);
      write_text_file_atomic(fs::path(sweep_out) / "aggregate.csv", aggregate_table(records));
      write_text_file_atomic(fs::path(sweep_out) / "correlation.csv", correlation_table(records));
      std::cout << records.size() << " runs\n";
    } else if (*eval) {
      const auto e = eval_o.load();
      const auto t = obtain_truth(eval_truth, e);
      json out;
      if (eval_ground_truth) {
        const auto rate = truth_rate(t.config());
        out = to_json(evaluate_rate(t, rate, e.training.observer, e.training.noise));
        out["candidate"] = "ground-truth";
      } else {
        const auto rec = load_record(eval_record);
        const auto params = MlpParams::from_hidden(rec.hidden, rec.activation)
                                .with_flat(Eigen::Map<const Eigen::VectorXd>(
                                    rec.final_params.data(), static_cast<Eigen::Index>(rec.final_params.size())));
        const MlpRate rate(params, t.scaler);
        const auto cr = neural_cr(params, t.scaler, 2, true);
        out = to_json(evaluate_rate(t, rate, rec.observer, rec.noise, &cr));
        out["candidate"] = rec.key();
      }
      std::cout << out.dump(2) << "\n";
    } else if (*plot) {
      plot_dir(plot_in);
    }
  } catch (const DegenerateData& e) {
    std::cerr << "error: " << e.what() << "\n";
    return unconverged;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return io_error;
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failure;
  }
  return ok;
}
