#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "icecr/experiment.hpp"

using namespace icecr;
namespace fs = std::filesystem;

namespace {

ExperimentFile small_experiment() {
  ExperimentFile e;
  e.config.mesh.nx = 6;
  e.config.mesh.ny = 3;
  return e;
}

const TruthData& shared_truth() {
  static const TruthData t = generate_truth(small_experiment());
  return t;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("icecr_test_experiment_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

MlpParams dead_relu(const std::vector<int>& hidden) {
  auto p = mlp_init(5, MlpParams::from_hidden(hidden, Activation::relu).layer_sizes(), Activation::relu);
  p.bias(0).setConstant(-1e3);
  return p;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  ExperimentFile e;
  e.config.mesh.nx = 9;
  e.config.damage.gamma_f = 0.25;
  e.training.hidden = {3, 5};
  e.training.activation = Activation::softplus;
  e.training.observer = Observer::surface_plus_borehole;
  e.sweep.seeds = {7, 8};
  e.noise_seed = 99;
  const json j = to_json(e);
  EXPECT_EQ(to_json(experiment_from_json(j)), j);
  EXPECT_EQ(to_json(experiment_from_json(json::object())), to_json(ExperimentFile{}));
}

TEST(Config, RejectsUnknownSectionsAndBadValues) {
  EXPECT_THROW(experiment_from_json(json{{"meshh", json::object()}}), ContractViolation);
  EXPECT_NO_THROW(experiment_from_json(json{{"notes", "free text"}}));
  EXPECT_THROW(experiment_from_json(json{{"training", {{"activation", "sigmoid"}}}}), ContractViolation);
}

TEST(Config, ParseErrorsReportLineAndColumn) {
  const auto dir = scratch("parse");
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << "{\n  \"mesh\": {\n    \"nx\": ,\n  }\n}\n";
  try {
    load_experiment(dir / "c.json");
    FAIL() << "expected IoError";
  } catch (const IoError& err) {
    EXPECT_NE(std::string(err.what()).find("line 3"), std::string::npos) << err.what();
  }
  EXPECT_THROW(load_experiment(dir / "missing.json"), IoError);
}

TEST(Config, ShapeLabels) {
  EXPECT_EQ(shape_label({4, 4}), "4x4");
  EXPECT_EQ(parse_shape("4x4"), (std::vector<int>{4, 4}));
  EXPECT_EQ(parse_shape("2,2,2"), (std::vector<int>{2, 2, 2}));
  EXPECT_THROW(parse_shape("4xa"), ContractViolation);
  EXPECT_THROW(parse_shape(""), ContractViolation);
}

TEST(Truth, ManifestAndInvariants) {
  const auto& t = shared_truth();
  EXPECT_TRUE(t.outcome.converged);
  EXPECT_EQ(t.observations.size(), 3u);
  const auto& d = *t.disc;
  std::size_t excluded = 0;
  for (char c : d.mesh().corner_excluded) excluded += c != 0;
  EXPECT_EQ(t.samples.size(), (d.mesh().cell_count() - excluded) * d.quad_per_cell());
  // damage enters through the bed and front; the top surface carries phi = 0
  for (const auto& be : d.mesh().boundary) {
    if (!be.top_surface) continue;
    for (int v : d.mesh().edges[static_cast<std::size_t>(be.edge)]) EXPECT_EQ(t.state()(d.phi_dof(v)), 0.0);
  }
  EXPECT_GT(t.state().tail(static_cast<Eigen::Index>(d.mesh().vertex_count())).maxCoeff(), 0.0);
}

TEST(Truth, SaveLoadIsExact) {
  const auto& t = shared_truth();
  const auto dir = scratch("saveload");
  save_truth(dir, t);
  for (const char* f : {"config.json", "truth.json", "state.csv", "glen_state.csv", "invariants.csv", "observations_0.csv",
                        "observations_0.01.csv", "observations_0.05.csv", "topology.csv", "velocity.csv",
                        "pressure.csv", "damage.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto u = load_truth(dir);
  EXPECT_EQ(u.state(), t.state());
  EXPECT_EQ(u.glen_guess, t.glen_guess);
  EXPECT_EQ(u.scaler.mean, t.scaler.mean);
  EXPECT_EQ(u.scaler.std, t.scaler.std);
  EXPECT_EQ(u.gamma_u, t.gamma_u);
  for (const auto& [delta, obs] : t.observations) EXPECT_EQ(u.observations.at(delta).w, obs.w);
  const auto dir2 = scratch("saveload2");
  save_truth(dir2, u);
  for (const auto& entry : fs::directory_iterator(dir))
    EXPECT_EQ(slurp(entry.path()), slurp(dir2 / entry.path().filename())) << entry.path().filename();
  EXPECT_THROW(load_truth(scratch("absent")), IoError);
}

TEST(Truth, RegenerationIsBitwiseIdentical) {
  const auto a = scratch("regen_a"), b = scratch("regen_b");
  save_truth(a, generate_truth(small_experiment()));
  save_truth(b, generate_truth(small_experiment()));
  for (const auto& entry : fs::directory_iterator(a))
    EXPECT_EQ(slurp(entry.path()), slurp(b / entry.path().filename())) << entry.path().filename();
}

TEST(Truth, DamageFreeConfigHasZeroDamage) {
  auto e = small_experiment();
  e.config.damage.gamma_f = e.config.damage.gamma_h = 0.0;
  const auto t = generate_truth(e);
  const auto nv = static_cast<Eigen::Index>(t.disc->mesh().vertex_count());
  // no source and homogeneous data: only LU round-off remains
  EXPECT_LT(t.state().tail(nv).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(t.scaler.std(1), 1.0);
  // the zero network reproduces this truth: training stops at once
  TrainingSettings s;
  s.hidden = {2};
  const auto a = train_from(t, s, MlpParams::from_hidden(s.hidden, s.activation));
  EXPECT_EQ(a.record.termination, Termination::gradient_tol);
  EXPECT_EQ(a.record.iterations, 0);
  EXPECT_LT(a.record.final_exp_loss, 1e-20);
  EXPECT_EQ(a.record.final_inv_loss, 0.0);
}

TEST(Training, SmokeRunHasFiniteLossesAndIsDeterministic) {
  const auto& t = shared_truth();
  TrainingSettings s;
  s.hidden = {2};
  s.optimizer_settings.max_iterations = 4;
  const auto a = train(t, s);
  EXPECT_TRUE(a.record.error.empty());
  EXPECT_TRUE(std::isfinite(a.record.final_exp_loss));
  EXPECT_TRUE(std::isfinite(a.record.final_inv_loss));
  EXPECT_LE(a.record.final_exp_loss, a.record.initial_exp_loss);
  EXPECT_GT(a.record.feasible_scale, 0.0);
  EXPECT_EQ(a.delta_phi.size(), static_cast<Eigen::Index>(t.disc->mesh().vertex_count()));
  const auto b = train(t, s);
  EXPECT_EQ(to_json(a.record).dump(), to_json(b.record).dump());
  EXPECT_EQ(run_record_from_json(to_json(a.record)).final_params, a.record.final_params);
}

TEST(Training, DeadReluIsFlaggedAndHasZeroGradient) {
  const auto& t = shared_truth();
  TrainingSettings s;
  s.hidden = {4, 4};
  s.activation = Activation::relu;
  const auto init = dead_relu(s.hidden);
  EXPECT_TRUE(detect_constant_collapse(init, t.scaler, t.grid.nodes()));
  ObjectiveAdapter obj(t, init, t.loss_spec(Observer::interior), t.observation(0.0));
  ASSERT_FALSE(obj.value(init.flatten()).failed);
  const Eigen::VectorXd g = obj.gradient(init.flatten());
  // only the output bias sees the loss
  EXPECT_LT(g.head(g.size() - 1).norm(), 1e-12);
  const auto a = train_from(t, s, init);
  EXPECT_TRUE(a.record.collapse);
  EXPECT_TRUE(detect_constant_collapse(a.params, t.scaler, t.grid.nodes()));
}

TEST(Training, ObjectiveNeverReturnsAFailedStateAsSuccess) {
  const auto& t = shared_truth();
  auto p = mlp_init(1, {2, 2, 1}, Activation::tanh);
  p.bias(1) << 1e6;  // explosive constant damage rate
  ObjectiveAdapter obj(t, p, t.loss_spec(Observer::interior), t.observation(0.0));
  const auto v = obj.value(p.flatten());
  EXPECT_TRUE(v.failed);
  EXPECT_EQ(v.value, default_failed_solve_loss);
}

TEST(Sweep, CountsAndDeterminism) {
  const auto& t = shared_truth();
  SweepSettings sw;
  sw.shapes = {{2}};
  sw.activations = {Activation::tanh};
  sw.optimizers = {OptimizerKind::bfgs};
  sw.observers = {Observer::interior};
  sw.noises = {0.0};
  sw.seeds = {1, 2, 3};
  TrainingSettings base;
  base.optimizer_settings.max_iterations = 2;
  const auto dir = scratch("sweep");
  const auto a = run_sweep(t, sw, base, dir / "runs", 1);
  ASSERT_EQ(a.size(), 3u);
  const auto b = run_sweep(t, sw, base, scratch("sweep_b") / "runs", 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(to_json(a[i]).dump(), to_json(b[i]).dump());
  // resuming reads the stored records
  const auto stamp = fs::last_write_time(dir / "runs" / (a[0].key() + ".json"));
  const auto c = run_sweep(t, sw, base, dir / "runs", 1);
  EXPECT_EQ(fs::last_write_time(dir / "runs" / (a[0].key() + ".json")), stamp);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(to_json(a[i]).dump(), to_json(c[i]).dump());
  auto lines = [](const std::string& text) { return std::count(text.begin(), text.end(), '\n'); };
  const auto agg = aggregate_table(a);
  EXPECT_EQ(lines(agg), 4);
  EXPECT_NE(agg.substr(0, agg.find('\n')).find(",collapse_flag"), std::string::npos);
  // one correlation point per completed run
  std::vector<RunRecord> with_error = a;
  with_error[1].error = "boom";
  EXPECT_EQ(lines(correlation_table(with_error)), 3);
}

TEST(Sweep, ThreadedMatchesSerial) {
  const auto& t = shared_truth();
  SweepSettings sw;
  sw.shapes = {{2}};
  sw.activations = {Activation::tanh, Activation::softplus};
  sw.optimizers = {OptimizerKind::bfgs};
  sw.observers = {Observer::surface};
  sw.noises = {0.01};
  sw.seeds = {4};
  TrainingSettings base;
  base.optimizer_settings.max_iterations = 2;
  const auto a = run_sweep(t, sw, base, scratch("serial"), 1);
  const auto b = run_sweep(t, sw, base, scratch("threaded"), 2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(to_json(a[i]).dump(), to_json(b[i]).dump());
}

TEST(Sweep, FullGridCellCount) {
  SweepSettings s;
  EXPECT_EQ(sweep_cells(s).size(), 6u * 3u * 2u * 3u * 3u * 5u);
}

TEST(Evaluation, GroundTruthAgainstItselfAndZeroNetwork) {
  const auto& t = shared_truth();
  const auto truth = truth_rate(t.config());
  const auto self = evaluate_rate(t, truth, Observer::interior, 0.0);
  EXPECT_EQ(self.invariant.value, 0.0);
  EXPECT_TRUE(self.solve_converged);
  EXPECT_LT(self.experimental_loss, 1e-18);
  EXPECT_LT(self.delta_phi_max, 1e-9);
  const auto params = MlpParams::from_hidden({4, 4}, Activation::tanh);
  const MlpRate zero(params, t.scaler);
  const auto cr = neural_cr(params, t.scaler, 2, true);
  const auto z = evaluate_rate(t, zero, Observer::interior, 0.0, &cr);
  const Eigen::VectorXd s = truth.evaluate(t.grid.nodes()).value;
  EXPECT_NEAR(z.invariant.rmse, std::sqrt(s.squaredNorm() / static_cast<double>(s.size())), 1e-14);
  EXPECT_GT(z.delta_phi_max, 0.0);
  EXPECT_LT(z.equivariance, 1e-10);
}
