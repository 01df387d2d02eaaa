/**
 * @file experiment.hpp
 * @brief Experiment configuration, ground-truth generation, single training runs and sweeps.
 */
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "icecr/adjoint.hpp"
#include "icecr/fem.hpp"
#include "icecr/io.hpp"
#include "icecr/losses.hpp"
#include "icecr/mlp.hpp"
#include "icecr/optimizer.hpp"

namespace icecr {

using json = nlohmann::json;

struct TrainingSettings {
  std::vector<int> hidden{4, 4};
  Activation activation = Activation::tanh;
  OptimizerKind optimizer = OptimizerKind::bfgs;
  Observer observer = Observer::interior;
  double noise = 0.0;
  std::uint64_t seed = 1;
  int feasible_max_halvings = 20;
  OptimizerSettings optimizer_settings;
};

struct SweepSettings {
  std::vector<std::vector<int>> shapes{{2}, {4}, {2, 2}, {4, 4}, {2, 2, 2}, {4, 4, 4}};
  std::vector<Activation> activations{Activation::tanh, Activation::relu, Activation::softplus};
  std::vector<OptimizerKind> optimizers{OptimizerKind::bfgs, OptimizerKind::trust_region_bfgs};
  std::vector<Observer> observers{Observer::interior, Observer::surface, Observer::surface_plus_borehole};
  std::vector<double> noises{0.0, 0.01, 0.05};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

struct ExperimentFile {
  ExperimentConfig config;
  TrainingSettings training;
  SweepSettings sweep;
  InvariantGridSettings grid;
  std::vector<double> noise_levels{0.0, 0.01, 0.05};
  std::uint64_t noise_seed = 1234;
};

// ------------------------------------------------------------------ json mapping

inline std::string shape_label(const std::vector<int>& hidden) {
  std::string s;
  for (std::size_t i = 0; i < hidden.size(); ++i) s += (i ? "x" : "") + std::to_string(hidden[i]);
  return s;
}

inline std::vector<int> parse_shape(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  const char delim = s.find(',') != std::string::npos ? ',' : 'x';
  while (std::getline(ss, tok, delim)) {
    if (tok.empty()) continue;
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ContractViolation("invalid network shape '" + s + "'");
    }
    require(out.back() > 0, "network widths must be positive");
  }
  require(!out.empty(), "network shape must list at least one hidden width");
  return out;
}

inline json to_json(const ExperimentFile& e) {
  const auto& c = e.config;
  json j;
  j["mesh"] = {{"profile", c.mesh.profile == MeshSpec::Profile::flat ? "flat" : "vialov"},
               {"length", c.mesh.length},
               {"thickness", c.mesh.thickness},
               {"front_fraction", c.mesh.front_fraction},
               {"flow_exponent", c.mesh.flow_exponent},
               {"nx", c.mesh.nx},
               {"ny", c.mesh.ny},
               {"borehole_column", c.mesh.borehole_column}};
  j["physics"] = {{"rho", c.rho},
                  {"gravity", {c.gravity.x(), c.gravity.y()}},
                  {"xi", c.xi},
                  {"truth_transition_width", c.truth_transition_width},
                  {"glen", {{"mu", c.glen.mu}, {"n", c.glen.n}, {"eps_reg", c.glen.eps_reg}}},
                  {"damage",
                   {{"gamma_f", c.damage.gamma_f},
                    {"gamma_h", c.damage.gamma_h},
                    {"eps_f", c.damage.eps_f},
                    {"eps_h", c.damage.eps_h},
                    {"zeta", c.damage.zeta},
                    {"n", c.damage.n}}}};
  j["numerics"] = {{"quadrature_order", c.quadrature_order},
                   {"newton_tolerance", c.newton_tolerance},
                   {"newton_max_iterations", c.newton_max_iterations},
                   {"max_halvings", c.max_halvings},
                   {"divergence_factor", c.divergence_factor},
                   {"supg_constant", c.supg_constant},
                   {"supg_velocity_floor", c.supg_velocity_floor}};
  const auto& t = e.training;
  const auto& o = t.optimizer_settings;
  j["training"] = {{"shape", t.hidden},
                   {"activation", to_string(t.activation)},
                   {"optimizer", to_string(t.optimizer)},
                   {"observer", to_string(t.observer)},
                   {"noise", t.noise},
                   {"seed", t.seed},
                   {"feasible_max_halvings", t.feasible_max_halvings},
                   {"gradient_tolerance", o.gradient_tolerance},
                   {"step_tolerance", o.step_tolerance},
                   {"max_iterations", o.max_iterations},
                   {"wolfe_c1", o.c1},
                   {"wolfe_c2", o.c2},
                   {"initial_radius", o.initial_radius}};
  json acts = json::array(), opts = json::array(), obs = json::array();
  for (auto a : e.sweep.activations) acts.push_back(to_string(a));
  for (auto a : e.sweep.optimizers) opts.push_back(to_string(a));
  for (auto a : e.sweep.observers) obs.push_back(to_string(a));
  j["sweep"] = {{"shapes", e.sweep.shapes}, {"activations", acts}, {"optimizers", opts},
                {"observers", obs},         {"noises", e.sweep.noises}, {"seeds", e.sweep.seeds}};
  j["invariant_grid"] = {{"j2_nodes", e.grid.j2_nodes}, {"phi_nodes", e.grid.phi_nodes}, {"margin", e.grid.margin},
                         {"large_regime_max", e.grid.large_regime_max}};
  j["noise_levels"] = e.noise_levels;
  j["noise_seed"] = e.noise_seed;
  return j;
}

namespace detail {
template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

/// Missing keys keep their defaults; unknown keys are ignored except for top-level sections.
inline ExperimentFile experiment_from_json(const json& j) {
  using detail::read;
  ExperimentFile e;
  auto& c = e.config;
  for (const auto& [k, v] : j.items()) {
    static const std::vector<std::string> known{"mesh",  "physics",        "numerics",     "training",
                                                "sweep", "invariant_grid", "noise_levels", "noise_seed",
                                                "notes"};
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ContractViolation("unknown config section '" + k + "'");
    (void)v;
  }
  if (j.contains("mesh")) {
    const auto& m = j.at("mesh");
    std::string profile = "vialov";
    read(m, "profile", profile);
    require(profile == "vialov" || profile == "flat", "mesh.profile must be 'vialov' or 'flat'");
    c.mesh.profile = profile == "flat" ? MeshSpec::Profile::flat : MeshSpec::Profile::vialov;
    read(m, "length", c.mesh.length);
    read(m, "thickness", c.mesh.thickness);
    read(m, "front_fraction", c.mesh.front_fraction);
    read(m, "flow_exponent", c.mesh.flow_exponent);
    read(m, "nx", c.mesh.nx);
    read(m, "ny", c.mesh.ny);
    read(m, "borehole_column", c.mesh.borehole_column);
  }
  if (j.contains("physics")) {
    const auto& p = j.at("physics");
    read(p, "rho", c.rho);
    if (p.contains("gravity")) {
      const auto g = p.at("gravity").get<std::vector<double>>();
      require(g.size() == 2, "physics.gravity must have two components");
      c.gravity = {g[0], g[1]};
    }
    read(p, "xi", c.xi);
    read(p, "truth_transition_width", c.truth_transition_width);
    if (p.contains("glen")) {
      const auto& g = p.at("glen");
      read(g, "mu", c.glen.mu);
      read(g, "n", c.glen.n);
      read(g, "eps_reg", c.glen.eps_reg);
    }
    if (p.contains("damage")) {
      const auto& d = p.at("damage");
      read(d, "gamma_f", c.damage.gamma_f);
      read(d, "gamma_h", c.damage.gamma_h);
      read(d, "eps_f", c.damage.eps_f);
      read(d, "eps_h", c.damage.eps_h);
      read(d, "zeta", c.damage.zeta);
      read(d, "n", c.damage.n);
    }
  }
  if (j.contains("numerics")) {
    const auto& n = j.at("numerics");
    read(n, "quadrature_order", c.quadrature_order);
    read(n, "newton_tolerance", c.newton_tolerance);
    read(n, "newton_max_iterations", c.newton_max_iterations);
    read(n, "max_halvings", c.max_halvings);
    read(n, "divergence_factor", c.divergence_factor);
    read(n, "supg_constant", c.supg_constant);
    read(n, "supg_velocity_floor", c.supg_velocity_floor);
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    auto& tr = e.training;
    if (t.contains("shape")) {
      const auto& s = t.at("shape");
      tr.hidden = s.is_string() ? parse_shape(s.get<std::string>()) : s.get<std::vector<int>>();
    }
    if (t.contains("activation")) tr.activation = parse_activation(t.at("activation").get<std::string>());
    if (t.contains("optimizer")) tr.optimizer = parse_optimizer(t.at("optimizer").get<std::string>());
    if (t.contains("observer")) tr.observer = parse_observer(t.at("observer").get<std::string>());
    read(t, "noise", tr.noise);
    read(t, "seed", tr.seed);
    read(t, "feasible_max_halvings", tr.feasible_max_halvings);
    read(t, "gradient_tolerance", tr.optimizer_settings.gradient_tolerance);
    read(t, "step_tolerance", tr.optimizer_settings.step_tolerance);
    read(t, "max_iterations", tr.optimizer_settings.max_iterations);
    read(t, "wolfe_c1", tr.optimizer_settings.c1);
    read(t, "wolfe_c2", tr.optimizer_settings.c2);
    read(t, "initial_radius", tr.optimizer_settings.initial_radius);
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    auto& sw = e.sweep;
    if (s.contains("shapes")) {
      sw.shapes.clear();
      for (const auto& v : s.at("shapes"))
        sw.shapes.push_back(v.is_string() ? parse_shape(v.get<std::string>()) : v.get<std::vector<int>>());
    }
    if (s.contains("activations")) {
      sw.activations.clear();
      for (const auto& v : s.at("activations")) sw.activations.push_back(parse_activation(v.get<std::string>()));
    }
    if (s.contains("optimizers")) {
      sw.optimizers.clear();
      for (const auto& v : s.at("optimizers")) sw.optimizers.push_back(parse_optimizer(v.get<std::string>()));
    }
    if (s.contains("observers")) {
      sw.observers.clear();
      for (const auto& v : s.at("observers")) sw.observers.push_back(parse_observer(v.get<std::string>()));
    }
    read(s, "noises", sw.noises);
    read(s, "seeds", sw.seeds);
  }
  if (j.contains("invariant_grid")) {
    const auto& g = j.at("invariant_grid");
    read(g, "j2_nodes", e.grid.j2_nodes);
    read(g, "phi_nodes", e.grid.phi_nodes);
    read(g, "margin", e.grid.margin);
    read(g, "large_regime_max", e.grid.large_regime_max);
  }
  read(j, "noise_levels", e.noise_levels);
  read(j, "noise_seed", e.noise_seed);
  e.config.validate();
  return e;
}

/// Parses a config file; syntax errors report line and column.
inline ExperimentFile load_experiment(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& err) {
    const auto pos = std::min<std::size_t>(err.byte == 0 ? 0 : err.byte - 1, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n');
    const auto last_nl = text.rfind('\n', pos == 0 ? 0 : pos - 1);
    const auto col = pos - (last_nl == std::string::npos ? 0 : last_nl + 1) + 1;
    throw IoError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + err.what());
  }
  try {
    return experiment_from_json(j);
  } catch (const json::exception& err) {
    throw IoError(path.string() + ": " + err.what());
  }
}

// ------------------------------------------------------------------ ground truth

struct TruthData {
  ExperimentFile experiment;
  std::shared_ptr<const Discretization> disc;
  SolveOutcome outcome;
  Eigen::VectorXd glen_guess;  ///< zero-damage Glen solution: the initial guess for training solves
  std::vector<InvariantSample> samples;
  InputScaler scaler;
  InvariantDomainGrid grid;
  double gamma_u = 1.0, gamma_p = 1.0;
  std::map<double, ObservationSet> observations;

  [[nodiscard]] const ExperimentConfig& config() const { return experiment.config; }
  [[nodiscard]] const Eigen::VectorXd& state() const { return outcome.state->w; }

  [[nodiscard]] ObservationSet observation(double noise) const {
    const auto it = observations.find(noise);
    if (it != observations.end()) return it->second;
    return add_noise(*disc, state(), noise, experiment.noise_seed);
  }

  [[nodiscard]] LossSpec loss_spec(Observer observer) const {
    LossSpec s;
    s.observer = observer;
    s.gamma_u = gamma_u;
    s.gamma_p = gamma_p;
    return s;
  }
};

/// fit_scaler, except that a column whose spread is at rounding level keeps its mean and gets
/// unit spread. A damage-free truth has phi = 0 up to solver round-off and must still produce a
/// usable scaler.
inline InputScaler fit_truth_scaler(const Eigen::MatrixXd& batch) {
  require(batch.rows() > 0, "cannot fit a scaler to an empty batch");
  InputScaler s{batch.colwise().mean().transpose(), Eigen::VectorXd::Ones(batch.cols())};
  for (Eigen::Index c = 0; c < batch.cols(); ++c) {
    const double sd =
        std::sqrt((batch.col(c).array() - s.mean(c)).square().sum() / static_cast<double>(batch.rows()));
    if (sd > 1e-12 * std::max(1.0, batch.col(c).cwiseAbs().maxCoeff())) s.std(c) = sd;
  }
  return s;
}

/// Derived quantities that depend only on the truth state.
inline void complete_truth(TruthData& t) {
  t.samples = sample_invariants(*t.disc, t.outcome);
  t.scaler = fit_truth_scaler(invariant_matrix(t.samples));
  t.grid = make_invariant_grid(t.samples, t.experiment.grid);
  std::tie(t.gamma_u, t.gamma_p) = set_borehole_scalings(*t.disc, t.state());
  for (double d : t.experiment.noise_levels)
    t.observations[d] = add_noise(*t.disc, t.state(), d, t.experiment.noise_seed);
}

/// Solves the dome with the ground-truth rate. Throws DegenerateData if the solve fails.
inline TruthData generate_truth(const ExperimentFile& e) {
  e.config.validate();
  TruthData t;
  t.experiment = e;
  t.disc = std::make_shared<const Discretization>(build_dome_mesh(e.config.mesh), e.config.quadrature_order);
  const auto glen = glen_solution(*t.disc, e.config);
  if (!glen.converged) throw DegenerateData("Glen initial solve failed: " + to_string(glen.failure_kind));
  t.glen_guess = glen.state->w;
  t.outcome = solve_truth(*t.disc, e.config);
  if (!t.outcome.converged)
    throw DegenerateData("ground-truth solve failed (" + to_string(t.outcome.failure_kind) +
                         ", relative residual " + std::to_string(t.outcome.relative_residual) + ")");
  complete_truth(t);
  return t;
}

/// Writes config, state, observations, samples and field tables. Reloading is bitwise exact.
inline void save_truth(const std::filesystem::path& dir, const TruthData& t) {
  std::filesystem::create_directories(dir);
  write_text_file_atomic(dir / "config.json", to_json(t.experiment).dump(2) + "\n");
  json meta = {{"converged", t.outcome.converged},
               {"newton_iterations", t.outcome.newton_iterations},
               {"relative_residual", t.outcome.relative_residual},
               {"gamma_u", t.gamma_u},
               {"gamma_p", t.gamma_p},
               {"scaler_mean", std::vector<double>(t.scaler.mean.data(), t.scaler.mean.data() + t.scaler.mean.size())},
               {"scaler_std", std::vector<double>(t.scaler.std.data(), t.scaler.std.data() + t.scaler.std.size())},
               {"dofs", t.disc->size()}};
  write_text_file_atomic(dir / "truth.json", meta.dump(2) + "\n");
  auto vec_table = [](const Eigen::VectorXd& v) {
    Table tab{{"index", "value"}, {}};
    for (Eigen::Index i = 0; i < v.size(); ++i) tab.rows.push_back({double(i), v(i)});
    return format_table(tab);
  };
  write_text_file_atomic(dir / "state.csv", vec_table(t.state()));
  write_text_file_atomic(dir / "glen_state.csv", vec_table(t.glen_guess));
  for (const auto& [delta, obs] : t.observations)
    write_text_file_atomic(dir / ("observations_" + format_double(delta) + ".csv"), vec_table(obs.w));
  Table inv{{"j1", "j2", "phi", "weight", "regime", "cell", "x", "y"}, {}};
  for (const auto& s : t.samples)
    inv.rows.push_back({s.j1, s.j2, s.phi, s.weight, s.regime == StrainRegime::large ? 1.0 : 0.0, double(s.cell),
                        s.x.x(), s.x.y()});
  write_text_file_atomic(dir / "invariants.csv", format_table(inv));
  dump_fields(dir, *t.disc, t.state());
}

/// Rebuilds TruthData from a directory written by save_truth.
inline TruthData load_truth(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("truth directory '" + dir.string() + "' does not exist");
  TruthData t;
  t.experiment = load_experiment(dir / "config.json");
  t.disc = std::make_shared<const Discretization>(build_dome_mesh(t.experiment.config.mesh),
                                                  t.experiment.config.quadrature_order);
  auto read_vec = [&](const std::filesystem::path& p) {
    const auto v = load_table(p).values("value");
    if (static_cast<Eigen::Index>(v.size()) != t.disc->size())
      throw IoError(p.string() + ": state size does not match the configured mesh");
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  const json meta = json::parse(read_text_file(dir / "truth.json"));
  t.outcome.converged = meta.at("converged").get<bool>();
  if (!t.outcome.converged) throw DegenerateData("stored ground truth is not converged");
  t.outcome.newton_iterations = meta.at("newton_iterations").get<int>();
  t.outcome.relative_residual = meta.at("relative_residual").get<double>();
  t.outcome.state = ExperimentState{read_vec(dir / "state.csv")};
  t.glen_guess = read_vec(dir / "glen_state.csv");
  complete_truth(t);
  for (auto& [delta, obs] : t.observations) {
    const auto p = dir / ("observations_" + format_double(delta) + ".csv");
    if (std::filesystem::exists(p)) obs.w = read_vec(p);
  }
  return t;
}

// ------------------------------------------------------------------ training

struct RunRecord {
  std::vector<int> hidden;
  Activation activation = Activation::tanh;
  OptimizerKind optimizer = OptimizerKind::bfgs;
  Observer observer = Observer::interior;
  double noise = 0.0;
  std::uint64_t seed = 0;
  double feasible_scale = 1.0;
  double initial_exp_loss = 0.0;
  double initial_inv_loss = 0.0;
  double initial_rmse = 0.0;
  double final_exp_loss = 0.0;
  double final_inv_loss = 0.0;
  double final_rmse = 0.0;
  double final_rmse_small = 0.0;
  double final_rmse_large = 0.0;
  double final_gradient_norm = 0.0;
  Termination termination = Termination::max_iter;
  bool collapse = false;
  int iterations = 0;
  int evaluations = 0;
  int failed_evaluations = 0;
  int warm_solves = 0;
  std::vector<TraceEntry> trace;
  std::vector<double> final_params;
  std::string error;  ///< non-empty when the run raised instead of finishing

  [[nodiscard]] std::string key() const {
    std::ostringstream s;
    s << shape_label(hidden) << "_" << to_string(activation) << "_" << to_string(optimizer) << "_"
      << to_string(observer) << "_" << noise << "_seed" << seed;
    return s.str();
  }
};

inline json to_json(const RunRecord& r) {
  json trace = json::array();
  for (const auto& t : r.trace) trace.push_back({t.loss, t.gradient_norm, t.step_norm});
  return {{"shape", r.hidden},
          {"activation", to_string(r.activation)},
          {"optimizer", to_string(r.optimizer)},
          {"observer", to_string(r.observer)},
          {"noise", r.noise},
          {"seed", r.seed},
          {"feasible_scale", r.feasible_scale},
          {"initial_exp_loss", r.initial_exp_loss},
          {"initial_inv_loss", r.initial_inv_loss},
          {"initial_rmse", r.initial_rmse},
          {"final_exp_loss", r.final_exp_loss},
          {"final_inv_loss", r.final_inv_loss},
          {"final_rmse", r.final_rmse},
          {"final_rmse_small", r.final_rmse_small},
          {"final_rmse_large", r.final_rmse_large},
          {"final_gradient_norm", r.final_gradient_norm},
          {"termination", to_string(r.termination)},
          {"collapse", r.collapse},
          {"iterations", r.iterations},
          {"evaluations", r.evaluations},
          {"failed_evaluations", r.failed_evaluations},
          {"warm_solves", r.warm_solves},
          {"trace_columns", {"loss", "gradient_norm", "step_norm"}},
          {"trace", trace},
          {"final_params", r.final_params},
          {"error", r.error}};
}

inline RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.hidden = j.at("shape").get<std::vector<int>>();
  r.activation = parse_activation(j.at("activation").get<std::string>());
  r.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  r.observer = parse_observer(j.at("observer").get<std::string>());
  r.noise = j.at("noise").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.feasible_scale = j.at("feasible_scale").get<double>();
  r.initial_exp_loss = j.at("initial_exp_loss").get<double>();
  r.initial_inv_loss = j.at("initial_inv_loss").get<double>();
  r.initial_rmse = j.at("initial_rmse").get<double>();
  r.final_exp_loss = j.at("final_exp_loss").get<double>();
  r.final_inv_loss = j.at("final_inv_loss").get<double>();
  r.final_rmse = j.at("final_rmse").get<double>();
  r.final_rmse_small = j.at("final_rmse_small").get<double>();
  r.final_rmse_large = j.at("final_rmse_large").get<double>();
  r.final_gradient_norm = j.at("final_gradient_norm").get<double>();
  r.termination = parse_termination(j.at("termination").get<std::string>());
  r.collapse = j.at("collapse").get<bool>();
  r.iterations = j.at("iterations").get<int>();
  r.evaluations = j.at("evaluations").get<int>();
  r.failed_evaluations = j.at("failed_evaluations").get<int>();
  r.warm_solves = j.value("warm_solves", 0);
  for (const auto& t : j.at("trace")) r.trace.push_back({t[0].get<double>(), t[1].get<double>(), t[2].get<double>()});
  r.final_params = j.at("final_params").get<std::vector<double>>();
  r.error = j.value("error", "");
  return r;
}

/// Binds (truth, network template, loss) into an optimizer objective. Failed solves
/// return the sentinel loss and no gradient is ever computed there.
class ObjectiveAdapter final : public Objective {
public:
  ObjectiveAdapter(const TruthData& truth, MlpParams templ, const LossSpec& spec, ObservationSet obs)
      : truth_(truth), templ_(std::move(templ)), loss_(*truth.disc, std::move(obs), spec) {}

  Evaluation value(const Eigen::VectorXd& x) override {
    ++evaluations;
    const MlpRate rate(templ_.with_flat(x), truth_.scaler);
    const bool warm = warm_start && warm_.size() > 0;
    auto o = solve_forward(*truth_.disc, truth_.config(), rate, ExperimentState{warm ? warm_ : truth_.glen_guess});
    if (warm && o.converged) ++warm_solves;
    if (warm && !o.converged) o = solve_forward(*truth_.disc, truth_.config(), rate, ExperimentState{truth_.glen_guess});
    last_x_ = x;
    if (!o.converged) {
      ++failed_evaluations;
      last_ok_ = false;
      return {loss_.spec().failed_solve_loss, true};
    }
    last_ok_ = true;
    last_w_ = o.state->w;
    return {loss_.value(last_w_), false};
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& x) override {
    if (!(last_x_.size() == x.size() && last_x_ == x)) value(x);
    if (!last_ok_) throw ContractViolation("gradient requested at a failed-solve point");
    const MlpRate rate(templ_.with_flat(x), truth_.scaler);
    warm_ = last_w_;
    const AdjointWorkspace ws(*truth_.disc, truth_.config(), rate, last_w_);
    const Eigen::VectorXd lambda = ws.adjoint(loss_.state_gradient(last_w_));
    return -rate.parameter_vjp(ws.rate_rows(), ws.rate_sensitivity().transpose() * lambda);
  }

  [[nodiscard]] const ExperimentalLoss& loss() const { return loss_; }
  /// State of the most recent evaluation; valid only if it converged.
  [[nodiscard]] const Eigen::VectorXd& last_state() const { return last_w_; }

  /// Start Newton from the state at the last gradient evaluation, Glen guess as fallback.
  /// Keeps the objective on one solution branch when the coupled problem has several.
  bool warm_start = true;
  int evaluations = 0;
  int failed_evaluations = 0;
  int warm_solves = 0;

private:
  const TruthData& truth_;
  MlpParams templ_;
  ExperimentalLoss loss_;
  Eigen::VectorXd last_x_;
  Eigen::VectorXd last_w_;
  Eigen::VectorXd warm_;
  bool last_ok_ = false;
};

struct RunArtifacts {
  RunRecord record;
  MlpParams params;
  InvariantLossResult invariant;
  Eigen::VectorXd final_state;  ///< empty if the final solve failed
  Eigen::VectorXd delta_phi;    ///< predicted minus true nodal damage
};

/// Probe used by feasible_init: the forward solve from the Glen guess converges.
inline bool network_solvable(const TruthData& truth, const MlpParams& p) {
  const MlpRate rate(p, truth.scaler);
  return solve_forward(*truth.disc, truth.config(), rate, ExperimentState{truth.glen_guess}).converged;
}

/// One run from explicit initial parameters (already feasible or deliberately constructed).
inline RunArtifacts train_from(const TruthData& truth, const TrainingSettings& s, const MlpParams& init) {
  RunArtifacts a;
  auto& r = a.record;
  r.hidden = init.hidden_sizes();
  r.activation = init.activation();
  r.optimizer = s.optimizer;
  r.observer = s.observer;
  r.noise = s.noise;
  r.seed = s.seed;
  const auto truth_rate_model = truth_rate(truth.config());

  ObjectiveAdapter obj(truth, init, truth.loss_spec(s.observer), truth.observation(s.noise));
  const auto init_inv = invariant_loss(MlpRate(init, truth.scaler), truth_rate_model, truth.grid);
  r.initial_inv_loss = init_inv.value;
  r.initial_rmse = init_inv.rmse;

  const auto res = minimize(s.optimizer, obj, init.flatten(), s.optimizer_settings);
  r.initial_exp_loss = res.trace.front().loss;
  r.final_exp_loss = res.loss;
  r.termination = res.termination;
  r.iterations = res.iterations;
  r.trace = res.trace;
  r.final_gradient_norm = res.gradient.size() > 0 ? res.gradient.norm() : 0.0;
  r.evaluations = obj.evaluations;
  r.failed_evaluations = obj.failed_evaluations;
  r.warm_solves = obj.warm_solves;
  r.final_params.assign(res.x.data(), res.x.data() + res.x.size());

  a.params = init.with_flat(res.x);
  const MlpRate final_rate(a.params, truth.scaler);
  a.invariant = invariant_loss(final_rate, truth_rate_model, truth.grid);
  r.final_inv_loss = a.invariant.value;
  r.final_rmse = a.invariant.rmse;
  r.final_rmse_small = a.invariant.rmse_small;
  r.final_rmse_large = a.invariant.rmse_large;
  r.collapse = detect_constant_collapse(a.params, truth.scaler, a.invariant.nodes);

  if (!obj.value(res.x).failed) {
    a.final_state = obj.last_state();
    const auto nv = static_cast<Eigen::Index>(truth.disc->mesh().vertex_count());
    a.delta_phi = a.final_state.tail(nv) - truth.state().tail(nv);
  }
  return a;
}

/// mlp_init -> feasible_init -> minimize -> evaluate.
inline RunArtifacts train(const TruthData& truth, const TrainingSettings& s) {
  const MlpParams candidate = mlp_init(s.seed, MlpParams::from_hidden(s.hidden, s.activation).layer_sizes(), s.activation);
  int halvings = 0;
  const MlpParams init = feasible_init(
      candidate,
      [&](const MlpParams& p) {
        const bool ok = network_solvable(truth, p);
        if (!ok) ++halvings;
        return ok;
      },
      s.feasible_max_halvings);
  auto a = train_from(truth, s, init);
  a.record.feasible_scale = std::ldexp(1.0, -halvings);
  return a;
}

// ------------------------------------------------------------------ evaluation

/// Largest relative deviation of Q s(e, phi) Q^T from s(Q e Q^T, phi) over random rotations and inputs.
inline double equivariance_deviation(const ConstitutiveRelation& cr, int rotations, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI), phi(0.0, 0.5);
  std::normal_distribution<double> normal(0.0, 1.0);
  const bool tensor_out = cr.basis.output_signature().order == 2;
  double worst = 0.0;
  for (int k = 0; k < rotations; ++k) {
    const Eigen::Matrix2d q = rotation2d(angle(rng));
    Eigen::Matrix2d a;
    a << normal(rng), normal(rng), normal(rng), normal(rng);
    const Tensor e = Tensor::from_matrix(0.5 * (a + a.transpose()));
    const Tensor ph = Tensor::scalar(phi(rng));
    const Tensor out = wineman_pipkin_eval(cr, {e, ph});
    const Tensor rout = wineman_pipkin_eval(cr, {rotate(e, q), ph});
    const Tensor expected = tensor_out ? rotate(out, q) : out;
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < out.packed().size(); ++i) {
      diff = std::max(diff, std::abs(rout.packed()[i] - expected.packed()[i]));
      ref = std::max(ref, std::abs(expected.packed()[i]));
    }
    worst = std::max(worst, diff / std::max(ref, 1e-300));
  }
  return worst;
}

struct EvaluationReport {
  InvariantLossResult invariant;
  bool solve_converged = false;
  double experimental_loss = 0.0;  ///< valid when the solve converged
  double delta_phi_max = 0.0;
  double delta_phi_rms = 0.0;
  double equivariance = 0.0;  ///< -1 when not checked
};

/// Scores a damage-rate model against the truth; reads nothing from disk and writes nothing.
inline EvaluationReport evaluate_rate(const TruthData& truth, const DamageRateModel& rate, Observer observer,
                                      double noise, const ConstitutiveRelation* cr = nullptr) {
  EvaluationReport r;
  r.invariant = invariant_loss(rate, truth_rate(truth.config()), truth.grid);
  const auto o = solve_forward(*truth.disc, truth.config(), rate, ExperimentState{truth.glen_guess});
  r.solve_converged = o.converged;
  if (o.converged) {
    r.experimental_loss = experimental_loss(*truth.disc, o.state->w, truth.observation(noise), truth.loss_spec(observer));
    const auto nv = static_cast<Eigen::Index>(truth.disc->mesh().vertex_count());
    const Eigen::VectorXd dphi = o.state->w.tail(nv) - truth.state().tail(nv);
    r.delta_phi_max = dphi.cwiseAbs().maxCoeff();
    r.delta_phi_rms = std::sqrt(dphi.squaredNorm() / static_cast<double>(nv));
  }
  r.equivariance = cr != nullptr ? equivariance_deviation(*cr, 200, 1) : -1.0;
  return r;
}

inline json to_json(const EvaluationReport& r) {
  json j = {{"invariant_loss", r.invariant.value},
            {"rmse", r.invariant.rmse},
            {"rmse_small", r.invariant.rmse_small},
            {"rmse_large", r.invariant.rmse_large},
            {"solve_converged", r.solve_converged}};
  if (r.solve_converged) {
    j["experimental_loss"] = r.experimental_loss;
    j["delta_phi_max_abs"] = r.delta_phi_max;
    j["delta_phi_rms"] = r.delta_phi_rms;
  }
  if (r.equivariance >= 0.0) {
    j["equivariance_max_deviation"] = r.equivariance;
    j["equivariance_pass"] = r.equivariance < 1e-10;
  }
  return j;
}

// ------------------------------------------------------------------ sweep

struct SweepCell {
  std::vector<int> hidden;
  Activation activation;
  OptimizerKind optimizer;
  Observer observer;
  double noise;
  std::uint64_t seed;
};

inline std::vector<SweepCell> sweep_cells(const SweepSettings& s) {
  std::vector<SweepCell> cells;
  for (const auto& h : s.shapes)
    for (auto a : s.activations)
      for (auto o : s.optimizers)
        for (auto ob : s.observers)
          for (double n : s.noises)
            for (auto seed : s.seeds) cells.push_back({h, a, o, ob, n, seed});
  return cells;
}

inline int sweep_thread_count() {
  if (const char* v = std::getenv("ICECR_THREADS")) {
    const int n = std::atoi(v);
    if (n > 0) return n;
  }
  return 1;
}

/// Runs every (cell, seed); records already present under `record_dir` are loaded instead
/// of recomputed. Records are written as each run finishes.
inline std::vector<RunRecord> run_sweep(const TruthData& truth, const SweepSettings& sweep,
                                        const TrainingSettings& base, const std::filesystem::path& record_dir,
                                        int threads = sweep_thread_count()) {
  std::filesystem::create_directories(record_dir);
  const auto cells = sweep_cells(sweep);
  std::vector<RunRecord> out(cells.size());
  std::mutex writer;
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto& c = cells[i];
      TrainingSettings s = base;
      s.hidden = c.hidden;
      s.activation = c.activation;
      s.optimizer = c.optimizer;
      s.observer = c.observer;
      s.noise = c.noise;
      s.seed = c.seed;
      RunRecord probe;
      probe.hidden = c.hidden;
      probe.activation = c.activation;
      probe.optimizer = c.optimizer;
      probe.observer = c.observer;
      probe.noise = c.noise;
      probe.seed = c.seed;
      const auto path = record_dir / (probe.key() + ".json");
      if (std::filesystem::exists(path)) {
        std::lock_guard<std::mutex> lock(writer);
        out[i] = run_record_from_json(json::parse(read_text_file(path)));
        continue;
      }
      RunRecord rec;
      try {
        rec = train(truth, s).record;
      } catch (const std::exception& e) {
        rec = probe;
        rec.error = e.what();
        rec.termination = Termination::line_search_failure;
      }
      std::lock_guard<std::mutex> lock(writer);
      write_text_file_atomic(path, to_json(rec).dump(2) + "\n");
      out[i] = std::move(rec);
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(cells.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < n; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return out;
}

inline std::string aggregate_table(const std::vector<RunRecord>& records) {
  std::ostringstream s;
  s << "shape,activation,optimizer,observer,noise,seed,final_exp_loss,final_inv_loss,termination,collapse_flag\n";
  for (const auto& r : records)
    s << shape_label(r.hidden) << ',' << to_string(r.activation) << ',' << to_string(r.optimizer) << ','
      << to_string(r.observer) << ',' << format_double(r.noise) << ',' << r.seed << ',' << format_double(r.final_exp_loss)
      << ',' << format_double(r.final_inv_loss) << ',' << to_string(r.termination) << ',' << (r.collapse ? 1 : 0)
      << '\n';
  return s.str();
}

inline std::string correlation_table(const std::vector<RunRecord>& records) {
  std::ostringstream s;
  s << "observer,noise,final_exp_loss,final_inv_loss\n";
  for (const auto& r : records) {
    if (!r.error.empty()) continue;
    s << to_string(r.observer) << ',' << format_double(r.noise) << ',' << format_double(r.final_exp_loss) << ','
      << format_double(r.final_inv_loss) << '\n';
  }
  return s.str();
}

}  // namespace icecr
