#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ntklab/data.hpp"
#include "ntklab/flow.hpp"
#include "ntklab/net.hpp"
#include "ntklab/objective.hpp"

namespace ntklab {

// Below this value of sqrt(h) alpha the output variance blows up; grids stop here
// unless SweepConfig::allow_tiny_scale is set.
inline constexpr double kMinScale = 1e-4;

/// One (alpha, h) point of the plane.
struct GridPoint {
  double alpha = 1.0;
  int width = 1;

  double scale() const;  // sqrt(h) alpha
  double log10_alpha() const;
};

/// Fixed h, grid of sqrt(h) alpha values.
std::vector<GridPoint> grid_fixed_width(int width, const std::vector<double>& scales);
/// Fixed sqrt(h) alpha, grid of widths.
std::vector<GridPoint> grid_fixed_scale(double scale, const std::vector<int>& widths);
/// Every width crossed with every sqrt(h) alpha value, width-major.
std::vector<GridPoint> grid_product(const std::vector<int>& widths,
                                    const std::vector<double>& scales);
/// n values spaced evenly in log10 between lo and hi inclusive.
std::vector<double> log_space(double lo, double hi, int n);

struct ObservableToggles {
  bool kernel_change = true;
  bool weight_motion = true;
  bool output_norm = true;
  bool preactivation_rates = false;
  bool kernel_checkpoints = false;  // Gram at every checkpoint, expensive
  int kernel_probe_size = 256;      // test patterns used for the Gram
};

struct SweepConfig {
  std::vector<GridPoint> points;
  int ensemble_size = 10;
  std::shared_ptr<const Dataset> data;
  std::string dataset_id;  // enters the point hash; the provenance dump when empty
  Architecture arch;       // width is taken from each grid point
  ModelVariant variant = ModelVariant::centered;
  FlowConfig flow;
  ObservableToggles observables;
  std::uint64_t base_seed = 0;
  int jobs = 1;
  bool allow_tiny_scale = false;

  void validate() const;
};

/// Mean and standard error of a scalar over the members that report it.
struct Stat {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double stderr_ = std::numeric_limits<double>::quiet_NaN();
  int count = 0;
};
Stat summarize(const std::vector<double>& values);

struct MemberResult {
  int index = 0;
  std::uint64_t seed = 0;
  RunStatus status = RunStatus::running;
  double test_error = 0.0;
  double final_time = 0.0;
  std::int64_t accepted_steps = 0;
  std::int64_t rejected_steps = 0;
  std::optional<double> t_half;
  std::optional<double> weight_motion;
  std::optional<double> output_norm;         // rms f(w_T, x) on the test set
  std::optional<double> output_change_half;  // rms f(w_t, x) - f(w0, x) at t_half
  std::optional<double> kernel_change;
  std::vector<double> preactivation_rates;   // rms of dz~^l/dt at t=0, per layer
  Eigen::VectorXd test_predictions;          // F(w_T, x) on the test set, not persisted
};

/// Test-set columns used for the kernel Gram; shared by every member and point.
std::vector<Eigen::Index> kernel_probe_indices(const Dataset& data, int size,
                                               std::uint64_t base_seed);

/// Member i of the ensemble at any point uses this seed for its initialization.
std::uint64_t member_seed(std::uint64_t base_seed, int member);

/// Trains one member to the stopping rule and measures the enabled observables.
MemberResult run_member(const SweepConfig& cfg, const GridPoint& point, int member);

struct EnsembleResult {
  GridPoint point;
  std::string point_id;
  std::uint64_t base_seed = 0;
  std::vector<MemberResult> members;
  double ensemble_test_error = 0.0;  // error of sign(mean F) on the test set
  double median_test_error = 0.0;
  double variance = 0.0;             // Var F over members and test points
  Eigen::VectorXd mean_prediction;   // mean F per test point, not persisted
  bool partial = false;              // some member did not reach the stopping rule
  std::vector<int> incomplete_members;
  std::vector<std::string> warnings;

  Stat test_error() const;
  Stat t_half() const;
  Stat weight_motion() const;
  Stat output_norm() const;
  Stat output_change_half() const;
  Stat kernel_change() const;
  Stat accepted_steps() const;
};

/// Streaming mean/variance per test point, merged across members one at a time.
class StreamingVariance {
 public:
  explicit StreamingVariance(Eigen::Index points);
  void add(const Eigen::VectorXd& values);
  int count() const { return count_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  /// Mean over points of the population variance across members.
  double variance() const;

 private:
  int count_ = 0;
  Eigen::VectorXd mean_;
  Eigen::VectorXd m2_;
};

/// Same quantity from a members x points matrix, two passes.
double two_pass_variance(const Eigen::MatrixXd& members_by_points);

/// Combines independently trained members. Diverged members are excluded from
/// the averaged function and listed in incomplete_members.
EnsembleResult combine_members(const GridPoint& point, std::vector<MemberResult> members,
                               const Eigen::VectorXd& test_labels);

EnsembleResult run_ensemble(const SweepConfig& cfg, const GridPoint& point);

nlohmann::json config_json(const Architecture& a);
nlohmann::json config_json(const FlowConfig& f);

/// Hash of everything that determines the result of a point.
std::string point_hash(const SweepConfig& cfg, const GridPoint& point);

nlohmann::json to_json(const MemberResult& m);
MemberResult member_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EnsembleResult& r);
EnsembleResult ensemble_from_json(const nlohmann::json& j);

/// Numeric table with a textual id per row.
struct Table {
  std::vector<std::string> header;  // numeric columns, after the id column
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;

  std::size_t column_index(const std::string& name) const;
  std::vector<double> column(const std::string& name) const;
  /// Rows whose `name` column equals `value` (relative tolerance 1e-9).
  Table where(const std::string& name, double value) const;
  std::size_t size() const { return rows.size(); }
};

/// Fixed column set of sweep tables.
const std::vector<std::string>& sweep_columns();
Table sweep_table(const std::vector<EnsembleResult>& results);

void write_csv(const Table& t, const std::filesystem::path& path,
               const std::string& id_column = "point_id");
Table read_csv(const std::filesystem::path& path, const std::string& id_column = "point_id");

struct SweepOutcome {
  std::vector<EnsembleResult> results;  // grid order
  Table table;
  int trained_points = 0;  // points that were not found in the store
  int reused_points = 0;
  bool complete = true;
};

/// Runs every grid point. With a store directory, finished points are written as
/// <dir>/runs/<hash>.json and reused on the next call, and the table goes to
/// <dir>/tables/sweep.csv with a JSON sidecar (sweep.json). `stop_after` bounds the number of points
/// trained in this call (used to emulate an interruption).
SweepOutcome sweep(const SweepConfig& cfg,
                   const std::optional<std::filesystem::path>& store = std::nullopt,
                   std::optional<int> stop_after = std::nullopt);

struct FitWindow {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
};

struct PowerLawFit {
  double exponent = 0.0;
  double intercept = 0.0;  // log10 y at x = 1
  FitWindow window;
  double residual = 0.0;   // rms of the log10 residuals
  double exponent_stderr = 0.0;
  int points = 0;
};

/// Least squares of log y against log x over the points inside the window.
PowerLawFit fit_power_law(const std::vector<double>& x, const std::vector<double>& y,
                          FitWindow window = {});
PowerLawFit fit_power_law(const Table& t, const std::string& x_field, const std::string& y_field,
                          FitWindow window = {});
nlohmann::json to_json(const PowerLawFit& f);

/// Affine map of the values onto [0, 1] using their min and max.
std::vector<double> rescale_unit(const std::vector<double>& values);

/// alpha at which the rescaled error crosses 0.5, interpolated linearly in log alpha.
/// With several crossings (noise) the median one is returned.
double crossover_locate(const std::vector<double>& alphas, const std::vector<double>& errors);
double crossover_locate(const Table& fixed_width, const std::string& error_field = "mean_test_error");

/// Output variance against width for each training-set size.
struct VarianceScan {
  Table table;  // columns n, h, alpha, scale, variance, ensemble_test_error
  // Per n, the smallest width from which every consecutive log-log slope of
  // Var F against h lies within -1 +- tol; empty when never reached.
  std::vector<std::pair<int, std::optional<int>>> asymptote_width;
};

VarianceScan variance_vs_n(const SweepConfig& base, const std::vector<int>& train_sizes,
                           double slope_tol = 0.25);

}  // namespace ntklab
