#pragma once

// Class-incremental experiment protocol: build on the first task, merge the
// remaining tasks one session at a time, evaluate on every class seen so far
// after each session. Also hosts the joint-vs-incremental equivalence check,
// the hyperparameter sweep, and container inspection.

#include "redunet/data_pipeline.hpp"
#include "redunet/errors.hpp"
#include "redunet/net_builder.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace redunet {

struct SyntheticSpec {
  Index dim = 20;
  std::size_t classes = 4;
  Index rank = 3;
  double noise = 0.05;
};

struct ExperimentConfig {
  std::string dataset = "synthetic";  // mnist | cifar10 | synthetic
  std::filesystem::path data_dir;      // IDX files or CIFAR batches
  std::size_t classes_per_task = 2;
  std::vector<ClassId> class_order;    // empty: ascending class identifiers
  BuildConfig build;
  Index rank = 28;
  std::size_t train_per_class = 0;     // 0 keeps every training sample
  std::size_t test_per_class = 0;      // 0 keeps every test sample
  std::uint64_t seed = 0;              // subsampling and synthetic data
  std::uint64_t kernel_seed = 0;       // CIFAR lifting bank
  std::size_t downscale = 1;           // CIFAR block-averaging factor
  SyntheticSpec synthetic;
  std::filesystem::path output_dir;    // empty: nothing written
  bool verify_joint = false;           // also build the joint model per session
  bool record_timing = true;           // false writes wall_ms = 0

  void validate() const;
  std::string to_json() const;
};

/// Raised when a session fails; names the task and, when known, the layer.
class SessionFailure : public Error {
 public:
  SessionFailure(std::size_t task, std::optional<std::size_t> layer, const std::string& what);
  std::size_t task() const noexcept { return task_; }
  std::optional<std::size_t> layer() const noexcept { return layer_; }

 private:
  std::size_t task_;
  std::optional<std::size_t> layer_;
};

/// Preprocessed train/test data for every selected class, plus what a model
/// needs to reproduce the preprocessing.
struct PreparedData {
  LabeledData train;
  LabeledData test;
  std::vector<ClassId> class_order;
  std::map<std::string, std::string> metadata;
  std::map<std::string, Vector> aux;
};

/// Loads and preprocesses the configured dataset. For CIFAR the mean image
/// comes from the training images of `mean_classes` (the first task when
/// empty) unless `mean` is supplied.
PreparedData prepare_data(const ExperimentConfig& cfg, std::span<const ClassId> mean_classes = {},
                          const std::optional<Vector>& mean = std::nullopt);

/// Consecutive groups of cfg.classes_per_task classes in class order.
std::vector<std::vector<ClassId>> task_classes(const ExperimentConfig& cfg,
                                               std::span<const ClassId> class_order);

struct SessionMetrics {
  std::size_t session_index = 0;
  std::size_t classes_seen = 0;
  std::size_t test_samples = 0;
  double accuracy = 0.0;
  double delta_r_final = 0.0;
  double wall_ms = 0.0;
  std::optional<double> joint_accuracy;
  std::optional<double> agreement;  // fraction of identical predictions
};

struct MetricsTable {
  std::vector<SessionMetrics> sessions;
  double decay = 0.0;  // accuracy(first session) - accuracy(last session)

  std::string to_csv() const;
};

MetricsTable run_class_il(const ExperimentConfig& cfg);

struct EquivalenceReport {
  std::vector<double> layer_discrepancy;  // max-abs over eta, alpha, gamma, alpha_j, E, C
  double final_discrepancy = 0.0;         // final covariances
  double max_discrepancy = 0.0;
  double agreement = 0.0;
  std::size_t test_samples = 0;
  std::size_t tasks = 0;
  double tolerance = 1e-7;
  bool passed = false;
};

/// Builds the joint model on all tasks and the incremental one (first task,
/// then a merge chain) and compares them layer by layer. `perturb` is added
/// to entry (0, 0) of the first merged compression matrix before comparison.
EquivalenceReport run_equivalence_check(const ExperimentConfig& cfg, double perturb = 0.0);

struct TuneGrid {
  std::vector<double> epsilons{0.5};
  std::vector<double> eta0s{0.5};
  std::vector<double> lambdas{1.0};
};

struct TuneResult {
  double epsilon = 0.0;
  double eta0 = 0.0;
  double lambda = 0.0;
  double agreement = 0.0;  // training samples whose estimated membership matches the label
};

/// Every grid point, best agreement first (ties keep grid order).
std::vector<TuneResult> tune(const ExperimentConfig& cfg, const TuneGrid& grid);

struct LayerSummary {
  std::size_t index = 0;
  double eta = 0.0;
  double delta_r = 0.0;  // Delta R of the layer input, from E and C alone
  std::optional<Vector> expansion_spectrum;
  std::vector<Vector> compression_spectra;
};

struct InspectReport {
  Index dim = 0;
  std::size_t depth = 0;
  std::size_t stored_layers = 0;
  std::vector<ClassId> registry;
  std::vector<Index> counts;
  std::map<std::string, std::string> metadata;
  std::vector<LayerSummary> layers;
  double delta_r_final = 0.0;
};

InspectReport inspect_model(const std::filesystem::path& path, bool spectra);

void print_report(std::ostream& out, const InspectReport& report);

/// `cfg` with the model's classes and the preprocessing recorded in its
/// metadata (dataset must agree; kernel seed and downscale factor are taken
/// from the model).
ExperimentConfig config_for_model(const ExperimentConfig& cfg, const ReduNetModel& model);

/// The stored training mean image, if the model has one.
std::optional<Vector> model_input_mean(const ReduNetModel& model);

/// Streams the test split of the model's classes through a stored container
/// and scores nearest-subspace predictions.
double evaluate_container(const std::filesystem::path& model_path, const ExperimentConfig& cfg,
                          Index rank);

/// Writes `content` to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace redunet
