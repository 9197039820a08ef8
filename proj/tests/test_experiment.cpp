#include "redunet/errors.hpp"
#include "redunet/experiment.hpp"
#include "redunet/forward_eval.hpp"
#include "redunet/incremental_merge.hpp"
#include "redunet/model_io.hpp"
#include "redunet/subspace_classifier.hpp"
#include "test_support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <charconv>
#include <fstream>
#include <sstream>

using namespace redunet;
using namespace redunet::testing;

namespace {

ExperimentConfig synthetic_config() {
  ExperimentConfig cfg;
  cfg.dataset = "synthetic";
  cfg.synthetic = SyntheticSpec{20, 4, 3, 0.05};
  cfg.train_per_class = 40;
  cfg.test_per_class = 25;
  cfg.classes_per_task = 2;
  cfg.build.depth = 8;
  cfg.rank = 3;
  cfg.seed = 7;
  return cfg;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

double parse(const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  REQUIRE(r.ec == std::errc());
  return v;
}

}  // namespace

TEST_CASE("experiment config validation") {
  auto cfg = synthetic_config();
  CHECK_NOTHROW(cfg.validate());

  auto bad = cfg;
  bad.dataset = "imagenet";
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = cfg;
  bad.classes_per_task = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = cfg;
  bad.rank = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = cfg;
  bad.class_order = {0, 1, 1, 2};
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = cfg;
  bad.train_per_class = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = cfg;
  bad.dataset = "mnist";
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = cfg;
  bad.build.epsilon = 0.0;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);

  const auto j = nlohmann::json::parse(cfg.to_json());
  CHECK(j.at("dataset") == "synthetic");
  CHECK(j.at("depth") == 8);
  CHECK(j.at("rank") == 3);
}

TEST_CASE("task grouping") {
  auto cfg = synthetic_config();
  const std::vector<ClassId> order{2, 0, 3, 1};
  const auto groups = task_classes(cfg, order);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0] == std::vector<ClassId>{2, 0});
  CHECK(groups[1] == std::vector<ClassId>{3, 1});
  cfg.classes_per_task = 3;
  CHECK_THROWS_AS(task_classes(cfg, order), InvalidInput);
}

TEST_CASE("a single-task run is a plain build and evaluation") {
  auto cfg = synthetic_config();
  cfg.classes_per_task = 4;
  const auto table = run_class_il(cfg);
  REQUIRE(table.sessions.size() == 1);
  CHECK(table.decay == 0.0);

  const auto data = prepare_data(cfg);
  const auto built = build_redunet(data.train.features, data.train.labels, cfg.build);
  const double acc = evaluate(built.model, fit_subspaces(built.model, cfg.rank), data.test.features,
                              data.test.labels);
  CHECK(table.sessions[0].accuracy == acc);
  CHECK(table.sessions[0].delta_r_final == built.delta_r_trace.back());
  CHECK(table.sessions[0].classes_seen == 4);
  CHECK(table.sessions[0].test_samples == 100);
  CHECK(acc >= 0.95);
}

TEST_CASE("class-incremental run outputs") {
  auto cfg = synthetic_config();
  cfg.record_timing = false;
  cfg.verify_joint = true;
  cfg.output_dir = scratch_dir("il_run_a");
  const auto a = run_class_il(cfg);
  REQUIRE(a.sessions.size() == 2);
  for (const auto& s : a.sessions) {
    CHECK(s.wall_ms == 0.0);
    REQUIRE(s.agreement.has_value());
    CHECK(*s.agreement == 1.0);
    CHECK(*s.joint_accuracy == s.accuracy);
  }
  CHECK(a.sessions[0].classes_seen == 2);
  CHECK(a.sessions[1].classes_seen == 4);
  CHECK(a.sessions[1].test_samples == 100);

  const auto csv_a = read_text(cfg.output_dir / "metrics.csv");
  const auto rows = csv_rows(csv_a);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"session_index", "classes_seen", "accuracy",
                                            "delta_r_final", "wall_ms"});
  const double first = parse(rows[1][2]);
  const double last = parse(rows[2][2]);
  CHECK(first == a.sessions[0].accuracy);
  CHECK(first - last == a.decay);

  const auto manifest = nlohmann::json::parse(read_text(cfg.output_dir / "run_manifest.json"));
  CHECK(manifest.at("decay").get<double>() == a.decay);
  CHECK(manifest.at("sessions").size() == 2);
  CHECK(nlohmann::json::parse(read_text(cfg.output_dir / "config.json")).at("seed") == 7);

  SUBCASE("repeat runs are byte-identical") {
    auto again = cfg;
    again.output_dir = scratch_dir("il_run_b");
    run_class_il(again);
    CHECK(read_text(again.output_dir / "metrics.csv") == csv_a);
    CHECK(read_text(again.output_dir / "model.redunet") == read_text(cfg.output_dir / "model.redunet"));
  }

  SUBCASE("stored model is the merged model") {
    const auto data = prepare_data(cfg);
    const auto tasks = split_tasks(data.train.features, data.train.labels, 2, data.class_order).tasks;
    const auto first_model = build_redunet(tasks[0].features, tasks[0].labels, cfg.build).model;
    const auto merged = merge_new_task(first_model, tasks[1]).model;
    const auto stored = load_model(cfg.output_dir / "model.redunet");
    REQUIRE(stored.has_all_layers());
    REQUIRE(stored.layers.size() == merged.layers.size());
    for (std::size_t l = 0; l < merged.layers.size(); ++l) {
      CHECK(max_abs(stored.layers[l].E, merged.layers[l].E) == 0.0);
    }
    CHECK(stored.metadata.at("dataset") == "synthetic");
    CHECK(evaluate_container(cfg.output_dir / "model.redunet", config_for_model(cfg, stored), cfg.rank) ==
          a.sessions.back().accuracy);
  }
}

TEST_CASE("session failures name the session") {
  auto cfg = synthetic_config();
  cfg.rank = 25;  // larger than the ambient dimension
  try {
    run_class_il(cfg);
    FAIL("expected a session failure");
  } catch (const SessionFailure& e) {
    CHECK(e.task() == 0);
    CHECK(std::string(e.what()).find("session") != std::string::npos);
  }
}

TEST_CASE("joint and incremental equivalence check") {
  const auto cfg = synthetic_config();
  const auto ok = run_equivalence_check(cfg);
  CHECK(ok.passed);
  CHECK(ok.max_discrepancy <= 1e-7);
  CHECK(ok.agreement == 1.0);
  CHECK(ok.layer_discrepancy.size() == cfg.build.depth);
  CHECK(ok.tasks == 2);
  CHECK(ok.test_samples == 100);

  const auto bad = run_equivalence_check(cfg, 1e-3);
  CHECK_FALSE(bad.passed);
  CHECK(bad.layer_discrepancy[0] >= 1e-3 * (1 - 1e-9));

  auto single = cfg;
  single.classes_per_task = 4;
  CHECK_THROWS_AS(run_equivalence_check(single), InvalidInput);
}

TEST_CASE("hyperparameter sweep") {
  auto cfg = synthetic_config();
  cfg.build.depth = 4;
  TuneGrid grid;
  grid.epsilons = {0.5, 1.0};
  grid.lambdas = {1.0, 5.0};
  const auto results = tune(cfg, grid);
  REQUIRE(results.size() == 4);
  for (std::size_t i = 1; i < results.size(); ++i) {
    CHECK(results[i - 1].agreement >= results[i].agreement);
  }
  for (const auto& r : results) {
    CHECK(r.agreement >= 0.0);
    CHECK(r.agreement <= 1.0);
  }
}

TEST_CASE("container inspection") {
  const auto dir = scratch_dir("inspect");
  const auto data = equivalence_fixture();
  BuildConfig bcfg;
  bcfg.depth = 4;
  const auto built = build_redunet(data.features, data.labels, bcfg);
  save_model(built.model, dir / "m.redunet");

  const auto report = inspect_model(dir / "m.redunet", true);
  CHECK(report.dim == 20);
  CHECK(report.depth == 4);
  CHECK(report.stored_layers == 4);
  REQUIRE(report.layers.size() == 4);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(report.layers[l].delta_r == doctest::Approx(built.delta_r_trace[l]).epsilon(1e-10));
    REQUIRE(report.layers[l].expansion_spectrum.has_value());
    CHECK(report.layers[l].compression_spectra.size() == 4);
  }
  CHECK(report.delta_r_final == doctest::Approx(built.delta_r_trace.back()).epsilon(1e-10));
  std::ostringstream out;
  print_report(out, report);
  CHECK(out.str().find("depth") != std::string::npos);
}

TEST_CASE("model configuration and atomic writes") {
  auto cfg = synthetic_config();
  ReduNetModel model;
  model.registry = {3, 1};
  model.metadata["dataset"] = "mnist";
  CHECK_THROWS_AS(config_for_model(cfg, model), InvalidInput);
  model.metadata["dataset"] = "synthetic";
  CHECK(config_for_model(cfg, model).class_order == std::vector<ClassId>{3, 1});
  CHECK_FALSE(model_input_mean(model).has_value());
  model.aux["input_mean"] = Vector::Ones(3);
  CHECK(model_input_mean(model)->sum() == 3.0);

  const auto dir = scratch_dir("atomic");
  write_file_atomic(dir / "a.txt", "one");
  write_file_atomic(dir / "a.txt", "two");
  CHECK(read_text(dir / "a.txt") == "two");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  CHECK(files == 1);
}
