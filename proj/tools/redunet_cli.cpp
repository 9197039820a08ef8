#include "redunet/errors.hpp"
#include "redunet/experiment.hpp"
#include "redunet/forward_eval.hpp"
#include "redunet/incremental_merge.hpp"
#include "redunet/model_io.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <memory>

namespace {

using redunet::ExperimentConfig;

void add_config_flags(CLI::App& cmd, ExperimentConfig& cfg) {
  cmd.add_option("--dataset", cfg.dataset, "mnist, cifar10 or synthetic")
      ->check(CLI::IsMember({"mnist", "cifar10", "synthetic"}))
      ->capture_default_str();
  cmd.add_option("--data-dir", cfg.data_dir, "Directory with IDX files or CIFAR batches");
  cmd.add_option("--classes-per-task", cfg.classes_per_task)->capture_default_str();
  cmd.add_option("--class-order", cfg.class_order, "Class identifiers in session order")->delimiter(',');
  cmd.add_option("--epsilon", cfg.build.epsilon)->capture_default_str();
  cmd.add_option("--depth", cfg.build.depth, "Number of layers")->capture_default_str();
  cmd.add_option("--eta0", cfg.build.eta0)->capture_default_str();
  cmd.add_option("--eta-decay", cfg.build.eta_decay)->capture_default_str();
  cmd.add_option("--lambda", cfg.build.lambda)->capture_default_str();
  cmd.add_option("--rank", cfg.rank, "Subspace rank of the classifier")->capture_default_str();
  cmd.add_option("--subsample-per-class", cfg.train_per_class, "Training samples per class (0 = all)")
      ->capture_default_str();
  cmd.add_option("--test-per-class", cfg.test_per_class, "Test samples per class (0 = all)")
      ->capture_default_str();
  cmd.add_option("--seed", cfg.seed)->capture_default_str();
  cmd.add_option("--kernel-seed", cfg.kernel_seed)->capture_default_str();
  cmd.add_option("--downscale", cfg.downscale, "CIFAR block-averaging factor")->capture_default_str();
  cmd.add_option("--synthetic-dim", cfg.synthetic.dim)->capture_default_str();
  cmd.add_option("--synthetic-classes", cfg.synthetic.classes)->capture_default_str();
  cmd.add_option("--synthetic-rank", cfg.synthetic.rank)->capture_default_str();
  cmd.add_option("--synthetic-noise", cfg.synthetic.noise)->capture_default_str();
}

int do_build(ExperimentConfig cfg, const std::vector<redunet::ClassId>& classes,
             const std::string& out_path) {
  if (!classes.empty()) cfg.class_order = classes;
  auto data = redunet::prepare_data(cfg, classes);
  redunet::ReduNetModel skeleton =
      redunet::build_skeleton(data.train.features.rows(), data.train.labels, cfg.build);
  skeleton.metadata = data.metadata;
  skeleton.aux = data.aux;
  redunet::ModelWriter writer(out_path, skeleton, skeleton.depth());
  redunet::BuildOptions opts;
  opts.retention = redunet::LayerRetention::kFirstOnly;
  opts.on_layer = [&](std::size_t, const redunet::Layer& layer) { writer.write_layer(layer); };
  const auto result = redunet::build_redunet(data.train.features, data.train.labels, cfg.build, opts);
  writer.finish(result.model.final_covariances);
  std::cout << std::setprecision(10) << "delta_r_initial " << result.delta_r_trace.front()
            << "\ndelta_r_final " << result.delta_r_trace.back() << "\nwrote " << out_path << '\n';
  return 0;
}

int do_merge(const ExperimentConfig& cfg, const std::vector<redunet::ClassId>& classes,
             const std::string& in_path, const std::string& out_path) {
  const auto model = redunet::load_model(in_path, redunet::LayerRetention::kFirstOnly);
  ExperimentConfig c = redunet::config_for_model(cfg, model);
  c.class_order = classes;
  auto data = redunet::prepare_data(c, {}, redunet::model_input_mean(model));
  const redunet::TaskBatch task{std::move(data.train.features), std::move(data.train.labels)};
  const auto skeleton = redunet::merge_skeleton(model, task.labels);
  redunet::ModelWriter writer(out_path, skeleton, skeleton.depth());
  redunet::BuildOptions opts;
  opts.retention = redunet::LayerRetention::kFirstOnly;
  opts.on_layer = [&](std::size_t, const redunet::Layer& layer) { writer.write_layer(layer); };
  const auto result = redunet::merge_new_task(model, task, opts);
  writer.finish(result.model.final_covariances);
  std::cout << std::setprecision(10) << "classes " << result.model.num_classes()
            << "\ndelta_r_final " << result.delta_r_trace.back() << "\nwrote " << out_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rate-reduction networks with class-incremental merging"};
  app.require_subcommand(1);

  ExperimentConfig cfg;
  std::vector<redunet::ClassId> classes;
  std::string model_in;
  std::string model_out;
  bool spectra = false;
  bool no_timing = false;
  double perturb = 0.0;
  redunet::TuneGrid grid;

  auto* build = app.add_subcommand("build", "Build a network on one task and write it");
  add_config_flags(*build, cfg);
  build->add_option("--classes", classes, "Classes of the task (default: all)")->delimiter(',');
  build->add_option("-o,--out", model_out, "Model file")->required();

  auto* merge = app.add_subcommand("merge", "Merge a new task into a stored network");
  add_config_flags(*merge, cfg);
  merge->add_option("--model", model_in, "Existing model")->required()->check(CLI::ExistingFile);
  merge->add_option("--classes", classes, "Classes of the new task")->delimiter(',')->required();
  merge->add_option("-o,--out", model_out, "Merged model file")->required();

  auto* eval = app.add_subcommand("eval", "Test accuracy of a stored network");
  add_config_flags(*eval, cfg);
  eval->add_option("--model", model_in)->required()->check(CLI::ExistingFile);

  auto* run_il = app.add_subcommand("run-il", "Class-incremental protocol over all sessions");
  add_config_flags(*run_il, cfg);
  run_il->add_option("-o,--output-dir", cfg.output_dir, "Directory for metrics, manifest and model");
  run_il->add_flag("--verify-joint", cfg.verify_joint, "Also build the joint network per session");
  run_il->add_flag("--no-timing", no_timing, "Write wall_ms as 0 for byte-identical output");

  auto* check = app.add_subcommand("check-equivalence", "Compare incremental and joint networks");
  add_config_flags(*check, cfg);
  check->add_option("--perturb", perturb, "Offset added to one merged compression entry");

  auto* inspect = app.add_subcommand("inspect", "Layer delta R trace and spectra of a model");
  inspect->add_option("--model", model_in)->required()->check(CLI::ExistingFile);
  inspect->add_flag("--spectra", spectra, "Print eigenvalue ranges of E and C");

  auto* tune = app.add_subcommand("tune", "Sweep epsilon, eta0 and lambda on training data");
  add_config_flags(*tune, cfg);
  tune->add_option("--epsilons", grid.epsilons)->delimiter(',');
  tune->add_option("--eta0s", grid.eta0s)->delimiter(',');
  tune->add_option("--lambdas", grid.lambdas)->delimiter(',');

  CLI11_PARSE(app, argc, argv);
  cfg.record_timing = !no_timing;

  try {
    if (*build) return do_build(cfg, classes, model_out);
    if (*merge) return do_merge(cfg, classes, model_in, model_out);
    if (*eval) {
      const double acc = redunet::evaluate_container(model_in, cfg, cfg.rank);
      std::cout << std::setprecision(10) << "accuracy " << acc << '\n';
      return 0;
    }
    if (*run_il) {
      const auto table = redunet::run_class_il(cfg);
      std::cout << table.to_csv() << std::setprecision(10) << "decay " << table.decay << '\n';
      for (const auto& s : table.sessions) {
        if (s.joint_accuracy) {
          std::cout << "session " << s.session_index << " joint_accuracy " << *s.joint_accuracy
                    << " agreement " << *s.agreement << '\n';
        }
      }
      return 0;
    }
    if (*check) {
      const auto r = redunet::run_equivalence_check(cfg, perturb);
      std::cout << std::setprecision(3) << std::scientific;
      for (std::size_t l = 0; l < r.layer_discrepancy.size(); ++l) {
        std::cout << "layer " << l << " max_abs " << r.layer_discrepancy[l] << '\n';
      }
      std::cout << "final_covariances max_abs " << r.final_discrepancy << '\n'
                << "max_abs " << r.max_discrepancy << " tolerance " << r.tolerance << '\n'
                << std::defaultfloat << "agreement " << r.agreement << " over " << r.test_samples
                << " samples\n"
                << (r.passed ? "PASS" : "FAIL") << '\n';
      return r.passed ? 0 : 1;
    }
    if (*inspect) {
      redunet::print_report(std::cout, redunet::inspect_model(model_in, spectra));
      return 0;
    }
    if (*tune) {
      std::cout << "epsilon,eta0,lambda,agreement\n";
      for (const auto& r : redunet::tune(cfg, grid)) {
        std::cout << r.epsilon << ',' << r.eta0 << ',' << r.lambda << ',' << r.agreement << '\n';
      }
      return 0;
    }
  } catch (const redunet::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
