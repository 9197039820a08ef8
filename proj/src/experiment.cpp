#include "redunet/experiment.hpp"

#include "redunet/errors.hpp"
#include "redunet/forward_eval.hpp"
#include "redunet/incremental_merge.hpp"
#include "redunet/model_io.hpp"
#include "redunet/subspace_classifier.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

namespace redunet {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string join(std::span<const ClassId> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ',';
    out += std::to_string(ids[i]);
  }
  return out;
}

LabeledData as_labeled(const TaskBatch& t) { return {t.features, t.labels}; }

std::vector<ClassId> present_classes(std::span<const ClassId> labels) {
  std::set<ClassId> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

std::vector<ClassId> resolve_order(const ExperimentConfig& cfg, std::span<const ClassId> labels) {
  if (!cfg.class_order.empty()) return cfg.class_order;
  return present_classes(labels);
}

RawDataset keep_classes(const RawDataset& raw, std::span<const ClassId> classes) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (std::find(classes.begin(), classes.end(), raw.labels[i]) != classes.end()) idx.push_back(i);
  }
  if (idx.empty()) throw InvalidInput(raw.name + ": none of the requested classes are present");
  return select_records(raw, idx);
}

RawDataset cap_per_class(const RawDataset& raw, std::size_t cap, std::uint64_t seed) {
  if (cap == 0) return raw;
  return select_records(raw, subsample_indices(raw.labels, cap, seed));
}

Vector mean_image(const RawDataset& raw, std::span<const ClassId> classes) {
  Vector mean = Vector::Zero(static_cast<Index>(raw.image_bytes()));
  std::size_t n = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (std::find(classes.begin(), classes.end(), raw.labels[i]) == classes.end()) continue;
    const auto img = raw.image(i);
    for (Index p = 0; p < mean.size(); ++p) mean(p) += img[static_cast<std::size_t>(p)] / 255.0;
    ++n;
  }
  if (n == 0) throw InvalidInput("no training images for the mean-image classes");
  return mean / static_cast<double>(n);
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw InvalidInput("dataset file not found: " + p.string());
}

double max_layer_diff(const Layer& a, const Layer& b) {
  if (a.C.size() != b.C.size() || a.E.rows() != b.E.rows()) {
    return std::numeric_limits<double>::infinity();
  }
  double m = std::max(std::abs(a.eta - b.eta), std::abs(a.alpha - b.alpha));
  for (std::size_t j = 0; j < a.C.size(); ++j) {
    m = std::max(m, std::abs(a.gamma[j] - b.gamma[j]));
    m = std::max(m, std::abs(a.alpha_j[j] - b.alpha_j[j]));
    m = std::max(m, detail::max_abs_diff(a.C[j], b.C[j]));
  }
  return std::max(m, detail::max_abs_diff(a.E, b.E));
}

double agreement_rate(std::span<const ClassId> a, std::span<const ClassId> b) {
  return accuracy(a, b);
}

// -1/2 logdet(M / scale) through a Cholesky factorization.
double neg_half_logdet(const Matrix& M, double scale) {
  Eigen::LLT<Matrix> llt(M / scale);
  if (llt.info() != Eigen::Success) throw NumericalError("stored layer matrix is not positive definite");
  return -llt.matrixLLT().diagonal().array().log().sum();
}

json metrics_json(const SessionMetrics& s) {
  json j = {{"session_index", s.session_index}, {"classes_seen", s.classes_seen},
            {"test_samples", s.test_samples},   {"accuracy", s.accuracy},
            {"delta_r_final", s.delta_r_final}, {"wall_ms", s.wall_ms}};
  if (s.joint_accuracy) j["joint_accuracy"] = *s.joint_accuracy;
  if (s.agreement) j["agreement"] = *s.agreement;
  return j;
}

}  // namespace

SessionFailure::SessionFailure(std::size_t task, std::optional<std::size_t> layer,
                               const std::string& what)
    : Error("session " + std::to_string(task + 1) +
            (layer ? ", layer " + std::to_string(*layer) : std::string()) + ": " + what),
      task_(task),
      layer_(layer) {}

void ExperimentConfig::validate() const {
  if (dataset != "mnist" && dataset != "cifar10" && dataset != "synthetic") {
    throw InvalidInput("unknown dataset '" + dataset + "'");
  }
  build.validate();
  if (classes_per_task == 0) throw InvalidInput("classes per task must be positive");
  if (rank < 1) throw InvalidInput("subspace rank must be positive");
  if (downscale == 0) throw InvalidInput("downscale factor must be positive");
  if (dataset == "synthetic") {
    if (synthetic.dim < 1 || synthetic.classes == 0 || synthetic.rank < 1) {
      throw InvalidInput("synthetic dimension, class count and rank must be positive");
    }
    if (!(synthetic.noise >= 0.0) || !std::isfinite(synthetic.noise)) {
      throw InvalidInput("synthetic noise must be non-negative");
    }
    if (train_per_class == 0 || test_per_class == 0) {
      throw InvalidInput("synthetic data needs explicit per-class sample counts");
    }
  } else if (data_dir.empty()) {
    throw InvalidInput("dataset directory is required for " + dataset);
  }
  std::set<ClassId> seen;
  for (ClassId c : class_order) {
    if (!seen.insert(c).second) throw InvalidInput("class order repeats class " + std::to_string(c));
  }
}

std::string ExperimentConfig::to_json() const {
  json j = {
      {"dataset", dataset},
      {"data_dir", data_dir.string()},
      {"classes_per_task", classes_per_task},
      {"class_order", class_order},
      {"epsilon", build.epsilon},
      {"depth", build.depth},
      {"eta0", build.eta0},
      {"eta_decay", build.eta_decay},
      {"lambda", build.lambda},
      {"rank", rank},
      {"train_per_class", train_per_class},
      {"test_per_class", test_per_class},
      {"seed", seed},
      {"kernel_seed", kernel_seed},
      {"downscale", downscale},
      {"synthetic",
       {{"dim", synthetic.dim},
        {"classes", synthetic.classes},
        {"rank", synthetic.rank},
        {"noise", synthetic.noise}}},
      {"output_dir", output_dir.string()},
      {"verify_joint", verify_joint},
      {"record_timing", record_timing},
  };
  return j.dump(2);
}

PreparedData prepare_data(const ExperimentConfig& cfg, std::span<const ClassId> mean_classes,
                          const std::optional<Vector>& mean) {
  cfg.validate();
  PreparedData out;
  out.metadata["dataset"] = cfg.dataset;
  out.metadata["seed"] = std::to_string(cfg.seed);
  out.metadata["rng"] = Rng::kAlgorithm;
  out.metadata["train_per_class"] = std::to_string(cfg.train_per_class);

  if (cfg.dataset == "synthetic") {
    const auto& sp = cfg.synthetic;
    const auto mixture = SubspaceMixture::random(sp.dim, sp.classes, sp.rank, cfg.seed);
    std::vector<Index> train_counts(sp.classes, static_cast<Index>(cfg.train_per_class));
    std::vector<Index> test_counts(sp.classes, static_cast<Index>(cfg.test_per_class));
    auto train = mixture.sample(train_counts, sp.noise, cfg.seed + 1);
    auto test = mixture.sample(test_counts, sp.noise, cfg.seed + 2);
    out.class_order = resolve_order(cfg, train.labels.labels());
    out.train = select_classes(train.features, train.labels, out.class_order);
    out.test = select_classes(test.features, test.labels, out.class_order);
    out.metadata["synthetic_dim"] = std::to_string(sp.dim);
    out.metadata["synthetic_classes"] = std::to_string(sp.classes);
    out.metadata["synthetic_rank"] = std::to_string(sp.rank);
    out.metadata["synthetic_noise"] = shortest(sp.noise);
    return out;
  }

  if (cfg.dataset == "mnist") {
    const fs::path dir = cfg.data_dir;
    for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                          "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}) {
      require_file(dir / f);
    }
    auto train_raw = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    auto test_raw = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
    out.class_order = resolve_order(cfg, train_raw.labels);
    train_raw = cap_per_class(keep_classes(train_raw, out.class_order), cfg.train_per_class, cfg.seed);
    test_raw = cap_per_class(keep_classes(test_raw, out.class_order), cfg.test_per_class, cfg.seed + 1);
    auto train = preprocess_mnist(train_raw);
    auto test = preprocess_mnist(test_raw);
    out.train = select_classes(train.features, train.labels, out.class_order);
    out.test = select_classes(test.features, test.labels, out.class_order);
    return out;
  }

  const fs::path dir = cfg.data_dir;
  std::vector<fs::path> train_files;
  for (int b = 1; b <= 5; ++b) train_files.push_back(dir / ("data_batch_" + std::to_string(b) + ".bin"));
  std::vector<fs::path> test_files{dir / "test_batch.bin"};
  for (const auto& f : train_files) require_file(f);
  require_file(test_files.front());
  auto train_raw = load_cifar_binary(train_files);
  auto test_raw = load_cifar_binary(test_files);
  out.class_order = resolve_order(cfg, train_raw.labels);
  train_raw = cap_per_class(keep_classes(train_raw, out.class_order), cfg.train_per_class, cfg.seed);
  test_raw = cap_per_class(keep_classes(test_raw, out.class_order), cfg.test_per_class, cfg.seed + 1);
  train_raw = downscale(train_raw, cfg.downscale);
  test_raw = downscale(test_raw, cfg.downscale);

  Vector mu;
  if (mean) {
    mu = *mean;
  } else {
    std::vector<ClassId> basis(mean_classes.begin(), mean_classes.end());
    if (basis.empty()) {
      const auto n = std::min(cfg.classes_per_task, out.class_order.size());
      basis.assign(out.class_order.begin(), out.class_order.begin() + static_cast<std::ptrdiff_t>(n));
    }
    mu = mean_image(train_raw, basis);
    out.metadata["mean_classes"] = join(basis);
  }
  const auto bank = KernelBank::generate(cfg.kernel_seed);
  auto train = preprocess_cifar(train_raw, bank, mu, Split::kTrain);
  auto test = preprocess_cifar(test_raw, bank, mu, Split::kTest);
  out.train = select_classes(train.features, train.labels, out.class_order);
  out.test = select_classes(test.features, test.labels, out.class_order);
  out.aux["input_mean"] = mu;
  out.metadata["kernel_seed"] = std::to_string(cfg.kernel_seed);
  out.metadata["kernels"] = std::to_string(bank.num_kernels);
  out.metadata["downscale"] = std::to_string(cfg.downscale);
  return out;
}

std::vector<std::vector<ClassId>> task_classes(const ExperimentConfig& cfg,
                                               std::span<const ClassId> class_order) {
  if (cfg.classes_per_task == 0 || class_order.size() % cfg.classes_per_task != 0) {
    throw InvalidInput("class order does not divide into tasks of " +
                       std::to_string(cfg.classes_per_task) + " classes");
  }
  std::vector<std::vector<ClassId>> groups;
  for (std::size_t s = 0; s < class_order.size(); s += cfg.classes_per_task) {
    groups.emplace_back(class_order.begin() + static_cast<std::ptrdiff_t>(s),
                        class_order.begin() + static_cast<std::ptrdiff_t>(s + cfg.classes_per_task));
  }
  return groups;
}

std::string MetricsTable::to_csv() const {
  std::string out = "session_index,classes_seen,accuracy,delta_r_final,wall_ms\n";
  for (const auto& s : sessions) {
    out += std::to_string(s.session_index) + ',' + std::to_string(s.classes_seen) + ',' +
           shortest(s.accuracy) + ',' + shortest(s.delta_r_final) + ',' + shortest(s.wall_ms) + '\n';
  }
  return out;
}

MetricsTable run_class_il(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<std::optional<TaskBatch>> train_tasks;
  std::vector<TaskBatch> test_tasks;
  std::map<std::string, std::string> metadata;
  std::map<std::string, Vector> aux;
  {
    PreparedData data = prepare_data(cfg);
    auto train = split_tasks(data.train.features, data.train.labels, cfg.classes_per_task,
                             data.class_order);
    auto test = split_tasks(data.test.features, data.test.labels, cfg.classes_per_task,
                            data.class_order);
    for (auto& t : train.tasks) train_tasks.emplace_back(std::move(t));
    test_tasks = std::move(test.tasks);
    metadata = std::move(data.metadata);
    aux = std::move(data.aux);
  }
  if (!cfg.output_dir.empty()) fs::create_directories(cfg.output_dir);

  MetricsTable table;
  std::optional<ReduNetModel> model;
  std::optional<LabeledData> test_seen;
  std::vector<LabeledData> joint_pool;
  const std::size_t sessions = train_tasks.size();

  for (std::size_t s = 0; s < sessions; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    const TaskBatch& task = *train_tasks[s];
    if (test_seen) {
      const LabeledData parts[] = {std::move(*test_seen), as_labeled(test_tasks[s])};
      test_seen = concatenate(parts);
    } else {
      test_seen = as_labeled(test_tasks[s]);
    }

    std::optional<std::size_t> at_layer;
    SessionMetrics m;
    try {
      SampleMatrix Z = normalize_columns(test_seen->features);
      ReduNetModel skeleton = model ? merge_skeleton(*model, task.labels)
                                    : build_skeleton(task.features.rows(), task.labels, cfg.build);
      if (!model) {
        skeleton.metadata = metadata;
        skeleton.aux = aux;
      }
      std::unique_ptr<ModelWriter> writer;
      if (s + 1 == sessions && !cfg.output_dir.empty()) {
        writer = std::make_unique<ModelWriter>(cfg.output_dir / "model.redunet", skeleton,
                                               skeleton.depth());
      }
      BuildOptions opts;
      opts.retention = LayerRetention::kFirstOnly;
      opts.on_layer = [&](std::size_t l, const Layer& layer) {
        at_layer = l;
        advance_layer(Z, layer, skeleton.lambda);
        if (writer) writer->write_layer(layer);
      };
      std::vector<double> trace;
      if (model) {
        auto r = merge_new_task(*model, task, opts);
        model = std::move(r.model);
        trace = std::move(r.delta_r_trace);
      } else {
        auto r = build_redunet(task.features, task.labels, cfg.build, opts);
        r.model.metadata = metadata;
        r.model.aux = aux;
        model = std::move(r.model);
        trace = std::move(r.delta_r_trace);
      }
      at_layer.reset();
      if (writer) writer->finish(model->final_covariances);

      const auto predicted = classify_batch(Z, fit_subspaces(*model, cfg.rank));
      m.session_index = s + 1;
      m.classes_seen = model->num_classes();
      m.test_samples = test_seen->labels.size();
      m.accuracy = accuracy(predicted, test_seen->labels.labels());
      m.delta_r_final = trace.back();
      const auto t1 = std::chrono::steady_clock::now();
      m.wall_ms = cfg.record_timing ? std::chrono::duration<double, std::milli>(t1 - t0).count() : 0.0;

      if (cfg.verify_joint) {
        joint_pool.push_back(as_labeled(task));
        const LabeledData joint = concatenate(joint_pool);
        SampleMatrix Zj = normalize_columns(test_seen->features);
        BuildOptions jopts;
        jopts.retention = LayerRetention::kFirstOnly;
        jopts.on_layer = [&](std::size_t l, const Layer& layer) {
          at_layer = l;
          advance_layer(Zj, layer, cfg.build.lambda);
        };
        auto jr = build_redunet(joint.features, joint.labels, cfg.build, jopts);
        at_layer.reset();
        const auto jpred = classify_batch(Zj, fit_subspaces(jr.model, cfg.rank));
        m.joint_accuracy = accuracy(jpred, test_seen->labels.labels());
        m.agreement = agreement_rate(predicted, jpred);
      }
    } catch (const NumericalDivergence& e) {
      throw SessionFailure(s, e.layer(), e.what());
    } catch (const SessionFailure&) {
      throw;
    } catch (const Error& e) {
      throw SessionFailure(s, at_layer, e.what());
    }
    table.sessions.push_back(m);
    // Raw data of this task is not needed by later sessions.
    train_tasks[s].reset();
  }
  table.decay = table.sessions.front().accuracy - table.sessions.back().accuracy;

  if (!cfg.output_dir.empty()) {
    write_file_atomic(cfg.output_dir / "metrics.csv", table.to_csv());
    write_file_atomic(cfg.output_dir / "config.json", cfg.to_json() + "\n");
    json manifest;
    manifest["config"] = json::parse(cfg.to_json());
    manifest["preprocessing"] = metadata;
    manifest["sessions"] = json::array();
    for (const auto& s : table.sessions) manifest["sessions"].push_back(metrics_json(s));
    manifest["decay"] = table.decay;
    manifest["model"] = "model.redunet";
    manifest["metrics"] = "metrics.csv";
    write_file_atomic(cfg.output_dir / "run_manifest.json", manifest.dump(2) + "\n");
  }
  return table;
}

EquivalenceReport run_equivalence_check(const ExperimentConfig& cfg, double perturb) {
  cfg.validate();
  PreparedData data = prepare_data(cfg);
  auto split = split_tasks(data.train.features, data.train.labels, cfg.classes_per_task,
                           data.class_order);
  if (split.tasks.size() < 2) throw InvalidInput("equivalence check needs at least two tasks");

  const LabeledData test = std::move(data.test);
  const BuildResult joint = build_redunet(data.train.features, data.train.labels, cfg.build);
  const auto joint_pred =
      classify_batch(forward_batch(joint.model, test.features), fit_subspaces(joint.model, cfg.rank));

  EquivalenceReport report;
  report.tasks = split.tasks.size();
  report.test_samples = test.labels.size();

  BuildOptions first_opts;
  first_opts.retention = LayerRetention::kFirstOnly;
  const auto first = build_redunet(split.tasks[0].features, split.tasks[0].labels, cfg.build, first_opts);

  SampleMatrix Z = normalize_columns(test.features);
  BuildOptions opts;
  opts.retention = LayerRetention::kFirstOnly;
  opts.on_layer = [&](std::size_t l, const Layer& layer) {
    const Layer* used = &layer;
    Layer perturbed;
    if (l == 0 && perturb != 0.0) {
      perturbed = layer;
      perturbed.C.front()(0, 0) += perturb;
      used = &perturbed;
    }
    report.layer_discrepancy.push_back(max_layer_diff(*used, joint.model.layers.at(l)));
    advance_layer(Z, *used, cfg.build.lambda);
  };
  const std::span<const TaskBatch> rest(split.tasks.begin() + 1, split.tasks.end());
  const auto merged = chain_merge(first.model, rest, opts);
  if (merged.model.registry != joint.model.registry) {
    throw InconsistentParameter("merged and joint registries differ");
  }

  for (std::size_t j = 0; j < merged.model.num_classes(); ++j) {
    report.final_discrepancy =
        std::max(report.final_discrepancy,
                 detail::max_abs_diff(merged.model.final_covariances[j], joint.model.final_covariances[j]));
  }
  report.max_discrepancy = report.final_discrepancy;
  for (double v : report.layer_discrepancy) report.max_discrepancy = std::max(report.max_discrepancy, v);

  const auto inc_pred = classify_batch(Z, fit_subspaces(merged.model, cfg.rank));
  report.agreement = agreement_rate(inc_pred, joint_pred);
  report.passed = report.max_discrepancy <= report.tolerance && report.agreement == 1.0;
  return report;
}

std::vector<TuneResult> tune(const ExperimentConfig& cfg, const TuneGrid& grid) {
  cfg.validate();
  const PreparedData data = prepare_data(cfg);
  const auto& registry = data.train.labels.registry();
  const auto& labels = data.train.labels.labels();
  std::vector<TuneResult> results;
  for (double eps : grid.epsilons) {
    for (double eta0 : grid.eta0s) {
      for (double lambda : grid.lambdas) {
        BuildConfig b = cfg.build;
        b.epsilon = eps;
        b.eta0 = eta0;
        b.lambda = lambda;
        TuneResult r{eps, eta0, lambda, 0.0};
        SampleMatrix Z = normalize_columns(data.train.features);
        std::optional<Layer> last;
        BuildOptions opts;
        opts.retention = LayerRetention::kFirstOnly;
        opts.on_layer = [&](std::size_t, const Layer& layer) {
          advance_layer(Z, layer, lambda);
          last = layer;
        };
        try {
          build_redunet(data.train.features, data.train.labels, b, opts);
          const Matrix probs = estimate_membership_batch(Z, *last, lambda);
          std::size_t hits = 0;
          for (Index c = 0; c < probs.cols(); ++c) {
            Index best = 0;
            probs.col(c).maxCoeff(&best);
            hits += registry[static_cast<std::size_t>(best)] == labels[static_cast<std::size_t>(c)] ? 1 : 0;
          }
          r.agreement = static_cast<double>(hits) / static_cast<double>(probs.cols());
        } catch (const NumericalError&) {
          r.agreement = 0.0;
        }
        results.push_back(r);
      }
    }
  }
  std::stable_sort(results.begin(), results.end(),
                   [](const TuneResult& a, const TuneResult& b) { return a.agreement > b.agreement; });
  return results;
}

InspectReport inspect_model(const fs::path& path, bool spectra) {
  if (!verify_checksum(path)) throw ChecksumError(path.string() + ": checksum mismatch");
  ModelReader reader(path);
  const ReduNetModel& skel = reader.skeleton();
  InspectReport report;
  report.dim = skel.dim;
  report.depth = skel.depth();
  report.stored_layers = reader.stored_layers();
  report.registry = skel.registry;
  report.counts = skel.counts;
  report.metadata = skel.metadata;
  std::size_t index = 0;
  while (auto layer = reader.next_layer()) {
    LayerSummary s;
    s.index = index++;
    s.eta = layer->eta;
    double dr = neg_half_logdet(layer->E, layer->alpha);
    for (std::size_t j = 0; j < layer->num_classes(); ++j) {
      dr -= layer->gamma[j] * neg_half_logdet(layer->C[j], layer->alpha_j[j]);
    }
    s.delta_r = dr;
    if (spectra) {
      s.expansion_spectrum = Eigen::SelfAdjointEigenSolver<Matrix>(layer->E, Eigen::EigenvaluesOnly).eigenvalues();
      for (const Matrix& c : layer->C) {
        s.compression_spectra.push_back(
            Eigen::SelfAdjointEigenSolver<Matrix>(c, Eigen::EigenvaluesOnly).eigenvalues());
      }
    }
    report.layers.push_back(std::move(s));
  }
  const ReduNetModel model = reader.finish();
  report.delta_r_final = rate_reduction_from_covariances(model.final_covariances, model.params);
  return report;
}

void print_report(std::ostream& out, const InspectReport& report) {
  out << "dim " << report.dim << "\ndepth " << report.depth << "\nstored_layers "
      << report.stored_layers << "\nclasses " << join(report.registry) << "\ncounts";
  for (Index c : report.counts) out << ' ' << c;
  out << '\n';
  for (const auto& [k, v] : report.metadata) out << "meta " << k << ' ' << v << '\n';
  out << std::setprecision(10);
  auto print_spectrum = [&](const char* name, const Vector& v) {
    out << "  " << name << " min " << v.minCoeff() << " max " << v.maxCoeff() << '\n';
  };
  for (const auto& l : report.layers) {
    out << "layer " << l.index << " eta " << l.eta << " delta_r " << l.delta_r << '\n';
    if (l.expansion_spectrum) print_spectrum("E", *l.expansion_spectrum);
    for (std::size_t j = 0; j < l.compression_spectra.size(); ++j) {
      const std::string name = "C" + std::to_string(report.registry[j]);
      print_spectrum(name.c_str(), l.compression_spectra[j]);
    }
  }
  out << "delta_r_final " << report.delta_r_final << '\n';
}

ExperimentConfig config_for_model(const ExperimentConfig& cfg, const ReduNetModel& model) {
  ExperimentConfig c = cfg;
  c.class_order = model.registry;
  auto meta = [&](const std::string& key) -> std::optional<std::string> {
    auto it = model.metadata.find(key);
    if (it == model.metadata.end()) return std::nullopt;
    return it->second;
  };
  if (auto v = meta("dataset"); v && *v != c.dataset) {
    throw InvalidInput("model was built on " + *v + ", not " + c.dataset);
  }
  if (auto v = meta("kernel_seed")) c.kernel_seed = std::stoull(*v);
  if (auto v = meta("downscale")) c.downscale = std::stoull(*v);
  return c;
}

std::optional<Vector> model_input_mean(const ReduNetModel& model) {
  auto it = model.aux.find("input_mean");
  if (it == model.aux.end()) return std::nullopt;
  return it->second;
}

double evaluate_container(const fs::path& model_path, const ExperimentConfig& cfg, Index rank) {
  if (!verify_checksum(model_path)) throw ChecksumError(model_path.string() + ": checksum mismatch");
  ModelReader reader(model_path);
  const ReduNetModel& skel = reader.skeleton();
  if (reader.stored_layers() != skel.depth()) {
    throw InvalidInput("model stores only its first layer and cannot be evaluated");
  }
  const ExperimentConfig c = config_for_model(cfg, skel);
  const std::optional<Vector> mean = model_input_mean(skel);
  const PreparedData data = prepare_data(c, {}, mean);
  if (data.test.features.rows() != skel.dim) {
    throw InvalidInput("test features do not match the model dimension");
  }
  SampleMatrix Z = normalize_columns(data.test.features);
  while (auto layer = reader.next_layer()) advance_layer(Z, *layer, skel.lambda);
  const ReduNetModel model = reader.finish();
  return accuracy(classify_batch(Z, fit_subspaces(model, rank)), data.test.labels.labels());
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace redunet
