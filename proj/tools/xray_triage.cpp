// xray-triage: command-line front end for training, evaluation, export and serving.
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "xray/checkpoint.hpp"
#include "xray/dataset.hpp"
#include "xray/evaluation.hpp"
#include "xray/gradcheck.hpp"
#include "xray/pipeline.hpp"
#include "xray/service.hpp"
#include "xray/synthetic.hpp"
#include "xray/training.hpp"

namespace fs = std::filesystem;
using namespace xray;

namespace {

HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

SplitStrategy strategy_for(const std::string& name, const Manifest& m) {
  if (name == "auto") return default_strategy(m);
  if (name == "by_patient") return SplitStrategy::by_patient;
  if (name == "random") return SplitStrategy::random;
  return SplitStrategy::predefined;
}

EpochCallback printer() {
  return [](const EpochRecord& e) {
    std::cout << "epoch " << e.epoch << "  train_loss " << e.train_loss << "  val_loss "
              << e.validation_loss << "  val_acc " << e.validation_accuracy << "  lr "
              << e.learning_rate << std::endl;
  };
}

void write_outputs(const fs::path& out, const TrainResult& r) {
  save_model(out, r.model);
  write_file_bytes(out / "history.jsonl", r.history.to_jsonl());
  std::cout << "best epoch " << r.history.best_epoch << ", model written to " << out << "\n";
}

struct CommonTrainFlags {
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  std::string strategy = "auto";
  std::size_t epochs = 0;
  double lr = 0.0;
  std::size_t batch = 0;
  std::size_t input_size = 0;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonTrainFlags& f) {
  cmd->add_option("--manifest", f.manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "Output model directory")->required();
  cmd->add_option("--seed", f.seed, "Seed for splits, init and sampling");
  cmd->add_option("--split", f.strategy, "Split strategy")
      ->check(CLI::IsMember({"auto", "by_patient", "random", "predefined"}));
  cmd->add_option("--epochs", f.epochs, "Override max epochs");
  cmd->add_option("--lr", f.lr, "Override initial learning rate");
  cmd->add_option("--batch-size", f.batch, "Override batch size");
  cmd->add_option("--input-size", f.input_size, "Network input side length (default 224)");
  cmd->add_flag("--quiet", f.quiet, "No per-epoch output");
}

void apply_overrides(TrainConfig& c, const CommonTrainFlags& f) {
  if (f.epochs) c.max_epochs = f.epochs;
  if (f.lr > 0.0) c.initial_lr = f.lr;
  if (f.batch) c.batch_size = f.batch;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chest X-ray triage: validity filter, three-class classifier, CAM service"};
  app.require_subcommand(1);

  // synth
  std::string synth_task = "filter", synth_out;
  std::vector<std::size_t> synth_counts{40};
  std::size_t synth_size = 64, synth_ipp = 1;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "Write a synthetic PNG corpus and manifest");
  synth->add_option("--task", synth_task)->check(CLI::IsMember({"filter", "classifier"}));
  synth->add_option("--out", synth_out)->required();
  synth->add_option("--counts", synth_counts,
                    "filter: upright images (as many turned); classifier: per-class counts")
      ->delimiter(',');
  synth->add_option("--size", synth_size);
  synth->add_option("--images-per-patient", synth_ipp);
  synth->add_option("--seed", synth_seed);

  // train-filter
  CommonTrainFlags tf;
  double neg_fraction = 0.0;
  auto* train_filter = app.add_subcommand("train-filter", "Train the validity filter");
  add_common(train_filter, tf);
  train_filter->add_option("--negatives-fraction", neg_fraction,
                           "Share of valid images to derive rotated negatives from");

  // train-covid
  CommonTrainFlags tc;
  int stage = 1;
  std::string weights_mode = "inverse", init_dir;
  bool freeze = false, no_weights = false, no_oversample = false;
  double smoothing = -1.0;
  auto* train_covid = app.add_subcommand("train-covid", "Train one classifier stage");
  add_common(train_covid, tc);
  train_covid->add_option("--stage", stage)->check(CLI::IsMember({1, 2}));
  train_covid->add_option("--weights-mode", weights_mode)
      ->check(CLI::IsMember({"as_written", "inverse"}));
  train_covid->add_option("--init", init_dir, "Model directory to start from");
  train_covid->add_flag("--freeze-backbone", freeze, "Train only the classifier head");
  train_covid->add_flag("--no-class-weights", no_weights);
  train_covid->add_flag("--no-oversample", no_oversample);
  train_covid->add_option("--label-smoothing", smoothing);

  // eval
  std::string ev_manifest, ev_model, ev_out, ev_strategy = "auto";
  std::size_t ev_runs = 1;
  std::uint64_t ev_seed = 0;
  bool ev_sample_std = false, ev_retrain = false;
  std::size_t ev_epochs = 0;
  auto* eval = app.add_subcommand("eval", "Confusion matrices and sensitivity/specificity over runs");
  eval->add_option("--manifest", ev_manifest)->required()->check(CLI::ExistingFile);
  eval->add_option("--model", ev_model)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--runs", ev_runs);
  eval->add_option("--out", ev_out)->required();
  eval->add_option("--seed", ev_seed);
  eval->add_option("--split", ev_strategy)
      ->check(CLI::IsMember({"auto", "by_patient", "random", "predefined"}));
  eval->add_flag("--sample-std", ev_sample_std, "Sample instead of population std");
  eval->add_flag("--retrain", ev_retrain, "Retrain from scratch for every run");
  eval->add_option("--retrain-epochs", ev_epochs);

  // export-projector
  std::string ex_model, ex_manifest, ex_out;
  auto* exportp = app.add_subcommand("export-projector", "Write vectors.tsv and metadata.tsv");
  exportp->add_option("--model", ex_model)->required()->check(CLI::ExistingDirectory);
  exportp->add_option("--manifest", ex_manifest)->required()->check(CLI::ExistingFile);
  exportp->add_option("--out", ex_out)->required();

  // serve
  std::string host = "127.0.0.1", model_dir, store_dir = "store", static_dir;
  int port = 8080;
  std::size_t max_upload = kDefaultMaxUploadBytes, max_records = 0;
  double threshold = 0.5;
  auto* serve = app.add_subcommand("serve", "HTTP inference service");
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--model-dir", model_dir, "Directory holding filter/ and covid/")->required();
  serve->add_option("--store-dir", store_dir);
  serve->add_option("--max-upload-bytes", max_upload);
  serve->add_option("--max-records", max_records, "Retention cap, 0 keeps all");
  serve->add_option("--filter-threshold", threshold);
  serve->add_option("--static-dir", static_dir, "Serve a front end from this directory");

  // gradcheck
  std::string gc_net = "filter";
  double gc_eps = 1e-3;
  std::size_t gc_samples = 8;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of a desk-scale net");
  gradcheck->add_option("--net", gc_net)->check(CLI::IsMember({"filter", "covid"}));
  gradcheck->add_option("--epsilon", gc_eps);
  gradcheck->add_option("--samples", gc_samples);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const Task task = synth_task == "filter" ? Task::filter : Task::classifier;
      const auto m = write_synthetic_corpus(synth_out, task, synth_counts, synth_size, synth_seed,
                                            synth_ipp);
      std::cout << "wrote " << m.size() << " images and " << (fs::path(synth_out) / "manifest.csv")
                << "\n";
      for (const auto& [k, v] : m.class_counts()) std::cout << "  " << k << ": " << v << "\n";
    } else if (*train_filter) {
      const Manifest m = load_manifest(tf.manifest, Task::filter);
      TrainConfig c = TrainConfig::filter_preset();
      apply_overrides(c, tf);
      FilterNetConfig net;
      if (tf.input_size) net.input_size = tf.input_size;
      const auto r = train_filter_on_manifest(m, strategy_for(tf.strategy, m), net, c, neg_fraction,
                                              tf.seed, tf.quiet ? EpochCallback{} : printer());
      write_outputs(tf.out, r);
    } else if (*train_covid) {
      const Manifest m = load_manifest(tc.manifest, Task::classifier);
      TrainConfig c = TrainConfig::classifier_preset();
      apply_overrides(c, tc);
      c.weight_mode = *parse_weight_mode(weights_mode);
      if (no_weights) c.use_class_weights = false;
      if (no_oversample) c.sampling = SamplingTarget::natural;
      if (smoothing >= 0.0) c.label_smoothing = smoothing;
      CovidNetConfig net;
      if (tc.input_size) net.input_size = tc.input_size;
      std::optional<Model> init;
      if (!init_dir.empty()) init = load_model(init_dir);
      const auto r = train_covid_stage(m, strategy_for(tc.strategy, m), stage, net, init, c, freeze,
                                       tc.seed, tc.quiet ? EpochCallback{} : printer());
      write_outputs(tc.out, r);
    } else if (*eval) {
      const Manifest m = load_manifest(ev_manifest);
      const Model model = load_model(ev_model);
      const SplitStrategy strategy = strategy_for(ev_strategy, m);
      RetrainFn retrain;
      if (ev_retrain) {
        retrain = [&](const SplitAssignment&, std::uint64_t seed) {
          if (m.task == Task::filter) {
            TrainConfig c = TrainConfig::filter_preset();
            if (ev_epochs) c.max_epochs = ev_epochs;
            FilterNetConfig net;
            net.input_size = model.input_shape[1];
            return train_filter_on_manifest(m, strategy, net, c, 0.0, seed).model;
          }
          TrainConfig c = TrainConfig::classifier_preset();
          if (ev_epochs) c.max_epochs = ev_epochs;
          CovidNetConfig net;
          if (const auto* cfg = std::get_if<CovidNetConfig>(&model.config)) net = *cfg;
          auto s1 = train_covid_stage(m, strategy, 1, net, std::nullopt, c, false, seed);
          return train_covid_stage(m, strategy, 2, net, s1.model, c, false, seed).model;
        };
      }
      const auto report = evaluate_runs(m, model, ev_runs, strategy, ev_seed, retrain,
                                        ev_sample_std ? StdMode::sample : StdMode::population);
      write_file_bytes(ev_out, report.dump(2) + "\n");
      std::cout << report["aggregate"]["summed_matrix_metrics"].dump(2) << "\n";
    } else if (*exportp) {
      const Model model = load_model(ex_model);
      Manifest m = load_manifest(ex_manifest);
      if (m.task == Task::classifier) {
        m = harmonize_labels(m);
        if (model.num_classes() == 2) m = stage1_relabel(m);
      }
      std::vector<std::size_t> all(m.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      const ManifestDataset ds(m, all, model.class_names);
      const auto e = extract_embeddings(model, ds, model.class_names);
      for (const auto& s : e.skipped) std::cerr << "skipped " << s << "\n";
      write_projector(ex_out, e);
      std::cout << "exported " << e.vectors.size() << " embeddings of width "
                << (e.vectors.empty() ? 0 : e.vectors[0].size()) << " to " << ex_out << "\n";
    } else if (*serve) {
      if (const char* env = std::getenv("XRAY_TRIAGE_STORE"); env && *env) store_dir = env;
      ServiceConfig cfg;
      cfg.model_dir = model_dir;
      cfg.store_dir = store_dir;
      cfg.max_upload_bytes = max_upload;
      cfg.filter_threshold = threshold;
      cfg.max_records = max_records;
      TriageService service(cfg);
      HttpServer server(service, static_dir.empty() ? std::nullopt
                                                    : std::optional<fs::path>(static_dir));
      const int bound = server.bind(host, port);
      if (bound < 0) {
        std::cerr << "cannot bind " << host << ":" << port << "\n";
        return 1;
      }
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on http://" << host << ":" << bound << " (store " << store_dir
                << ")" << std::endl;
      server.listen_after_bind();
      g_server = nullptr;
    } else if (*gradcheck) {
      Model model = gc_net == "filter" ? build_filter_net({}, 1) : build_covid_net({}, 1);
      Rng rng(2);
      Tensor input({1, model.input_shape[0], model.input_shape[1], model.input_shape[2]});
      for (auto& v : input.data()) v = static_cast<float>(rng.normal());
      Tensor target({1, model.num_classes()});
      for (auto& v : target.data()) v = static_cast<float>(rng.normal());
      GradCheckOptions opt;
      opt.epsilon = gc_eps;
      opt.samples_per_param = gc_samples;
      const auto rep = finite_difference_check(model, squared_error_loss(target), input, opt);
      std::cout << "checked " << rep.checked << " coordinates, max relative error "
                << rep.max_relative_error << " at " << rep.worst_coordinate << "\n";
      return rep.ok && rep.max_relative_error < 1e-3 ? 0 : 1;
    }
  } catch (const ManifestError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
