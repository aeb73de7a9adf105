// Command-line front end: dataset synthesis, training, evaluation, ablation
// suites, routing-path reports and model inspection.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "dcmnet/data.hpp"
#include "dcmnet/model.hpp"
#include "dcmnet/train.hpp"
#include "json.hpp"

using namespace dcmnet;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataFormatError(DataFormatError::Kind::Io, "cannot open " + tmp);
    f << text;
    if (!f.good()) throw DataFormatError(DataFormatError::Kind::Io, "short write to " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataFormatError(DataFormatError::Kind::Io, "cannot move " + tmp + " to " + path);
}

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) {
    throw DataFormatError(DataFormatError::Kind::Io,
                          std::string(what) + " not found: " + path);
  }
}

ModalityMode modality_from_name(const std::string& name) {
  if (name == "HL") return ModalityMode::HL;
  if (name == "H") return ModalityMode::HOnly;
  if (name == "L") return ModalityMode::LOnly;
  throw std::invalid_argument("unknown modality '" + name + "' (expected HL, H or L)");
}

OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected adam or sgd)");
}

ModelConfig profile_config(const std::string& name) {
  if (name == "synthetic") return synthetic_default_config();
  if (name == "houston2013") return houston2013_config();
  if (name == "tiny") return tiny_gradcheck_config();
  throw std::invalid_argument("unknown profile '" + name +
                              "' (expected synthetic, houston2013 or tiny)");
}

TrainConfig train_config_from_json(const json& j, TrainConfig cfg) {
  if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<std::size_t>();
  if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("learning_rate")) cfg.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("optimizer")) cfg.optimizer = optimizer_from_name(j.at("optimizer"));
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("augment")) cfg.augment = j.at("augment").get<bool>();
  if (j.contains("noise_sigma")) cfg.noise_sigma = j.at("noise_sigma").get<double>();
  if (j.contains("modality")) cfg.modality = modality_from_name(j.at("modality"));
  return cfg;
}

// Everything a run needs; built from profile defaults, then the config file,
// then explicit flags (flag wins).
struct RunSettings {
  ModelConfig model = synthetic_default_config();
  TrainConfig train;
  std::string dataset;
  std::string checkpoint;
};

RunSettings load_settings(const std::string& config_path, const std::string& profile) {
  RunSettings s;
  if (!profile.empty()) s.model = profile_config(profile);
  if (!config_path.empty()) {
    require_file(config_path, "config file");
    std::ifstream f(config_path);
    json j = json::parse(f, nullptr, true);
    if (j.contains("model")) s.model = config_from_json(j.at("model").dump());
    if (j.contains("train")) s.train = train_config_from_json(j.at("train"), s.train);
    if (j.contains("paths")) {
      const json& p = j.at("paths");
      if (p.contains("dataset")) s.dataset = p.at("dataset").get<std::string>();
      if (p.contains("checkpoint")) s.checkpoint = p.at("checkpoint").get<std::string>();
    }
  }
  return s;
}

json report_json(const EvalReport& report) {
  json j;
  j["oa"] = report.oa;
  j["aa"] = report.aa;
  j["kappa"] = report.kappa;
  j["total"] = report.total;
  j["per_class_accuracy"] = report.per_class_accuracy;
  json cm = json::array();
  for (std::size_t i = 0; i < report.num_classes; ++i) {
    json row = json::array();
    for (std::size_t k = 0; k < report.num_classes; ++k) row.push_back(report.cm(i, k));
    cm.push_back(row);
  }
  j["confusion"] = cm;
  return j;
}

json trace_json(const std::vector<RoutingTrace>& traces,
                const std::vector<std::uint16_t>& labels, double threshold) {
  json j;
  j["threshold"] = threshold;
  j["samples"] = traces.size();
  const RoutingSummary summary = summarize_routes(traces, labels, threshold);
  json usage = json::array();
  for (const auto& layer : summary.usage) usage.push_back({layer[0], layer[1], layer[2]});
  j["block_usage"] = usage;
  json hist = json::object();
  for (const auto& [label, edges] : summary.class_histograms) {
    json per = json::object();
    for (const auto& [edge, count] : edges) per[edge] = count;
    hist[std::to_string(label)] = per;
  }
  j["class_histograms"] = hist;
  json per_sample = json::array();
  for (std::size_t i = 0; i < traces.size(); ++i) {
    json entry;
    entry["label"] = i < labels.size() ? labels[i] : 0;
    json gates = json::array();
    for (const auto& layer : traces[i].gates) {
      json lg = json::array();
      for (const auto& gate : layer) lg.push_back({gate[0], gate[1], gate[2]});
      gates.push_back(lg);
    }
    entry["gates"] = gates;
    json edges = json::array();
    for (const RouteEdge& e : extract_paths(traces[i], threshold)) {
      edges.push_back({{"layer", e.layer + 1},
                       {"from", block_name(static_cast<BlockKind>(e.from))},
                       {"to", block_name(static_cast<BlockKind>(e.to))},
                       {"w", e.weight}});
    }
    entry["active_edges"] = edges;
    per_sample.push_back(entry);
  }
  j["per_sample"] = per_sample;
  return j;
}

// nearest-prototype classifier on z-scored raw features; the built-in sanity
// oracle for synthesized cubes
double prototype_oa(const SceneCube& cube, bool use_hsi, bool use_lidar) {
  const std::size_t hw = cube.height * cube.width;
  const std::size_t bands = cube.bands(), cl = cube.lidar_channels();
  const std::size_t dims = (use_hsi ? bands : 0) + (use_lidar ? cl : 0);
  auto feature = [&](std::size_t px, std::vector<double>& f) {
    f.clear();
    if (use_hsi)
      for (std::size_t b = 0; b < bands; ++b) f.push_back(cube.hsi.values()[b * hw + px]);
    if (use_lidar)
      for (std::size_t ch = 0; ch < cl; ++ch) f.push_back(cube.lidar.values()[ch * hw + px]);
  };
  std::vector<double> mean(dims, 0.0), sd(dims, 0.0), f;
  std::size_t n_train = 0;
  for (std::size_t px = 0; px < hw; ++px) {
    if (cube.split[px] != 1) continue;
    feature(px, f);
    for (std::size_t d = 0; d < dims; ++d) mean[d] += f[d];
    ++n_train;
  }
  if (n_train == 0) return 0.0;
  for (double& m : mean) m /= static_cast<double>(n_train);
  for (std::size_t px = 0; px < hw; ++px) {
    if (cube.split[px] != 1) continue;
    feature(px, f);
    for (std::size_t d = 0; d < dims; ++d) sd[d] += (f[d] - mean[d]) * (f[d] - mean[d]);
  }
  for (double& s : sd) s = std::max(std::sqrt(s / static_cast<double>(n_train)), 1e-9);

  std::vector<std::vector<double>> proto(cube.num_classes, std::vector<double>(dims, 0.0));
  std::vector<std::size_t> counts(cube.num_classes, 0);
  for (std::size_t px = 0; px < hw; ++px) {
    if (cube.split[px] != 1) continue;
    feature(px, f);
    const std::size_t cls = cube.labels[px] - 1;
    for (std::size_t d = 0; d < dims; ++d) proto[cls][d] += (f[d] - mean[d]) / sd[d];
    counts[cls]++;
  }
  for (std::size_t c = 0; c < cube.num_classes; ++c)
    for (double& v : proto[c]) v /= static_cast<double>(std::max<std::size_t>(1, counts[c]));

  std::size_t correct = 0, total = 0;
  for (std::size_t px = 0; px < hw; ++px) {
    if (cube.split[px] != 2) continue;
    feature(px, f);
    double best = 1e300;
    std::size_t best_cls = 0;
    for (std::size_t c = 0; c < cube.num_classes; ++c) {
      double dist = 0.0;
      for (std::size_t d = 0; d < dims; ++d) {
        const double z = (f[d] - mean[d]) / sd[d] - proto[c][d];
        dist += z * z;
      }
      if (dist < best) {
        best = dist;
        best_cls = c;
      }
    }
    if (best_cls + 1 == cube.labels[px]) ++correct;
    ++total;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

void print_inspect(const DcmNet& model) {
  const auto rows = model.inspect_rows();
  std::size_t w0 = 10, w1 = 10, w2 = 11, w3 = 11;
  for (const LayerRow& r : rows) {
    w0 = std::max(w0, r.name.size());
    w1 = std::max(w1, r.input.size());
    w2 = std::max(w2, r.output.size());
    w3 = std::max(w3, r.kernel.size());
  }
  auto line = [&](const std::string& a, const std::string& b, const std::string& c,
                  const std::string& d) {
    std::cout << std::left << std::setw(static_cast<int>(w0) + 2) << a
              << std::setw(static_cast<int>(w1) + 2) << b
              << std::setw(static_cast<int>(w2) + 2) << c << std::setw(static_cast<int>(w3)) << d
              << "\n";
  };
  line("Layer Name", "Input Size", "Output Size", "Kernel Size");
  line(std::string(w0, '-'), std::string(w1, '-'), std::string(w2, '-'), std::string(w3, '-'));
  for (const LayerRow& r : rows) line(r.name, r.input, r.output, r.kernel);
  const CostReport cost = model.cost();
  std::cout << "\nParameters: " << cost.param_count << "\n";
  std::cout << "FLOPs/sample: " << cost.flops_per_sample << " ("
            << static_cast<double>(cost.flops_per_sample) / 1e9 << " GFLOPs)\n";
}

// ---- subcommand bodies ----------------------------------------------------------

struct SynthArgs {
  std::string out;
  SynthSpec spec;
};

int cmd_synth(const SynthArgs& args) {
  SceneCube cube = generate_synthetic(args.spec);
  save_dataset(cube, args.out);

  std::vector<std::size_t> train_counts(cube.num_classes, 0), test_counts(cube.num_classes, 0);
  for (std::size_t i = 0; i < cube.labels.size(); ++i) {
    if (cube.labels[i] == 0) continue;
    if (cube.split[i] == 1) train_counts[cube.labels[i] - 1]++;
    if (cube.split[i] == 2) test_counts[cube.labels[i] - 1]++;
  }
  std::cout << "wrote " << args.out << " (" << cube.height << "x" << cube.width << ", "
            << cube.bands() << " bands, " << cube.lidar_channels() << " lidar channels)\n\n";
  std::cout << std::left << std::setw(6) << "No." << std::setw(8) << "Train" << std::setw(8)
            << "Test" << "\n";
  std::size_t train_total = 0, test_total = 0;
  for (std::size_t c = 0; c < cube.num_classes; ++c) {
    std::cout << std::left << std::setw(6) << (c + 1) << std::setw(8) << train_counts[c]
              << std::setw(8) << test_counts[c] << "\n";
    train_total += train_counts[c];
    test_total += test_counts[c];
  }
  std::cout << std::left << std::setw(6) << "Total" << std::setw(8) << train_total
            << std::setw(8) << test_total << "\n\n";

  const double oa_h = prototype_oa(cube, true, false);
  const double oa_joint = prototype_oa(cube, true, true);
  std::cout << "prototype-classifier sanity: OA(HSI only) = " << oa_h
            << ", OA(HSI+LiDAR) = " << oa_joint
            << (oa_h < oa_joint ? "  [joint wins]" : "  [WARNING: joint does not win]") << "\n";
  return 0;
}

struct TrainArgs {
  RunSettings settings;
  std::string loss_log;
};

int cmd_train(const TrainArgs& args) {
  require_file(args.settings.dataset, "dataset");
  if (args.settings.checkpoint.empty()) {
    throw std::invalid_argument("train: --out checkpoint path required");
  }
  SceneCube cube = load_dataset(args.settings.dataset);
  args.settings.model.validate();
  DcmNet model(args.settings.model, args.settings.train.seed);
  TrainResult result = train(model, cube, args.settings.train);
  model.save(args.settings.checkpoint);

  if (!args.loss_log.empty()) {
    json j;
    j["epochs"] = args.settings.train.epochs;
    j["seed"] = args.settings.train.seed;
    j["modality"] = modality_name(args.settings.train.modality);
    j["loss"] = result.loss_history;
    write_text_atomic(args.loss_log, j.dump(2) + "\n");
  }
  std::cout << "trained " << args.settings.train.epochs << " epochs";
  if (!result.loss_history.empty()) {
    std::cout << ", final train loss " << result.loss_history.back();
  }
  std::cout << "; checkpoint written to " << args.settings.checkpoint << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string split = "test";
  std::string modality = "HL";
  std::string report;
  std::string routes;
  double route_threshold = 0.3;
};

int cmd_eval(const EvalArgs& args) {
  require_file(args.checkpoint, "checkpoint");
  require_file(args.dataset, "dataset");
  DcmNet model = DcmNet::load(args.checkpoint);
  SceneCube cube = load_dataset(args.dataset);
  const SplitTag split = args.split == "train" ? SplitTag::Train : SplitTag::Test;
  if (args.split != "train" && args.split != "test") {
    throw std::invalid_argument("eval: --split must be train or test");
  }

  std::vector<RoutingTrace> traces;
  std::vector<std::uint16_t> labels;
  EvalReport report;
  try {
    report = evaluate(model, cube, split, modality_from_name(args.modality),
                      args.routes.empty() ? nullptr : &traces,
                      args.routes.empty() ? nullptr : &labels);
  } catch (const std::invalid_argument& e) {
    // at eval time an architecture/dataset disagreement is a checkpoint mismatch
    throw CheckpointError(CheckpointError::Kind::Mismatch, e.what());
  }

  json j = report_json(report);
  j["split"] = args.split;
  j["modality"] = args.modality;
  j["model"] = json::parse(config_to_json(model.config()));
  const CostReport cost = model.cost();
  j["cost"] = {{"params", cost.param_count}, {"flops_per_sample", cost.flops_per_sample}};
  if (!args.report.empty()) write_text_atomic(args.report, j.dump(2) + "\n");
  if (!args.routes.empty()) {
    write_text_atomic(args.routes, trace_json(traces, labels, args.route_threshold).dump(2) + "\n");
  }
  std::cout << "split=" << args.split << " OA=" << report.oa << " AA=" << report.aa
            << " Kappa=" << report.kappa << " (n=" << report.total << ")\n";
  return 0;
}

struct AblateArgs {
  RunSettings settings;
  std::string suite;
  std::string out_dir;
};

int cmd_ablate(const AblateArgs& args) {
  const AblationSuite suite = suite_from_name(args.suite);
  require_file(args.settings.dataset, "dataset");
  SceneCube cube = load_dataset(args.settings.dataset);
  fs::create_directories(args.out_dir);

  const auto rows = run_ablation(suite, args.settings.model, args.settings.train, cube);
  std::ostringstream csv;
  csv << "variant,oa,aa,kappa,params,flops\n";
  json all = json::array();
  for (const AblationRow& row : rows) {
    csv << row.variant << "," << std::setprecision(10) << row.test_report.oa << ","
        << row.test_report.aa << "," << row.test_report.kappa << "," << row.cost.param_count
        << "," << row.cost.flops_per_sample << "\n";
    json j;
    j["variant"] = row.variant;
    j["test"] = report_json(row.test_report);
    j["train"] = report_json(row.train_report);
    j["cost"] = {{"params", row.cost.param_count}, {"flops_per_sample", row.cost.flops_per_sample}};
    all.push_back(j);
  }
  const std::string csv_path = (fs::path(args.out_dir) / (args.suite + ".csv")).string();
  write_text_atomic(csv_path, csv.str());
  write_text_atomic((fs::path(args.out_dir) / (args.suite + ".json")).string(),
                    all.dump(2) + "\n");
  std::cout << "suite '" << args.suite << "': " << rows.size() << " variants -> " << csv_path
            << "\n";
  for (const AblationRow& row : rows) {
    std::cout << "  " << std::left << std::setw(18) << row.variant << " OA=" << std::fixed
              << std::setprecision(4) << row.test_report.oa << " params=" << row.cost.param_count
              << "\n";
  }
  return 0;
}

struct InspectArgs {
  std::string config_path;
  std::string profile;
  std::string checkpoint;
};

int cmd_inspect(const InspectArgs& args) {
  if (!args.checkpoint.empty()) {
    require_file(args.checkpoint, "checkpoint");
    DcmNet model = DcmNet::load(args.checkpoint);
    print_inspect(model);
    return 0;
  }
  RunSettings s = load_settings(args.config_path, args.profile.empty() ? "houston2013"
                                                                       : args.profile);
  DcmNet model(s.model, 0);
  print_inspect(model);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DCMNet: dynamic cross-modal feature interaction network"};
  app.require_subcommand(1);

  // synth ------------------------------------------------------------------
  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic multimodal cube (DYNF)");
  synth->add_option("--out", synth_args.out, "output dataset path")->required();
  synth->add_option("--classes", synth_args.spec.classes, "number of classes")
      ->capture_default_str();
  synth->add_option("--height", synth_args.spec.height, "scene height")->capture_default_str();
  synth->add_option("--width", synth_args.spec.width, "scene width")->capture_default_str();
  synth->add_option("--bands", synth_args.spec.bands, "spectral bands")->capture_default_str();
  synth->add_option("--lidar-channels", synth_args.spec.lidar_channels, "lidar channels")
      ->capture_default_str();
  synth->add_option("--region-size", synth_args.spec.region_size, "label block edge")
      ->capture_default_str();
  synth->add_option("--train-per-class", synth_args.spec.train_per_class,
                    "training pixels per class")
      ->capture_default_str();
  synth->add_option("--noise-spectral", synth_args.spec.spectral_noise, "spectral noise std")
      ->capture_default_str();
  synth->add_option("--noise-height", synth_args.spec.height_noise, "elevation noise std")
      ->capture_default_str();
  synth->add_option("--seed", synth_args.spec.seed, "generator seed")->capture_default_str();

  // shared train-style options --------------------------------------------
  struct CommonFlags {
    std::string config, profile = "synthetic", dataset, out, modality, optimizer;
    std::size_t epochs = 0, batch = 0;
    double lr = 0.0, noise_sigma = 0.0;
    std::uint64_t seed = 0;
    bool no_augment = false;
  };
  auto add_train_flags = [](CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "JSON run config (model/train/paths sections)");
    cmd->add_option("--profile", f.profile, "model profile: synthetic, houston2013, tiny")
        ->capture_default_str();
    cmd->add_option("--dataset", f.dataset, "DYNF dataset path");
    cmd->add_option("--epochs", f.epochs, "training epochs (default 40)");
    cmd->add_option("--batch", f.batch, "batch size (default 64)");
    cmd->add_option("--lr", f.lr, "learning rate (default 0.001)");
    cmd->add_option("--optimizer", f.optimizer, "adam or sgd (default adam)");
    cmd->add_option("--seed", f.seed, "run seed (default 7)");
    cmd->add_option("--modality", f.modality, "HL, H or L (default HL)");
    cmd->add_option("--noise-sigma", f.noise_sigma, "augmentation noise (default 0.05)");
    cmd->add_flag("--no-augment", f.no_augment, "disable data augmentation");
  };
  auto settings_from_flags = [](CLI::App* cmd, const CommonFlags& f) {
    RunSettings s = load_settings(f.config, cmd->count("--config") && !cmd->count("--profile")
                                                ? ""
                                                : f.profile);
    if (cmd->count("--config")) {
      RunSettings file = load_settings(f.config, "");
      // the config file's model wins over the profile unless absent
      std::ifstream check(f.config);
      json j = json::parse(check);
      if (j.contains("model")) s.model = file.model;
      s.train = file.train;
      if (!file.dataset.empty()) s.dataset = file.dataset;
      if (!file.checkpoint.empty()) s.checkpoint = file.checkpoint;
    }
    if (cmd->count("--dataset")) s.dataset = f.dataset;
    if (cmd->count("--epochs")) s.train.epochs = f.epochs;
    if (cmd->count("--batch")) s.train.batch_size = f.batch;
    if (cmd->count("--lr")) s.train.learning_rate = f.lr;
    if (cmd->count("--optimizer")) s.train.optimizer = optimizer_from_name(f.optimizer);
    if (cmd->count("--seed")) s.train.seed = f.seed;
    if (cmd->count("--modality")) s.train.modality = modality_from_name(f.modality);
    if (cmd->count("--noise-sigma")) s.train.noise_sigma = f.noise_sigma;
    if (f.no_augment) s.train.augment = false;
    return s;
  };

  // train ------------------------------------------------------------------
  CommonFlags train_flags;
  std::string train_out, train_loss_log;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model, write a DYNM checkpoint");
  add_train_flags(train_cmd, train_flags);
  train_cmd->add_option("--out", train_out, "checkpoint output path")->required();
  train_cmd->add_option("--loss-log", train_loss_log, "JSON loss history output path");

  // eval -------------------------------------------------------------------
  EvalArgs eval_args;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "DYNM checkpoint")->required();
  eval_cmd->add_option("--dataset", eval_args.dataset, "DYNF dataset")->required();
  eval_cmd->add_option("--split", eval_args.split, "train or test")->capture_default_str();
  eval_cmd->add_option("--modality", eval_args.modality, "HL, H or L")->capture_default_str();
  eval_cmd->add_option("--report", eval_args.report, "JSON evaluation report path");
  eval_cmd->add_option("--routes", eval_args.routes, "JSON routing trace path");
  eval_cmd->add_option("--route-threshold", eval_args.route_threshold,
                       "active-path threshold")
      ->capture_default_str();

  // ablate -----------------------------------------------------------------
  CommonFlags ablate_flags;
  std::string ablate_suite, ablate_out_dir = "ablation";
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run an ablation suite");
  add_train_flags(ablate_cmd, ablate_flags);
  ablate_cmd
      ->add_option("--suite", ablate_suite, "blocks, router, attention, layers or modality")
      ->required();
  ablate_cmd->add_option("--out-dir", ablate_out_dir, "report directory")->capture_default_str();

  // inspect ----------------------------------------------------------------
  InspectArgs inspect_args;
  CLI::App* inspect_cmd = app.add_subcommand("inspect", "print the layer table of a model");
  inspect_cmd->add_option("--config", inspect_args.config_path, "JSON run config");
  inspect_cmd->add_option("--profile", inspect_args.profile,
                          "model profile (default houston2013)");
  inspect_cmd->add_option("--checkpoint", inspect_args.checkpoint, "DYNM checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(synth)) return cmd_synth(synth_args);
    if (app.got_subcommand(train_cmd)) {
      TrainArgs args;
      args.settings = settings_from_flags(train_cmd, train_flags);
      args.settings.checkpoint = train_out;
      args.loss_log = train_loss_log;
      return cmd_train(args);
    }
    if (app.got_subcommand(eval_cmd)) return cmd_eval(eval_args);
    if (app.got_subcommand(ablate_cmd)) {
      AblateArgs args;
      args.settings = settings_from_flags(ablate_cmd, ablate_flags);
      args.suite = ablate_suite;
      args.out_dir = ablate_out_dir;
      return cmd_ablate(args);
    }
    if (app.got_subcommand(inspect_cmd)) return cmd_inspect(inspect_args);
  } catch (const DataFormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
