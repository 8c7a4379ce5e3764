#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "pvc/bench.hpp"
#include "pvc/checkpoint.hpp"
#include "pvc/data_io.hpp"
#include "pvc/gradcheck_suite.hpp"
#include "pvc/kernels.hpp"
#include "pvc/train.hpp"

namespace fs = std::filesystem;
using namespace pvc;

namespace {

enum Exit { kOk = 0, kVerifyFailed = 1, kUsage = 2, kDiverged = 3 };

struct UsageError : Error {
  using Error::Error;
};

struct Common {
  int threads = 1;
  std::uint64_t seed = 7;
};

NetworkConfig load_config(const std::string& path) {
  NetworkConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw UsageError("--config: cannot open " + path);
  try {
    cfg = nlohmann::json::parse(in).get<NetworkConfig>();
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("--config: " + path + " is not valid JSON: " + e.what());
  }
  return cfg;
}

std::vector<PointCloud> load_labeled(const std::string& flag, const std::string& path) {
  if (!fs::exists(path)) throw UsageError(flag + ": path '" + path + "' does not exist");
  auto data = load_dataset(path);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data[i].has_labels()) throw UsageError(flag + ": cloud " + std::to_string(i) + " in '" + path + "' has no labels");
  }
  return data;
}

struct TrainArgs {
  std::string config, data, val, checkpoint = "pvcnet.pvck", csv = "train_log.csv";
  std::optional<std::size_t> epochs;
  std::optional<double> width;
  std::size_t batch_size = 16, train_points = 0;
  double lr = 1e-3;
  double stop_at = 0.0;
};

int cmd_train(const TrainArgs& a, const Common& common) {
  NetworkConfig cfg = load_config(a.config);
  if (a.width) cfg.width_multiplier = *a.width;
  cfg.validate();
  const auto train_set = load_labeled("--data", a.data);
  const auto val = a.val.empty() ? std::vector<PointCloud>{} : load_labeled("--val", a.val);

  Network<float> net(cfg, common.seed);
  std::cout << "network: " << cfg.num_layers << " layers, channels";
  for (const auto c : cfg.channels()) std::cout << ' ' << c;
  std::cout << ", " << net.parameter_count() << " parameters\n";

  std::ofstream log(a.csv);
  if (!log) throw UsageError("--csv: cannot write " + a.csv);
  log << "epoch,lr,loss,acc,mIoU\n";

  TrainOptions opts;
  opts.epochs = a.epochs.value_or(200);
  opts.batch_size = a.batch_size;
  opts.base_lr = a.lr;
  opts.seed = common.seed;
  opts.train_points = a.train_points;
  opts.on_epoch = [&](const EpochLog& e) {
    log << e.epoch << ',' << e.lr << ',' << e.loss << ',' << e.accuracy << ',' << e.miou << '\n';
    std::cout << "epoch " << std::setw(4) << e.epoch << "  lr " << e.lr << "  loss " << e.loss << "  acc "
              << e.accuracy << "  mIoU " << e.miou;
    if (!val.empty()) std::cout << "  val_acc " << e.val_accuracy << "  val_mIoU " << e.val_miou;
    std::cout << '\n';
    return a.stop_at <= 0.0 || e.accuracy < a.stop_at;
  };
  const TrainResult result = train(net, train_set, val, opts);
  save_checkpoint(net, a.checkpoint);
  std::cout << "best epoch " << result.best_epoch << " mIoU " << result.best_miou << "\n"
            << "checkpoint written to " << a.checkpoint << ", log to " << a.csv << '\n';
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, data, csv;
  bool per_head = false;
};

int cmd_eval(const EvalArgs& a) {
  if (!fs::exists(a.checkpoint)) throw UsageError("--checkpoint: path '" + a.checkpoint + "' does not exist");
  Network<float> net = load_checkpoint(a.checkpoint);
  const auto data = load_labeled("--data", a.data);
  std::vector<PreparedCloud> prepared;
  for (const auto& c : data) prepared.push_back(prepare_cloud(net.config(), c));
  const Metrics m = evaluate(net, prepared, a.per_head);

  std::cout << std::fixed << std::setprecision(4);
  std::cout << "points   " << m.points << "\naccuracy " << m.accuracy << "\nmIoU     " << m.miou << '\n';
  for (std::size_t c = 0; c < m.iou.size(); ++c) {
    std::cout << "IoU[" << c << "]   ";
    if (std::isnan(m.iou[c])) {
      std::cout << "absent\n";
    } else {
      std::cout << m.iou[c] << '\n';
    }
  }
  for (std::size_t h = 0; h < m.head_accuracy.size(); ++h) {
    std::cout << "head" << h << " accuracy " << m.head_accuracy[h] << '\n';
  }
  if (!a.csv.empty()) {
    std::ofstream out(a.csv);
    if (!out) throw UsageError("--csv: cannot write " + a.csv);
    out << "metric,value\naccuracy," << m.accuracy << "\nmIoU," << m.miou << '\n';
    for (std::size_t c = 0; c < m.iou.size(); ++c) out << "iou_" << c << ',' << m.iou[c] << '\n';
    for (std::size_t h = 0; h < m.head_accuracy.size(); ++h) out << "head" << h << "_accuracy," << m.head_accuracy[h] << '\n';
  }
  return kOk;
}

struct BenchArgs {
  std::string config, checkpoint, csv;
  std::vector<double> widths{0.5, 0.75, 1.0};
  std::vector<std::size_t> sizes{2048, 8192};
  std::size_t runs = 20, warmup = 3;
};

int cmd_bench(const BenchArgs& a, const Common& common) {
  BenchOptions opts;
  opts.base = a.checkpoint.empty() ? load_config(a.config) : load_checkpoint(a.checkpoint).config();
  opts.widths = a.widths;
  opts.sizes = a.sizes;
  opts.runs = a.runs;
  opts.warmup = a.warmup;
  opts.seed = common.seed;
  const auto rows = run_bench(opts);
  print_bench_table(rows, std::cout);
  if (!a.csv.empty()) {
    std::ofstream out(a.csv);
    if (!out) throw UsageError("--csv: cannot write " + a.csv);
    write_bench_csv(rows, out);
  }
  return kOk;
}

struct GradcheckArgs {
  int precision = 64;
  std::string inject;
};

int cmd_gradcheck(const GradcheckArgs& a, const Common& common) {
  if (a.precision != 32 && a.precision != 64) throw UsageError("--precision must be 32 or 64");
  if (a.inject == "conv3d") {
    debug::set_fault(debug::Fault::conv3d_backward_sign);
  } else if (!a.inject.empty()) {
    throw UsageError("--inject-fault: unknown fault '" + a.inject + "'");
  }
  std::vector<SuiteEntry> entries;
  if (a.precision == 32) {
    std::cerr << "warning: tolerances are advisory at 32-bit precision; the pass criterion is defined at 64-bit\n";
    GradcheckOptions opts;
    opts.step = 1e-3;
    opts.tolerance = 1e-2;
    opts.scale_floor = 1e-2;
    entries = run_gradcheck_suite<float>(opts, common.seed);
  } else {
    entries = run_gradcheck_suite<double>({}, common.seed);
  }
  bool ok = true;
  std::cout << std::left << std::setw(22) << "component" << std::setw(14) << "max_rel_err" << std::setw(10) << "checked"
            << "excluded\n";
  for (const auto& e : entries) {
    std::cout << std::setw(22) << e.component << std::setw(14) << std::scientific << std::setprecision(3)
              << e.report.max_rel_error << std::defaultfloat << std::setw(10) << e.report.checked
              << e.report.excluded << (e.report.passed ? "" : "  FAIL") << '\n';
    ok = ok && e.report.passed;
  }
  for (const auto& e : entries) {
    if (e.report.passed) continue;
    std::cerr << (a.precision == 32 ? "advisory: " : "gradcheck failed: ") << e.component << " input " << e.report.worst_input << " coordinate "
              << e.report.worst_coord << " analytic " << e.report.worst_analytic << " numeric "
              << e.report.worst_numeric;
    if (!e.report.failure.empty()) std::cerr << " (" << e.report.failure << ")";
    std::cerr << '\n';
  }
  return ok || a.precision == 32 ? kOk : kVerifyFailed;
}

struct GenerateArgs {
  std::string out;
  std::size_t scenes = 8, points = 2048;
  bool blocks = false;
};

int cmd_generate(const GenerateArgs& a, const Common& common) {
  fs::create_directories(a.out);
  std::size_t written = 0;
  for (std::size_t s = 0; s < a.scenes; ++s) {
    SyntheticSceneSpec spec;
    spec.points = a.points;
    spec.seed = common.seed + s;
    if (a.blocks) spec.extent = 5.0;
    const PointCloud cloud = generate_scene(spec).cloud;
    char name[64];
    if (a.blocks) {
      for (const auto& b : split_blocks(cloud)) {
        std::snprintf(name, sizeof name, "scene_%03zu_block_%zu_%zu.pvcn", s, b.tile[0], b.tile[1]);
        write_cloud(b.cloud, fs::path(a.out) / name);
        ++written;
      }
    } else {
      std::snprintf(name, sizeof name, "scene_%03zu.pvcn", s);
      write_cloud(cloud, fs::path(a.out) / name);
      ++written;
    }
  }
  std::cout << "wrote " << written << " clouds to " << a.out << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point-voxel convolution network: training, evaluation, gradient checks, benchmarks"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--threads", common.threads, "Upper bound on worker threads")->check(CLI::PositiveNumber);
  app.add_option("--seed", common.seed, "Seed for initialization, shuffling and generated data");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a network and write a checkpoint and metric log");
  train_cmd->add_option("--config", ta.config, "JSON network config; flags override its values");
  train_cmd->add_option("--data", ta.data, "Training cloud file or directory")->required();
  train_cmd->add_option("--val", ta.val, "Held-out cloud file or directory");
  train_cmd->add_option("--epochs", ta.epochs, "Epoch count (default 200)");
  train_cmd->add_option("--width", ta.width, "Width multiplier on the base channel count");
  train_cmd->add_option("--batch-size", ta.batch_size, "Clouds per optimizer step")->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", ta.lr, "Base learning rate");
  train_cmd->add_option("--train-points", ta.train_points, "Subsample larger clouds to this many points each epoch");
  train_cmd->add_option("--stop-at", ta.stop_at, "Stop once training accuracy reaches this value");
  train_cmd->add_option("--checkpoint,--out", ta.checkpoint, "Checkpoint output path");
  train_cmd->add_option("--csv", ta.csv, "Metric log path (epoch,lr,loss,acc,mIoU)");
  train_cmd->add_option("--seed", common.seed, "Seed");
  train_cmd->add_option("--threads", common.threads, "Upper bound on worker threads")->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Report accuracy and IoU of a checkpoint on labeled data");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint path")->required();
  eval_cmd->add_option("--data", ea.data, "Labeled cloud file or directory")->required();
  eval_cmd->add_flag("--per-head", ea.per_head, "Also report each auxiliary head's accuracy");
  eval_cmd->add_option("--csv", ea.csv, "Write metrics as CSV");
  eval_cmd->add_option("--threads", common.threads, "Upper bound on worker threads")->check(CLI::PositiveNumber);

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand(
      "bench",
      "Forward latency and peak RSS per width and point count.\n"
      "Timed region: voxelization, neighbor search and one forward pass without\n"
      "gradient recording. Scene generation and file I/O are outside it.");
  bench_cmd->add_option("--config", ba.config, "JSON network config used as the base");
  bench_cmd->add_option("--checkpoint", ba.checkpoint, "Take the base config from a checkpoint");
  bench_cmd->add_option("--widths", ba.widths, "Width multipliers");
  bench_cmd->add_option("--sizes", ba.sizes, "Point counts");
  bench_cmd->add_option("--runs", ba.runs, "Timed runs per row (at least 20)");
  bench_cmd->add_option("--warmup", ba.warmup, "Warm-up runs per row (at least 3)");
  bench_cmd->add_option("--csv", ba.csv, "Write the report as CSV");
  bench_cmd->add_option("--seed", common.seed, "Seed");
  bench_cmd->add_option("--threads", common.threads, "Upper bound on worker threads")->check(CLI::PositiveNumber);

  GradcheckArgs ga;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Central-difference check of every gradient");
  grad_cmd->add_option("--precision", ga.precision, "32 or 64 (default 64)");
  grad_cmd->add_option("--inject-fault", ga.inject)->group("");
  grad_cmd->add_option("--seed", common.seed, "Seed");
  grad_cmd->add_option("--threads", common.threads, "Upper bound on worker threads")->check(CLI::PositiveNumber);

  GenerateArgs gen;
  auto* gen_cmd = app.add_subcommand("generate", "Write synthetic labeled scenes");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--scenes", gen.scenes, "Scene count");
  gen_cmd->add_option("--points", gen.points, "Points per scene");
  gen_cmd->add_flag("--blocks", gen.blocks, "Generate 5 m rooms and split them into padded 2 m blocks");
  gen_cmd->add_option("--seed", common.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    kernels::set_num_threads(common.threads);
    if (*train_cmd) return cmd_train(ta, common);
    if (*eval_cmd) return cmd_eval(ea);
    if (*bench_cmd) return cmd_bench(ba, common);
    if (*grad_cmd) return cmd_gradcheck(ga, common);
    if (*gen_cmd) return cmd_generate(gen, common);
  } catch (const TrainingError& e) {
    std::cerr << "error: training diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
