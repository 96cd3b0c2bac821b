#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "fvit/blocks/gradcheck.hpp"
#include "fvit/core/errors.hpp"
#include "fvit/data/data.hpp"
#include "fvit/train/train.hpp"

namespace fvit::cli {
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- datasets

struct DataSplit {
  data::LabeledDataset train, test;
  data::Stats stats;
  data::AugmentFlags augment;
};

std::string default_data_dir() {
  if (const char* env = std::getenv("FVIT_DATA_DIR")) return env;
  return "data";
}

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError("dataset file not found: " + path);
}

data::LabeledDataset head(const data::LabeledDataset& ds, std::size_t limit) {
  return limit == 0 || limit >= ds.size() ? ds : data::subset(ds, 0, limit);
}

DataSplit load_split(const std::string& name, const std::string& dir, std::size_t train_limit,
                     std::size_t test_limit, std::size_t resolution) {
  DataSplit s;
  if (name == "mnist") {
    const std::string p = dir + "/mnist/";
    for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                          "t10k-labels-idx1-ubyte"}) {
      require_file(p + f);
    }
    s.train = data::load_idx(p + "train-images-idx3-ubyte", p + "train-labels-idx1-ubyte");
    s.test = data::load_idx(p + "t10k-images-idx3-ubyte", p + "t10k-labels-idx1-ubyte");
    s.stats = data::kMnistStats;
  } else if (name == "cifar10") {
    const std::string p = dir + "/cifar10/";
    std::vector<std::string> batches;
    for (int i = 1; i <= 5; ++i) batches.push_back(p + "data_batch_" + std::to_string(i) + ".bin");
    for (const auto& b : batches) require_file(b);
    require_file(p + "test_batch.bin");
    s.train = data::load_cifar10(batches);
    s.test = data::load_cifar10({p + "test_batch.bin"});
    s.stats = data::kCifarStats;
    s.augment = {true, true};
  } else {
    throw UsageError("unknown dataset '" + name + "' (expected mnist or cifar10)");
  }
  s.train = train::prepare(head(s.train, train_limit), s.stats, resolution);
  s.test = train::prepare(head(s.test, test_limit), s.stats, resolution);
  return s;
}

model::ModelConfig desk_model(const std::string& name, const std::string& ffn) {
  model::ModelConfig cfg = model::preset(name);
  cfg.num_classes = 10;
  cfg.resolution = 32;
  if (ffn == "plain") {
    cfg = plain_control(cfg, false);
  } else if (ffn != "dual") {
    throw UsageError("unknown --ffn '" + ffn + "' (expected dual or plain)");
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------- training driver

struct DataFlags {
  std::string dataset;
  std::string data_dir = default_data_dir();
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;

  void add(CLI::App* app) {
    app->add_option("--dataset", dataset, "mnist or cifar10")->required();
    app->add_option("--data-dir", data_dir, "root holding mnist/ and cifar10/ (env FVIT_DATA_DIR)")
        ->capture_default_str();
    app->add_option("--train-limit", train_limit, "use only the first N training samples (0 = all)");
    app->add_option("--test-limit", test_limit, "use only the first N test samples (0 = all)");
  }
};

struct RecipeFlags {
  train::TrainRecipe recipe;
  bool no_augment = false;
  CLI::Option* warmup = nullptr;

  void add(CLI::App* app) {
    app->add_option("--epochs", recipe.epochs)->capture_default_str();
    app->add_option("--lr", recipe.base_lr, "base learning rate")->capture_default_str();
    warmup = app->add_option("--warmup-epochs", recipe.warmup_epochs, "default: 1, or 0 for a 1-epoch run");
    app->add_option("--weight-decay", recipe.weight_decay)->capture_default_str();
    app->add_option("--label-smoothing", recipe.label_smoothing)->capture_default_str();
    app->add_option("--batch-size", recipe.batch_size)->capture_default_str();
    app->add_flag("--no-augment", no_augment, "disable flip/crop augmentation");
  }

  train::TrainRecipe resolve(const DataSplit& split, std::uint64_t seed) const {
    train::TrainRecipe r = recipe;
    r.seed = seed;
    if (warmup->count() == 0) r.warmup_epochs = std::min<std::size_t>(1, r.epochs > 0 ? r.epochs - 1 : 0);
    r.augment = no_augment ? data::AugmentFlags{} : split.augment;
    return r;
  }
};

struct TrainOutcome {
  train::EvalResult test;
  std::size_t params = 0;
};

std::string fixed(double v, int digits = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

/// Trains (optionally resuming) and evaluates on the test split. When
/// out_dir is non-empty, writes metrics.log, eval.log and checkpoint.fvit.
TrainOutcome train_and_eval(const model::ModelConfig& cfg, const DataSplit& split, const train::TrainRecipe& recipe,
                            const std::string& out_dir, const std::string& resume, std::size_t eval_every,
                            std::ostream& out, std::size_t stop_after = 0) {
  const std::size_t stop = stop_after > 0 ? std::min(stop_after, recipe.epochs) : recipe.epochs;
  model::Model<float> m(cfg, recipe.seed);
  train::Trainer<float> trainer(m, split.train, recipe);
  if (!resume.empty()) {
    if (!fs::is_regular_file(resume)) throw UsageError("checkpoint not found: " + resume);
    trainer.load(resume);
  }
  std::ofstream log, eval_log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const auto mode = resume.empty() ? std::ios::trunc : std::ios::app;
    log.open(out_dir + "/metrics.log", std::ios::out | mode);
    eval_log.open(out_dir + "/eval.log", std::ios::out | mode);
    if (!log || !eval_log) throw UsageError("cannot write to output directory " + out_dir);
  }
  const auto t0 = std::chrono::steady_clock::now();
  train::EvalResult last{};
  bool evaluated = false;
  while (trainer.epoch() < stop) {
    const train::EpochMetrics em = trainer.train_epoch();
    out << em.line() << std::endl;
    if (log.is_open()) log << em.line() << std::endl;
    if (!out_dir.empty()) trainer.save(out_dir + "/checkpoint.fvit");
    const bool final_epoch = trainer.epoch() == stop;
    evaluated = final_epoch || (eval_every > 0 && trainer.epoch() % eval_every == 0);
    if (evaluated) {
      last = train::evaluate(m, split.test, 256);
      const std::string line = "epoch=" + std::to_string(trainer.epoch()) + " test_loss=" + fixed(last.loss) +
                               " test_acc=" + fixed(last.accuracy);
      out << line << std::endl;
      if (eval_log.is_open()) eval_log << line << std::endl;
    }
  }
  if (!evaluated) last = train::evaluate(m, split.test, 256);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "# wall_seconds=" << fixed(secs, 1) << std::endl;
  if (log.is_open()) log << "# wall_seconds=" << fixed(secs, 1) << std::endl;
  return {last, m.count_params()};
}

// ---------------------------------------------------------------- commands

struct Common {
  std::uint64_t seed = 0;
  std::string out_dir = "fvit-out";
};

int cmd_train(const Common& c, const DataFlags& df, const RecipeFlags& rf, const std::string& model_name,
              const std::string& ffn, const std::string& resume, std::size_t eval_every, std::size_t stop_after,
              std::ostream& out) {
  const model::ModelConfig cfg = desk_model(model_name, ffn);
  const DataSplit split = load_split(df.dataset, df.data_dir, df.train_limit, df.test_limit, cfg.resolution);
  const train::TrainRecipe recipe = rf.resolve(split, c.seed);
  recipe.validate();
  out << "# train model=" << cfg.name << " ffn=" << ffn << " params=" << count_params(cfg)
      << " train=" << split.train.size() << " test=" << split.test.size() << std::endl;
  const TrainOutcome r = train_and_eval(cfg, split, recipe, c.out_dir, resume, eval_every, out, stop_after);
  out << "test_acc=" << fixed(r.test.accuracy) << " test_loss=" << fixed(r.test.loss) << std::endl;
  return kOk;
}

int cmd_eval(const DataFlags& df, const std::string& model_name, const std::string& ffn, const std::string& ckpt_path,
             std::size_t batch, std::ostream& out) {
  const model::ModelConfig cfg = desk_model(model_name, ffn);
  if (!fs::is_regular_file(ckpt_path)) throw UsageError("checkpoint not found: " + ckpt_path);
  const model::Checkpoint ckpt = model::read_checkpoint(ckpt_path);
  const DataSplit split = load_split(df.dataset, df.data_dir, df.train_limit, df.test_limit, cfg.resolution);
  model::Model<float> m(cfg, 0);
  m.load_state(ckpt);
  const train::EvalResult r = train::evaluate(m, split.test, batch);
  out << "test_acc=" << fixed(r.accuracy) << " test_loss=" << fixed(r.loss) << " samples=" << split.test.size()
      << std::endl;
  return kOk;
}

int cmd_gradcheck(std::size_t trials, std::uint64_t seed, bool break_eq9, std::ostream& out) {
  if (trials == 0) throw UsageError("--trials must be >= 1");
  blocks::GradCheckOptions opt;
  opt.trials = trials;
  opt.seed = seed;
  if (break_eq9) opt.form = gabor::LambdaGradForm::kEnvelopeUsesLambda;
  bool ok = true;
  for (auto* suite : {blocks::check_kernel_grads, blocks::check_lgf_grads, blocks::check_block_grads}) {
    const blocks::GradCheckReport r = suite(opt);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-13s trials=%-4zu tensors=%-5zu max_rel_error=%.3e tol=%.0e %s", r.suite.c_str(),
                  r.trials, r.checked, r.max_rel_error, r.tolerance, r.passed() ? "PASS" : "FAIL");
    out << buf << std::endl;
    if (!r.passed()) {
      out << "  worst: " << r.worst << std::endl;
      ok = false;
    }
  }
  return ok ? kOk : kCheckFailed;
}

struct Target {
  double params, flops;
};
const std::map<std::string, Target> kTable1 = {
    {"tiny", {11.28e6, 1.94e9}}, {"small", {23.59e6, 3.98e9}}, {"base", {43.15e6, 7.21e9}}, {"large", {60.15e6, 10.18e9}}};

int cmd_count(const std::string& variant, std::size_t resolution, int flops_per_mac, double param_tol,
              double flop_tol, std::ostream& out) {
  const model::ModelConfig cfg = model::preset(variant);
  if (resolution == 0 || resolution % 32 != 0) {
    throw UsageError("--resolution " + std::to_string(resolution) + " is not a positive multiple of 32");
  }
  if (flops_per_mac != 1 && flops_per_mac != 2) throw UsageError("--flops-per-mac must be 1 or 2");
  const auto mac = static_cast<std::uint64_t>(flops_per_mac);
  out << std::left << std::setw(8) << "part" << std::right << std::setw(14) << "params" << std::setw(16) << "FLOPs"
      << std::setw(14) << "output" << '\n';
  for (const auto& row : model::account(cfg, resolution)) {
    out << std::left << std::setw(8) << row.name << std::right << std::setw(14) << row.params << std::setw(16)
        << row.macs * mac + row.generation_ops << std::setw(14)
        << (std::to_string(row.out_size) + "x" + std::to_string(row.out_size) + "x" + std::to_string(row.out_channels))
        << '\n';
  }
  const double params = static_cast<double>(model::count_params(cfg));
  const double flops = static_cast<double>(model::count_flops(
      cfg, resolution, flops_per_mac == 2 ? model::FlopConvention::kMacAsTwo : model::FlopConvention::kMacAsOne));
  out << "total params=" << fixed(params / 1e6, 3) << "M flops=" << fixed(flops / 1e9, 3) << "G @" << resolution
      << '\n';
  const auto it = kTable1.find(variant);
  if (it == kTable1.end()) {
    out << "no published target for '" << variant << "'" << std::endl;
    return kOk;
  }
  bool ok = true;
  auto compare = [&](const char* what, double value, double target, double tol, double unit, const char* suffix) {
    const double dev = (value - target) / target;
    const bool pass = std::abs(dev) <= tol;
    ok = ok && pass;
    out << what << ": " << fixed(value / unit, 3) << suffix << " vs " << fixed(target / unit, 2) << suffix
        << " deviation=" << std::showpos << fixed(100 * dev, 1) << std::noshowpos << "% (tol "
        << fixed(100 * tol, 0) << "%) " << (pass ? "PASS" : "FAIL") << '\n';
  };
  compare("params", params, it->second.params, param_tol, 1e6, "M");
  if (resolution == 224) {
    compare("flops", flops, it->second.flops, flop_tol, 1e9, "G");
  } else {
    out << "flops: no published target at " << resolution << '\n';
  }
  out.flush();
  return ok ? kOk : kCheckFailed;
}

int cmd_ablate(const Common& c, const DataFlags& df, const RecipeFlags& rf, const std::string& model_name,
               std::vector<std::uint64_t> seeds, bool equal_params, std::ostream& out) {
  if (seeds.empty()) seeds = {c.seed};
  const model::ModelConfig dual = desk_model(model_name, "dual");
  const model::ModelConfig plain = plain_control(dual, equal_params);
  const DataSplit split = load_split(df.dataset, df.data_dir, df.train_limit, df.test_limit, dual.resolution);
  fs::create_directories(c.out_dir);
  std::ofstream log(c.out_dir + "/ablation.log");
  if (!log) throw UsageError("cannot write to output directory " + c.out_dir);
  const std::size_t p_dual = model::count_params(dual), p_plain = model::count_params(plain);
  auto emit = [&](const std::string& line) {
    out << line << std::endl;
    log << line << std::endl;
  };
  emit("params dpffn=" + std::to_string(p_dual) + " ffn=" + std::to_string(p_plain) +
       " delta=" + std::to_string(static_cast<long long>(p_dual) - static_cast<long long>(p_plain)) +
       " rel=" + fixed(100.0 * (static_cast<double>(p_dual) - p_plain) / p_plain, 3) + "%");
  double sum_dual = 0, sum_plain = 0;
  std::ostringstream sink;
  for (const std::uint64_t seed : seeds) {
    const train::TrainRecipe recipe = rf.resolve(split, seed);
    recipe.validate();
    const TrainOutcome a = train_and_eval(dual, split, recipe, "", "", 0, sink);
    const TrainOutcome b = train_and_eval(plain, split, recipe, "", "", 0, sink);
    sum_dual += a.test.accuracy;
    sum_plain += b.test.accuracy;
    emit("seed=" + std::to_string(seed) + " dpffn_acc=" + fixed(a.test.accuracy) + " ffn_acc=" +
         fixed(b.test.accuracy) + " delta=" + fixed(a.test.accuracy - b.test.accuracy));
  }
  const double n = static_cast<double>(seeds.size());
  emit("mean dpffn_acc=" + fixed(sum_dual / n) + " ffn_acc=" + fixed(sum_plain / n) +
       " delta=" + fixed((sum_dual - sum_plain) / n) + " seeds=" + std::to_string(seeds.size()));
  return kOk;
}

int cmd_export(const Common& c, const std::string& model_name, bool init, const std::string& ckpt_path,
               std::size_t stage, std::size_t block, std::size_t count, std::ostream& out) {
  if (init == !ckpt_path.empty()) throw UsageError("give exactly one of --init or --checkpoint");
  const model::ModelConfig cfg = desk_model(model_name, "dual");
  model::Model<float> m(cfg, c.seed);
  if (!init) {
    if (!fs::is_regular_file(ckpt_path)) throw UsageError("checkpoint not found: " + ckpt_path);
    m.load_state(model::read_checkpoint(ckpt_path));
  }
  if (stage >= 4) throw UsageError("--stage must be in [0, 4)");
  if (block >= m.num_blocks(stage)) {
    throw UsageError("--block must be below " + std::to_string(m.num_blocks(stage)) + " for stage " +
                     std::to_string(stage));
  }
  const auto& lgf = m.block(stage, block).lgf;
  if (count == 0 || count > lgf.channels()) {
    throw UsageError("--count must be in [1, " + std::to_string(lgf.channels()) + "]");
  }
  const Tensor<double> bank = lgf.kernels().cast<double>();
  const auto k = static_cast<std::size_t>(lgf.kernel_size());
  fs::create_directories(c.out_dir);
  std::ofstream index(c.out_dir + "/index.txt");
  if (!index) throw UsageError("cannot write to output directory " + c.out_dir);
  index << "# channel lambda theta psi gamma sigma\n";
  for (std::size_t ch = 0; ch < count; ++ch) {
    Tensor<double> kern({k, k});
    std::copy_n(bank.ptr() + ch * k * k, k * k, kern.ptr());
    char name[64];
    std::snprintf(name, sizeof name, "stage%zu_block%zu_ch%03zu.pgm", stage, block, ch);
    std::ofstream pgm(c.out_dir + "/" + name, std::ios::binary);
    pgm << kernel_pgm(kern);
    const auto p = lgf.params(ch);
    char line[200];
    std::snprintf(line, sizeof line, "%zu %.9g %.9g %.9g %.9g %.9g\n", ch, double(p.lambda), double(p.theta),
                  double(p.psi), double(p.gamma), double(p.sigma));
    index << line;
  }
  out << "wrote " << count << " kernels (" << k << "x" << k << ") to " << c.out_dir << std::endl;
  return kOk;
}

}  // namespace

// ---------------------------------------------------------------- helpers

std::vector<std::string> config_flags(const std::string& path, const std::vector<std::string>& args) {
  if (!fs::is_regular_file(path)) throw UsageError("config file not found: " + path);
  std::ifstream in(path);
  std::vector<std::string> extra;
  for (const CLI::ConfigItem& item : CLI::ConfigINI().from_config(in)) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    const std::string flag = "--" + item.name;
    if (std::find(args.begin(), args.end(), flag) != args.end()) continue;
    if (item.inputs.size() == 1 && (item.inputs[0] == "true" || item.inputs[0] == "false")) {
      if (item.inputs[0] == "true") extra.push_back(flag);
      continue;
    }
    extra.push_back(flag);
    extra.insert(extra.end(), item.inputs.begin(), item.inputs.end());
  }
  return extra;
}

std::string kernel_pgm(const Tensor<double>& kernel) {
  if (kernel.rank() != 2) throw DimensionError("kernel_pgm expects a 2-D kernel");
  const auto [lo, hi] = std::minmax_element(kernel.ptr(), kernel.ptr() + kernel.numel());
  const double range = *hi - *lo;
  std::string s = "P5\n" + std::to_string(kernel.dim(1)) + " " + std::to_string(kernel.dim(0)) + "\n255\n";
  for (std::size_t i = 0; i < kernel.numel(); ++i) {
    const double v = range < 1e-12 ? 128.0 : std::round((kernel[i] - *lo) / range * 255.0);
    s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return s;
}

std::size_t matched_plain_hidden(std::size_t channels, double ratio) {
  const double target = static_cast<double>(blocks::Dpffn<float>::param_count(channels, ratio));
  // Plain count is affine in the hidden width: a*h + b.
  const double b = static_cast<double>(blocks::PlainFfn<float>::param_count(channels, 0));
  const double a = static_cast<double>(blocks::PlainFfn<float>::param_count(channels, 1)) - b;
  std::size_t best = 1;
  double best_err = INFINITY;
  const auto guess = static_cast<std::size_t>(std::max(1.0, std::round((target - b) / a)));
  for (std::size_t h = guess > 1 ? guess - 1 : 1; h <= guess + 1; ++h) {
    const double err = std::abs(a * static_cast<double>(h) + b - target);
    if (err < best_err) {
      best_err = err;
      best = h;
    }
  }
  return best;
}

model::ModelConfig plain_control(const model::ModelConfig& cfg, bool equal_params) {
  model::ModelConfig p = cfg;
  p.ffn = blocks::FfnKind::kPlain;
  for (auto& s : p.stages) s.plain_hidden = equal_params ? matched_plain_hidden(s.channels, s.ratio) : 0;
  return p;
}

// ---------------------------------------------------------------- entry point

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"FViT: learnable Gabor filter backbones at desk scale", "fvit"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "help for every command");

  Common common;
  DataFlags data_flags;
  RecipeFlags recipe_flags;
  std::string model_name = "micro", ffn = "dual", resume, checkpoint, config_path;
  std::size_t eval_every = 0, eval_batch = 256, stop_after = 0;
  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--seed", common.seed)->capture_default_str();
    if (with_out) sub->add_option("--out", common.out_dir, "output directory")->capture_default_str();
    sub->add_option("--config", config_path, "file of `key = value` lines; command-line flags win");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model; writes metrics.log, eval.log, checkpoint.fvit");
  add_common(train_cmd, true);
  data_flags.add(train_cmd);
  recipe_flags.add(train_cmd);
  train_cmd->add_option("--model", model_name, "micro, tiny, small, base or large")->capture_default_str();
  train_cmd->add_option("--ffn", ffn, "dual (DPFFN) or plain")->capture_default_str();
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");
  train_cmd->add_option("--eval-every", eval_every, "evaluate every N epochs (0 = final epoch only)");
  train_cmd->add_option("--stop-after", stop_after, "stop after this epoch of the schedule (0 = run to the end)");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval_cmd, false);
  DataFlags eval_data;
  eval_data.add(eval_cmd);
  eval_cmd->add_option("--model", model_name)->capture_default_str();
  eval_cmd->add_option("--ffn", ffn)->capture_default_str();
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--batch-size", eval_batch)->capture_default_str();

  std::size_t trials = 200;
  bool break_eq9 = false;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference checks of the analytic gradients (f64)");
  add_common(grad_cmd, false);
  grad_cmd->add_option("--trials", trials, "random kernel draws")->capture_default_str();
  grad_cmd->add_flag("--break-eq9", break_eq9, "use the misprinted lambda derivative (lambda^2 in the envelope)");

  std::string variant = "tiny";
  std::size_t resolution = 224;
  int flops_per_mac = 1;
  double param_tol = 0.05, flop_tol = 0.10;
  auto* count_cmd = app.add_subcommand("count", "parameter and FLOP accounting against the published table");
  add_common(count_cmd, false);
  count_cmd->add_option("--variant", variant, "tiny, small, base, large or micro")->capture_default_str();
  count_cmd->add_option("--resolution", resolution)->capture_default_str();
  count_cmd->add_option("--flops-per-mac", flops_per_mac, "1 or 2")->capture_default_str();
  count_cmd->add_option("--param-tol", param_tol)->capture_default_str();
  count_cmd->add_option("--flop-tol", flop_tol)->capture_default_str();

  std::vector<std::uint64_t> seeds;
  bool equal_params = false;
  auto* ablate_cmd = app.add_subcommand("ablate", "DPFFN vs plain FFN, same data, recipe and seeds");
  add_common(ablate_cmd, true);
  DataFlags ablate_data;
  RecipeFlags ablate_recipe;
  ablate_data.add(ablate_cmd);
  ablate_recipe.add(ablate_cmd);
  ablate_cmd->add_option("--model", model_name)->capture_default_str();
  ablate_cmd->add_option("--seeds", seeds, "comma-separated seed list (default: --seed)")->delimiter(',');
  ablate_cmd->add_flag("--paths-equal-params", equal_params, "size the plain FFN to the DPFFN parameter count");

  bool init = false;
  std::size_t stage = 0, block = 0, count = 4;
  auto* export_cmd = app.add_subcommand("export-kernels", "write LGF kernels as PGM images plus index.txt");
  add_common(export_cmd, true);
  export_cmd->add_option("--model", model_name)->capture_default_str();
  export_cmd->add_flag("--init", init, "export the untrained bank");
  export_cmd->add_option("--checkpoint", checkpoint);
  export_cmd->add_option("--stage", stage, "0-based stage index")->capture_default_str();
  export_cmd->add_option("--block", block, "0-based block index")->capture_default_str();
  export_cmd->add_option("--count", count, "channels to export")->capture_default_str();

  try {
    std::vector<std::string> args = raw_args;
    if (auto it = std::find(args.begin(), args.end(), "--config"); it != args.end() && it + 1 != args.end()) {
      const auto extra = config_flags(*(it + 1), args);
      args.insert(args.end(), extra.begin(), extra.end());
    }
    std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kOk : kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << std::endl;
    return kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(common, data_flags, recipe_flags, model_name, ffn, resume, eval_every, stop_after, out);
    if (*eval_cmd) return cmd_eval(eval_data, model_name, ffn, checkpoint, eval_batch, out);
    if (*grad_cmd) return cmd_gradcheck(trials, common.seed, break_eq9, out);
    if (*count_cmd) return cmd_count(variant, resolution, flops_per_mac, param_tol, flop_tol, out);
    if (*ablate_cmd) return cmd_ablate(common, ablate_data, ablate_recipe, model_name, seeds, equal_params, out);
    if (*export_cmd) return cmd_export(common, model_name, init, checkpoint, stage, block, count, out);
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << std::endl;
    return kNumeric;
  } catch (const std::exception& e) {
    // Bad paths, malformed files, invalid configurations.
    err << "error: " << e.what() << std::endl;
    return kUsage;
  }
  return kUsage;
}

}  // namespace fvit::cli
