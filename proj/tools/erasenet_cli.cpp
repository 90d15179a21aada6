// erasenet: patch extraction, training, denoising, evaluation, gradient check.
// Exit codes: 0 ok, 1 input/data error, 2 numerical halt, 3 checkpoint mismatch.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "erasenet/checkpoint.hpp"
#include "erasenet/denoise.hpp"
#include "erasenet/gradcheck_suite.hpp"
#include "erasenet/metrics.hpp"
#include "erasenet/trainer.hpp"

namespace {

using namespace erasenet;

enum Exit { kOk = 0, kDataError = 1, kNumericalHalt = 2, kCheckpointMismatch = 3 };

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// `key = value` lines, `#` starts a comment
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (int no = 1; std::getline(in, line); ++no) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path.string() + ":" + std::to_string(no) + ": expected key = value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

// Config entries go in front of the real arguments; with take-last the
// command line then wins.
std::vector<std::string> expand_config(CLI::App& app, std::vector<std::string> args) {
  if (args.empty()) return args;
  CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(args.front());
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  std::optional<fs::path> config;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
  }
  if (!config) return args;
  std::vector<std::string> out{args.front()};
  for (const auto& [key, value] : read_config(*config)) {
    const CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config") throw DataError("config: unknown key '" + key + "' for " + args.front());
    if (opt->get_expected_min() == 0) {
      if (value == "true" || value == "1") out.push_back("--" + key);
      else if (value != "false" && value != "0") throw DataError("config: '" + key + "' takes true or false");
    } else {
      out.push_back("--" + key);
      out.push_back(value);
    }
  }
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

// ---- extract-patches --------------------------------------------------------------

struct ExtractArgs {
  fs::path in, out;
};

int cmd_extract(const ExtractArgs& a) {
  if (!fs::is_directory(a.in)) throw DataError("extract-patches: not a directory: " + a.in.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a.in))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  fs::create_directories(a.out);
  if (files.empty()) {
    log_warning("extract-patches: no images under " + a.in.string());
  }
  std::ofstream manifest(a.out / "manifest.csv");
  manifest << "patch,source,row,col\n";
  std::size_t written = 0, failed = 0;
  for (const auto& f : files) {
    try {
      const auto page = resize_bilinear(load_grayscale(f), kPageRows, kPageCols);
      const auto ps = extract_patches(page);
      const fs::path rel = fs::relative(f, a.in).parent_path();
      fs::create_directories(a.out / rel);
      for (std::size_t i = 0; i < ps.patches.size(); ++i) {
        std::ostringstream name;
        name << f.stem().string() << "_p" << std::setw(2) << std::setfill('0') << i << ".pgm";
        const fs::path dst = rel / name.str();
        save_pgm(ps.patches[i], a.out / dst);
        manifest << dst.generic_string() << ',' << fs::relative(f, a.in).generic_string() << ',' << ps.origins[i].row
                 << ',' << ps.origins[i].col << '\n';
        ++written;
      }
    } catch (const std::exception& e) {
      log_warning("extract-patches: failed " + f.string() + ": " + e.what());
      ++failed;
    }
  }
  log_info("extract-patches: " + std::to_string(written) + " patches from " + std::to_string(files.size() - failed) +
           " pages, " + std::to_string(failed) + " failures");
  return failed ? kDataError : kOk;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  int variant = 4;
  fs::path data, noisy, clean, out = "run";
  std::size_t epochs = 100, batch = 8, checkpoint_every = 1;
  double lr = 1e-4, width = 1.0, train_fraction = 0.9;
  std::uint64_t seed = 0;
  std::string mode = "patch";
  fs::path resume;
};

int cmd_train(TrainArgs a) {
  TrainConfig cfg;
  cfg.variant = variant_from_int(a.variant);
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.lr = a.lr;
  cfg.seed = a.seed;
  cfg.width_scale = a.width;
  cfg.checkpoint_every = a.checkpoint_every;
  cfg.input_mode = a.mode == "page" ? InputMode::Page864x480 : InputMode::Patch256;
  cfg.data_root = a.data;
  cfg.out_dir = a.out;
  cfg.train_fraction = a.train_fraction;
  cfg.validate();

  const fs::path noisy = a.noisy.empty() ? a.data / "noisy" : a.noisy;
  const fs::path clean = a.clean.empty() ? a.data / "clean" : a.clean;
  std::ostringstream echo;
  echo << "train: variant=" << to_string(cfg.variant) << " noisy=" << noisy.string() << " clean=" << clean.string()
       << " epochs=" << cfg.epochs << " batch=" << cfg.batch_size << " lr=" << cfg.lr << " seed=" << cfg.seed
       << " width-scale=" << cfg.width_scale << " mode=" << a.mode << " out=" << cfg.out_dir.string();
  log_info(echo.str());

  const auto manifest = scan_pairs(noisy, clean, {cfg.train_fraction, cfg.seed});
  if (manifest.pairs.empty()) throw DataError("train: no noisy/clean pairs found");
  const auto train_set = load_samples(manifest.subset(Split::Train), cfg.input_mode);
  const auto val_set = load_samples(manifest.subset(Split::Val), cfg.input_mode);
  log_info("train: " + std::to_string(train_set.size()) + " train / " + std::to_string(val_set.size()) + " val samples");

  auto model = build_erasenet(cfg.variant, cfg.width_scale, cfg.seed);
  Trainer trainer(model, cfg);
  if (!a.resume.empty()) {
    restore(load_checkpoint(a.resume), model, &trainer.state());
    log_info("train: resumed at epoch " + std::to_string(trainer.state().epoch));
  }
  try {
    trainer.train(train_set, val_set);
  } catch (const TrainingHalted& e) {
    log_warning(std::string("training halted: ") + e.what());
    std::cerr << "last good checkpoint: " << (e.checkpoint ? e.checkpoint->string() : std::string("none")) << '\n';
    return kNumericalHalt;
  }
  return kOk;
}

// ---- denoise ----------------------------------------------------------------

struct DenoiseArgs {
  fs::path ckpt, in, out;
  std::string mode = "page";
  int variant = 0;  // 0: whatever the checkpoint holds
  bool sharpen = false, orient_avg = false;
};

int cmd_denoise(const DenoiseArgs& a) {
  const auto ckpt = load_checkpoint(a.ckpt);
  const auto [variant, width] = checkpoint_architecture(ckpt);
  auto model = build_erasenet(a.variant ? variant_from_int(a.variant) : variant, width);
  restore(ckpt, model);

  std::vector<fs::path> inputs;
  if (fs::is_directory(a.in)) {
    for (const auto& e : fs::directory_iterator(a.in))
      if (e.is_regular_file() && is_image_file(e.path())) inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else if (fs::is_regular_file(a.in)) {
    inputs.push_back(a.in);
  } else {
    throw DataError("denoise: no such input " + a.in.string());
  }
  DenoiseOptions opt;
  opt.mode = a.mode == "patch" ? DenoiseMode::Patch : DenoiseMode::Page;
  opt.sharpen = a.sharpen;
  opt.orient_avg = a.orient_avg;
  fs::create_directories(a.out);
  for (const auto& f : inputs) {
    auto ext = f.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    const fs::path dst = a.out / (f.stem().string() + (ext == ".png" ? ".png" : ".pgm"));
    save_grayscale(denoise(model, load_grayscale(f), opt), dst);
    log_info("denoise: " + f.string() + " -> " + dst.string());
  }
  return kOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  fs::path pred, truth, out;
  std::string range = "unit";
  std::vector<double> mse_values;
};

void emit(const std::string& text, const fs::path& out) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out);
  if (!f) throw DataError("cannot write " + out.string());
  f << text;
}

int cmd_eval(const EvalArgs& a) {
  const Range range = a.range == "8bit" ? Range::EightBit : Range::Unit;
  if (!a.mse_values.empty()) {
    std::ostringstream os;
    os << std::setprecision(10);
    for (double m : a.mse_values) {
      const auto p = psnr(m, range_max(range));
      os << m << ',';
      if (p) os << *p; else os << "identical";
      os << '\n';
    }
    emit(os.str(), a.out);
    return kOk;
  }
  if (a.pred.empty() || a.truth.empty()) throw DataError("eval: --pred and --truth are required");
  const auto m = scan_pairs(a.pred, a.truth, {1.0, 0});
  if (m.pairs.empty()) throw DataError("eval: no basename-matched pairs");
  MetricReport report;
  report.range = range;
  for (const auto& p : m.pairs) report.add(p.noisy.stem().string(), load_grayscale(p.noisy), load_grayscale(p.clean));
  emit(report.to_csv(), a.out);
  log_info("eval: " + std::to_string(report.count()) + " pairs, range " + to_string(range));
  return kOk;
}

// ---- gradcheck ----------------------------------------------------------------

int cmd_gradcheck(bool inject) {
  bool ok = true;
  std::cout << "case,compared,excluded,max_rel_error,result\n" << std::setprecision(4);
  for (const auto& r : run_gradcheck_suite(inject)) {
    std::cout << r.name << ',' << r.compared() << ',' << r.excluded() << ',' << r.report.max_rel_error << ','
              << (r.pass() ? "PASS" : "FAIL") << '\n';
    ok &= r.pass();
  }
  return ok ? kOk : kDataError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EraseNet document denoising", "erasenet"};
  app.require_subcommand(1, 1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  ExtractArgs ex;
  auto* extract = app.add_subcommand("extract-patches", "cut pages into 256x256 patches");
  extract->add_option("--in", ex.in, "input image directory")->required();
  extract->add_option("--out", ex.out, "output directory")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--variant", tr.variant, "3 or 4")->check(CLI::IsMember({3, 4}));
  train->add_option("--data", tr.data, "root holding noisy/ and clean/");
  train->add_option("--noisy", tr.noisy, "noisy image dir (default <data>/noisy)");
  train->add_option("--clean", tr.clean, "clean image dir (default <data>/clean)");
  train->add_option("--epochs", tr.epochs);
  train->add_option("--lr", tr.lr);
  auto* seed_opt = train->add_option("--seed", tr.seed);
  train->add_option("--out", tr.out, "run directory for checkpoints and loss.csv");
  train->add_option("--width-scale", tr.width);
  train->add_option("--batch", tr.batch);
  train->add_option("--mode", tr.mode)->check(CLI::IsMember({"patch", "page"}));
  train->add_option("--train-fraction", tr.train_fraction);
  train->add_option("--checkpoint-every", tr.checkpoint_every);
  train->add_option("--resume", tr.resume, "continue from a checkpoint");

  DenoiseArgs dn;
  auto* den = app.add_subcommand("denoise", "clean images with a trained checkpoint");
  den->add_option("--ckpt", dn.ckpt)->required();
  den->add_option("--in", dn.in, "image or directory")->required();
  den->add_option("--out", dn.out)->required();
  den->add_option("--mode", dn.mode)->check(CLI::IsMember({"page", "patch"}));
  den->add_option("--variant", dn.variant, "expected variant")->check(CLI::IsMember({3, 4}));
  den->add_flag("--sharpen", dn.sharpen);
  den->add_flag("--orient-avg", dn.orient_avg);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "MSE / PSNR / SSIM against ground truth");
  eval->add_option("--pred", ev.pred);
  eval->add_option("--truth", ev.truth);
  eval->add_option("--range", ev.range)->check(CLI::IsMember({"unit", "8bit"}));
  eval->add_option("--out", ev.out, "report file (default stdout)");
  eval->add_option("--psnr-from-mse", ev.mse_values, "PSNR of recorded MSE values")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  bool inject = false;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  grad->add_flag("--inject-fault", inject, "include a deliberately wrong backward");

  for (auto* sub : {extract, train, den, eval, grad}) sub->add_option("--config", "key = value file (flags override it)");

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(app, std::move(args));
    std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kDataError;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }

  try {
    if (*extract) return cmd_extract(ex);
    if (*train) {
      if (seed_opt->count() == 0) {
        if (const char* env = std::getenv("ERASENET_SEED")) tr.seed = std::stoull(env);
      }
      return cmd_train(tr);
    }
    if (*den) return cmd_denoise(dn);
    if (*eval) return cmd_eval(ev);
    if (*grad) return cmd_gradcheck(inject);
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == CheckpointError::Code::Io ? kDataError : kCheckpointMismatch;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumericalHalt;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kDataError;
}
