#pragma once

// Supervised training loop: minibatch Adam on the per-pixel MSE, plateau
// scheduling on the validation loss, per-epoch checkpoints.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "erasenet/checkpoint.hpp"
#include "erasenet/image.hpp"
#include "erasenet/log.hpp"
#include "erasenet/model.hpp"
#include "erasenet/optim.hpp"

namespace erasenet {

enum class InputMode { Patch256, Page864x480 };

inline constexpr std::size_t kPageModeRows = 864;
inline constexpr std::size_t kPageModeCols = 480;

struct TrainConfig {
  Variant variant = Variant::EraseNet4;
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  InputMode input_mode = InputMode::Patch256;
  double width_scale = 1.0;
  std::size_t checkpoint_every = 1;  // epochs; 0 disables periodic writes
  fs::path data_root;
  fs::path out_dir;  // empty: keep nothing on disk
  double train_fraction = 0.9;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
    if (!(width_scale > 0.0)) throw std::invalid_argument("train: width scale must be positive");
  }
};

/// One aligned (noisy, clean) training example.
struct Sample {
  std::string name;
  ImageBuffer noisy;
  ImageBuffer clean;
};

/// Loads pairs and shapes them for the input mode. Patch mode keeps images
/// that are already 256x256 and otherwise resizes the page to 1024x768 and
/// cuts the 12 tiles; page mode resizes to 864x480.
inline std::vector<Sample> load_samples(const std::vector<ImagePair>& pairs, InputMode mode) {
  std::vector<Sample> out;
  for (const auto& p : pairs) {
    ImageBuffer noisy = load_grayscale(p.noisy), clean = load_grayscale(p.clean);
    const std::string stem = p.noisy.stem().string();
    if (mode == InputMode::Page864x480) {
      out.push_back({stem, resize_bilinear(noisy, kPageModeRows, kPageModeCols), resize_bilinear(clean, kPageModeRows, kPageModeCols)});
      continue;
    }
    if (noisy.h == kPatchSize && noisy.w == kPatchSize && clean.h == kPatchSize && clean.w == kPatchSize) {
      out.push_back({stem, std::move(noisy), std::move(clean)});
      continue;
    }
    const auto np = extract_patches(resize_bilinear(noisy, kPageRows, kPageCols));
    const auto cp = extract_patches(resize_bilinear(clean, kPageRows, kPageCols));
    for (std::size_t i = 0; i < np.patches.size(); ++i) {
      out.push_back({stem + "_p" + (i < 10 ? "0" : "") + std::to_string(i), np.patches[i], cp.patches[i]});
    }
  }
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_mse = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;  // in effect during the epoch

  std::string line() const {
    std::ostringstream os;
    os.precision(9);
    os << epoch << ',' << train_mse << ',' << val_mse << ',' << lr;
    return os.str();
  }
};

/// Raised when the loss turns non-finite; the last good checkpoint (if any)
/// is named in `checkpoint`.
class TrainingHalted : public std::runtime_error {
 public:
  TrainingHalted(const std::string& msg, std::optional<fs::path> checkpoint)
      : std::runtime_error(msg), checkpoint(std::move(checkpoint)) {}
  std::optional<fs::path> checkpoint;
};

class Trainer {
 public:
  Trainer(ModelGraph<float>& model, TrainConfig config) : model_(model), config_(std::move(config)) {
    config_.validate();
    if (model_.variant() != config_.variant) {
      throw std::invalid_argument("train: model is " + to_string(model_.variant()) + " but config asks for " +
                                  to_string(config_.variant));
    }
    state_.adam.lr = config_.lr;
    state_.adam.init(model_.parameters());
    state_.rng = Rng(config_.seed);
    params_ = model_.parameters();
  }

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return config_; }

  /// Forward in train mode, MSE, backward and one Adam update. Returns the
  /// batch loss. A non-finite loss or gradient leaves parameters untouched.
  double train_step(const std::vector<const Sample*>& batch) {
    std::vector<const ImageBuffer*> xs, ys;
    for (const auto* s : batch) {
      xs.push_back(&s->noisy);
      ys.push_back(&s->clean);
    }
    const auto x = to_tensor<float>(xs), y = to_tensor<float>(ys);
    model_.zero_grad();
    const auto loss = mse_loss(model_.forward(x, Mode::Train, &state_.rng), y);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericalError("train_step: non-finite loss at step " + std::to_string(state_.step + 1));
    loss.backward();
    adam_step(params_, state_.adam);
    model_.zero_grad();
    ++state_.step;
    return value;
  }

  /// Per-pixel MSE over the samples in infer mode; no state changes.
  double evaluate(const std::vector<Sample>& samples) const {
    if (samples.empty()) return std::nan("");
    NoGradGuard guard;
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < samples.size(); i += config_.batch_size) {
      std::vector<const ImageBuffer*> xs, ys;
      for (std::size_t j = i; j < std::min(samples.size(), i + config_.batch_size); ++j) {
        xs.push_back(&samples[j].noisy);
        ys.push_back(&samples[j].clean);
      }
      const auto y = to_tensor<float>(ys);
      const auto pred = model_.forward(to_tensor<float>(xs), Mode::Infer);
      acc += static_cast<double>(mse_loss(pred, y).item()) * static_cast<double>(y.size());
      count += y.size();
    }
    return acc / static_cast<double>(count);
  }

  /// One pass over `train` in a seeded shuffled order, then validation and
  /// the plateau rule. Without validation samples the train loss stands in.
  EpochRecord run_epoch(const std::vector<Sample>& train, const std::vector<Sample>& val) {
    if (train.empty()) throw std::invalid_argument("train: no training samples");
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    state_.rng.shuffle(order.begin(), order.end());

    EpochRecord rec;
    rec.epoch = static_cast<std::size_t>(state_.epoch) + 1;
    rec.lr = state_.adam.lr;
    double acc = 0.0;
    for (std::size_t i = 0; i < order.size(); i += config_.batch_size) {
      std::vector<const Sample*> batch;
      for (std::size_t j = i; j < std::min(order.size(), i + config_.batch_size); ++j) batch.push_back(&train[order[j]]);
      acc += train_step(batch) * static_cast<double>(batch.size());
    }
    rec.train_mse = acc / static_cast<double>(train.size());
    rec.val_mse = val.empty() ? rec.train_mse : evaluate(val);
    if (!std::isfinite(rec.val_mse)) throw NumericalError("train: non-finite validation loss");
    state_.adam.lr = plateau_update(state_.plateau, rec.val_mse, state_.adam.lr);
    ++state_.epoch;
    return rec;
  }

  /// Runs the remaining epochs. Writes `latest.ckpt` on cadence, `best.ckpt`
  /// whenever validation improves, and appends to `loss.csv` in out_dir.
  std::vector<EpochRecord> train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                                 const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    if (train_set.empty()) throw std::invalid_argument("train: manifest has no training pairs");
    if (val_set.empty()) log_warning("train: no validation pairs; the train loss drives the scheduler");
    std::vector<EpochRecord> log;
    const bool persist = !config_.out_dir.empty();
    std::ofstream loss_log;
    std::optional<fs::path> last_good;
    if (persist) {
      fs::create_directories(config_.out_dir);
      loss_log.open(config_.out_dir / "loss.csv", state_.epoch == 0 ? std::ios::trunc : std::ios::app);
      if (!loss_log) throw std::runtime_error("train: cannot write " + (config_.out_dir / "loss.csv").string());
      if (fs::exists(latest_path())) last_good = latest_path();
    }
    while (state_.epoch < config_.epochs) {
      EpochRecord rec;
      try {
        rec = run_epoch(train_set, val_set);
      } catch (const NumericalError& e) {
        throw TrainingHalted(e.what(), last_good);
      }
      log.push_back(rec);
      log_info("epoch " + rec.line());
      if (persist) {
        loss_log << rec.line() << '\n' << std::flush;
        const bool improved = rec.val_mse < state_.best_val;
        if (improved) state_.best_val = rec.val_mse;
        const bool cadence = config_.checkpoint_every > 0 && rec.epoch % config_.checkpoint_every == 0;
        const bool last = state_.epoch == config_.epochs;
        if (cadence || last || improved) {
          const auto ckpt = capture(model_, &state_);
          if (cadence || last) {
            save_checkpoint(ckpt, latest_path());
            last_good = latest_path();
          }
          if (improved) save_checkpoint(ckpt, config_.out_dir / "best.ckpt");
        }
      } else if (rec.val_mse < state_.best_val) {
        state_.best_val = rec.val_mse;
      }
      if (on_epoch) on_epoch(rec);
    }
    return log;
  }

  fs::path latest_path() const { return config_.out_dir / "latest.ckpt"; }

 private:
  ModelGraph<float>& model_;
  TrainConfig config_;
  TrainState state_;
  NamedParams<float> params_;
};

}  // namespace erasenet
