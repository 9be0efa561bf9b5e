#pragma once

// The referential game: one optimisation step and the epoch loop.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchgame/agents.hpp"
#include "patchgame/augment.hpp"
#include "patchgame/checkpoint.hpp"
#include "patchgame/config.hpp"
#include "patchgame/corpus.hpp"
#include "patchgame/evalsuite.hpp"
#include "patchgame/loss.hpp"
#include "patchgame/optim.hpp"

namespace patchgame {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StepResult {
  double loss = 0, top1 = 0;
};

struct TrainRecord {
  int epoch = 0;
  double loss = 0;  // mean training loss
  double top1 = 0;  // validation communication top-1
  double lr = 0, tau_s = 0, seconds = 0;
  double train_top1 = 0;
};

struct TrainLog {
  std::vector<TrainRecord> rows;

  static std::string header() { return "epoch,loss,top1,lr,tau_s,seconds"; }
  static std::string row(const TrainRecord& r) {
    std::ostringstream s;
    s << r.epoch << ',' << detail::fmt(r.loss) << ',' << detail::fmt(r.top1) << ',' << detail::fmt(r.lr) << ','
      << detail::fmt(r.tau_s) << ',' << std::fixed << std::setprecision(3) << r.seconds;
    return s.str();
  }
  std::string csv() const {
    std::string out = header() + "\n";
    for (const auto& r : rows) out += row(r) + "\n";
    return out;
  }
};

inline TrainLog parse_train_log(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != TrainLog::header()) throw FormatError("train log: unexpected header");
  TrainLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw FormatError("train log: malformed row '" + line + "'");
    TrainRecord r;
    r.epoch = std::stoi(cells[0]);
    r.loss = std::stod(cells[1]);
    r.top1 = std::stod(cells[2]);
    r.lr = std::stod(cells[3]);
    r.tau_s = std::stod(cells[4]);
    r.seconds = std::stod(cells[5]);
    log.rows.push_back(r);
  }
  return log;
}

template <class T>
class Trainer {
 public:
  explicit Trainer(GameConfig cfg)
      : cfg_((cfg.validate(), std::move(cfg))),
        agents_(cfg_.agent, derive_seed(cfg_.seed, "init")),
        opt_(agents_.params().tensors(), cfg_.momentum, cfg_.weight_decay) {}

  const GameConfig& config() const { return cfg_; }
  Agents<T>& agents() { return agents_; }
  const Agents<T>& agents() const { return agents_; }
  SgdMomentum<T>& optimizer() { return opt_; }

  // Forward pass of the game loss on two stacked view batches.
  Tensor<T> loss(const Tensor<T>& speaker_view, const Tensor<T>& listener_view, double tau_s, Rng& rng,
                 double* top1 = nullptr) const {
    auto msg = agents_.speak(speaker_view, tau_s, rng, cfg_.hard);
    auto sim = similarity_matrix(agents_.embed_message(msg), agents_.embed_image(listener_view).embedding, cfg_.tau);
    if (top1) *top1 = topk_accuracy(sim, 1);
    return info_nce(sim);
  }

  // Views are drawn from per-sample streams keyed by (seed, epoch, sample id)
  // and message noise from (seed, epoch, step).
  StepResult train_step(std::span<const LabeledImage* const> batch, int epoch, std::size_t step, double lr,
                        double tau_s) {
    if (batch.size() < 2) throw std::invalid_argument("train_step: batch must hold at least two images");
    const auto& g = cfg_.agent.grid;
    const ImageDims dims{g.channels, g.height, g.width};
    std::vector<std::vector<float>> xs, ys;
    for (const auto* im : batch) {
      Rng vr(derive_seed(cfg_.seed, "views", epoch, im->id));
      auto [a, b] = two_views(im->view(), dims, cfg_.augment, vr);
      xs.push_back(std::move(a));
      ys.push_back(std::move(b));
    }
    std::vector<std::span<const float>> xv(xs.begin(), xs.end()), yv(ys.begin(), ys.end());
    Rng rng(derive_seed(cfg_.seed, "speak", epoch, step));
    StepResult r;
    auto l = loss(nhwc_batch<T>(xv, g), nhwc_batch<T>(yv, g), tau_s, rng, &r.top1);
    r.loss = static_cast<double>(l.item());
    if (!std::isfinite(r.loss)) {
      std::ostringstream msg;
      msg << "non-finite loss at epoch " << epoch << " step " << step << " (lr " << lr << ", tau_s " << tau_s
          << ", batch " << batch.size() << ")";
      throw TrainingError(msg.str());
    }
    opt_.zero_grad();
    backward(l);
    opt_.step(lr);
    return r;
  }

  // One shuffled pass over `train` with drop-last batching.
  TrainRecord run_epoch(const std::vector<LabeledImage>& train, const std::vector<LabeledImage>& val, int epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainRecord rec;
    rec.epoch = epoch;
    rec.lr = cosine_lr(epoch, cfg_.epochs, cfg_.lr, cfg_.warmup_epochs);
    rec.tau_s = temperature_at(epoch, cfg_.temperature);
    auto order = pointers(train);
    Rng shuffle(derive_seed(cfg_.seed, "shuffle", epoch));
    shuffle.shuffle(order);
    const std::size_t b = cfg_.batch_size, steps = order.size() / b;
    if (steps == 0) throw std::invalid_argument("run_epoch: fewer training images than one batch");
    for (std::size_t s = 0; s < steps; ++s) {
      auto r = train_step(std::span<const LabeledImage* const>(order.data() + s * b, b), epoch, s, rec.lr, rec.tau_s);
      rec.loss += r.loss;
      rec.train_top1 += r.top1;
    }
    rec.loss /= static_cast<double>(steps);
    rec.train_top1 /= static_cast<double>(steps);
    rec.top1 = validate(val, rec.tau_s).top1;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

  CommResult validate(const std::vector<LabeledImage>& val, double tau_s) const {
    return comm_success(agents_, val, cfg_.batch_size, cfg_.eval_trials, tau_s, derive_seed(cfg_.seed, "validation"),
                        cfg_.tau);
  }

  void save(const std::string& path, int epoch) const {
    save_checkpoint(path, CheckpointManifest{config_hash(cfg_), epoch, sizeof(T), to_text(cfg_)}, agents_.params(), &opt_);
  }

  // Restores parameters and momentum; returns the stored epoch.
  int load(const std::string& path) {
    auto m = load_checkpoint(path, agents_.params(), &opt_);
    if (m.config_hash != config_hash(cfg_))
      throw FormatError(path + ": checkpoint was written by a different configuration");
    return m.epoch;
  }

 private:
  GameConfig cfg_;
  Agents<T> agents_;
  SgdMomentum<T> opt_;
};

struct TrainOptions {
  std::string out_dir;         // empty: nothing written
  bool resume = false;
  int stop_after = -1;         // last epoch to run, for interrupted runs
  std::function<void(const TrainRecord&)> on_epoch;
};

inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kLogFile = "train_log.csv";

// Splits the corpus, trains for cfg.epochs and returns the log. With an
// output directory, the log row of every epoch is flushed as it completes and
// checkpoints are written every checkpoint_every epochs and at the end.
template <class T>
TrainLog train_loop(const Corpus& corpus, Trainer<T>& trainer, const TrainOptions& opts = {}) {
  namespace fs = std::filesystem;
  if (corpus.images.empty()) throw std::invalid_argument("train_loop: empty corpus");
  const auto& cfg = trainer.config();
  auto parts = split(corpus, cfg.val_fraction, derive_seed(cfg.seed, "split"), nullptr);
  TrainLog log;
  int first = 0;
  const bool write = !opts.out_dir.empty();
  const fs::path dir(opts.out_dir), ckpt = dir / kCheckpointFile, log_path = dir / kLogFile;
  if (write) fs::create_directories(dir);
  if (opts.resume) {
    if (!write || !fs::exists(ckpt)) throw std::runtime_error("resume: no checkpoint in '" + opts.out_dir + "'");
    const int done = trainer.load(ckpt.string());
    std::ifstream in(log_path);
    std::stringstream ss;
    ss << in.rdbuf();
    for (const auto& r : parse_train_log(ss.str()).rows)
      if (r.epoch <= done) log.rows.push_back(r);
    first = done + 1;
  }
  std::ofstream out;
  if (write) {
    out.open(log_path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + log_path.string());
    out << log.csv() << std::flush;
  }
  const int last = opts.stop_after >= 0 ? std::min(opts.stop_after, cfg.epochs - 1) : cfg.epochs - 1;
  for (int e = first; e <= last; ++e) {
    auto rec = trainer.run_epoch(parts.train.images, parts.val.images, e);
    log.rows.push_back(rec);
    if (write) {
      out << TrainLog::row(rec) << "\n" << std::flush;
      if ((e + 1) % cfg.checkpoint_every == 0 || e == last) {
        try {
          trainer.save(ckpt.string(), e);
        } catch (const std::exception& ex) {
          throw TrainingError(std::string("checkpoint write failed: ") + ex.what());
        }
      }
    }
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  return log;
}

}  // namespace patchgame
