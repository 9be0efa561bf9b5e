#pragma once

// Evaluation and visualisation runs over a saved checkpoint.

#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "patchgame/checkpoint.hpp"
#include "patchgame/config.hpp"
#include "patchgame/corpus.hpp"
#include "patchgame/evalsuite.hpp"
#include "patchgame/game.hpp"

namespace patchgame {

// Agents restored from a checkpoint, with the configuration stored in it.
struct LoadedModel {
  GameConfig config;
  int epoch = -1;
  std::unique_ptr<Agents<float>> agents;

  explicit LoadedModel(const std::string& path) {
    auto m = read_checkpoint(path, nullptr);
    config = parse_config(m.config_text);
    if (config_hash(config) != m.config_hash) throw FormatError(path + ": stored configuration does not match its hash");
    epoch = m.epoch;
    agents = std::make_unique<Agents<float>>(config.agent, 0);
    load_checkpoint(path, agents->params());
  }

  // Relaxation temperature in effect at the stored epoch.
  double tau_s() const { return temperature_at(std::max(epoch, 0), config.temperature); }
};

inline const std::vector<std::string>& eval_selectors() {
  static const std::vector<std::string> names{"comm", "knn", "bow", "topo", "stats", "dropcurve"};
  return names;
}

// "all" or a comma-separated subset of eval_selectors().
inline std::set<std::string> parse_selectors(const std::string& which) {
  std::set<std::string> out;
  std::stringstream ss(which);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item == "all") {
      out.insert(eval_selectors().begin(), eval_selectors().end());
      continue;
    }
    if (std::find(eval_selectors().begin(), eval_selectors().end(), item) == eval_selectors().end()) {
      std::string valid = "all";
      for (const auto& n : eval_selectors()) valid += ", " + n;
      throw ConfigError("unknown evaluation '" + item + "'; valid names: " + valid);
    }
    out.insert(item);
  }
  if (out.empty()) throw ConfigError("no evaluation selected");
  return out;
}

struct EvalOptions {
  std::set<std::string> which;
  std::uint64_t seed = 0;
  std::size_t knn_k = 20;
  std::size_t topo_per_class = 10;
  PatchClassifierConfig classifier;
  std::ostream* log = nullptr;
};

struct EvalOutput {
  Summary summary;
  std::vector<std::string> files;  // written, relative to the output directory
};

// The corpus is split exactly as during training; probes fit on the training
// part and score the held-out part. Message statistics and topographic
// similarity use the whole corpus. Metric files depend only on the inputs
// and the seed.
inline EvalOutput run_evaluation(const LoadedModel& model, const Corpus& corpus, const EvalOptions& opt,
                                 const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto& cfg = model.config;
  const auto& agents = *model.agents;
  const double tau_s = model.tau_s();
  auto parts = split(corpus, cfg.val_fraction, derive_seed(cfg.seed, "split"), nullptr);
  EvalOutput out;
  auto& sum = out.summary;
  auto put = [&sum](const std::string& k, double v) { sum.emplace_back(k, detail::fmt(v)); };
  auto file = [&](const std::string& name, const std::string& text) {
    write_text((fs::path(out_dir) / name).string(), text);
    out.files.push_back(name);
  };
  auto note = [&](const std::string& s) {
    if (opt.log) *opt.log << s << std::endl;
  };
  const auto& w = opt.which;
  sum.emplace_back("checkpoint_epoch", std::to_string(model.epoch));
  put("tau_s", tau_s);
  const std::size_t classes = corpus.spec.num_classes;
  put("chance_class", 1.0 / static_cast<double>(classes));

  std::unique_ptr<Encoded<float>> enc_train, enc_val;
  auto tp = pointers(parts.train.images), vp = pointers(parts.val.images);
  if (w.count("knn") || w.count("bow") || w.count("comm")) {
    note("encoding " + std::to_string(tp.size() + vp.size()) + " images");
    enc_train = std::make_unique<Encoded<float>>(encode_images(agents, std::span<const LabeledImage* const>(tp), tau_s, derive_seed(opt.seed, "eval-train")));
    enc_val = std::make_unique<Encoded<float>>(encode_images(agents, std::span<const LabeledImage* const>(vp), tau_s, derive_seed(opt.seed, "eval-val")));
  }
  if (w.count("comm")) {
    note("comm");
    auto r = comm_success(*enc_val, cfg.batch_size, cfg.eval_trials, opt.seed, cfg.tau);
    put("comm.batch", static_cast<double>(r.batch));
    put("comm.trials", static_cast<double>(r.trials));
    put("comm.chance", 1.0 / static_cast<double>(r.batch));
    put("comm.top1", r.top1);
    put("comm.top5", r.top5);
    put("comm.top1_half_width", r.half_width);
    put("comm.top1_image_to_message", r.top1_image_to_message);
    put("comm.top5_image_to_message", r.top5_image_to_message);
  }
  if (w.count("knn")) {
    note("knn");
    auto r = knn_eval(feature_table(*enc_train, std::span<const LabeledImage* const>(tp)),
                      feature_table(*enc_val, std::span<const LabeledImage* const>(vp)), std::min(opt.knn_k, tp.size()));
    put("knn.k", static_cast<double>(std::min(opt.knn_k, tp.size())));
    put("knn.top1", r.top1);
    put("knn.top5", r.top5);
  }
  if (w.count("bow")) {
    note("bow");
    const std::size_t v = cfg.agent.vocab;
    std::vector<BowDocument> dtr, dva;
    std::vector<std::size_t> ltr, lva;
    for (std::size_t i = 0; i < tp.size(); ++i) {
      dtr.push_back(bow_document(enc_train->messages[i], v));
      ltr.push_back(tp[i]->label);
    }
    for (std::size_t i = 0; i < vp.size(); ++i) {
      dva.push_back(bow_document(enc_val->messages[i], v));
      lva.push_back(vp[i]->label);
    }
    auto r = bow_classify(dtr, ltr, dva, lva);
    put("bow.top1", r.top1);
    put("bow.top5", r.top5);
  }
  if (w.count("topo")) {
    note("topo");
    std::ostringstream warn;
    auto r = topographic_similarity(agents, corpus.images, opt.topo_per_class, tau_s, opt.seed, &warn);
    if (opt.log) *opt.log << warn.str();
    std::string pairs = "class,jaccard,distance\n", per = "class,correlation\n";
    for (const auto& rec : r.records) {
      for (const auto& [j, d] : rec.pairs)
        pairs += std::to_string(rec.label) + "," + detail::fmt(j) + "," + detail::fmt(d) + "\n";
      per += std::to_string(rec.label) + "," + detail::fmt(rec.correlation) + "\n";
    }
    file("topo_pairs.csv", pairs);
    file("topo_classes.csv", per);
    put("topo.mean", r.mean);
    put("topo.median", r.median);
    put("topo.skipped_classes", static_cast<double>(r.skipped));
  }
  if (w.count("stats")) {
    note("stats");
    auto all = pointers(corpus.images);
    auto enc = encode_images(agents, std::span<const LabeledImage* const>(all), tau_s, derive_seed(opt.seed, "eval-all"));
    auto ms = message_stats(enc.messages, cfg.agent.message_length());
    auto sf = symbol_frequency(enc.messages, cfg.agent.vocab);
    file("message_hist.csv", ms.csv());
    file("symbol_freq.csv", sf.csv());
    put("stats.messages", static_cast<double>(ms.messages));
    put("stats.mean_kept", ms.mean_total);
    put("stats.median_kept", ms.median_total);
    put("stats.mean_unique", ms.mean_unique);
    put("stats.median_unique", ms.median_unique);
    put("stats.expected_kept", (static_cast<double>(cfg.agent.grid.num_patches()) + 1) / 2);
    put("stats.symbol_utilization", sf.utilization);
  }
  if (w.count("dropcurve")) {
    note("dropcurve: training the patch classifier");
    auto pc = opt.classifier;
    pc.seed = derive_seed(opt.seed, "dropcurve");
    auto clf = train_patch_classifier<float>(parts.train.images, cfg.agent.grid, classes, pc);
    const std::size_t k = cfg.agent.grid.num_patches();
    std::vector<std::size_t> ks;
    for (std::size_t q = 0; q <= 4; ++q) ks.push_back(q * k / 4);
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    auto dc = patch_drop_curve(clf, agents, parts.val.images, ks, opt.seed);
    std::string csv = "k,ranked,random\n";
    for (std::size_t q = 0; q < ks.size(); ++q) {
      csv += std::to_string(ks[q]) + "," + detail::fmt(dc.ranked[q]) + "," + detail::fmt(dc.random[q]) + "\n";
      put("dropcurve.ranked.k" + std::to_string(ks[q]), dc.ranked[q]);
      put("dropcurve.random.k" + std::to_string(ks[q]), dc.random[q]);
    }
    file("dropcurve.csv", csv);
  }
  file("summary.txt", summary_text(sum));
  return out;
}

struct VizOptions {
  std::string mode;                  // heatmaps | symbols
  std::size_t count = 8;             // heatmaps: images; symbols: patches per gallery
  std::vector<std::size_t> symbols;  // empty: every symbol id
  std::uint64_t seed = 0;
  std::ostream* warn = &std::cerr;
};

inline std::vector<std::string> run_viz(const LoadedModel& model, const Corpus& corpus, const VizOptions& opt,
                                        const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto& agents = *model.agents;
  const auto& g = model.config.agent.grid;
  std::vector<std::string> files;
  if (opt.mode == "heatmaps") {
    auto pool = pointers(corpus.images);
    Rng rng(derive_seed(opt.seed, "viz"));
    const std::size_t n = std::min(opt.count, pool.size());
    for (std::size_t i = 0; i < n; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> scores;
      {
        NoGradGuard ng;
        auto s = agents.importance(nhwc_batch<float>(std::vector<std::span<const float>>{pool[i]->view()}, g));
        scores.assign(s.data().begin(), s.data().end());
      }
      const std::string name = "heatmap_" + std::to_string(i) + "_id" + std::to_string(pool[i]->id) + ".ppm";
      heatmap_render(pool[i]->view(), g, scores, (fs::path(out_dir) / name).string());
      files.push_back(name);
    }
  } else if (opt.mode == "symbols") {
    auto ids = opt.symbols;
    if (ids.empty())
      for (std::size_t s = 0; s < model.config.agent.vocab; ++s) ids.push_back(s);
    for (auto id : ids) {
      if (id >= model.config.agent.vocab)
        throw ConfigError("symbol id " + std::to_string(id) + " outside vocabulary of " + std::to_string(model.config.agent.vocab));
      auto gal = symbol_gallery(agents, corpus.images, id, opt.count);
      if (gal.empty()) {
        if (opt.warn) *opt.warn << "warning: symbol " << id << " is never produced; no gallery\n";
        continue;
      }
      const std::string name = "symbol_" + std::to_string(id) + ".ppm";
      write_ppm((fs::path(out_dir) / name).string(), gallery_image(gal, g));
      files.push_back(name);
    }
  } else {
    throw ConfigError("unknown viz mode '" + opt.mode + "'; valid modes: heatmaps, symbols");
  }
  return files;
}

}  // namespace patchgame
