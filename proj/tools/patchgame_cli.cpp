// patchgame: data generation, training, evaluation, visualisation, self-check.
//
// Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "patchgame/config.hpp"
#include "patchgame/corpus.hpp"
#include "patchgame/game.hpp"
#include "patchgame/manifest.hpp"
#include "patchgame/pipeline.hpp"
#include "patchgame/verify.hpp"

using namespace patchgame;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError(std::string("cannot read ") + what + " '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing ") + what + " path");
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: '" + path + "'");
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

struct Args {
  std::string config, corpus, out, which = "all", checkpoint, mode = "heatmaps", import_dir;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  int stop_after = -1;
  std::size_t count = 8;
  std::vector<std::size_t> symbols;
};

int gen_data(const Args& a) {
  if (a.out.empty()) throw UsageError("gen-data needs --out");
  Corpus c;
  if (!a.import_dir.empty()) {
    c = import_ppm_directory(a.import_dir, 64);
  } else {
    CorpusSpec spec;
    if (!a.config.empty()) spec = parse_corpus_spec(read_file(a.config, "spec file"));
    if (a.seed) spec.seed = *a.seed;
    c = generate(spec);
  }
  const auto dir = fs::path(a.out).parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  save(c, a.out);
  std::cout << "wrote " << c.size() << " images (" << c.spec.num_classes << " classes) to " << a.out << "\n";
  return 0;
}

int train(const Args& a, const std::string& cmd) {
  GameConfig cfg;
  if (!a.config.empty()) cfg = parse_config(read_file(a.config, "config file"));
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.validate();
  }
  require_file(a.corpus, "corpus");
  const std::string out = a.out.empty() ? (fs::path("runs") / hex(config_hash(cfg))).string() : a.out;
  fs::create_directories(out);
  RunManifest man;
  man.command = cmd;
  man.config_hash = hex(config_hash(cfg));
  man.seed = cfg.seed;
  man.started = utc_timestamp();
  man.inputs = {{"corpus", a.corpus}};
  if (!a.config.empty()) man.inputs.emplace_back("config", a.config);
  write_text((fs::path(out) / "config.txt").string(), to_text(cfg));

  auto corpus = load(a.corpus);
  if (corpus.spec.channels != cfg.agent.grid.channels || corpus.spec.resolution != cfg.agent.grid.height ||
      corpus.spec.resolution != cfg.agent.grid.width)
    throw ConfigError("corpus images are " + std::to_string(corpus.spec.resolution) + "x" +
                      std::to_string(corpus.spec.resolution) + " but the config expects " +
                      std::to_string(cfg.agent.grid.height) + "x" + std::to_string(cfg.agent.grid.width));
  Trainer<float> trainer(cfg);
  TrainOptions opts;
  opts.out_dir = out;
  opts.resume = a.resume;
  opts.stop_after = a.stop_after;
  opts.on_epoch = [](const TrainRecord& r) {
    std::ostringstream line;
    line << "epoch " << r.epoch << "  loss " << r.loss << "  val_top1 " << r.top1 << "  lr " << r.lr << "  tau_s "
         << r.tau_s << "  " << std::fixed << std::setprecision(1) << r.seconds << "s";
    std::cout << line.str() << std::endl;
  };
  train_loop(corpus, trainer, opts);
  man.artifacts = {"config.txt", kLogFile, kCheckpointFile};
  man.write(out);
  std::cout << "run directory: " << out << "\n";
  return 0;
}

std::string default_out(const Args& a, const char* sub) {
  if (!a.out.empty()) return a.out;
  return (fs::path(a.checkpoint).parent_path() / sub).string();
}

int eval(const Args& a, const std::string& cmd) {
  EvalOptions opt;
  opt.which = parse_selectors(a.which);
  require_file(a.checkpoint, "checkpoint");
  require_file(a.corpus, "corpus");
  LoadedModel model(a.checkpoint);
  opt.seed = a.seed.value_or(model.config.seed);
  opt.log = &std::cerr;
  const auto out = default_out(a, "eval");
  RunManifest man;
  man.command = cmd;
  man.config_hash = hex(config_hash(model.config));
  man.seed = opt.seed;
  man.started = utc_timestamp();
  man.inputs = {{"checkpoint", a.checkpoint}, {"corpus", a.corpus}};
  auto res = run_evaluation(model, load(a.corpus), opt, out);
  std::cout << summary_text(res.summary);
  man.artifacts = res.files;
  man.write(out);
  return 0;
}

int viz(const Args& a, const std::string& cmd) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.corpus, "corpus");
  LoadedModel model(a.checkpoint);
  VizOptions opt;
  opt.mode = a.mode;
  opt.count = a.mode == "symbols" && a.count == 8 ? 6 : a.count;
  opt.symbols = a.symbols;
  opt.seed = a.seed.value_or(model.config.seed);
  const auto out = default_out(a, a.mode == "symbols" ? "symbols" : "heatmaps");
  RunManifest man;
  man.command = cmd;
  man.config_hash = hex(config_hash(model.config));
  man.seed = opt.seed;
  man.started = utc_timestamp();
  man.inputs = {{"checkpoint", a.checkpoint}, {"corpus", a.corpus}};
  man.artifacts = run_viz(model, load(a.corpus), opt, out);
  man.write(out);
  std::cout << "wrote " << man.artifacts.size() - 1 << " images to " << out << "\n";
  return 0;
}

int verify_cmd() {
  bool ok = true;
  for (const auto& c : run_verify()) {
    std::cout << format_check(c) << std::endl;
    ok = ok && c.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-symbol referential game"};
  app.require_subcommand(1);
  Args a;
  auto seed_opt = [&a](CLI::App* s) {
    s->add_option_function<std::uint64_t>("--seed", [&a](std::uint64_t v) { a.seed = v; }, "Seed override");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate (or import) a labeled corpus");
  gen->add_option("--config", a.config, "Corpus spec file (key = value)");
  gen->add_option("--out", a.out, "Output corpus file")->required();
  gen->add_option("--import", a.import_dir, "Import <dir>/<label>/*.ppm instead of generating");
  seed_opt(gen);

  auto* tr = app.add_subcommand("train", "Train speaker and listener");
  tr->add_option("--config", a.config, "Game config file (key = value)");
  tr->add_option("--corpus", a.corpus, "Corpus file")->required();
  tr->add_option("--out", a.out, "Run directory (default runs/<config hash>)");
  tr->add_flag("--resume", a.resume, "Continue from the run directory's checkpoint");
  tr->add_option("--stop-after", a.stop_after, "Stop after this epoch (for interrupted runs)");
  seed_opt(tr);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", a.checkpoint, "Checkpoint file")->required();
  ev->add_option("--corpus", a.corpus, "Corpus file")->required();
  ev->add_option("--which", a.which, "all or a comma list of: comm,knn,bow,topo,stats,dropcurve");
  ev->add_option("--out", a.out, "Output directory (default <checkpoint dir>/eval)");
  seed_opt(ev);

  auto* vz = app.add_subcommand("viz", "Render heatmaps or symbol galleries");
  vz->add_option("--checkpoint", a.checkpoint, "Checkpoint file")->required();
  vz->add_option("--corpus", a.corpus, "Corpus file")->required();
  vz->add_option("--mode", a.mode, "heatmaps or symbols");
  vz->add_option("--count", a.count, "Images (heatmaps) or patches per gallery (symbols)");
  vz->add_option("--symbols", a.symbols, "Symbol ids (default: all)")->delimiter(',');
  vz->add_option("--out", a.out, "Output directory");
  seed_opt(vz);

  app.add_subcommand("verify", "Run the oracle and gradient self-checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const auto cmd = command_line(argc, argv);
  try {
    if (*gen) return gen_data(a);
    if (*tr) return train(a, cmd);
    if (*ev) return eval(a, cmd);
    if (*vz) return viz(a, cmd);
    return verify_cmd();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
