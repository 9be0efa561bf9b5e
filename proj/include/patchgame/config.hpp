#pragma once

// Game configuration and its flat `key = value` text form.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <type_traits>
#include <string>
#include <vector>

#include "patchgame/agents.hpp"
#include "patchgame/augment.hpp"
#include "patchgame/corpus.hpp"
#include "patchgame/relaxations.hpp"
#include "patchgame/rng.hpp"

namespace patchgame {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct GameConfig {
  AgentConfig agent;
  AugmentConfig augment;
  std::size_t batch_size = 32;
  double tau = 0.1;  // InfoNCE temperature
  TemperatureSchedule temperature;
  bool hard = true;
  double lr = 0.01;
  int warmup_epochs = 5;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 50;
  std::uint64_t seed = 0;
  double val_fraction = 0.05;
  std::size_t eval_trials = 50;
  int checkpoint_every = 10;

  void validate() const {
    agent.validate();
    augment.validate();
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (!(tau > 0)) throw ConfigError("tau must be > 0");
    if (!(temperature.start >= temperature.end && temperature.end > 0)) throw ConfigError("need tau_start >= tau_end > 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be in [0, epochs)");
    if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("val_fraction must be in (0, 1)");
    if (!(lr >= 0) || !(momentum >= 0 && momentum < 1) || !(weight_decay >= 0)) throw ConfigError("bad optimizer settings");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  }
};

namespace detail {

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    out.push_back(parse_number<std::size_t>(key, b == std::string::npos ? item : item.substr(b, e - b + 1)));
  }
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") + 1 - b);
}

// One entry per config key: how to print it and how to set it.
struct Field {
  std::function<std::string(const GameConfig&)> get;
  std::function<void(GameConfig&, const std::string&)> set;
};

inline const std::vector<std::pair<std::string, Field>>& fields() {
  using C = GameConfig;
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    auto num = [&t](const std::string& key, auto member) {
      t.push_back({key, {[member](const C& c) {
                           const auto& v = member(const_cast<C&>(c));
                           if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>) return fmt(v);
                           else return std::to_string(v);
                         },
                         [member, key](C& c, const std::string& s) {
                           auto& v = member(c);
                           v = parse_number<std::decay_t<decltype(v)>>(key, s);
                         }}});
    };
    auto list = [&t](const std::string& key, auto member) {
      t.push_back({key, {[member](const C& c) { return join(member(const_cast<C&>(c))); },
                         [member, key](C& c, const std::string& s) { member(c) = parse_list(key, s); }}});
    };
    auto flag = [&t](const std::string& key, auto member) {
      t.push_back({key, {[member](const C& c) { return std::string(member(const_cast<C&>(c)) ? "true" : "false"); },
                         [member, key](C& c, const std::string& s) {
                           if (s == "true" || s == "1") member(c) = true;
                           else if (s == "false" || s == "0") member(c) = false;
                           else throw ConfigError("config key '" + key + "': expected true/false, got '" + s + "'");
                         }}});
    };
    num("channels", [](C& c) -> auto& { return c.agent.grid.channels; });
    num("image_height", [](C& c) -> auto& { return c.agent.grid.height; });
    num("image_width", [](C& c) -> auto& { return c.agent.grid.width; });
    num("patch_size", [](C& c) -> auto& { return c.agent.grid.patch; });
    num("vocab", [](C& c) -> auto& { return c.agent.vocab; });
    num("symbols_per_patch", [](C& c) -> auto& { return c.agent.symbols_per_patch; });
    num("embed_dim", [](C& c) -> auto& { return c.agent.embed_dim; });
    num("symbol_hidden", [](C& c) -> auto& { return c.agent.symbol_hidden; });
    list("rank_widths", [](C& c) -> auto& { return c.agent.rank_widths; });
    flag("rank_zero_init", [](C& c) -> auto& { return c.agent.rank_zero_init; });
    num("rank_eps", [](C& c) -> auto& { return c.agent.rank_eps; });
    num("text_width", [](C& c) -> auto& { return c.agent.text_width; });
    num("text_layers", [](C& c) -> auto& { return c.agent.text_layers; });
    num("text_heads", [](C& c) -> auto& { return c.agent.text_heads; });
    num("text_mlp", [](C& c) -> auto& { return c.agent.text_mlp; });
    t.push_back({"vision",
                 {[](const C& c) { return std::string(c.agent.vision == VisionKind::conv ? "conv" : "vit"); },
                  [](C& c, const std::string& s) {
                    if (s == "conv") c.agent.vision = VisionKind::conv;
                    else if (s == "vit") c.agent.vision = VisionKind::vit;
                    else throw ConfigError("config key 'vision': expected conv or vit, got '" + s + "'");
                  }}});
    list("vision_widths", [](C& c) -> auto& { return c.agent.vision_widths; });
    list("vision_strides", [](C& c) -> auto& { return c.agent.vision_strides; });
    num("vit_patch", [](C& c) -> auto& { return c.agent.vit_patch; });
    num("vit_width", [](C& c) -> auto& { return c.agent.vit_width; });
    num("vit_layers", [](C& c) -> auto& { return c.agent.vit_layers; });
    num("vit_heads", [](C& c) -> auto& { return c.agent.vit_heads; });
    num("vit_mlp", [](C& c) -> auto& { return c.agent.vit_mlp; });
    num("proj_expansion", [](C& c) -> auto& { return c.agent.proj_expansion; });
    num("crop_min", [](C& c) -> auto& { return c.augment.crop_min; });
    num("crop_max", [](C& c) -> auto& { return c.augment.crop_max; });
    num("flip_prob", [](C& c) -> auto& { return c.augment.flip_prob; });
    num("brightness", [](C& c) -> auto& { return c.augment.brightness; });
    num("contrast", [](C& c) -> auto& { return c.augment.contrast; });
    num("saturation", [](C& c) -> auto& { return c.augment.saturation; });
    num("blur_prob", [](C& c) -> auto& { return c.augment.blur_prob; });
    num("blur_sigma_min", [](C& c) -> auto& { return c.augment.blur_sigma_min; });
    num("blur_sigma_max", [](C& c) -> auto& { return c.augment.blur_sigma_max; });
    num("solarize_prob", [](C& c) -> auto& { return c.augment.solarize_prob; });
    num("solarize_threshold", [](C& c) -> auto& { return c.augment.solarize_threshold; });
    num("batch_size", [](C& c) -> auto& { return c.batch_size; });
    num("tau", [](C& c) -> auto& { return c.tau; });
    num("tau_start", [](C& c) -> auto& { return c.temperature.start; });
    num("tau_end", [](C& c) -> auto& { return c.temperature.end; });
    num("tau_anneal_epochs", [](C& c) -> auto& { return c.temperature.anneal_epochs; });
    flag("hard", [](C& c) -> auto& { return c.hard; });
    num("lr", [](C& c) -> auto& { return c.lr; });
    num("warmup_epochs", [](C& c) -> auto& { return c.warmup_epochs; });
    num("momentum", [](C& c) -> auto& { return c.momentum; });
    num("weight_decay", [](C& c) -> auto& { return c.weight_decay; });
    num("epochs", [](C& c) -> auto& { return c.epochs; });
    num("seed", [](C& c) -> auto& { return c.seed; });
    num("val_fraction", [](C& c) -> auto& { return c.val_fraction; });
    num("eval_trials", [](C& c) -> auto& { return c.eval_trials; });
    num("checkpoint_every", [](C& c) -> auto& { return c.checkpoint_every; });
    return t;
  }();
  return table;
}

}  // namespace detail

// Applies `key = value` lines on top of `base`. Blank lines and lines
// starting with '#' are ignored; unknown keys are rejected.
inline GameConfig parse_config(const std::string& text, GameConfig base = {}) {
  std::map<std::string, const detail::Field*> index;
  for (const auto& [k, f] : detail::fields()) index[k] = &f;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second->set(base, value);
  }
  base.validate();
  return base;
}

inline GameConfig load_config(const std::string& path, GameConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// Canonical text: every key, fixed order. parse_config(to_text(c)) == c.
inline std::string to_text(const GameConfig& c) {
  std::string out;
  for (const auto& [k, f] : detail::fields()) out += k + " = " + f.get(c) + "\n";
  return out;
}

// Corpus specs use the same `key = value` syntax.
inline CorpusSpec parse_corpus_spec(const std::string& text, CorpusSpec s = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("spec line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq)), v = detail::trim(line.substr(eq + 1));
    if (key == "num_classes") s.num_classes = detail::parse_number<std::size_t>(key, v);
    else if (key == "samples_per_class") s.samples_per_class = detail::parse_number<std::size_t>(key, v);
    else if (key == "channels") s.channels = detail::parse_number<std::size_t>(key, v);
    else if (key == "resolution") s.resolution = detail::parse_number<std::size_t>(key, v);
    else if (key == "background") s.background = v;
    else if (key == "object_min") s.object_min = detail::parse_number<double>(key, v);
    else if (key == "object_max") s.object_max = detail::parse_number<double>(key, v);
    else if (key == "seed") s.seed = detail::parse_number<std::uint64_t>(key, v);
    else throw ConfigError("unknown spec key '" + key + "'");
  }
  const auto& fams = background_families();
  if (std::find(fams.begin(), fams.end(), s.background) == fams.end())
    throw ConfigError("spec key 'background': unknown texture family '" + s.background + "'");
  if (!(s.object_min > 0 && s.object_min <= s.object_max && s.object_max < 0.5))
    throw ConfigError("spec: need 0 < object_min <= object_max < 0.5");
  if (s.channels != 3) throw ConfigError("spec key 'channels': the generator draws RGB images only");
  return s;
}

inline std::string to_text(const CorpusSpec& s) {
  std::ostringstream o;
  o << "num_classes = " << s.num_classes << "\nsamples_per_class = " << s.samples_per_class << "\nchannels = " << s.channels
    << "\nresolution = " << s.resolution << "\nbackground = " << s.background << "\nobject_min = " << detail::fmt(s.object_min)
    << "\nobject_max = " << detail::fmt(s.object_max) << "\nseed = " << s.seed << "\n";
  return o.str();
}

inline std::uint64_t config_hash(const GameConfig& c) { return mix64(fnv1a(to_text(c))); }

inline std::string hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15];
  return s;
}

}  // namespace patchgame
