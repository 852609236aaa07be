// SPDX-License-Identifier: Apache-2.0

#include "crst/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

namespace crst {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    return "";
  }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  if (!parse_double(v, out)) {
    throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d < 0 || d != static_cast<double>(static_cast<std::uint64_t>(d))) {
    throw ConfigError("'" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(d);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto out = std::stoull(v, &pos);
    if (pos != v.size()) {
      throw std::invalid_argument(v);
    }
    return out;
  } catch (const std::logic_error&) {
    throw ConfigError("'" + key + "': expected an unsigned integer, got '" + v + "'");
  }
}

using Setter = std::function<void(const std::string&)>;

void apply_section(const std::string& name, const IniSection& sec,
                   const std::map<std::string, Setter>& setters) {
  for (const auto& [k, v] : sec) {
    const auto it = setters.find(k);
    if (it == setters.end()) {
      throw ConfigError("unknown key '" + k + "' in section [" + name + "]");
    }
    it->second(v);
  }
}

std::map<std::string, Setter> domain_setters(DomainConfig& d, const std::string& s) {
  return {
      {"envelope_shift", [&d, s](const std::string& v) { d.envelope_shift = to_double(s, v); }},
      {"background_level", [&d, s](const std::string& v) { d.background_level = to_double(s, v); }},
      {"background_tilt", [&d, s](const std::string& v) { d.background_tilt = to_double(s, v); }},
      {"gain_min", [&d, s](const std::string& v) { d.gain_min = to_double(s, v); }},
      {"gain_max", [&d, s](const std::string& v) { d.gain_max = to_double(s, v); }},
      {"cell_noise", [&d, s](const std::string& v) { d.cell_noise = to_double(s, v); }},
  };
}

void write_domain(std::ostream& os, const char* name, const DomainConfig& d) {
  os << "\n[" << name << "]\n"
     << "envelope_shift = " << format_double(d.envelope_shift) << '\n'
     << "background_level = " << format_double(d.background_level) << '\n'
     << "background_tilt = " << format_double(d.background_tilt) << '\n'
     << "gain_min = " << format_double(d.gain_min) << '\n'
     << "gain_max = " << format_double(d.gain_max) << '\n'
     << "cell_noise = " << format_double(d.cell_noise) << '\n';
}

}  // namespace

IniFile parse_ini(const std::string& text) {
  IniFile ini;
  std::istringstream in(text);
  std::string line;
  std::string section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError(where + "malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      ini[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + "expected key = value");
    }
    if (section.empty()) {
      throw ConfigError(where + "key outside of any section");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(where + "empty key");
    }
    if (!ini[section].emplace(key, value).second) {
      throw ConfigError(where + "duplicate key '" + key + "'");
    }
  }
  return ini;
}

std::vector<ConvBlockConfig> parse_blocks(const std::string& text) {
  std::vector<ConvBlockConfig> blocks;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    ConvBlockConfig b;
    char x1 = 0;
    char x2 = 0;
    std::istringstream is(item);
    if (!(is >> b.out_channels >> x1 >> b.pool_time >> x2 >> b.pool_freq) || x1 != 'x' ||
        x2 != 'x' || !is.eof()) {
      throw ConfigError("conv_blocks: expected CxTxF items, got '" + item + "'");
    }
    blocks.push_back(b);
  }
  if (blocks.empty()) {
    throw ConfigError("conv_blocks: no blocks given");
  }
  return blocks;
}

ExperimentConfig config_from_ini(const IniFile& ini) {
  ExperimentConfig cfg;
  auto& d = cfg.data;
  auto& s = d.scene;
  auto& t = cfg.train;
  auto& m = t.model;
  auto& p = cfg.postproc;
  const std::map<std::string, std::map<std::string, Setter>> sections{
      {"data",
       {{"seed", [&](const std::string& v) { d.seed = to_u64("seed", v); }},
        {"n_strong", [&](const std::string& v) { d.n_strong = to_size("n_strong", v); }},
        {"n_weak", [&](const std::string& v) { d.n_weak = to_size("n_weak", v); }},
        {"n_unlabeled", [&](const std::string& v) { d.n_unlabeled = to_size("n_unlabeled", v); }},
        {"n_validation",
         [&](const std::string& v) { d.n_validation = to_size("n_validation", v); }}}},
      {"scene",
       {{"n_classes", [&](const std::string& v) { s.n_classes = to_size("n_classes", v); }},
        {"clip_len", [&](const std::string& v) { s.clip_len = to_double("clip_len", v); }},
        {"fps", [&](const std::string& v) { s.fps = to_double("fps", v); }},
        {"n_channels", [&](const std::string& v) { s.n_channels = to_size("n_channels", v); }},
        {"min_duration",
         [&](const std::string& v) { s.min_duration = to_double("min_duration", v); }},
        {"max_duration",
         [&](const std::string& v) { s.max_duration = to_double("max_duration", v); }},
        {"prototype_seed",
         [&](const std::string& v) { s.prototype_seed = to_u64("prototype_seed", v); }},
        {"max_polyphony",
         [&](const std::string& v) { s.max_polyphony = to_size("max_polyphony", v); }},
        {"event_rate", [&](const std::string& v) { s.event_rate = to_double("event_rate", v); }}}},
      {"synthetic", domain_setters(d.synthetic_domain, "synthetic")},
      {"real", domain_setters(d.real_domain, "real")},
      {"model",
       {{"conv_blocks", [&](const std::string& v) { m.conv_blocks = parse_blocks(v); }},
        {"hidden", [&](const std::string& v) { m.recurrent_hidden = to_size("hidden", v); }},
        {"layers", [&](const std::string& v) { m.recurrent_layers = to_size("layers", v); }},
        {"dropout", [&](const std::string& v) { m.dropout_rate = to_double("dropout", v); }},
        {"norm_momentum",
         [&](const std::string& v) { m.norm_momentum = to_double("norm_momentum", v); }}}},
      {"train",
       {{"variant", [&](const std::string& v) { t.variant = parse_variant(v); }},
        {"epochs", [&](const std::string& v) { t.epochs = to_size("epochs", v); }},
        {"steps_per_epoch",
         [&](const std::string& v) { t.steps_per_epoch = to_size("steps_per_epoch", v); }},
        {"batch",
         [&](const std::string& v) {
           std::istringstream is(v);
           char c1 = 0;
           char c2 = 0;
           if (!(is >> t.batch.strong >> c1 >> t.batch.unlabeled >> c2 >> t.batch.weak) ||
               c1 != ',' || c2 != ',') {
             throw ConfigError("batch: expected 'strong, unlabeled, weak'");
           }
         }},
        {"lr", [&](const std::string& v) { t.lr = to_double("lr", v); }},
        {"lr_cap", [&](const std::string& v) { t.lr_cap = to_double("lr_cap", v); }},
        {"ema_decay", [&](const std::string& v) { t.ema_decay = to_double("ema_decay", v); }},
        {"omega_peak", [&](const std::string& v) { t.omega_peak = to_double("omega_peak", v); }},
        {"delta_peak", [&](const std::string& v) { t.delta_peak = to_double("delta_peak", v); }},
        {"perturbation", [&](const std::string& v) { t.perturbation = parse_perturbation(v); }},
        {"snr_db", [&](const std::string& v) { t.snr_db = to_double("snr_db", v); }},
        {"shift_sigma",
         [&](const std::string& v) { t.shift_sigma = to_double("shift_sigma", v); }},
        {"evaluate", [&](const std::string& v) { t.evaluate = parse_eval_network(v); }},
        {"seed", [&](const std::string& v) { t.seed = to_u64("seed", v); }}}},
      {"postproc",
       {{"alpha_min", [&](const std::string& v) { p.alpha_min = to_double("alpha_min", v); }},
        {"alpha_max", [&](const std::string& v) { p.alpha_max = to_double("alpha_max", v); }},
        {"alpha_steps", [&](const std::string& v) { p.alpha_steps = to_size("alpha_steps", v); }},
        {"beta_min", [&](const std::string& v) { p.beta_min = to_double("beta_min", v); }},
        {"beta_max", [&](const std::string& v) { p.beta_max = to_double("beta_max", v); }},
        {"beta_steps", [&](const std::string& v) { p.beta_steps = to_size("beta_steps", v); }},
        {"alpha", [&](const std::string& v) { p.alpha = to_double("alpha", v); }},
        {"beta", [&](const std::string& v) { p.beta = to_double("beta", v); }}}},
  };
  for (const auto& [name, sec] : ini) {
    const auto it = sections.find(name);
    if (it == sections.end()) {
      throw ConfigError("unknown section [" + name + "]");
    }
    apply_section(name, sec, it->second);
  }
  // The model input and output follow the scene.
  m.n_mel_in = s.n_channels;
  m.n_classes = s.n_classes;
  try {
    s.validate();
    t.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw ConfigError("cannot read config file " + path.string());
  }
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return config_from_ini(parse_ini(ss.str()));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string ExperimentConfig::to_ini() const {
  std::ostringstream os;
  const auto& d = data;
  const auto& s = d.scene;
  const auto& t = train;
  const auto& m = t.model;
  os << "[data]\n"
     << "seed = " << d.seed << '\n'
     << "n_strong = " << d.n_strong << '\n'
     << "n_weak = " << d.n_weak << '\n'
     << "n_unlabeled = " << d.n_unlabeled << '\n'
     << "n_validation = " << d.n_validation << '\n';
  os << "\n[scene]\n"
     << "n_classes = " << s.n_classes << '\n'
     << "clip_len = " << format_double(s.clip_len) << '\n'
     << "fps = " << format_double(s.fps) << '\n'
     << "n_channels = " << s.n_channels << '\n'
     << "min_duration = " << format_double(s.min_duration) << '\n'
     << "max_duration = " << format_double(s.max_duration) << '\n'
     << "prototype_seed = " << s.prototype_seed << '\n'
     << "max_polyphony = " << s.max_polyphony << '\n'
     << "event_rate = " << format_double(s.event_rate) << '\n';
  write_domain(os, "synthetic", d.synthetic_domain);
  write_domain(os, "real", d.real_domain);
  os << "\n[model]\nconv_blocks = ";
  for (std::size_t i = 0; i < m.conv_blocks.size(); ++i) {
    const auto& b = m.conv_blocks[i];
    os << (i ? ", " : "") << b.out_channels << 'x' << b.pool_time << 'x' << b.pool_freq;
  }
  os << '\n'
     << "hidden = " << m.recurrent_hidden << '\n'
     << "layers = " << m.recurrent_layers << '\n'
     << "dropout = " << format_double(m.dropout_rate) << '\n'
     << "norm_momentum = " << format_double(m.norm_momentum) << '\n';
  os << "\n[train]\n"
     << "variant = " << to_string(t.variant) << '\n'
     << "epochs = " << t.epochs << '\n'
     << "steps_per_epoch = " << t.steps_per_epoch << '\n'
     << "batch = " << t.batch.strong << ", " << t.batch.unlabeled << ", " << t.batch.weak << '\n'
     << "lr = " << format_double(t.lr) << '\n'
     << "lr_cap = " << format_double(t.lr_cap) << '\n'
     << "ema_decay = " << format_double(t.ema_decay) << '\n'
     << "omega_peak = " << format_double(t.omega_peak) << '\n'
     << "delta_peak = " << format_double(t.delta_peak) << '\n'
     << "perturbation = " << to_string(t.perturbation) << '\n'
     << "snr_db = " << format_double(t.snr_db) << '\n'
     << "shift_sigma = " << format_double(t.shift_sigma) << '\n'
     << "evaluate = " << to_string(t.evaluate) << '\n'
     << "seed = " << t.seed << '\n';
  os << "\n[postproc]\n"
     << "alpha_min = " << format_double(postproc.alpha_min) << '\n'
     << "alpha_max = " << format_double(postproc.alpha_max) << '\n'
     << "alpha_steps = " << postproc.alpha_steps << '\n'
     << "beta_min = " << format_double(postproc.beta_min) << '\n'
     << "beta_max = " << format_double(postproc.beta_max) << '\n'
     << "beta_steps = " << postproc.beta_steps << '\n'
     << "alpha = " << format_double(postproc.alpha) << '\n'
     << "beta = " << format_double(postproc.beta) << '\n';
  return os.str();
}

}  // namespace crst
