#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace mhim {

// Exit-code-bearing error categories for the CLI.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat typed configuration. The file format is one `key = value` per line
// with '#' comments; unknown keys are a hard error, and serialization round
// trips losslessly.
struct Config {
  // Data paths.
  std::string corpus_path;
  std::string kg_path;
  std::string items_path;
  std::string vocab_path;
  int64_t n_entities = 0;
  int64_t n_relations = 0;

  // Dimensions and architecture.
  int64_t d_rec = 128;
  int64_t d_conv = 300;
  int64_t rec_heads = 2;
  int64_t conv_heads = 2;
  int64_t conv_layers = 2;
  int64_t ffn_mult = 4;
  int64_t rgcn_layers = 1;
  int64_t hconv_layers = 1;

  // Interest modeling.
  double beta = 0.9;
  int64_t n_hops = 1;
  int64_t history_cap = 10;
  bool use_session = true;
  bool use_knowledge = true;
  bool use_extension = true;
  double extension_gamma = 1.0;
  int64_t extension_k_max = 10;
  bool use_user_bias = true;
  bool use_copy = true;

  // Contrastive pre-training.
  double tau = 0.07;
  double momentum = 0.999;
  int64_t queue_capacity = 256;
  int64_t walk_hops = 128;
  double restart_p = 0.5;
  int64_t pretrain_batch = 32;
  int64_t pretrain_epochs = 30;
  double pretrain_lr = 0.005;
  double pretrain_weight_decay = 1e-4;
  double warmup_frac = 0.1;
  int64_t critical_budget = -1;  // negative: every entity is critical

  // Truncation.
  int64_t max_current = 256;
  int64_t max_history = 1024;
  int64_t max_target = 40;

  // Training.
  double lr = 0.001;
  int64_t batch_size = 16;
  int64_t epochs = 50;
  int64_t conv_batch = 8;
  int64_t conv_epochs = 20;
  double split_train = 0.8;
  double split_valid = 0.1;
  double split_test = 0.1;
  int64_t max_gen_len = 40;

  // Synthetic-corpus generation.
  int64_t synth_users = 50;
  int64_t synth_items = 150;
  int64_t synth_entities = 300;
  int64_t synth_sessions = 4;
  int64_t synth_topics = 5;

  // Misc.
  uint64_t seed = 7;
  std::string checkpoint_dtype = "f64";

  bool operator==(const Config&) const = default;
};

namespace detail {

using ConfigField = std::variant<std::string Config::*, int64_t Config::*, double Config::*,
                                 bool Config::*, uint64_t Config::*>;

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields = {
      {"corpus_path", &Config::corpus_path},
      {"kg_path", &Config::kg_path},
      {"items_path", &Config::items_path},
      {"vocab_path", &Config::vocab_path},
      {"n_entities", &Config::n_entities},
      {"n_relations", &Config::n_relations},
      {"d_rec", &Config::d_rec},
      {"d_conv", &Config::d_conv},
      {"rec_heads", &Config::rec_heads},
      {"conv_heads", &Config::conv_heads},
      {"conv_layers", &Config::conv_layers},
      {"ffn_mult", &Config::ffn_mult},
      {"rgcn_layers", &Config::rgcn_layers},
      {"hconv_layers", &Config::hconv_layers},
      {"beta", &Config::beta},
      {"n_hops", &Config::n_hops},
      {"history_cap", &Config::history_cap},
      {"use_session", &Config::use_session},
      {"use_knowledge", &Config::use_knowledge},
      {"use_extension", &Config::use_extension},
      {"extension_gamma", &Config::extension_gamma},
      {"extension_k_max", &Config::extension_k_max},
      {"use_user_bias", &Config::use_user_bias},
      {"use_copy", &Config::use_copy},
      {"tau", &Config::tau},
      {"momentum", &Config::momentum},
      {"queue_capacity", &Config::queue_capacity},
      {"walk_hops", &Config::walk_hops},
      {"restart_p", &Config::restart_p},
      {"pretrain_batch", &Config::pretrain_batch},
      {"pretrain_epochs", &Config::pretrain_epochs},
      {"pretrain_lr", &Config::pretrain_lr},
      {"pretrain_weight_decay", &Config::pretrain_weight_decay},
      {"warmup_frac", &Config::warmup_frac},
      {"critical_budget", &Config::critical_budget},
      {"max_current", &Config::max_current},
      {"max_history", &Config::max_history},
      {"max_target", &Config::max_target},
      {"lr", &Config::lr},
      {"batch_size", &Config::batch_size},
      {"epochs", &Config::epochs},
      {"conv_batch", &Config::conv_batch},
      {"conv_epochs", &Config::conv_epochs},
      {"split_train", &Config::split_train},
      {"split_valid", &Config::split_valid},
      {"split_test", &Config::split_test},
      {"max_gen_len", &Config::max_gen_len},
      {"synth_users", &Config::synth_users},
      {"synth_items", &Config::synth_items},
      {"synth_entities", &Config::synth_entities},
      {"synth_sessions", &Config::synth_sessions},
      {"synth_topics", &Config::synth_topics},
      {"seed", &Config::seed},
      {"checkpoint_dtype", &Config::checkpoint_dtype},
  };
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

// Doubles print with enough digits to round-trip exactly.
inline std::string double_repr(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline void config_set(Config& config, const std::string& key, const std::string& raw_value) {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) throw ValidationError("config: unknown key '" + key + "'");
  const std::string value = detail::trim(raw_value);
  try {
    std::visit(
        [&](auto member) {
          using T = std::remove_reference_t<decltype(config.*member)>;
          if constexpr (std::is_same_v<T, std::string>) {
            config.*member = value;
          } else if constexpr (std::is_same_v<T, bool>) {
            if (value == "true" || value == "1") {
              config.*member = true;
            } else if (value == "false" || value == "0") {
              config.*member = false;
            } else {
              throw ValidationError("config: key '" + key + "' expects true/false, got '" + value +
                                    "'");
            }
          } else if constexpr (std::is_same_v<T, int64_t>) {
            size_t pos = 0;
            config.*member = std::stoll(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("trailing characters");
          } else if constexpr (std::is_same_v<T, uint64_t>) {
            size_t pos = 0;
            config.*member = std::stoull(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("trailing characters");
          } else {
            size_t pos = 0;
            config.*member = std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("trailing characters");
          }
        },
        it->second);
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception&) {
    throw ValidationError("config: cannot parse value for key '" + key + "': '" + value + "'");
  }
}

inline Config parse_config_text(const std::string& text) {
  Config config;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    config_set(config, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return config;
}

inline Config load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path);
  std::stringstream buffer;
  buffer << is.rdbuf();
  try {
    return parse_config_text(buffer.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline std::string config_to_text(const Config& config) {
  std::ostringstream os;
  for (const auto& [key, field] : detail::config_fields()) {
    os << key << " = ";
    std::visit(
        [&](auto member) {
          using T = std::remove_reference_t<decltype(config.*member)>;
          if constexpr (std::is_same_v<T, bool>) {
            os << (config.*member ? "true" : "false");
          } else if constexpr (std::is_same_v<T, double>) {
            os << detail::double_repr(config.*member);
          } else {
            os << config.*member;
          }
        },
        field);
    os << "\n";
  }
  return os.str();
}

inline void save_config(const Config& config, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("config: cannot write " + path);
  os << config_to_text(config);
}

// Range checks shared by every command.
inline void validate_config(const Config& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError("config: " + what);
  };
  require(c.beta >= 0 && c.beta <= 1, "beta must lie in [0,1]");
  require(c.tau > 0, "tau must be positive");
  require(c.momentum >= 0 && c.momentum < 1, "momentum must lie in [0,1)");
  require(c.restart_p >= 0 && c.restart_p <= 1, "restart_p must lie in [0,1]");
  require(c.d_rec > 0 && c.d_conv > 0, "dimensions must be positive");
  require(c.rec_heads > 0 && c.d_rec % c.rec_heads == 0, "d_rec must split across rec_heads");
  require(c.conv_heads > 0 && c.d_conv % c.conv_heads == 0, "d_conv must split across conv_heads");
  require(c.rgcn_layers >= 1 && c.hconv_layers >= 1 && c.conv_layers >= 1,
          "layer counts must be at least 1");
  require(c.walk_hops >= 0, "walk_hops must be nonnegative");
  require(c.queue_capacity > 0, "queue_capacity must be positive");
  require(c.max_current > 0 && c.max_history > 0 && c.max_target > 0,
          "truncation limits must be positive");
  require(c.lr > 0 && c.pretrain_lr > 0, "learning rates must be positive");
  require(c.batch_size > 0 && c.pretrain_batch > 0 && c.conv_batch > 0,
          "batch sizes must be positive");
  require(c.warmup_frac >= 0 && c.warmup_frac <= 1, "warmup_frac must lie in [0,1]");
  require(std::abs(c.split_train + c.split_valid + c.split_test - 1.0) < 1e-9,
          "split ratios must sum to 1");
  require(c.checkpoint_dtype == "f64" || c.checkpoint_dtype == "f32",
          "checkpoint_dtype must be f64 or f32");
}

}  // namespace mhim
