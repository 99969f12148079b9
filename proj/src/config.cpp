#include "xlst/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <functional>
#include <set>
#include <sstream>

#include "xlst/error.hpp"
#include "xlst/finetune.hpp"
#include "xlst/io.hpp"

namespace xlst {

namespace {

struct Entry {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

[[noreturn]] void bad_value(const std::string& what, const std::string& text) {
  throw ConfigError("bad value '" + text + "' for " + what);
}

template <typename T>
T parse_number(const std::string& text, const std::string& what) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end || text.empty()) bad_value(what, text);
  return v;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

template <typename T>
void parse_into(T& field, const std::string& text, const std::string& what) {
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true") field = true;
    else if (text == "false") field = false;
    else bad_value(what, text);
  } else if constexpr (std::is_same_v<T, std::string>) {
    field = text;
  } else if constexpr (std::is_same_v<T, std::vector<int>>) {
    try {
      field = parse_int_list(text);
    } catch (const ConfigError&) {
      bad_value(what, text);
    }
  } else {
    field = parse_number<T>(text, what);
  }
}

template <typename T>
std::string format_field(const T& field) {
  if constexpr (std::is_same_v<T, bool>) {
    return field ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return field;
  } else if constexpr (std::is_same_v<T, std::vector<int>>) {
    std::string s;
    for (std::size_t i = 0; i < field.size(); ++i) s += (i ? "," : "") + std::to_string(field[i]);
    return s;
  } else {
    return format_number(field);
  }
}

template <typename Access>
Entry field(const std::string& section, const std::string& key, Access access) {
  const std::string what = section + "." + key;
  return Entry{section, key,
               [access, what](RunConfig& c, const std::string& text) { parse_into(access(c), text, what); },
               [access](const RunConfig& c) { return format_field(access(const_cast<RunConfig&>(c))); }};
}

#define XLST_FIELD(section, key, member) field(section, key, [](RunConfig& c) -> auto& { return c.member; })

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      XLST_FIELD("run", "seed", seed),
      XLST_FIELD("run", "precision", precision),
      XLST_FIELD("run", "out", out),

      XLST_FIELD("encoder", "input_dim", encoder.input_dim),
      XLST_FIELD("encoder", "cnn_channels", encoder.cnn_channels),
      XLST_FIELD("encoder", "downsample_factor", encoder.downsample_factor),
      XLST_FIELD("encoder", "transformer_blocks", encoder.transformer_blocks),
      XLST_FIELD("encoder", "attention_dim", encoder.attention_dim),
      XLST_FIELD("encoder", "attention_heads", encoder.attention_heads),
      XLST_FIELD("encoder", "ffn_dim", encoder.ffn_dim),
      XLST_FIELD("encoder", "projector_hidden_dim", encoder.projector_hidden_dim),
      XLST_FIELD("encoder", "projector_output_dim", encoder.projector_output_dim),
      XLST_FIELD("encoder", "positional_encoding", encoder.positional_encoding),
      XLST_FIELD("encoder", "dropout", encoder.dropout),
      XLST_FIELD("encoder", "batch_norm_momentum", encoder.batch_norm_momentum),

      XLST_FIELD("augment", "time_mask", augment.time_mask),
      XLST_FIELD("augment", "time_mask_len", augment.time_mask_len),
      XLST_FIELD("augment", "time_mask_proportion", augment.time_mask_proportion),
      XLST_FIELD("augment", "freq_mask", augment.freq_mask),
      XLST_FIELD("augment", "freq_num_windows", augment.freq_num_windows),
      XLST_FIELD("augment", "freq_max_width", augment.freq_max_width),
      XLST_FIELD("augment", "mixup", augment.mixup),
      XLST_FIELD("augment", "mixup_alpha", augment.mixup_alpha),

      XLST_FIELD("schedule", "epochs", schedule.epochs),
      XLST_FIELD("schedule", "lr", schedule.lr),
      XLST_FIELD("schedule", "warmup", schedule.warmup),
      XLST_FIELD("schedule", "hold", schedule.hold),
      XLST_FIELD("schedule", "decay", schedule.decay),
      XLST_FIELD("schedule", "decay_floor_ratio", schedule.decay_floor_ratio),

      XLST_FIELD("train", "batch_size", batch_size),
      XLST_FIELD("train", "max_grad_norm", max_grad_norm),
      XLST_FIELD("train", "checkpoint_every", checkpoint_every),

      XLST_FIELD("data", "languages", data.family.languages),
      XLST_FIELD("data", "prototypes", data.family.prototypes),
      XLST_FIELD("data", "inventory", data.family.inventory),
      XLST_FIELD("data", "overlap", data.family.overlap),
      XLST_FIELD("data", "feature_dim", data.family.feature_dim),
      XLST_FIELD("data", "noise", data.family.noise),
      XLST_FIELD("data", "prototype_spread", data.family.prototype_spread),
      XLST_FIELD("data", "min_duration", data.family.min_duration),
      XLST_FIELD("data", "max_duration", data.family.max_duration),
      XLST_FIELD("data", "transition_concentration", data.family.transition_concentration),
      XLST_FIELD("data", "supervised_utterances", data.supervised_utterances),
      XLST_FIELD("data", "heldout_utterances", data.heldout_utterances),
      XLST_FIELD("data", "unlabeled_per_language", data.unlabeled_per_language),
      XLST_FIELD("data", "finetune_utterances", data.finetune_utterances),
      XLST_FIELD("data", "test_utterances", data.test_utterances),
      XLST_FIELD("data", "min_frames", data.min_frames),
      XLST_FIELD("data", "max_frames", data.max_frames),

      XLST_FIELD("corpus", "dir", corpus_dir),
      XLST_FIELD("corpus", "languages", languages),

      XLST_FIELD("xlst", "mode", xlst_mode),
      XLST_FIELD("xlst", "lambda", lambda),
      XLST_FIELD("xlst", "tau", tau),
      XLST_FIELD("xlst", "offline_rounds", offline_rounds),
      XLST_FIELD("xlst", "freeze_main_batch_norm", freeze_main_batch_norm),
      XLST_FIELD("xlst", "monitor_every", monitor_every),
      XLST_FIELD("xlst", "collapse_threshold", collapse_threshold),

      XLST_FIELD("finetune", "freeze_encoder", freeze_encoder),
      XLST_FIELD("finetune", "head_only_fraction", head_only_fraction),
      XLST_FIELD("finetune", "vocab", vocab),
  };
  return table;
}

#undef XLST_FIELD

}  // namespace

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  if (text.empty()) return out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(' '), e = item.find_last_not_of(' ');
    if (b == std::string::npos) throw ConfigError("empty entry in list '" + text + "'");
    out.push_back(parse_number<int>(item.substr(b, e - b + 1), "list '" + text + "'"));
  }
  if (text.back() == ',') throw ConfigError("empty entry in list '" + text + "'");
  return out;
}

void RunConfig::validate() const {
  if (precision != 32 && precision != 64) throw ConfigError("run.precision must be 32 or 64");
  encoder.validate();
  augment.validate();
  schedule.validate();
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(max_grad_norm >= 0)) throw ConfigError("train.max_grad_norm must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  data.validate();
  for (int l : languages) {
    if (l < 0) throw ConfigError("corpus.languages entries must be >= 0");
  }
  if (xlst_mode != "mono" && xlst_mode != "multi") throw ConfigError("xlst.mode must be 'mono' or 'multi'");
  if (xlst_mode == "mono" && languages.size() > 1) {
    throw ConfigError("xlst.mode = mono takes at most one entry in corpus.languages");
  }
  if (!(lambda >= 0 && lambda <= 1)) throw ConfigError("xlst.lambda must be in [0, 1]");
  if (!(tau >= 0)) throw ConfigError("xlst.tau must be >= 0");
  if (offline_rounds < 1) throw ConfigError("xlst.offline_rounds must be >= 1");
  if (monitor_every < 0) throw ConfigError("xlst.monitor_every must be >= 0");
  if (!(head_only_fraction >= 0 && head_only_fraction <= 1)) {
    throw ConfigError("finetune.head_only_fraction must be in [0, 1]");
  }
  if (vocab < 0) throw ConfigError("finetune.vocab must be >= 0");
}

RunConfig default_config(const std::string& command) {
  RunConfig c;
  c.encoder = EncoderConfig::desk_preset();
  c.encoder.input_dim = c.data.family.feature_dim;
  c.augment.freq_max_width = 4;  // 27 of 80 bins does not fit 16 features
  if (command == "synth-data" || command == "pretrain-sup") {
    // the TrainSchedule defaults: 20% warmup then decay
  } else if (command == "pretrain-xlst") {
    c.schedule = TrainSchedule{10, 5e-4, 0.0, 0.5, 0.5, 0.01};
    c.augment.mixup = false;
  } else if (command == "finetune" || command == "eval") {
    const FinetuneOptions f;
    c.schedule = f.schedule;
    c.augment = f.augment;
    c.augment.freq_max_width = 4;
    c.head_only_fraction = f.head_only_fraction;
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
  return c;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  std::map<std::string, const Entry*> index;
  for (const auto& e : entries()) index[e.section + "." + e.key] = &e;
  for (const auto& [section, keys] : tree) {
    if (keys.empty() && !keys.data().empty()) throw ConfigError("config: key '" + section + "' outside any section");
    for (const auto& [key, value] : keys) {
      const auto it = index.find(section + "." + key);
      if (it == index.end()) throw ConfigError("config: unknown key '" + key + "' in section [" + section + "]");
      it->second->set(base, value.data());
    }
  }
  base.validate();
  return base;
}

std::string render_config(const RunConfig& c) {
  std::ostringstream out;
  std::string section;
  for (const auto& e : entries()) {
    if (e.section != section) {
      out << (section.empty() ? "" : "\n") << '[' << e.section << "]\n";
      section = e.section;
    }
    out << e.key << " = " << e.get(c) << '\n';
  }
  return out.str();
}

std::string config_hash(const RunConfig& c) {
  RunConfig copy = c;
  copy.out.clear();
  return sha256_hex(render_config(copy));
}

}  // namespace xlst
