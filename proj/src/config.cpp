#include "care/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include "care/errors.hpp"

namespace care {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <class T>
T parse_number(std::string_view text, const char* kind) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end || text.empty()) {
    throw ConfigError(std::string("expected ") + kind + ", got '" + std::string(text) + "'");
  }
  return v;
}

std::size_t parse_count(std::string_view t) {
  if (!t.empty() && t[0] == '-') throw ConfigError("expected a non-negative integer, got '" + std::string(t) + "'");
  return parse_number<std::size_t>(t, "a non-negative integer");
}

double parse_real(std::string_view t) { return parse_number<double>(t, "a number"); }

bool parse_bool(std::string_view t) {
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("expected true or false, got '" + std::string(t) + "'");
}

std::vector<std::size_t> parse_list(std::string_view t) {
  std::vector<std::size_t> out;
  while (true) {
    const auto comma = t.find(',');
    out.push_back(parse_count(trim(t.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    t = t.substr(comma + 1);
  }
  return out;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

struct Field {
  const char* key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, std::string_view)> set;
};

#define CARE_COUNT(name, member) \
  Field{name, [](const Config& c) { return std::to_string(c.member); }, [](Config& c, std::string_view v) { c.member = parse_count(v); }}
#define CARE_REAL(name, member) \
  Field{name, [](const Config& c) { return fmt_double(c.member); }, [](Config& c, std::string_view v) { c.member = parse_real(v); }}
#define CARE_BOOL(name, member) \
  Field{name, [](const Config& c) { return std::string(c.member ? "true" : "false"); }, [](Config& c, std::string_view v) { c.member = parse_bool(v); }}
#define CARE_TEXT(name, member) \
  Field{name, [](const Config& c) { return c.member; }, [](Config& c, std::string_view v) { c.member = std::string(v); }}
#define CARE_LIST(name, member) \
  Field{name, [](const Config& c) { return fmt_list(c.member); }, [](Config& c, std::string_view v) { c.member = parse_list(v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      CARE_TEXT("preset", preset),
      CARE_TEXT("dataset", dataset),
      CARE_COUNT("epochs", epochs),
      CARE_COUNT("warmup_epochs", warmup_epochs),
      CARE_COUNT("batch_size", batch_size),
      CARE_REAL("base_lr", base_lr),
      CARE_REAL("weight_decay", weight_decay),
      CARE_REAL("tau_base", tau_base),
      Field{"seed", [](const Config& c) { return std::to_string(c.seed); },
            [](Config& c, std::string_view v) { c.seed = parse_number<std::uint64_t>(v, "a non-negative integer"); }},
      CARE_REAL("lambda", lambda),
      CARE_BOOL("normalize_att", normalize_att),
      CARE_BOOL("symmetrize", symmetrize),
      CARE_COUNT("n_blocks", n_blocks),
      Field{"pos_encoding", [](const Config& c) { return std::string(attn::pos_kind_name(c.pos_encoding)); },
            [](Config& c, std::string_view v) { c.pos_encoding = attn::parse_pos_kind(v); }},
      CARE_COUNT("heads", heads),
      CARE_COUNT("token_dim", token_dim),
      CARE_COUNT("input_resolution", encoder.input_resolution),
      CARE_COUNT("stem_channels", encoder.stem_channels),
      CARE_LIST("stage_channels", encoder.stage_channels),
      CARE_LIST("blocks_per_stage", encoder.blocks_per_stage),
      CARE_COUNT("proj_hidden", proj_hidden),
      CARE_COUNT("proj_out", proj_out),
      CARE_REAL("crop_scale_min", augment.crop_scale_min),
      CARE_REAL("crop_scale_max", augment.crop_scale_max),
      CARE_REAL("flip_prob", augment.flip_prob),
      CARE_REAL("jitter_prob", augment.jitter_prob),
      CARE_REAL("grayscale_prob", augment.grayscale_prob),
      CARE_REAL("blur_prob_1", augment.blur_prob[0]),
      CARE_REAL("blur_prob_2", augment.blur_prob[1]),
      CARE_REAL("solarize_prob_1", augment.solarize_prob[0]),
      CARE_REAL("solarize_prob_2", augment.solarize_prob[1]),
      CARE_COUNT("probe_epochs", probe_epochs),
      CARE_REAL("probe_lr", probe_lr),
      CARE_COUNT("probe_batch", probe_batch),
      CARE_REAL("probe_train_fraction", probe_train_fraction),
      CARE_TEXT("out", out),
      CARE_TEXT("metrics", metrics),
  };
  return table;
}

#undef CARE_COUNT
#undef CARE_REAL
#undef CARE_BOOL
#undef CARE_TEXT
#undef CARE_LIST

bool mentions(const std::string& msg, const std::string& key) {
  auto ident = [](char ch) { return std::isalnum(static_cast<unsigned char>(ch)) != 0 || ch == '_'; };
  for (auto at = msg.find(key); at != std::string::npos; at = msg.find(key, at + 1)) {
    const bool left = at == 0 || !ident(msg[at - 1]);
    const bool right = at + key.size() == msg.size() || !ident(msg[at + key.size()]);
    if (left && right) return true;
  }
  return false;
}

const Field* find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (key == f.key) return &f;
  }
  return nullptr;
}

}  // namespace

attn::TransformerConfig Config::transformer_config() const {
  attn::TransformerConfig t;
  t.n_blocks = n_blocks;
  t.channels = encoder.feature_channels();
  t.dim = token_dim;
  t.heads = heads;
  t.pos = pos_encoding;
  t.grid_h = t.grid_w = encoder.feature_resolution();
  return t;
}

nn::MlpHeadConfig Config::projector1_config() const {
  return {encoder.feature_channels(), proj_hidden, proj_out};
}

nn::MlpHeadConfig Config::projector2_config() const { return projector1_config(); }

nn::MlpHeadConfig Config::predictor_config() const { return {proj_out, proj_hidden, proj_out}; }

void Config::validate() const {
  require(preset == "desk" || preset == "full", "preset must be desk or full, got '" + preset + "'");
  require(!dataset.empty(), "dataset must not be empty");
  require(epochs >= 1, "epochs must be at least 1");
  require(warmup_epochs < epochs, "warmup_epochs must be smaller than epochs");
  require(batch_size >= 2, "batch_size must be at least 2 (batch normalization needs two samples)");
  require(base_lr >= 0.0, "base_lr must be non-negative (0 selects the batch-scaled default)");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(tau_base >= 0.0 && tau_base <= 1.0, "tau_base must lie in [0, 1]");
  require(lambda >= 0.0, "lambda must be non-negative, got " + fmt_double(lambda));
  require(n_blocks >= 1, "n_blocks must be at least 1");
  require(heads >= 1 && token_dim >= 1 && token_dim % heads == 0, "token_dim must be a positive multiple of heads");
  if (pos_encoding == attn::PosKind::sincos_abs) {
    require((token_dim / heads) % 4 == 0, "sincos_abs needs token_dim / heads divisible by 4");
  }
  encoder.validate();
  require(proj_hidden >= 1 && proj_out >= 1, "proj_hidden and proj_out must be positive");
  data::AugmentConfig a = augment;
  a.out_resolution = encoder.input_resolution;
  a.validate();
  require(probe_epochs >= 1, "probe_epochs must be at least 1");
  require(probe_lr > 0.0, "probe_lr must be positive");
  require(probe_batch >= 1, "probe_batch must be at least 1");
  require(probe_train_fraction > 0.0 && probe_train_fraction < 1.0, "probe_train_fraction must lie in (0, 1)");
}

std::string Config::canonical_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

void apply_preset(Config& config, std::string_view preset) {
  if (preset == "desk") {
    config.n_blocks = 2;
    config.epochs = 20;
    config.warmup_epochs = 2;
    config.probe_epochs = 30;
  } else if (preset == "full") {
    config.n_blocks = 5;
    config.epochs = 100;
    config.warmup_epochs = 10;
    config.probe_epochs = 80;
  } else {
    throw ConfigError("preset must be desk or full, got '" + std::string(preset) + "'");
  }
  config.preset = std::string(preset);
}

Config parse_config(std::string_view text) {
  struct Entry {
    std::size_t line;
    std::string key;
    std::string value;
  };
  std::vector<Entry> entries;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value', got '" + std::string(line) + "'");
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (find_field(key) == nullptr) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    entries.push_back({line_no, key, value});
  }

  Config config;
  auto apply = [&](const Entry& e) {
    try {
      if (e.key == "preset") {
        apply_preset(config, e.value);
      } else {
        find_field(e.key)->set(config, e.value);
      }
    } catch (const ConfigError& err) {
      throw ConfigError("line " + std::to_string(e.line) + ": " + e.key + ": " + err.what());
    }
  };
  // The preset fills defaults first so explicit keys override it in any order.
  for (const auto& e : entries) {
    if (e.key == "preset") apply(e);
  }
  for (const auto& e : entries) {
    if (e.key != "preset") apply(e);
  }
  config.augment.out_resolution = config.encoder.input_resolution;

  try {
    config.validate();
  } catch (const ConfigError& err) {
    // Point at the line that set the offending key when one can be found.
    const std::string msg = err.what();
    for (const auto& e : entries) {
      if (mentions(msg, e.key)) throw ConfigError("line " + std::to_string(e.line) + ": " + msg);
    }
    throw;
  }
  return config;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::uint64_t config_hash(const Config& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : config.canonical_text()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace care
