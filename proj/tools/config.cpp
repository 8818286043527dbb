#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace stiffnet::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

const KeySpec* find_key(const std::vector<KeySpec>& schema, const std::string& key) {
  for (const auto& k : schema)
    if (k.key == key) return &k;
  return nullptr;
}

std::vector<KeySpec> train_keys() {
  return {
      {"dataset", "", "input dataset file (SCDS)"},
      {"head", "kan", "output head: kan | linear"},
      {"lr", "1e-3", "learning rate: 1e-3 | 1e-4 | 1e-5"},
      {"optimizer", "adam", "adam | rmsprop"},
      {"d_model", "256", "model width, a multiple of n_heads (tuned: 256 | 512)"},
      {"kan_neurons", "5", "KAN hidden neurons: 5 | 10"},
      {"kan_grid", "5", "B-spline grid intervals: 5 | 15 | 50"},
      {"batch_size", "16", "records per step (>= 1)"},
      {"max_epochs", "100", "epoch cap"},
      {"patience", "10", "early-stopping patience in epochs"},
      {"seed", "1", "initialization and shuffling seed"},
      {"clip_norm", "1.0", "global gradient-norm clip (<= 0 disables)"},
      {"seg_len", "20", "segment length (divides the series length)"},
      {"e_levels", "3", "encoder levels (>= 1)"},
      {"n_heads", "4", "attention heads"},
      {"n_routers", "4", "router vectors per segment"},
      {"d_ff", "0", "feed-forward width (0 = 2 * d_model)"},
  };
}

template <class T>
T parse_number(const Settings& s, const std::string& key, const std::string& legal) {
  const auto it = s.find(key);
  if (it == s.end()) throw ConfigError("missing key " + key);
  const std::string& v = it->second;
  T out{};
  const char* end = v.data() + v.size();
  std::from_chars_result r;
  if constexpr (std::is_floating_point_v<T>) {
    r = std::from_chars(v.data(), end, out);
  } else {
    r = std::from_chars(v.data(), end, out, 10);
  }
  if (v.empty() || r.ec != std::errc() || r.ptr != end) {
    throw ConfigError("invalid " + key + " '" + v + "' (legal: " + legal + ")");
  }
  return out;
}

}  // namespace

Settings parse_config_text(const std::string& text, const std::vector<KeySpec>& schema, const std::string& origin) {
  Settings out;
  std::istringstream is(text);
  std::string line;
  for (int n = 1; std::getline(is, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '-', '_');
    if (!find_key(schema, key)) throw ConfigError(origin + ":" + std::to_string(n) + ": unknown key " + key);
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

Settings read_config_file(const std::filesystem::path& path, const std::vector<KeySpec>& schema) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), schema, path.string());
}

std::string format_config(const Settings& s) {
  std::string out;
  for (const auto& [k, v] : s) out += k + " = " + v + "\n";
  return out;
}

const std::vector<KeySpec>& generate_schema() {
  static const std::vector<KeySpec> keys{
      {"records", "2000", "number of records (>= 1)"},
      {"seed", "1", "master seed for record parameters"},
      {"split_seed", "0", "seed for the train/val/test shuffle"},
      {"train_frac", "0.70", "train fraction"},
      {"val_frac", "0.15", "validation fraction"},
      {"test_frac", "0.15", "test fraction"},
      {"channel_cutoff_mhz", "175", "channel low-pass cutoff in MHz (> 0)"},
      {"prbs_order", "7", "PRBS register length: 7 | 9 | 11 | 15 | 23 | 31"},
      {"out", "dataset.scds", "dataset file name, relative to the output directory"},
  };
  return keys;
}

const std::vector<KeySpec>& train_schema() {
  static const std::vector<KeySpec> keys = train_keys();
  return keys;
}

const std::vector<KeySpec>& sweep_schema() {
  static const std::vector<KeySpec> keys = [] {
    auto k = train_keys();
    k.push_back({"neurons", "", "comma list of KAN hidden neurons"});
    k.push_back({"grids", "", "comma list of grid intervals"});
    k.push_back({"lrs", "", "comma list of learning rates"});
    k.push_back({"optimizers", "", "comma list of optimizers"});
    k.push_back({"d_models", "", "comma list of model widths"});
    k.push_back({"seeds", "", "comma list of seeds"});
    k.push_back({"presets", "", "named configs: n5_g5_k3, n5_g50_k3, n10_g5_k3"});
    return k;
  }();
  return keys;
}

GenerateSettings generate_settings(const Settings& s) {
  GenerateSettings g;
  g.records = parse_number<std::size_t>(s, "records", ">= 1");
  if (g.records == 0) throw ConfigError("invalid records 0 (legal: >= 1)");
  g.seed = parse_number<std::uint64_t>(s, "seed", "unsigned 64-bit integer");
  g.split_seed = parse_number<std::uint64_t>(s, "split_seed", "unsigned 64-bit integer");
  g.fractions = {parse_number<double>(s, "train_frac", "[0, 1]"), parse_number<double>(s, "val_frac", "[0, 1]"),
                 parse_number<double>(s, "test_frac", "[0, 1]")};
  const double total = g.fractions[0] + g.fractions[1] + g.fractions[2];
  if (std::abs(total - 1.0) > 1e-9 || *std::min_element(g.fractions.begin(), g.fractions.end()) < 0) {
    throw ConfigError("invalid train_frac/val_frac/test_frac (legal: non-negative, summing to 1)");
  }
  const double f = parse_number<double>(s, "channel_cutoff_mhz", "> 0");
  if (!(f > 0)) throw ConfigError("invalid channel_cutoff_mhz (legal: > 0)");
  g.gen.channel_cutoff = f * 1e6;
  g.gen.prbs_order = parse_number<int>(s, "prbs_order", "7 | 9 | 11 | 15 | 23 | 31");
  if (!signal::Lfsr::supported(g.gen.prbs_order)) {
    throw ConfigError("invalid prbs_order " + s.at("prbs_order") + " (legal: 7 | 9 | 11 | 15 | 23 | 31)");
  }
  return g;
}

train::TrainConfig train_config(const Settings& s) {
  train::TrainConfig c;
  try {
    c.head = kan::parse_head(s.at("head"));
  } catch (const std::invalid_argument&) {
    throw ConfigError("invalid head '" + s.at("head") + "' (legal: kan | linear)");
  }
  try {
    c.optimizer = train::parse_optimizer(s.at("optimizer"));
  } catch (const std::invalid_argument&) {
    throw ConfigError("invalid optimizer '" + s.at("optimizer") + "' (legal: adam | rmsprop)");
  }
  c.lr = parse_number<double>(s, "lr", "1e-3, 1e-4, 1e-5");
  c.d_model = parse_number<std::size_t>(s, "d_model", "positive multiple of n_heads");
  c.kan_neurons = parse_number<std::size_t>(s, "kan_neurons", "5, 10");
  c.kan_grid = parse_number<std::size_t>(s, "kan_grid", "5, 15, 50");
  c.batch_size = parse_number<std::size_t>(s, "batch_size", ">= 1");
  c.max_epochs = parse_number<std::size_t>(s, "max_epochs", ">= 1");
  c.patience = parse_number<std::size_t>(s, "patience", ">= 1");
  c.seed = parse_number<std::uint64_t>(s, "seed", "unsigned 64-bit integer");
  c.clip_norm = parse_number<double>(s, "clip_norm", "real number");
  c.seg_len = parse_number<std::size_t>(s, "seg_len", ">= 1");
  c.e_levels = parse_number<std::size_t>(s, "e_levels", ">= 1");
  c.n_heads = parse_number<std::size_t>(s, "n_heads", ">= 1");
  c.n_routers = parse_number<std::size_t>(s, "n_routers", ">= 1");
  c.d_ff = parse_number<std::size_t>(s, "d_ff", ">= 0");
  if (c.max_epochs == 0) throw ConfigError("invalid max_epochs 0 (legal: >= 1)");
  if (c.patience == 0) throw ConfigError("invalid patience 0 (legal: >= 1)");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

}  // namespace stiffnet::cli
