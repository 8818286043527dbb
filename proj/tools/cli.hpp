#pragma once

// Command-line front end: key=value configs, run manifests, SVG figures and
// the five subcommands.

#include "stiffnet/dataset.hpp"
#include "stiffnet/train.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stiffnet::cli {

using Settings = std::map<std::string, std::string>;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct KeySpec {
  std::string key;
  std::string default_value;
  std::string help;
};

/// `key = value` lines; '#' starts a comment. Unknown keys are rejected.
Settings parse_config_text(const std::string& text, const std::vector<KeySpec>& schema,
                           const std::string& origin = "config");
Settings read_config_file(const std::filesystem::path& path, const std::vector<KeySpec>& schema);
std::string format_config(const Settings& s);

const std::vector<KeySpec>& generate_schema();
const std::vector<KeySpec>& train_schema();
const std::vector<KeySpec>& sweep_schema();

struct GenerateSettings {
  std::size_t records = 2000;
  std::uint64_t seed = 1;
  std::uint64_t split_seed = 0;
  std::array<double, 3> fractions{0.70, 0.15, 0.15};
  data::GenConfig gen;
};

GenerateSettings generate_settings(const Settings& s);
train::TrainConfig train_config(const Settings& s);

// ---- hashing and manifests ------------------------------------------------------

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

struct Manifest {
  std::string command;
  std::string config_path;
  Settings resolved;
  std::uint64_t master_seed = 0;
  std::vector<std::filesystem::path> artifacts;

  /// JSON with a content hash per artifact.
  void write(const std::filesystem::path& path) const;
};

// ---- figures ----------------------------------------------------------------------

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::string color;
  bool dashed = false;
};

struct Panel {
  std::string title;
  std::vector<Series> series;
  bool log_y = false;
};

/// Vertically stacked line plots sharing the figure width.
std::string render_svg(const std::vector<Panel>& panels, const std::string& x_label, double panel_height = 160);

void write_learning_curve(const train::RunLog& log, const std::filesystem::path& path);

// ---- commands ----------------------------------------------------------------------

/// Worker count from STIFFNET_THREADS (default: hardware concurrency).
unsigned worker_threads(bool single_thread);

/// Runs the tool. Errors are reported as one `error: ...` line on `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace stiffnet::cli
