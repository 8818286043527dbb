#pragma once

// Waveform records (3 circuit inputs + 2 outputs sampled on a 2.5 ns grid),
// dataset assembly, the SCDS binary format, splitting and normalization.

#include "stiffnet/adc.hpp"
#include "stiffnet/autodiff.hpp"
#include "stiffnet/signal.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stiffnet::data {

enum Row : std::size_t { kVinP = 0, kVinM = 1, kClk = 2, kDout1 = 3, kDout0 = 4 };
inline constexpr std::size_t kRows = 5;
inline constexpr std::size_t kInputRows = 3;
inline constexpr std::size_t kOutputRows = 2;

enum class Split : std::uint8_t { train = 0, val = 1, test = 2, none = 255 };

const char* to_string(Split s);
Split parse_split(const std::string& s);

struct Record {
  std::uint64_t index = 0;
  signal::RecordParams params;
  std::size_t n_samples = 0;
  std::vector<double> values;  // kRows x n_samples, row-major

  std::span<const double> row(std::size_t r) const {
    return {values.data() + r * n_samples, n_samples};
  }
  std::span<double> row(std::size_t r) { return {values.data() + r * n_samples, n_samples}; }
};

struct GenConfig {
  double fine_dt = 0.25e-9;
  double sample_dt = 2.5e-9;
  std::size_t n_samples = 500;
  double channel_cutoff = 175e6;
  int prbs_order = 7;
  adc::AdcConfig adc;

  double duration() const { return sample_dt * static_cast<double>(n_samples); }
  /// Fine steps per dataset sample; must be a positive integer.
  std::size_t decimation() const;
};

struct Dataset {
  std::vector<Record> records;
  std::vector<Split> split;
  std::uint64_t master_seed = 0;
  std::uint64_t split_seed = 0;
  std::size_t n_samples = 0;

  std::size_t size() const { return records.size(); }
  std::vector<std::size_t> indices(Split s) const;
};

/// Full-resolution intermediate signals of one record (for inspection/tests).
struct RecordTrace {
  signal::RecordParams params;
  std::vector<double> vin_p;  // on the fine grid
  std::vector<double> vin_m;
  std::vector<double> clk;
  adc::SimulationResult sim;
};

RecordTrace trace_record(std::uint64_t master_seed, std::uint64_t index, const GenConfig& cfg);
Record build_record(std::uint64_t master_seed, std::uint64_t index, const GenConfig& cfg);

/// Records are generated on `threads` workers (1 = inline); the result does
/// not depend on the thread count.
Dataset build_dataset(std::size_t n_records, std::uint64_t master_seed, const GenConfig& cfg = {},
                      unsigned threads = 1);

class SplitError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Shuffled partition; val/test take floor(fraction*n) and train the rest.
void split_dataset(Dataset& d, std::array<double, 3> fractions = {0.70, 0.15, 0.15},
                   std::uint64_t seed = 0);

// ---- SCDS file format --------------------------------------------------------

inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 40;
inline constexpr std::size_t kParamsBlockBytes = 96;

class DatasetFormatError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, version_mismatch, truncated, malformed, io };
  DatasetFormatError(Kind kind, const std::string& what);
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::size_t dataset_file_size(std::size_t n_records, std::size_t n_samples);
std::vector<std::uint8_t> serialize(const Dataset& d);
Dataset deserialize(std::span<const std::uint8_t> bytes);
void save(const Dataset& d, const std::filesystem::path& path);
Dataset load(const std::filesystem::path& path);

/// One row per time step: t, VInP, VInM, ClkEval, DOut1, DOut0.
void export_csv(const Record& r, double sample_dt, const std::filesystem::path& path);

// ---- normalization -----------------------------------------------------------

struct Rail {
  double lo;
  double hi;
};

/// Fixed construction rails: analog rows [0.325, 0.575] V, clock/outputs [0, 0.9] V.
Rail rail(std::size_t row);
double normalize(double v, std::size_t row);
double denormalize(double x, std::size_t row);

/// Normalized model inputs [3, T] and targets [2, T] of one record.
ad::Tensor normalized_inputs(const Record& r);
ad::Tensor normalized_targets(const Record& r);

struct Batch {
  ad::Tensor inputs;   // [B, 3, T]
  ad::Tensor targets;  // [B, 2, T]
};

Batch make_batch(const Dataset& d, std::span<const std::size_t> indices);

}  // namespace stiffnet::data
