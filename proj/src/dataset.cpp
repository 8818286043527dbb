#include "stiffnet/dataset.hpp"

#include "stiffnet/binary_io.hpp"
#include "stiffnet/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <thread>

namespace stiffnet::data {

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::none: return "none";
  }
  return "none";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val" || s == "validation") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train|val|test)");
}

std::size_t GenConfig::decimation() const {
  const double ratio = sample_dt / fine_dt;
  const auto r = static_cast<std::size_t>(std::llround(ratio));
  if (r == 0 || std::abs(ratio - static_cast<double>(r)) > 1e-9) {
    throw std::invalid_argument("sample_dt must be an integer multiple of fine_dt");
  }
  return r;
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == s) out.push_back(i);
  }
  return out;
}

// ---- generation --------------------------------------------------------------

RecordTrace trace_record(std::uint64_t master_seed, std::uint64_t index, const GenConfig& cfg) {
  RecordTrace tr;
  tr.params = signal::sample_params(master_seed, index);
  const auto& p = tr.params;
  const double duration = cfg.duration();
  const std::size_t n_fine = cfg.decimation() * cfg.n_samples + 1;

  const auto n_bits = static_cast<std::size_t>(std::ceil(duration / p.bit_time)) + 1;
  const std::uint64_t period = (std::uint64_t{1} << cfg.prbs_order) - 1;
  const auto bits = signal::gen_prbs({cfg.prbs_order, 1 + p.rng_seed % period, n_bits});
  const double edge = p.edge_frac * p.bit_time;
  const signal::Pwl logical = signal::bits_to_pwl(bits, p.bit_time, edge, edge, -0.5, 0.5);

  const std::vector<double> filtered =
      signal::channel_filter(logical.sample(cfg.fine_dt, n_fine), cfg.fine_dt, cfg.channel_cutoff);
  std::tie(tr.vin_p, tr.vin_m) = signal::differential_pair(filtered, p.v_cm, p.v_dm);

  const signal::Pwl clk = signal::gen_clock(p, duration);
  tr.clk = clk.sample(cfg.fine_dt, n_fine);
  tr.sim = adc::simulate_record(signal::Pwl::from_samples(tr.vin_p, cfg.fine_dt),
                                signal::Pwl::from_samples(tr.vin_m, cfg.fine_dt), clk, p, cfg.fine_dt,
                                duration, cfg.adc);
  return tr;
}

Record build_record(std::uint64_t master_seed, std::uint64_t index, const GenConfig& cfg) {
  const RecordTrace tr = trace_record(master_seed, index, cfg);
  const std::size_t dec = cfg.decimation();
  Record r;
  r.index = index;
  r.params = tr.params;
  r.n_samples = cfg.n_samples;
  r.values.resize(kRows * cfg.n_samples);
  for (std::size_t j = 0; j < cfg.n_samples; ++j) {
    const std::size_t k = j * dec;
    r.row(kVinP)[j] = tr.vin_p[k];
    r.row(kVinM)[j] = tr.vin_m[k];
    r.row(kClk)[j] = tr.clk[k];
    r.row(kDout1)[j] = tr.sim.dout1[k];
    r.row(kDout0)[j] = tr.sim.dout0[k];
  }
  return r;
}

Dataset build_dataset(std::size_t n_records, std::uint64_t master_seed, const GenConfig& cfg,
                      unsigned threads) {
  if (n_records == 0) throw std::invalid_argument("n_records must be at least 1");
  Dataset d;
  d.master_seed = master_seed;
  d.n_samples = cfg.n_samples;
  d.records.resize(n_records);
  d.split.assign(n_records, Split::none);

  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < n_records; i += stride) {
      try {
        d.records[i] = build_record(master_seed, i, cfg);
      } catch (const std::exception& e) {
        throw std::runtime_error("record " + std::to_string(i) + ": " + e.what());
      }
    }
  };
  threads = std::max(1U, std::min<unsigned>(threads, static_cast<unsigned>(n_records)));
  if (threads == 1) {
    work(0, 1);
    return d;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        work(w, threads);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return d;
}

void split_dataset(Dataset& d, std::array<double, 3> fractions, std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9 || fractions[0] < 0 || fractions[1] < 0 || fractions[2] < 0) {
    throw SplitError("split fractions must be non-negative and sum to 1 (got " + std::to_string(total) + ")");
  }
  const std::size_t n = d.size();
  const auto n_val = static_cast<std::size_t>(std::floor(fractions[1] * static_cast<double>(n) + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(fractions[2] * static_cast<double>(n) + 1e-9));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed, 0x5B117ULL);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  d.split.assign(n, Split::train);
  for (std::size_t k = 0; k < n_val; ++k) d.split[order[k]] = Split::val;
  for (std::size_t k = n_val; k < n_val + n_test; ++k) d.split[order[k]] = Split::test;
  d.split_seed = seed;
}

// ---- SCDS format -------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'C', 'D', 'S'};

using binary::Reader;
using binary::Writer;

void put_params(Writer& w, const Record& r, Split s) {
  const auto& p = r.params;
  for (double v : {p.bit_time, p.edge_frac, p.v_cm, p.v_dm, p.clk_period, p.clk_phase, p.clk_edge,
                   p.r_load, p.c_load}) {
    w.put(v);
  }
  w.put(p.rng_seed);
  w.put(r.index);
  w.put(static_cast<std::uint8_t>(s));
  const std::uint8_t pad[7] = {};
  w.bytes(pad, sizeof pad);
}

}  // namespace

DatasetFormatError::DatasetFormatError(Kind kind, const std::string& what)
    : std::runtime_error(what), kind_(kind) {}

std::size_t dataset_file_size(std::size_t n_records, std::size_t n_samples) {
  return kDatasetHeaderBytes + n_records * (kRows * n_samples * 8 + kParamsBlockBytes);
}

std::vector<std::uint8_t> serialize(const Dataset& d) {
  std::vector<std::uint8_t> out;
  out.reserve(dataset_file_size(d.size(), d.n_samples));
  Writer w(out);
  w.bytes(kMagic, 4);
  w.put(kDatasetVersion);
  w.put(static_cast<std::uint16_t>(kRows));
  w.put(static_cast<std::uint32_t>(d.n_samples));
  const bool has_split = std::any_of(d.split.begin(), d.split.end(), [](Split s) { return s != Split::none; });
  w.put(static_cast<std::uint32_t>(has_split ? 1 : 0));
  w.put(static_cast<std::uint64_t>(d.size()));
  w.put(d.master_seed);
  w.put(d.split_seed);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Record& r = d.records[i];
    if (r.n_samples != d.n_samples || r.values.size() != kRows * d.n_samples) {
      throw std::invalid_argument("record " + std::to_string(i) + " has inconsistent sample count");
    }
    put_params(w, r, i < d.split.size() ? d.split[i] : Split::none);
    for (double v : r.values) w.put(v);
  }
  return out;
}

namespace {

Dataset deserialize_unchecked(std::span<const std::uint8_t> bytes) {
  using Kind = DatasetFormatError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw DatasetFormatError(Kind::bad_magic, "bad magic: not an SCDS dataset file");
  }
  Reader r(bytes);
  r.skip(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kDatasetVersion) {
    throw DatasetFormatError(Kind::version_mismatch, "version mismatch: file has " + std::to_string(version) +
                                                         ", reader expects " + std::to_string(kDatasetVersion));
  }
  const auto rows = r.get<std::uint16_t>();
  if (rows != kRows) throw DatasetFormatError(Kind::malformed, "unexpected row count " + std::to_string(rows));
  Dataset d;
  d.n_samples = r.get<std::uint32_t>();
  r.get<std::uint32_t>();  // flags
  const auto n = r.get<std::uint64_t>();
  d.master_seed = r.get<std::uint64_t>();
  d.split_seed = r.get<std::uint64_t>();
  const std::size_t expected = dataset_file_size(n, d.n_samples);
  if (bytes.size() < expected) {
    throw DatasetFormatError(Kind::truncated, "truncated dataset file: " + std::to_string(bytes.size()) +
                                                  " bytes, header implies " + std::to_string(expected));
  }
  if (bytes.size() > expected) {
    throw DatasetFormatError(Kind::malformed, "trailing bytes after " + std::to_string(n) + " records");
  }
  d.records.resize(n);
  d.split.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Record& rec = d.records[i];
    auto& p = rec.params;
    for (double* f : {&p.bit_time, &p.edge_frac, &p.v_cm, &p.v_dm, &p.clk_period, &p.clk_phase, &p.clk_edge,
                      &p.r_load, &p.c_load}) {
      *f = r.get<double>();
    }
    p.rng_seed = r.get<std::uint64_t>();
    rec.index = r.get<std::uint64_t>();
    const auto s = r.get<std::uint8_t>();
    if (s > 2 && s != 255) throw DatasetFormatError(Kind::malformed, "bad split tag in record " + std::to_string(i));
    d.split[i] = static_cast<Split>(s);
    r.skip(7);
    rec.n_samples = d.n_samples;
    rec.values.resize(kRows * d.n_samples);
    for (double& v : rec.values) v = r.get<double>();
  }
  return d;
}

}  // namespace

Dataset deserialize(std::span<const std::uint8_t> bytes) {
  try {
    return deserialize_unchecked(bytes);
  } catch (const binary::Truncated& e) {
    throw DatasetFormatError(DatasetFormatError::Kind::truncated, std::string("truncated dataset file: ") + e.what());
  }
}

void save(const Dataset& d, const std::filesystem::path& path) {
  const auto bytes = serialize(d);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DatasetFormatError(DatasetFormatError::Kind::io, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DatasetFormatError(DatasetFormatError::Kind::io, "write failed: " + path.string());
}

Dataset load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetFormatError(DatasetFormatError::Kind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

void export_csv(const Record& r, double sample_dt, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "t,VInP,VInM,ClkEval,DOut1,DOut0\n" << std::setprecision(17);
  for (std::size_t j = 0; j < r.n_samples; ++j) {
    os << static_cast<double>(j) * sample_dt;
    for (std::size_t row = 0; row < kRows; ++row) os << ',' << r.row(row)[j];
    os << '\n';
  }
}

// ---- normalization -----------------------------------------------------------

Rail rail(std::size_t row) {
  if (row == kVinP || row == kVinM) return {0.325, 0.575};
  return {0.0, 0.9};
}

double normalize(double v, std::size_t row) {
  const Rail r = rail(row);
  return (v - r.lo) / (r.hi - r.lo);
}

double denormalize(double x, std::size_t row) {
  const Rail r = rail(row);
  return r.lo + x * (r.hi - r.lo);
}

ad::Tensor normalized_inputs(const Record& r) {
  ad::Tensor t({kInputRows, r.n_samples});
  for (std::size_t row = 0; row < kInputRows; ++row) {
    for (std::size_t j = 0; j < r.n_samples; ++j) t[row * r.n_samples + j] = normalize(r.row(row)[j], row);
  }
  return t;
}

ad::Tensor normalized_targets(const Record& r) {
  ad::Tensor t({kOutputRows, r.n_samples});
  for (std::size_t k = 0; k < kOutputRows; ++k) {
    const std::size_t row = kDout1 + k;
    for (std::size_t j = 0; j < r.n_samples; ++j) t[k * r.n_samples + j] = normalize(r.row(row)[j], row);
  }
  return t;
}

Batch make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  const std::size_t T = d.n_samples;
  Batch b{ad::Tensor({indices.size(), kInputRows, T}), ad::Tensor({indices.size(), kOutputRows, T})};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const ad::Tensor x = normalized_inputs(d.records.at(indices[i]));
    const ad::Tensor y = normalized_targets(d.records.at(indices[i]));
    std::copy(x.data.begin(), x.data.end(), b.inputs.data.begin() + static_cast<std::ptrdiff_t>(i * x.size()));
    std::copy(y.data.begin(), y.data.end(), b.targets.data.begin() + static_cast<std::ptrdiff_t>(i * y.size()));
  }
  return b;
}

}  // namespace stiffnet::data
