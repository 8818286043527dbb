#include "doctest.h"

#include "oracles.hpp"
#include "stiffnet/dataset.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace stiffnet;
using namespace stiffnet::data;

namespace {

bool bit_equal(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size() || a.split != b.split || a.master_seed != b.master_seed || a.n_samples != b.n_samples)
    return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.records[i].values;
    const auto& y = b.records[i].values;
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
    if (std::memcmp(&a.records[i].params.bit_time, &b.records[i].params.bit_time, sizeof(double)) != 0) return false;
    if (a.records[i].params.rng_seed != b.records[i].params.rng_seed) return false;
  }
  return true;
}

std::filesystem::path tmp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("stiffnet_unit_" + name);
}

}  // namespace

TEST_CASE("records are 5 x 500 and bounded by their rails") {
  const Dataset d = build_dataset(10, 3);
  REQUIRE(d.size() == 10);
  for (const auto& r : d.records) {
    CHECK(r.n_samples == 500);
    CHECK(r.values.size() == kRows * 500);
    for (std::size_t row : {kVinP, kVinM}) {
      for (double v : r.row(row)) {
        CHECK(v >= 0.45 - 0.125);
        CHECK(v <= 0.45 + 0.125);
      }
    }
    for (std::size_t row : {kClk, kDout1, kDout0}) {
      for (double v : r.row(row)) {
        CHECK(v >= 0.0);
        CHECK(v <= 0.9);
      }
    }
  }
}

TEST_CASE("generation is reproducible and independent of thread count") {
  const Dataset a = build_dataset(6, 99, {}, 1);
  const Dataset b = build_dataset(6, 99, {}, 3);
  CHECK(bit_equal(a, b));
  const Dataset c = build_dataset(6, 100, {}, 1);
  CHECK_FALSE(bit_equal(a, c));
  CHECK_THROWS(build_dataset(0, 1));
}

TEST_CASE("record samples are the fine trace at every tenth step") {
  GenConfig cfg;
  const RecordTrace tr = trace_record(5, 2, cfg);
  const Record r = build_record(5, 2, cfg);
  CHECK(cfg.decimation() == 10);
  for (std::size_t k = 0; k < 500; ++k) {
    CHECK(r.row(kVinP)[k] == tr.vin_p[10 * k]);
    CHECK(r.row(kClk)[k] == tr.clk[10 * k]);
    CHECK(r.row(kDout1)[k] == tr.sim.dout1[10 * k]);
  }
  double worst = 0;
  for (std::size_t k = 0; k < tr.vin_p.size(); ++k) worst = std::max(worst, std::abs(tr.vin_p[k] + tr.vin_m[k] - 0.9));
  CHECK(worst < 1e-12);
}

TEST_CASE("split sizes and determinism") {
  Dataset d;
  d.records.resize(2000);
  split_dataset(d, {0.70, 0.15, 0.15}, 4);
  CHECK(d.indices(Split::train).size() == 1400);
  CHECK(d.indices(Split::val).size() == 300);
  CHECK(d.indices(Split::test).size() == 300);
  Dataset e;
  e.records.resize(2000);
  split_dataset(e, {0.70, 0.15, 0.15}, 4);
  CHECK(d.split == e.split);

  Dataset small;
  small.records.resize(7);
  split_dataset(small, {0.70, 0.15, 0.15}, 0);
  CHECK(small.indices(Split::val).size() == 1);
  CHECK(small.indices(Split::train).size() == 5);
  CHECK_THROWS_AS(split_dataset(small, {0.7, 0.2, 0.2}, 0), SplitError);
}

TEST_CASE("SCDS round-trip is bit-exact") {
  Dataset d = build_dataset(5, 21);
  split_dataset(d, {0.6, 0.2, 0.2}, 8);
  const auto bytes = serialize(d);
  CHECK(bytes.size() == dataset_file_size(5, 500));
  CHECK(bytes.size() == 40 + 5 * (5 * 500 * 8 + 96));
  const Dataset back = deserialize(bytes);
  CHECK(bit_equal(d, back));
  CHECK(back.split_seed == 8);

  const auto path = tmp_path("roundtrip.scds");
  save(d, path);
  CHECK(std::filesystem::file_size(path) == bytes.size());
  CHECK(bit_equal(load(path), d));
  std::filesystem::remove(path);
}

TEST_CASE("SCDS corruption raises distinct errors") {
  Dataset d = build_dataset(2, 1);
  const auto good = serialize(d);
  auto kind_of = [](std::vector<std::uint8_t> b) {
    try {
      deserialize(b);
    } catch (const DatasetFormatError& e) {
      return e.kind();
    }
    FAIL("expected DatasetFormatError");
    return DatasetFormatError::Kind::io;
  };
  auto bad = good;
  bad[0] = 'X';
  CHECK(kind_of(bad) == DatasetFormatError::Kind::bad_magic);
  bad = good;
  bad[4] = 9;
  CHECK(kind_of(bad) == DatasetFormatError::Kind::version_mismatch);
  bad = good;
  bad.resize(bad.size() - 3);
  CHECK(kind_of(bad) == DatasetFormatError::Kind::truncated);
  bad = good;
  bad.resize(20);
  CHECK(kind_of(bad) == DatasetFormatError::Kind::truncated);
  CHECK_THROWS_AS(load("/nonexistent/dir/x.scds"), DatasetFormatError);
}

TEST_CASE("normalization round-trips and uses the construction rails") {
  CHECK(normalize(0.325, kVinP) == 0.0);
  CHECK(normalize(0.575, kVinM) == doctest::Approx(1.0));
  CHECK(normalize(0.9, kDout0) == 1.0);
  Rng rng(6);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t row = rng.below(kRows);
    const double v = rng.uniform(-1, 2);
    worst = std::max(worst, std::abs(denormalize(normalize(v, row), row) - v));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("batches stack normalized records") {
  Dataset d = build_dataset(3, 2);
  const std::vector<std::size_t> idx{2, 0};
  const Batch b = make_batch(d, idx);
  CHECK(b.inputs.shape == ad::Shape{2, 3, 500});
  CHECK(b.targets.shape == ad::Shape{2, 2, 500});
  CHECK(b.inputs[0] == normalize(d.records[2].row(kVinP)[0], kVinP));
  CHECK(b.targets[2 * 500 + 7] == normalize(d.records[0].row(kDout1)[7], kDout1));
}

TEST_CASE("csv export has one row per sample") {
  const Record r = build_record(1, 0, {});
  const auto path = tmp_path("rec.csv");
  export_csv(r, 2.5e-9, path);
  std::ifstream is(path);
  std::string line;
  std::size_t n = 0;
  std::getline(is, line);
  CHECK(line.find("VInP") != std::string::npos);
  while (std::getline(is, line)) ++n;
  CHECK(n == 500);
  std::filesystem::remove(path);
}
