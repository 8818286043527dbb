#include "doctest.h"

#include "cli.hpp"
#include "stiffnet/crossformer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace stiffnet;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "stiffnet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "stiffnet_cli_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  return nlohmann::json::parse(is);
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

bool single_error_line(const std::string& err) {
  return err.rfind("error: ", 0) == 0 && std::count(err.begin(), err.end(), '\n') == 1 && err.back() == '\n';
}

// Small shared dataset for the training commands.
const fs::path& toy_dataset() {
  static const fs::path p = [] {
    const fs::path dir = scratch("toy");
    REQUIRE(run({"generate", "--records", "12", "--seed", "5", "--out-dir", dir.string(), "--single-thread"}).code == 0);
    return dir / "dataset.scds";
  }();
  return p;
}

std::vector<std::string> tiny_train(const fs::path& dir) {
  return {"train", "--dataset", toy_dataset().string(), "--out-dir", dir.string(), "--d-model", "16", "--n-heads", "2",
          "--n-routers", "2", "--e-levels", "1", "--batch-size", "4", "--single-thread"};
}

}  // namespace

TEST_CASE("generate is deterministic and validated") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  for (const auto& dir : {a, b}) {
    const auto r = run({"generate", "--records", "10", "--seed", "7", "--out-dir", dir.string(), "--single-thread"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("records: 10") != std::string::npos);
    CHECK(r.out.find("DOut1") != std::string::npos);
  }
  const auto ma = read_json(a / "generate_manifest.json"), mb = read_json(b / "generate_manifest.json");
  CHECK(ma["artifacts"] == mb["artifacts"]);
  CHECK(ma["artifacts"].size() == 2);
  CHECK(ma["master_seed"] == 7);
  CHECK(cli::sha256_file(a / "dataset.scds") == cli::sha256_file(b / "dataset.scds"));
  CHECK(fs::file_size(a / "dataset.scds") == data::dataset_file_size(10, 500));

  const auto bad = run({"generate", "--records", "0", "--out-dir", a.string()});
  CHECK(bad.code != 0);
  CHECK(single_error_line(bad.err));
  CHECK(bad.err.find("records") != std::string::npos);
}

TEST_CASE("config file keys are overridden by flags and snapshotted") {
  const fs::path dir = scratch("cfg");
  {
    std::ofstream os(dir / "gen.cfg");
    os << "# tiny\nrecords = 4\nseed = 3 # trailing comment\nsplit-seed = 2\n";
  }
  const auto r = run({"generate", "--config", (dir / "gen.cfg").string(), "--seed", "9", "--out-dir", dir.string()});
  REQUIRE(r.code == 0);
  const auto snap = lines(dir / "generate_config.txt");
  CHECK(std::find(snap.begin(), snap.end(), "records = 4") != snap.end());
  CHECK(std::find(snap.begin(), snap.end(), "seed = 9") != snap.end());
  CHECK(std::find(snap.begin(), snap.end(), "split_seed = 2") != snap.end());
  CHECK(read_json(dir / "generate_manifest.json")["master_seed"] == 9);

  {
    std::ofstream os(dir / "bad.cfg");
    os << "recordz = 4\n";
  }
  const auto bad = run({"generate", "--config", (dir / "bad.cfg").string(), "--out-dir", dir.string()});
  CHECK(bad.code != 0);
  CHECK(single_error_line(bad.err));
  CHECK(bad.err.find("recordz") != std::string::npos);
}

TEST_CASE("train writes checkpoint, run log and learning curve") {
  const fs::path kdir = scratch("train_kan"), ldir = scratch("train_lin");
  auto args = tiny_train(kdir);
  args.insert(args.end(), {"--max-epochs", "2"});
  const auto r = run(args);
  REQUIRE(r.code == 0);
  for (const char* f : {"model.sckp", "runlog.csv", "learning_curve.svg", "train_manifest.json", "train_config.txt"})
    CHECK(fs::exists(kdir / f));
  CHECK(lines(kdir / "runlog.csv").size() == 3);

  args = tiny_train(ldir);
  args.insert(args.end(), {"--max-epochs", "1", "--head", "linear"});
  REQUIRE(run(args).code == 0);
  const auto tk = model::read_checkpoint_tensors(kdir / "model.sckp");
  const auto tl = model::read_checkpoint_tensors(ldir / "model.sckp");
  auto split = [](const std::vector<model::NamedTensor>& ts, bool head) {
    std::vector<std::string> out;
    for (const auto& t : ts)
      if ((t.name.rfind("head", 0) == 0) == head) out.push_back(t.name + ad::to_string(t.value.shape));
    return out;
  };
  CHECK(split(tk, false) == split(tl, false));
  CHECK(split(tk, true) != split(tl, true));

  const auto missing = run({"train", "--dataset", (kdir / "nope.scds").string(), "--out-dir", kdir.string()});
  CHECK(missing.code != 0);
  CHECK(single_error_line(missing.err));
  CHECK(missing.err.find("missing dataset") != std::string::npos);
}

TEST_CASE("train resumes to the same result as a straight run") {
  const fs::path straight = scratch("straight"), resumed = scratch("resumed");
  auto a = tiny_train(straight);
  a.insert(a.end(), {"--max-epochs", "10", "--patience", "100"});
  REQUIRE(run(a).code == 0);
  auto b = tiny_train(resumed);
  b.insert(b.end(), {"--max-epochs", "5", "--patience", "100"});
  REQUIRE(run(b).code == 0);
  b = tiny_train(resumed);
  b.insert(b.end(), {"--max-epochs", "10", "--patience", "100", "--resume"});
  REQUIRE(run(b).code == 0);
  const auto la = lines(straight / "runlog.csv"), lb = lines(resumed / "runlog.csv");
  REQUIRE(la.size() == 11);
  REQUIRE(lb.size() == 11);
  auto last_loss = [](const std::string& row) { return std::stod(row.substr(row.find(',') + 1)); };
  CHECK(std::abs(last_loss(la.back()) - last_loss(lb.back())) < 1e-10);
  CHECK(la == lb);
  CHECK(cli::sha256_file(straight / "model.sckp") == cli::sha256_file(resumed / "model.sckp"));
}

TEST_CASE("eval and predict outputs") {
  const fs::path dir = scratch("evalpred");
  auto args = tiny_train(dir);
  args.insert(args.end(), {"--max-epochs", "1"});
  REQUIRE(run(args).code == 0);
  const std::string ckpt = (dir / "model.sckp").string();

  const auto ev = run({"eval", "--checkpoint", ckpt, "--dataset", toy_dataset().string(), "--split", "val", "--out-dir", dir.string()});
  REQUIRE(ev.code == 0);
  const auto csv = lines(dir / "eval_val.csv"), jsonl = lines(dir / "eval_val.jsonl");
  const data::Dataset d = data::load(toy_dataset());
  REQUIRE(csv.size() == d.indices(data::Split::val).size() + 1);
  REQUIRE(jsonl.size() + 1 == csv.size());
  for (std::size_t i = 0; i < jsonl.size(); ++i) {
    const auto j = nlohmann::json::parse(jsonl[i]);
    std::stringstream ss(csv[i + 1]);
    std::string idx, nrmse;
    std::getline(ss, idx, ',');
    std::getline(ss, nrmse, ',');
    CHECK(j["record_index"].get<std::size_t>() == std::stoul(idx));
    CHECK(j["nrmse_percent"].get<double>() == std::stod(nrmse));
  }

  const auto pr = run({"predict", "--checkpoint", ckpt, "--dataset", toy_dataset().string(), "--index", "2", "--out-dir", dir.string()});
  REQUIRE(pr.code == 0);
  const auto rows = lines(dir / "prediction_2.csv");
  REQUIRE(rows.size() == 501);
  CHECK(std::count(rows[0].begin(), rows[0].end(), ',') == 7);
  CHECK(std::count(rows[250].begin(), rows[250].end(), ',') == 7);
  std::ifstream svg(dir / "prediction_2.svg");
  const std::string text((std::istreambuf_iterator<char>(svg)), {});
  std::size_t panels = 0;
  for (auto p = text.find("class=\"panel\""); p != std::string::npos; p = text.find("class=\"panel\"", p + 1)) ++panels;
  CHECK(panels == 5);

  // Prediction columns are the denormalized forward pass.
  auto m = model::load_checkpoint(ckpt);
  ad::Tensor x = data::normalized_inputs(d.records[2]);
  x.shape.insert(x.shape.begin(), 1);
  const ad::Tensor y = m->predict(x);
  double worst = 0;
  for (std::size_t k = 0; k < 500; ++k) {
    std::stringstream ss(rows[k + 1]);
    std::vector<double> v;
    for (std::string cell; std::getline(ss, cell, ',');) v.push_back(std::stod(cell));
    worst = std::max(worst, std::abs(v[6] - data::denormalize(y[k], data::kDout1)));
    worst = std::max(worst, std::abs(v[7] - data::denormalize(y[500 + k], data::kDout0)));
  }
  CHECK(worst < 1e-12);
  const std::string first = cli::sha256_file(dir / "prediction_2.csv");
  REQUIRE(run({"predict", "--checkpoint", ckpt, "--dataset", toy_dataset().string(), "--index", "2", "--out-dir", dir.string()}).code == 0);
  CHECK(cli::sha256_file(dir / "prediction_2.csv") == first);

  const auto oob = run({"predict", "--checkpoint", ckpt, "--dataset", toy_dataset().string(), "--index", "12", "--out-dir", dir.string()});
  CHECK(oob.code != 0);
  CHECK(single_error_line(oob.err));
  CHECK(oob.err.find("out of range") != std::string::npos);

  // Dataset of another length does not fit the checkpoint.
  data::Dataset other = data::load(toy_dataset());
  other.n_samples = 250;
  for (auto& r : other.records) {
    r.n_samples = 250;
    r.values.resize(5 * 250);
  }
  data::save(other, dir / "short.scds");
  const auto mis = run({"eval", "--checkpoint", ckpt, "--dataset", (dir / "short.scds").string(), "--split", "val", "--out-dir", dir.string()});
  CHECK(mis.code != 0);
  CHECK(mis.err.find("mismatch") != std::string::npos);
}

TEST_CASE("sweep expands, rejects illegal grids and resumes") {
  const fs::path dir = scratch("sweep");
  auto base = std::vector<std::string>{"sweep", "--dataset", toy_dataset().string(), "--out-dir", dir.string(),
                                       "--e-levels", "1", "--max-epochs", "1", "--batch-size", "8", "--single-thread"};
  auto bad = base;
  bad.insert(bad.end(), {"--neurons", "5,10", "--grids", "5,7"});
  const auto rb = run(bad);
  CHECK(rb.code != 0);
  CHECK(single_error_line(rb.err));
  CHECK(rb.err.find("kan_grid") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "sweep_runs.json"));

  auto grid = base;
  grid.insert(grid.end(), {"--neurons", "5,10", "--grids", "5,50", "--max-runs", "2"});
  const auto r1 = run(grid);
  REQUIRE(r1.code == 0);
  CHECK(lines(dir / "sweep_results.csv").size() == 3);
  grid.resize(grid.size() - 2);
  const auto r2 = run(grid);
  REQUIRE(r2.code == 0);
  CHECK(r2.out.find("running 2") != std::string::npos);
  CHECK(lines(dir / "sweep_results.csv").size() == 5);
  const auto r3 = run(grid);
  CHECK(r3.out.find("running 0") != std::string::npos);

  const fs::path pdir = scratch("sweep_presets");
  auto presets = std::vector<std::string>{"sweep", "--dataset", toy_dataset().string(), "--out-dir", pdir.string(), "--e-levels", "1",
                                          "--max-epochs", "1", "--presets", "n5_g5_k3,n5_g50_k3,n10_g5_k3", "--single-thread"};
  REQUIRE(run(presets).code == 0);
  const auto rows = lines(pdir / "sweep_results.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[2].find("neurons=5;grid=50;k=3") != std::string::npos);
  CHECK(rows[3].find("neurons=10;grid=5;k=3") != std::string::npos);
  presets.back() = "--single-thread";
  presets[10] = "n7_g5_k3";
  CHECK(run(presets).code != 0);
}

TEST_CASE("thread cap comes from the environment") {
  setenv("STIFFNET_THREADS", "1", 1);
  CHECK(cli::worker_threads(false) == 1);
  setenv("STIFFNET_THREADS", "zero", 1);
  CHECK_THROWS_AS(cli::worker_threads(false), cli::ConfigError);
  unsetenv("STIFFNET_THREADS");
  CHECK(cli::worker_threads(true) == 1);
}
