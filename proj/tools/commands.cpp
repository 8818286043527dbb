#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

namespace stiffnet::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

unsigned worker_threads(bool single_thread) {
  if (single_thread) return 1;
  unsigned n = std::max(1U, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("STIFFNET_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError(std::string("invalid STIFFNET_THREADS '") + env + "' (legal: >= 1)");
    n = std::min(n, static_cast<unsigned>(v));
  }
  return n;
}

namespace {

struct Common {
  std::string config;
  std::string out_dir = ".";
  bool single_thread = false;
};

/// Binds every schema key to a --dashed-flag and resolves defaults, then the
/// config file, then flags given on the command line.
class KeyOptions {
 public:
  KeyOptions(CLI::App* app, const std::vector<KeySpec>& schema) : schema_(schema) {
    for (const auto& k : schema_) {
      std::string flag = k.key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      opts_[k.key] = app->add_option("--" + flag, values_[k.key], k.help + (k.default_value.empty() ? "" : " [" + k.default_value + "]"));
    }
  }

  Settings resolve(const std::string& config_path) const {
    Settings s;
    for (const auto& k : schema_) s[k.key] = k.default_value;
    if (!config_path.empty()) {
      for (const auto& [k, v] : read_config_file(config_path, schema_)) s[k] = v;
    }
    for (const auto& [k, opt] : opts_) {
      if (opt->count() > 0) s[k] = values_.at(k);
    }
    return s;
  }

 private:
  const std::vector<KeySpec>& schema_;
  std::map<std::string, std::string> values_;
  std::map<std::string, CLI::Option*> opts_;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value config file (flags override its keys)");
  app->add_option("--out-dir", c.out_dir, "directory for all outputs")->capture_default_str();
  app->add_flag("--single-thread", c.single_thread, "force the deterministic single-worker mode");
}

fs::path prepare_out_dir(const Common& c) {
  fs::path dir(c.out_dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::string fmt(double v, int precision = 17) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

data::Dataset load_dataset(const std::string& path) {
  if (path.empty()) throw ConfigError("missing dataset (set --dataset or the dataset key)");
  if (!fs::exists(path)) throw std::runtime_error("missing dataset: " + path + " does not exist");
  return data::load(path);
}

void finish(const std::string& command, const Common& c, const Settings& resolved, std::uint64_t seed,
            const fs::path& dir, std::vector<fs::path> artifacts) {
  const fs::path snapshot = dir / (command + "_config.txt");
  write_text(snapshot, format_config(resolved));
  artifacts.insert(artifacts.begin(), snapshot);
  Manifest m{command, c.config, resolved, seed, artifacts};
  m.write(dir / (command + "_manifest.json"));
}

// ---- generate -------------------------------------------------------------------

int cmd_generate(const Common& c, const Settings& s, std::ostream& out) {
  const GenerateSettings g = generate_settings(s);
  const fs::path dir = prepare_out_dir(c);
  data::Dataset d = data::build_dataset(g.records, g.seed, g.gen, worker_threads(c.single_thread));
  data::split_dataset(d, g.fractions, g.split_seed);
  const fs::path file = dir / s.at("out");
  data::save(d, file);

  out << "records: " << d.size() << " (train " << d.indices(data::Split::train).size() << ", val "
      << d.indices(data::Split::val).size() << ", test " << d.indices(data::Split::test).size() << ")\n";
  static const char* names[] = {"VInP", "VInM", "ClkEval", "DOut1", "DOut0"};
  for (std::size_t r = 0; r < data::kRows; ++r) {
    double lo = 1e300, hi = -1e300;
    for (const auto& rec : d.records) {
      for (double v : rec.row(r)) lo = std::min(lo, v), hi = std::max(hi, v);
    }
    out << "  " << std::left << std::setw(8) << names[r] << " [" << fmt(lo, 6) << ", " << fmt(hi, 6) << "] V\n";
  }
  out << "wrote " << file.string() << "\n";
  finish("generate", c, s, g.seed, dir, {file});
  return 0;
}

// ---- train ---------------------------------------------------------------------------

int cmd_train(const Common& c, const Settings& s, bool resume, std::ostream& out) {
  const train::TrainConfig cfg = train_config(s);
  const data::Dataset d = load_dataset(s.at("dataset"));
  const fs::path dir = prepare_out_dir(c);
  const fs::path state = dir / "train_state.bin";
  if (resume && !fs::exists(state)) throw std::runtime_error("cannot resume: " + state.string() + " not found");

  model::CrossformerModel m(cfg.model_config(d.n_samples));
  train::TrainOptions opts;
  opts.state_path = state;
  opts.resume = resume;
  opts.on_epoch = [&out](const train::EpochLog& e) {
    out << "epoch " << e.epoch << " train_loss " << fmt(e.train_loss, 6) << " val_loss " << fmt(e.val_loss, 6)
        << " (" << fmt(e.wall_ms / 1000, 3) << " s)\n";
    out.flush();
  };
  train::RunLog log;
  try {
    log = train::train(m, d, cfg, opts);
  } catch (const train::TrainingError& e) {
    throw std::runtime_error(std::string("training aborted: ") + e.what());
  }
  if (!d.indices(data::Split::test).empty()) log.test_nrmse = train::evaluate(m, d, data::Split::test).mean_nrmse;

  const fs::path ckpt = dir / "model.sckp", csv = dir / "runlog.csv", svg = dir / "learning_curve.svg";
  model::save_checkpoint(m, ckpt);
  log.write_csv(csv);
  write_learning_curve(log, svg);
  out << "best epoch " << log.best_epoch << " val_loss " << fmt(log.best_val_loss, 6)
      << (log.early_stopped ? " (early stop)" : "") << "\n";
  if (!std::isnan(log.test_nrmse)) out << "test NRMSE " << fmt(log.test_nrmse, 6) << "%\n";
  finish("train", c, s, cfg.seed, dir, {ckpt, csv, svg});
  return 0;
}

// ---- eval ------------------------------------------------------------------------------

std::unique_ptr<model::CrossformerModel> load_model_for(const std::string& ckpt, const data::Dataset& d) {
  if (ckpt.empty()) throw ConfigError("missing --checkpoint");
  if (!fs::exists(ckpt)) throw std::runtime_error("missing checkpoint: " + ckpt + " does not exist");
  auto m = model::load_checkpoint(ckpt);
  if (m->config().seq_len != d.n_samples || m->config().in_dims != data::kInputRows ||
      m->config().out_dims != data::kOutputRows) {
    throw std::runtime_error("checkpoint/config mismatch: model expects " + std::to_string(m->config().seq_len) +
                             " samples, dataset has " + std::to_string(d.n_samples));
  }
  return m;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& dataset, const std::string& split_name,
             std::ostream& out) {
  const data::Dataset d = load_dataset(dataset);
  const data::Split split = data::parse_split(split_name);
  if (d.indices(split).empty()) throw std::runtime_error("split " + split_name + " is empty");
  const auto m = load_model_for(ckpt, d);
  const fs::path dir = prepare_out_dir(c);
  const train::EvalReport rep = train::evaluate(*m, d, split);

  const fs::path csv = dir / ("eval_" + split_name + ".csv"), jsonl = dir / ("eval_" + split_name + ".jsonl");
  std::ofstream oc(csv), oj(jsonl);
  if (!oc || !oj) throw std::runtime_error("cannot write evaluation outputs in " + dir.string());
  oc << "record_index,nrmse_percent,loss\n";
  for (std::size_t i = 0; i < rep.nrmse.size(); ++i) {
    oc << rep.record_indices[i] << ',' << fmt(rep.nrmse[i]) << ',' << fmt(rep.loss[i]) << '\n';
    oj << ordered_json{{"record_index", rep.record_indices[i]}, {"nrmse_percent", rep.nrmse[i]}, {"loss", rep.loss[i]}}.dump()
       << '\n';
  }
  oc.close();
  oj.close();
  out << "split " << split_name << ": " << rep.nrmse.size() << " records, mean NRMSE " << fmt(rep.mean_nrmse, 6)
      << "%\n";
  Settings s{{"checkpoint", ckpt}, {"dataset", dataset}, {"split", split_name}};
  finish("eval", c, s, d.master_seed, dir, {csv, jsonl});
  return 0;
}

// ---- predict -------------------------------------------------------------------------

int cmd_predict(const Common& c, const std::string& ckpt, const std::string& dataset, long long index,
                std::ostream& out) {
  const data::Dataset d = load_dataset(dataset);
  if (index < 0 || static_cast<std::size_t>(index) >= d.size()) {
    throw std::out_of_range("index " + std::to_string(index) + " out of range [0, " + std::to_string(d.size()) + ")");
  }
  const auto m = load_model_for(ckpt, d);
  const data::Record& r = d.records[static_cast<std::size_t>(index)];
  ad::Tensor x = data::normalized_inputs(r);
  x.shape.insert(x.shape.begin(), 1);
  const ad::Tensor y = m->predict(x);
  const std::size_t T = r.n_samples;
  const double dt = data::GenConfig{}.sample_dt;

  const fs::path dir = prepare_out_dir(c);
  const std::string stem = "prediction_" + std::to_string(index);
  const fs::path csv = dir / (stem + ".csv"), svg = dir / (stem + ".svg");
  std::vector<double> t(T), p1(T), p0(T);
  {
    std::ofstream os(csv);
    if (!os) throw std::runtime_error("cannot write " + csv.string());
    os << "t,VInP,VInM,ClkEval,DOut1,DOut0,DOut1_pred,DOut0_pred\n" << std::setprecision(17);
    for (std::size_t k = 0; k < T; ++k) {
      t[k] = static_cast<double>(k) * dt;
      p1[k] = data::denormalize(y[k], data::kDout1);
      p0[k] = data::denormalize(y[T + k], data::kDout0);
      os << t[k] << ',' << r.row(data::kVinP)[k] << ',' << r.row(data::kVinM)[k] << ',' << r.row(data::kClk)[k] << ','
         << r.row(data::kDout1)[k] << ',' << r.row(data::kDout0)[k] << ',' << p1[k] << ',' << p0[k] << '\n';
    }
  }
  auto row = [&](std::size_t i) { return std::vector<double>(r.row(i).begin(), r.row(i).end()); };
  std::vector<double> t_ns(T);
  for (std::size_t k = 0; k < T; ++k) t_ns[k] = t[k] * 1e9;
  const std::vector<Panel> panels{
      {"VInP (V)", {{"input", t_ns, row(data::kVinP), "#333"}}},
      {"VInM (V)", {{"input", t_ns, row(data::kVinM), "#333"}}},
      {"ClkEval (V)", {{"input", t_ns, row(data::kClk), "#333"}}},
      {"DOut1 (V)", {{"truth", t_ns, row(data::kDout1), "#1f77b4"}, {"prediction", t_ns, p1, "#d62728", true}}},
      {"DOut0 (V)", {{"truth", t_ns, row(data::kDout0), "#1f77b4"}, {"prediction", t_ns, p0, "#d62728", true}}},
  };
  write_text(svg, render_svg(panels, "time (ns)"));
  const double nrmse = train::nrmse_percent(data::normalized_targets(r), ad::Tensor({2, T}, y.data));
  out << "record " << index << ": NRMSE " << fmt(nrmse, 6) << "%\nwrote " << csv.string() << " and " << svg.string()
      << "\n";
  Settings s{{"checkpoint", ckpt}, {"dataset", dataset}, {"index", std::to_string(index)}};
  finish("predict", c, s, d.master_seed, dir, {csv, svg});
  return 0;
}

// ---- sweep ---------------------------------------------------------------------------

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

struct SweepRun {
  std::string key;
  Settings settings;
  train::TrainConfig cfg;
};

std::vector<SweepRun> expand_sweep(const Settings& s) {
  auto list_or = [&](const std::string& list_key, const std::string& single) {
    auto v = split_list(s.at(list_key));
    return v.empty() ? std::vector<std::string>{s.at(single)} : v;
  };
  std::vector<std::pair<std::string, std::string>> kan_shapes;  // neurons, grid
  const auto presets = split_list(s.at("presets"));
  if (!presets.empty()) {
    if (!split_list(s.at("neurons")).empty() || !split_list(s.at("grids")).empty()) {
      throw ConfigError("invalid presets (legal: either presets or neurons/grids, not both)");
    }
    for (const auto& p : presets) {
      if (p == "n5_g5_k3") kan_shapes.emplace_back("5", "5");
      else if (p == "n5_g50_k3") kan_shapes.emplace_back("5", "50");
      else if (p == "n10_g5_k3") kan_shapes.emplace_back("10", "5");
      else throw ConfigError("invalid presets entry '" + p + "' (legal: n5_g5_k3, n5_g50_k3, n10_g5_k3)");
    }
  } else {
    for (const auto& n : list_or("neurons", "kan_neurons"))
      for (const auto& g : list_or("grids", "kan_grid")) kan_shapes.emplace_back(n, g);
  }
  std::vector<SweepRun> runs;
  for (const auto& [n, g] : kan_shapes)
    for (const auto& lr : list_or("lrs", "lr"))
      for (const auto& opt : list_or("optimizers", "optimizer"))
        for (const auto& dm : list_or("d_models", "d_model"))
          for (const auto& seed : list_or("seeds", "seed")) {
            SweepRun r;
            r.settings = s;
            r.settings["kan_neurons"] = n;
            r.settings["kan_grid"] = g;
            r.settings["lr"] = lr;
            r.settings["optimizer"] = opt;
            r.settings["d_model"] = dm;
            r.settings["seed"] = seed;
            r.cfg = train_config(r.settings);
            if (!r.cfg.in_tuning_grid()) {
              throw ConfigError("invalid d_models entry " + dm + " (legal: 256, 512)");
            }
            r.key = "head=" + r.settings["head"] + ";neurons=" + n + ";grid=" + g + ";k=3;lr=" + lr + ";optimizer=" +
                    opt + ";d_model=" + dm + ";seed=" + seed;
            runs.push_back(std::move(r));
          }
  return runs;
}

int cmd_sweep(const Common& c, const Settings& s, long long max_runs, std::ostream& out) {
  const std::vector<SweepRun> runs = expand_sweep(s);  // validates every run up front
  const data::Dataset d = load_dataset(s.at("dataset"));
  const fs::path dir = prepare_out_dir(c);
  const fs::path manifest_path = dir / "sweep_runs.json";

  // The fingerprint covers everything except the swept keys.
  Settings base = s;
  for (const char* k : {"neurons", "grids", "lrs", "optimizers", "d_models", "seeds", "presets", "kan_neurons",
                        "kan_grid", "lr", "optimizer", "d_model", "seed"})
    base.erase(k);
  base["dataset"] = sha256_file(s.at("dataset"));
  const std::string fingerprint = format_config(base);

  ordered_json manifest{{"fingerprint", fingerprint}, {"rows", ordered_json::object()}};
  if (fs::exists(manifest_path)) {
    std::ifstream is(manifest_path);
    ordered_json old = ordered_json::parse(is, nullptr, false);
    if (old.is_discarded() || !old.contains("rows")) throw std::runtime_error("malformed " + manifest_path.string());
    if (old.value("fingerprint", "") != fingerprint) {
      throw std::runtime_error("sweep manifest " + manifest_path.string() + " was written for a different base configuration");
    }
    manifest = std::move(old);
  }

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < runs.size(); ++i)
    if (!manifest["rows"].contains(runs[i].key)) todo.push_back(i);
  if (max_runs >= 0 && todo.size() > static_cast<std::size_t>(max_runs)) todo.resize(static_cast<std::size_t>(max_runs));
  out << runs.size() << " runs, " << runs.size() - todo.size() << " already complete or deferred, running "
      << todo.size() << "\n";

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto save_manifest = [&] {
    const fs::path tmp = manifest_path.string() + ".tmp";
    write_text(tmp, manifest.dump(2) + "\n");
    fs::rename(tmp, manifest_path);
  };
  auto worker = [&] {
    for (std::size_t j; (j = next++) < todo.size();) {
      {
        std::lock_guard lk(mu);
        if (failure) return;
      }
      const SweepRun& run = runs[todo[j]];
      try {
        auto trained = train::train(d, run.cfg);
        const data::Split eval_split = d.indices(data::Split::test).empty() ? data::Split::val : data::Split::test;
        const double metric = train::evaluate(*trained.model, d, eval_split).mean_nrmse;
        ordered_json row{{"seed", run.cfg.seed},
                         {"head", kan::to_string(run.cfg.head)},
                         {"neurons", run.cfg.kan_neurons},
                         {"grid", run.cfg.kan_grid},
                         {"k", 3},
                         {"lr", run.cfg.lr},
                         {"optimizer", train::to_string(run.cfg.optimizer)},
                         {"d_model", run.cfg.d_model},
                         {"best_epoch", trained.log.best_epoch},
                         {"epochs_run", trained.log.epochs.size()},
                         {"best_val_loss", trained.log.best_val_loss},
                         {"metric_split", data::to_string(eval_split)},
                         {"nrmse_percent", metric}};
        std::lock_guard lk(mu);
        manifest["rows"][run.key] = row;
        save_manifest();
        out << "done " << run.key << " -> " << fmt(metric, 6) << "%\n";
        out.flush();
      } catch (...) {
        std::lock_guard lk(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const unsigned n_workers = std::max(1U, std::min<unsigned>(worker_threads(c.single_thread), static_cast<unsigned>(todo.size())));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (!fs::exists(manifest_path)) save_manifest();
  if (failure) std::rethrow_exception(failure);

  const fs::path csv = dir / "sweep_results.csv";
  std::ofstream os(csv);
  os << "run_key,seed,head,neurons,grid,k,lr,optimizer,d_model,best_epoch,epochs_run,best_val_loss,metric_split,nrmse_percent\n";
  std::size_t complete = 0;
  for (const auto& run : runs) {
    if (!manifest["rows"].contains(run.key)) continue;
    const auto& r = manifest["rows"][run.key];
    ++complete;
    os << '"' << run.key << "\"," << r["seed"].get<std::uint64_t>() << ',' << r["head"].get<std::string>() << ','
       << r["neurons"].get<std::size_t>() << ',' << r["grid"].get<std::size_t>() << ",3," << fmt(r["lr"].get<double>())
       << ',' << r["optimizer"].get<std::string>() << ',' << r["d_model"].get<std::size_t>() << ','
       << r["best_epoch"].get<std::size_t>() << ',' << r["epochs_run"].get<std::size_t>() << ','
       << fmt(r["best_val_loss"].get<double>()) << ',' << r["metric_split"].get<std::string>() << ','
       << fmt(r["nrmse_percent"].get<double>()) << '\n';
  }
  os.close();
  out << complete << "/" << runs.size() << " rows in " << csv.string() << "\n";
  finish("sweep", c, s, 0, dir, {csv, manifest_path});
  return 0;
}

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Crossformer/KAN surrogate for a stiff 1.5-bit sub-ADC"};
  app.require_subcommand(1);
  app.set_version_flag("--version", STIFFNET_VERSION);

  Common common;
  CLI::App* gen = app.add_subcommand("generate", "generate and save a waveform dataset");
  add_common(gen, common);
  KeyOptions gen_keys(gen, generate_schema());

  CLI::App* tr = app.add_subcommand("train", "train a model on a dataset");
  add_common(tr, common);
  KeyOptions train_keys(tr, train_schema());
  bool resume = false;
  tr->add_flag("--resume", resume, "continue from train_state.bin in the output directory");

  std::string ckpt, dataset, split = "test";
  long long index = 0;
  CLI::App* ev = app.add_subcommand("eval", "report NRMSE of a checkpoint on a dataset split");
  add_common(ev, common);
  ev->add_option("--checkpoint", ckpt, "model checkpoint (SCKP)")->required();
  ev->add_option("--dataset", dataset, "dataset file (SCDS)")->required();
  ev->add_option("--split", split, "train | val | test")->capture_default_str();

  CLI::App* pr = app.add_subcommand("predict", "predict one record and draw the overlay");
  add_common(pr, common);
  pr->add_option("--checkpoint", ckpt, "model checkpoint (SCKP)")->required();
  pr->add_option("--dataset", dataset, "dataset file (SCDS)")->required();
  pr->add_option("--index", index, "record index")->capture_default_str();

  CLI::App* sw = app.add_subcommand("sweep", "train over a hyperparameter grid");
  add_common(sw, common);
  KeyOptions sweep_keys(sw, sweep_schema());
  long long max_runs = -1;
  sw->add_option("--max-runs", max_runs, "stop after this many new runs (resume later)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(common, gen_keys.resolve(common.config), out);
    if (tr->parsed()) return cmd_train(common, train_keys.resolve(common.config), resume, out);
    if (ev->parsed()) return cmd_eval(common, ckpt, dataset, split, out);
    if (pr->parsed()) return cmd_predict(common, ckpt, dataset, index, out);
    if (sw->parsed()) return cmd_sweep(common, sweep_keys.resolve(common.config), max_runs, out);
  } catch (const ConfigError& e) {
    err << "error: config: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 1;
}

}  // namespace stiffnet::cli
