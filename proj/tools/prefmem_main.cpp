// Copyright 2026 The prefmem Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line entry point: gen-data, train, evaluate, infer, bench, ablate,
// export-attention and verify.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "prefmem/config.hpp"
#include "prefmem/eval.hpp"
#include "prefmem/inference.hpp"
#include "prefmem/params_io.hpp"
#include "prefmem/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace prefmem;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Options shared by every subcommand.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::vector<std::string> sets;
  std::optional<std::string> trainer, mode, protocol;
  std::optional<double> lambda, recon_weight;
  std::optional<int> slots, epochs;
  std::string data;
  std::string params;
};

void add_common(CLI::App* app, Common& c, bool train_flags) {
  app->add_option("--config", c.config_path, "JSON config (sections train, synthetic, eval)");
  app->add_option("--seed", c.seed, "Seed for this run");
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--set", c.sets, "Override a config field, e.g. --set train.slots=8 (repeatable)");
  app->add_option("--data", c.data, "Dataset (JSONL); synthetic data from the config when omitted");
  if (train_flags) {
    app->add_option("--trainer", c.trainer, "rec2pm, tok-serial, short or full");
    app->add_option("--mode", c.mode, "overwrite or append");
    app->add_option("--lambda", c.lambda, "Consistency-loss weight");
    app->add_option("--recon-weight", c.recon_weight, "Reconstruction-loss weight");
    app->add_option("--slots", c.slots, "Memory slots C");
    app->add_option("--epochs", c.epochs, "Maximum epochs");
  }
  app->add_option("--protocol", c.protocol, "short, full, mem-iterative, mem-oneoff or mem-overlap");
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;  // bare strings such as --set train.mode=append
  }
}

/// Defaults, then the config file, then flags.
RunConfig resolve_config(const Common& c, bool seed_is_data) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg = load_run_config(c.config_path);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    const auto dot = s.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw UsageError("--set expects section.key=value, got '" + s + "'");
    }
    cfg.set(s.substr(0, dot), s.substr(dot + 1, eq - dot - 1), parse_value(s.substr(eq + 1)));
  }
  if (c.trainer) cfg.set("train", "trainer", *c.trainer);
  if (c.mode) cfg.set("train", "mode", *c.mode);
  if (c.lambda) cfg.set("train", "consistency_weight", *c.lambda);
  if (c.recon_weight) cfg.set("train", "recon_weight", *c.recon_weight);
  if (c.slots) cfg.set("train", "slots", *c.slots);
  if (c.epochs) cfg.set("train", "epochs", *c.epochs);
  if (c.protocol) cfg.set("eval", "protocol", *c.protocol);
  if (c.seed) (seed_is_data ? cfg.synthetic.seed : cfg.train.seed) = *c.seed;
  cfg.validate();
  return cfg;
}

Dataset load_or_generate(const Common& c, const RunConfig& cfg) {
  return c.data.empty() ? generate_synthetic(cfg.synthetic) : load_dataset(c.data);
}

fs::path model_sidecar(const fs::path& params) {
  auto p = params;
  p.replace_extension(".json");
  return p;
}

struct LoadedModel {
  ParamsF params;
  TrainConfig train;
};

LoadedModel load_model(const std::string& path) {
  if (path.empty()) throw UsageError("--params is required");
  std::ifstream in(model_sidecar(path));
  if (!in) throw std::runtime_error("cannot read model description " + model_sidecar(path).string());
  json j;
  in >> j;
  const ModelConfig mc = model_config_from_json(j.at("model"));
  RunConfig rc = RunConfig::from_json(json{{"train", j.at("train")}});
  return {load_params(path, mc, &std::cerr), rc.train};
}

void save_model(const ParamsF& params, const TrainConfig& train, const fs::path& path) {
  save_params(params, path);
  RunConfig rc;
  rc.train = train;
  const json j = {{"model", model_config_to_json(params.config)}, {"train", rc.to_json()["train"]}};
  write_file_atomic(model_sidecar(path), j.dump(2) + "\n");
}

Protocol default_protocol(const ParamsF& params, const RunConfig& cfg, bool explicit_protocol) {
  if (explicit_protocol) return cfg.eval.protocol;
  if (!params.config.memory) {
    return params.config.context_len == cfg.train.full_len && cfg.train.full_len != cfg.train.short_len
               ? Protocol::kFull
               : Protocol::kShort;
  }
  return Protocol::kMemIterative;
}

EvalOptions eval_options(const TrainConfig& train, const EvalSettings& settings) {
  EvalOptions o;
  o.mode = train.mode;
  o.full_len = train.full_len;
  o.target = settings.target;
  o.max_users = settings.max_users;
  return o;
}

RunManifest start_manifest(const std::string& command, const RunConfig& cfg, std::uint64_t seed) {
  RunManifest m;
  m.command = command;
  m.config = cfg.to_json();
  m.seed = seed;
  m.started_at = utc_timestamp();
  m.version = version_string();
  return m;
}

void finish_manifest(RunManifest& m, const fs::path& out) {
  m.finished_at = utc_timestamp();
  m.write(out / "manifest.json");
}

int cmd_gen_data(const Common& c) {
  const RunConfig cfg = resolve_config(c, true);
  fs::create_directories(c.out);
  auto m = start_manifest("gen-data", cfg, cfg.synthetic.seed);
  const Dataset ds = generate_synthetic(cfg.synthetic);
  const fs::path path = fs::path(c.out) / "data.jsonl";
  save_dataset(ds, path);
  m.artifacts["dataset"] = path.string();
  finish_manifest(m, c.out);
  std::cout << json{{"dataset", path.string()}, {"users", ds.users.size()}}.dump() << "\n";
  return 0;
}

int cmd_train(const Common& c) {
  const RunConfig cfg = resolve_config(c, false);
  fs::create_directories(c.out);
  auto m = start_manifest("train", cfg, cfg.train.seed);
  const Dataset ds = load_or_generate(c, cfg);
  const fs::path log_path = fs::path(c.out) / "train_log.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  const TrainResult result = train(ds, cfg.train, &log);
  const fs::path params_path = fs::path(c.out) / "params.r2pw";
  save_model(result.params, cfg.train, params_path);
  const Protocol protocol = default_protocol(result.params, cfg, c.protocol.has_value());
  EvalReport report = evaluate(result.params, ds, protocol, eval_options(cfg.train, cfg.eval));
  report.seeds = {cfg.train.seed};
  m.artifacts["params"] = params_path.string();
  m.artifacts["model"] = model_sidecar(params_path).string();
  m.artifacts["train_log"] = log_path.string();
  if (!c.data.empty()) m.artifacts["dataset"] = c.data;
  m.reports["eval"] = report.to_json();
  m.reports["best_epoch"] = result.best_epoch;
  m.reports["epochs_run"] = result.log.size();
  m.reports["seconds"] = result.seconds;
  finish_manifest(m, c.out);
  std::cout << report.to_json().dump() << "\n";
  return 0;
}

int cmd_evaluate(const Common& c) {
  RunConfig cfg = resolve_config(c, false);
  const LoadedModel model = load_model(c.params);
  const Dataset ds = load_or_generate(c, cfg);
  const Protocol protocol = default_protocol(model.params, cfg, c.protocol.has_value());
  EvalReport report = evaluate(model.params, ds, protocol, eval_options(model.train, cfg.eval));
  report.seeds = {model.train.seed};
  fs::create_directories(c.out);
  write_file_atomic(fs::path(c.out) / ("report_" + to_string(protocol) + ".json"), report.to_json().dump(2) + "\n");
  std::cout << report.to_json().dump() << "\n";
  return 0;
}

std::vector<ItemId> parse_items(const std::string& text) {
  std::vector<ItemId> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(static_cast<ItemId>(std::stol(tok)));
    } catch (const std::exception&) {
      throw UsageError("--items: '" + tok + "' is not an item id");
    }
  }
  return out;
}

struct StreamArgs {
  std::string items;
  std::string user;
  int top_k = 10;
  int overlap = 0;
  bool oneoff = false;
};

/// Items of the requested stream: --items, else a user of the dataset.
std::pair<std::string, std::vector<ItemId>> stream_for(const Common& c, const RunConfig& cfg, const StreamArgs& a) {
  if (!a.items.empty()) return {a.user.empty() ? "cli" : a.user, parse_items(a.items)};
  const Dataset ds = load_or_generate(c, cfg);
  if (ds.users.empty()) throw std::runtime_error("dataset has no users");
  for (const auto& u : ds.users) {
    if (a.user.empty() || u.user_id == a.user) return {u.user_id, u.items};
  }
  throw std::runtime_error("user '" + a.user + "' not in the dataset");
}

InferenceSession open_session(const LoadedModel& model, const std::string& user, const std::vector<ItemId>& items,
                              const StreamArgs& a) {
  InferenceSession s(model.params, model.train.mode,
                     a.oneoff ? InferenceProtocol::kOneOff : InferenceProtocol::kIterative, a.overlap, user);
  s.ingest(items);
  if (a.oneoff) s.compress();
  return s;
}

int cmd_infer(const Common& c, const StreamArgs& a) {
  const RunConfig cfg = resolve_config(c, false);
  const LoadedModel model = load_model(c.params);
  if (!model.params.config.memory) throw UsageError("infer needs a memory model");
  const auto [user, items] = stream_for(c, cfg, a);
  const InferenceSession s = open_session(model, user, items, a);
  const Ranking ranking = predict_next(s);
  json out = {{"user", user}, {"ingested", items.size()}, {"working", s.working().size()}};
  const auto k = std::min<std::size_t>(ranking.items.size(), static_cast<std::size_t>(std::max(a.top_k, 0)));
  out["top_items"] = std::vector<ItemId>(ranking.items.begin(), ranking.items.begin() + static_cast<std::ptrdiff_t>(k));
  out["top_scores"] = std::vector<float>(ranking.scores.begin(), ranking.scores.begin() + static_cast<std::ptrdiff_t>(k));
  if (s.memory()) {
    fs::create_directories(c.out);
    const fs::path mem_path = fs::path(c.out) / ("memory_" + user + ".r2pm");
    save_memory(*s.memory(), mem_path);
    out["memory_file"] = mem_path.string();
    out["segments_absorbed"] = s.memory()->segments_absorbed;
  }
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_bench(const Common& c, const std::string& short_params, const std::string& full_params, int reps,
              std::int64_t users, bool untrained_baselines) {
  const RunConfig cfg = resolve_config(c, false);
  const LoadedModel model = load_model(c.params);
  const Dataset ds = load_or_generate(c, cfg);
  BenchOptions o;
  o.segment_len = model.params.config.context_len;
  o.short_len = model.train.short_len;
  o.full_len = model.train.full_len;
  o.mode = model.train.mode;
  o.reps = reps;
  o.n_users = users;
  std::optional<ParamsF> sp, fp;
  if (!short_params.empty()) sp = load_model(short_params).params;
  if (!full_params.empty()) fp = load_model(full_params).params;
  if (untrained_baselines) {
    // Latency does not depend on the weights.
    TrainConfig t = model.train;
    t.trainer = TrainerKind::kPlainShort;
    if (!sp) sp = ParamsF::init(t.model_config(model.params.config.catalog_size), t.seed);
    t.trainer = TrainerKind::kPlainFull;
    if (!fp) fp = ParamsF::init(t.model_config(model.params.config.catalog_size), t.seed);
  }
  if (fp) o.full_len = fp->config.context_len;
  if (sp) o.short_len = sp->config.context_len;
  const auto reports = bench(model.params, sp ? &*sp : nullptr, fp ? &*fp : nullptr, ds, o);
  fs::create_directories(c.out);
  std::ofstream out(fs::path(c.out) / "bench.jsonl", std::ios::trunc);
  for (const auto& r : reports) {
    const json j = {{"protocol", r.protocol},
                    {"context_items", r.context_items},
                    {"predict_median_ms", r.predict.median_ms},
                    {"predict_p95_ms", r.predict.p95_ms},
                    {"update_median_ms", r.update.median_ms},
                    {"update_p95_ms", r.update.p95_ms},
                    {"bytes_per_user", r.bytes_per_user}};
    out << j.dump() << "\n";
    std::cout << j.dump() << "\n";
  }
  return 0;
}

int cmd_ablate(const Common& c, const std::vector<std::uint64_t>& seeds, const std::vector<int>& slot_sweep) {
  const RunConfig cfg = resolve_config(c, false);
  fs::create_directories(c.out);
  auto m = start_manifest("ablate", cfg, cfg.train.seed);
  const Dataset ds = load_or_generate(c, cfg);
  AblationOptions o;
  if (!seeds.empty()) o.seeds = seeds;
  if (!slot_sweep.empty()) o.slot_sweep = slot_sweep;
  const auto rows = run_ablation_suite(ds, cfg.train, o, &std::cerr);
  const json table = ablation_table(rows);
  const fs::path path = fs::path(c.out) / "ablation.json";
  write_file_atomic(path, table.dump(2) + "\n");
  m.artifacts["ablation"] = path.string();
  m.reports["ablation"] = table;
  finish_manifest(m, c.out);
  std::cout << table.dump() << "\n";
  return 0;
}

int cmd_export_attention(const Common& c, const StreamArgs& a, bool raw, int categories) {
  const RunConfig cfg = resolve_config(c, false);
  const LoadedModel model = load_model(c.params);
  const auto [user, items] = stream_for(c, cfg, a);
  const InferenceSession s = open_session(model, user, items, a);
  AttentionExportOptions o;
  o.raw = raw;
  o.n_categories = categories;
  const std::string csv = export_attention(s, o);
  fs::create_directories(c.out);
  const fs::path path = fs::path(c.out) / "attention.csv";
  write_file_atomic(path, csv);
  std::cout << json{{"attention", path.string()}, {"user", user}}.dump() << "\n";
  return 0;
}

int cmd_verify(const Common& c) {
  const RunConfig cfg = resolve_config(c, false);
  bool ok = true;
  for (const auto& r : run_verify_suite(cfg.train.seed)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : kRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent preference memory for long-sequence recommendation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  Common c;
  StreamArgs stream;
  std::string short_params, full_params;
  int reps = 5;
  std::int64_t bench_users = 32;
  bool untrained = false, raw = false;
  int categories = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<int> sweep;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  add_common(gen, c, false);
  auto* tr = app.add_subcommand("train", "Train a model and evaluate it");
  add_common(tr, c, true);
  auto* ev = app.add_subcommand("evaluate", "Evaluate saved params");
  add_common(ev, c, false);
  ev->add_option("--params", c.params, "Params file")->required();
  auto* inf = app.add_subcommand("infer", "Stream a user's items and predict the next one");
  add_common(inf, c, false);
  inf->add_option("--params", c.params, "Params file")->required();
  inf->add_option("--items", stream.items, "Comma-separated item ids instead of a dataset user");
  inf->add_option("--user", stream.user, "User id in the dataset");
  inf->add_option("--top-k", stream.top_k, "Items to print")->capture_default_str();
  inf->add_option("--overlap", stream.overlap, "Items re-included after each update");
  inf->add_flag("--oneoff", stream.oneoff, "Compress the stream in one pass");
  auto* be = app.add_subcommand("bench", "Latency and storage per protocol");
  add_common(be, c, false);
  be->add_option("--params", c.params, "Memory-model params file")->required();
  be->add_option("--short-params", short_params, "Plain SHORT params");
  be->add_option("--full-params", full_params, "Plain FULL params");
  be->add_flag("--untrained-baselines", untrained, "Time freshly initialised plain models when none are given");
  be->add_option("--reps", reps, "Repetitions per user")->capture_default_str();
  be->add_option("--users", bench_users, "Users to time")->capture_default_str();
  auto* ab = app.add_subcommand("ablate", "Consistency, slot, reconstruction and overlap ablations");
  add_common(ab, c, true);
  ab->add_option("--seeds", seeds, "Seeds to average over");
  ab->add_option("--slot-sweep", sweep, "Values of C");
  auto* ex = app.add_subcommand("export-attention", "CSV of the memory queries' attention");
  add_common(ex, c, false);
  ex->add_option("--params", c.params, "Params file")->required();
  ex->add_option("--items", stream.items, "Comma-separated item ids instead of a dataset user");
  ex->add_option("--user", stream.user, "User id in the dataset");
  ex->add_flag("--oneoff", stream.oneoff, "Export the one-pass compression forward");
  ex->add_flag("--raw", raw, "Per layer and head instead of the mean");
  ex->add_option("--categories", categories, "Also aggregate item attention over this many categories");
  auto* ve = app.add_subcommand("verify", "Run the built-in invariant checks");
  add_common(ve, c, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (app.get_subcommands().empty()) std::cerr << app.help();
    return kUsageError;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(c);
    if (tr->parsed()) return cmd_train(c);
    if (ev->parsed()) return cmd_evaluate(c);
    if (inf->parsed()) return cmd_infer(c, stream);
    if (be->parsed()) return cmd_bench(c, short_params, full_params, reps, bench_users, untrained);
    if (ab->parsed()) return cmd_ablate(c, seeds, sweep);
    if (ex->parsed()) return cmd_export_attention(c, stream, raw, categories);
    if (ve->parsed()) return cmd_verify(c);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  std::cerr << app.help();
  return kUsageError;
}
