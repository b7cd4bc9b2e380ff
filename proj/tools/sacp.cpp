#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "sacp/arch_io.hpp"
#include "sacp/arch_ir.hpp"
#include "sacp/config_space.hpp"
#include "sacp/contrastive.hpp"
#include "sacp/eval_oracle.hpp"
#include "sacp/gcn_encoder.hpp"
#include "sacp/gradcheck.hpp"
#include "sacp/search.hpp"
#include "sacp/weight_summaries.hpp"

namespace {

using sacp::RuntimeFailure;
using sacp::ValidationError;
using ojson = nlohmann::ordered_json;

enum ExitCode { kOk = 0, kCheckFailed = 1, kUsage = 2, kValidation = 3, kRuntime = 4 };

std::string sha256_hex(const std::string &data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw RuntimeFailure("sha256 failed");
  static const char *hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

void write_file(const std::string &path, const std::string &text) {
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    out << text;
    if (!out.flush()) throw RuntimeFailure("write to '" + path + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

void emit(const std::string &out, const std::string &text) {
  if (out.empty() || out == "-")
    std::cout << text;
  else
    write_file(out, text);
}

class Manifest {
public:
  explicit Manifest(std::string command) { doc_["command"] = std::move(command); }

  template <typename T> void param(const std::string &key, const T &value) { doc_["parameters"][key] = value; }
  void seed(const std::string &key, std::uint64_t value) { doc_["seeds"][key] = value; }
  void input(const std::string &key, const std::filesystem::path &path) {
    doc_["inputs"][key] = {{"path", path.string()}, {"sha256", sha256_hex(sacp::read_text_file(path))}};
  }
  void output(const std::string &path) { doc_["outputs"].push_back(path); }

  void write(const std::string &out) const {
    if (out.empty() || out == "-") return;
    ojson doc = doc_;
    doc["tool"] = "sacp";
    doc["version"] = SACP_VERSION;
    write_file(out + ".manifest.json", doc.dump(2) + "\n");
  }

private:
  ojson doc_;
};

std::vector<std::int64_t> parse_dims(const std::string &text) {
  std::vector<std::int64_t> dims;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      dims.push_back(std::stoll(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::logic_error &) {
      throw ValidationError("bad dims '" + text + "'");
    }
  }
  return dims;
}

sacp::RateGrid make_grid(double granularity) {
  if (!(granularity > 0.0 && granularity < 1.0)) throw ValidationError("--grid must lie in (0, 1)");
  return sacp::RateGrid(granularity);
}

ojson stats_json(const sacp::ModelStats &s) { return {{"flops", s.flops}, {"params", s.params}}; }

struct Common {
  std::string arch;
  std::uint64_t seed = 0;
  std::string out;
};

// --- stats --------------------------------------------------------------

struct StatsArgs {
  Common c;
  std::string config;
};

int cmd_stats(const StatsArgs &a) {
  const auto arch = sacp::load_arch(a.c.arch);
  ojson report;
  report["arch"] = arch.name();
  report["num_prunable"] = arch.num_prunable();
  report["max_width"] = arch.num_prunable() ? sacp::max_width(arch) : 0;
  const auto base = sacp::model_stats(arch);
  report["base"] = stats_json(base);
  Manifest m("stats");
  m.input("arch", sacp::resolve_arch_path(a.c.arch));
  if (!a.config.empty()) {
    m.input("config", a.config);
    nlohmann::json cfg;
    try {
      cfg = nlohmann::json::parse(sacp::read_text_file(a.config));
    } catch (const nlohmann::json::exception &e) {
      throw ValidationError(std::string("malformed config: ") + e.what());
    }
    if (!cfg.is_object() || !cfg.contains("rates")) throw ValidationError("config needs a 'rates' array");
    const auto rates = cfg["rates"].get<std::vector<double>>();
    const auto pruned = sacp::model_stats(sacp::apply_pruning(arch, std::span<const double>(rates)));
    report["rates"] = rates;
    report["global_ratio"] = sacp::global_ratio(rates, arch);
    report["pruned"] = stats_json(pruned);
    report["flops_reduction"] = 1.0 - static_cast<double>(pruned.flops) / static_cast<double>(base.flops);
    report["params_reduction"] = 1.0 - static_cast<double>(pruned.params) / static_cast<double>(base.params);
  }
  emit(a.c.out, report.dump(2) + "\n");
  if (!a.c.out.empty() && a.c.out != "-") {
    m.output(a.c.out);
    m.write(a.c.out);
  } else {
    std::cerr << "params " << base.params / 1e6 << "M  flops " << base.flops / 1e6 << "M\n";
  }
  return kOk;
}

// --- gen ----------------------------------------------------------------

struct GenArgs {
  Common c;
  double grid = 0.1;
  std::uint64_t num = 10'000;
  std::optional<double> tau;
  bool emit_masks = false;
  std::string policy = "prefix";
  std::string weights = "synthetic:0";
};

int cmd_gen(const GenArgs &a) {
  const auto arch = sacp::load_arch(a.c.arch);
  const auto grid = make_grid(a.grid);
  auto pool = a.tau ? sacp::sample_constrained(a.num, grid, arch, *a.tau, a.c.seed)
                    : sacp::sample_unconstrained(a.num, grid, arch, a.c.seed);
  const auto policy = sacp::parse_mask_policy(a.policy);
  Manifest m("gen");
  m.input("arch", sacp::resolve_arch_path(a.c.arch));
  std::optional<sacp::WeightSummaries> summaries;
  if (a.emit_masks) {
    if (policy == sacp::MaskPolicy::l1) {
      summaries = sacp::gen_weight_summaries(arch, a.weights);
      m.param("weights", a.weights);
      if (!a.weights.starts_with("synthetic:")) m.input("weights", a.weights);
    }
    sacp::materialize_pool(pool, arch, policy, summaries ? &*summaries : nullptr);
  }
  for (auto &cfg : pool.configs) cfg.policy = policy;
  emit(a.c.out, sacp::serialize_pool(pool, a.emit_masks));
  m.param("grid", a.grid);
  m.param("num", a.num);
  m.param("tau", a.tau ? ojson(*a.tau) : ojson(nullptr));
  m.param("policy", a.policy);
  m.param("emit_masks", a.emit_masks);
  m.seed("seed", a.c.seed);
  m.output(a.c.out);
  m.write(a.c.out);
  return kOk;
}

// --- train --------------------------------------------------------------

struct TrainArgs {
  Common c;
  std::string pool;
  std::string weights = "synthetic:0";
  std::string dims = "128,64";
  sacp::TrainConfig train;
  std::string anchor_policy = "l1";
};

int cmd_train(const TrainArgs &a) {
  if (a.c.out.empty() || a.c.out == "-") throw ValidationError("train needs --out for the checkpoint");
  sacp::validate_train_config(a.train);
  const auto arch = sacp::load_arch(a.c.arch);
  const auto pool = sacp::parse_pool(sacp::read_text_file(a.pool));
  const auto summaries = sacp::gen_weight_summaries(arch, a.weights);
  const auto hidden = parse_dims(a.dims);
  if (hidden.size() != 2) throw ValidationError("--dims takes hidden,embedding");
  std::vector<std::int64_t> dims{sacp::max_width(arch), hidden[0], hidden[1]};
  auto config = a.train;
  config.seed = sacp::derive_seed(a.c.seed, "train");
  const auto triplets = sacp::build_triplets(pool, arch, summaries, sacp::derive_seed(a.c.seed, "triplets"),
                                             sacp::parse_mask_policy(a.anchor_policy));
  auto params = sacp::init_params(dims, sacp::derive_seed(a.c.seed, "init"));
  const auto result = sacp::train(std::move(params), arch, triplets, config);

  write_file(a.c.out, sacp::save_checkpoint(result.params));
  std::string report;
  for (const auto &r : result.history) {
    ojson j;
    j["epoch"] = r.epoch;
    j["mean_loss"] = r.mean_loss;
    j["l_pos"] = r.l_pos;
    j["l_neg"] = r.l_neg;
    j["wall_time"] = r.wall_time;
    report += j.dump() + "\n";
  }
  write_file(a.c.out + ".report.jsonl", report);

  Manifest m("train");
  m.input("arch", sacp::resolve_arch_path(a.c.arch));
  m.input("pool", a.pool);
  if (!a.weights.starts_with("synthetic:")) m.input("weights", a.weights);
  m.param("weights", a.weights);
  m.param("dims", dims);
  m.param("epochs", config.epochs);
  m.param("batch_size", config.batch_size);
  m.param("temperature", config.temperature);
  m.param("epsilon", config.epsilon);
  m.param("lr", config.learning_rate);
  m.param("anchor_policy", a.anchor_policy);
  m.seed("seed", a.c.seed);
  m.seed("train", config.seed);
  m.seed("init", sacp::derive_seed(a.c.seed, "init"));
  m.seed("triplets", sacp::derive_seed(a.c.seed, "triplets"));
  m.output(a.c.out);
  m.output(a.c.out + ".report.jsonl");
  m.write(a.c.out);
  if (!result.history.empty())
    std::cerr << "epochs " << result.history.size() << "  final mean loss " << result.history.back().mean_loss
              << "\n";
  return kOk;
}

// --- search -------------------------------------------------------------

struct SearchArgs {
  Common c;
  std::string checkpoint;
  std::string weights = "synthetic:0";
  std::string oracle = "proxy";
  double grid = 0.1;
  double tau = 0.6;
  std::uint64_t num = 1'000'000;
  std::size_t top_m = 150;
  std::size_t top_k = 10;
  int light_epochs = 1;
  int full_epochs = 10;
  std::size_t workers = 1;
};

int cmd_search(const SearchArgs &a) {
  const auto arch = sacp::load_arch(a.c.arch);
  const auto params = sacp::load_checkpoint(sacp::read_text_file(a.checkpoint));
  const auto summaries = sacp::gen_weight_summaries(arch, a.weights);
  std::unique_ptr<sacp::Oracle> oracle;
  if (a.oracle == "proxy") {
    oracle = std::make_unique<sacp::ProxyOracle>(summaries);
  } else if (a.oracle.starts_with("cmd:")) {
    sacp::ExternalOracleOptions opts;
    opts.parallelism = std::max<std::size_t>(1, a.workers);
    oracle = std::make_unique<sacp::ExternalOracle>(a.oracle.substr(4), opts);
  } else {
    throw ValidationError("--oracle must be 'proxy' or 'cmd:<command>'");
  }
  sacp::SearchOptions opts;
  opts.tau = a.tau;
  opts.num_candidates = a.num;
  opts.seed = a.c.seed;
  opts.workers = std::max<std::size_t>(1, a.workers);
  opts.refine = {a.top_m, a.top_k, a.light_epochs, a.full_epochs};
  const auto report = sacp::run_search(params, arch, make_grid(a.grid), &summaries, *oracle, opts);
  emit(a.c.out, sacp::report_to_json(report).dump(2) + "\n");

  Manifest m("search");
  m.input("arch", sacp::resolve_arch_path(a.c.arch));
  m.input("checkpoint", a.checkpoint);
  if (!a.weights.starts_with("synthetic:")) m.input("weights", a.weights);
  m.param("weights", a.weights);
  m.param("oracle", a.oracle);
  m.param("grid", a.grid);
  m.param("tau", a.tau);
  m.param("num", a.num);
  m.param("top_m", a.top_m);
  m.param("top_k", a.top_k);
  m.param("light_epochs", a.light_epochs);
  m.param("full_epochs", a.full_epochs);
  m.param("workers", a.workers);
  m.seed("seed", a.c.seed);
  m.output(a.c.out);
  m.write(a.c.out);
  std::cerr << "winner " << report.winner << "  flops -" << 100.0 * report.flops_reduction() << "%  params -"
            << 100.0 * report.params_reduction() << "%\n";
  return kOk;
}

// --- gradcheck ----------------------------------------------------------

struct GradcheckArgs {
  Common c;
  std::string dims = "6,5,4";
  std::size_t nodes = 8;
  std::size_t pairs = 4;
  bool corrupt = false;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradcheckArgs &a) {
  const auto dims = parse_dims(a.dims);
  if (dims.size() != 3) throw ValidationError("--dims takes d,h,e");
  sacp::check_dims(dims);
  sacp::GradCheckOptions o;
  o.input_width = dims[0];
  o.hidden_width = dims[1];
  o.embedding_width = dims[2];
  o.nodes = a.nodes;
  o.pairs = a.pairs;
  o.corrupt = a.corrupt;
  const auto r = sacp::gradcheck(a.c.seed, o);
  ojson j;
  j["seed"] = a.c.seed;
  j["dims"] = dims;
  j["rel_error_w1"] = r.rel_error_w1;
  j["rel_error_w2"] = r.rel_error_w2;
  j["max_abs_error"] = r.max_abs_error;
  j["tolerance"] = a.tolerance;
  j["passed"] = r.passed(a.tolerance);
  emit(a.c.out, j.dump(2) + "\n");
  Manifest m("gradcheck");
  m.param("dims", dims);
  m.param("nodes", a.nodes);
  m.param("pairs", a.pairs);
  m.param("corrupt", a.corrupt);
  m.seed("seed", a.c.seed);
  m.output(a.c.out);
  m.write(a.c.out);
  std::cerr << (r.passed(a.tolerance) ? "PASS" : "FAIL") << "  max relative error " << r.max_rel_error() << "\n";
  return r.passed(a.tolerance) ? kOk : kCheckFailed;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Structure-aware channel-pruning search"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(SACP_VERSION));

  StatsArgs stats;
  auto *s = app.add_subcommand("stats", "FLOPs (MACs) and parameter counts, optionally for a pruned config");
  s->add_option("--arch", stats.c.arch, "built-in name or spec file")->required();
  s->add_option("--config", stats.config, "JSON file with a 'rates' array");
  s->add_option("--out", stats.c.out, "report file (default stdout)");

  GenArgs gen;
  auto *g = app.add_subcommand("gen", "sample a pool of pruning vectors");
  g->add_option("--arch", gen.c.arch)->required();
  g->add_option("--grid", gen.grid, "rate granularity")->capture_default_str();
  g->add_option("--num", gen.num, "number of distinct vectors")->capture_default_str();
  g->add_option("--tau", gen.tau, "minimum global pruning ratio (constrained pool)");
  g->add_option("--seed", gen.c.seed)->capture_default_str();
  g->add_option("--out", gen.c.out, "pool file (default stdout)");
  g->add_flag("--emit-masks", gen.emit_masks, "store channel masks in the pool");
  g->add_option("--policy", gen.policy, "mask policy for --emit-masks: l1, random, prefix")->capture_default_str();
  g->add_option("--weights", gen.weights, "synthetic:<seed> or summaries file")->capture_default_str();

  TrainArgs train;
  auto *t = app.add_subcommand("train", "train the graph encoder contrastively");
  t->add_option("--arch", train.c.arch)->required();
  t->add_option("--pool", train.pool, "training pool file")->required();
  t->add_option("--weights", train.weights, "synthetic:<seed> or summaries file")->capture_default_str();
  t->add_option("--dims", train.dims, "hidden,embedding widths")->capture_default_str();
  t->add_option("--epochs", train.train.epochs)->capture_default_str();
  t->add_option("--batch-size", train.train.batch_size)->capture_default_str();
  t->add_option("--temperature", train.train.temperature)->capture_default_str();
  t->add_option("--epsilon", train.train.epsilon)->capture_default_str();
  t->add_option("--lr", train.train.learning_rate)->capture_default_str();
  t->add_option("--anchor-policy", train.anchor_policy, "masks for anchors without stored masks")
      ->capture_default_str();
  t->add_option("--seed", train.c.seed)->capture_default_str();
  t->add_option("--out", train.c.out, "checkpoint file")->required();

  SearchArgs search;
  auto *q = app.add_subcommand("search", "rank a constrained pool and refine with an oracle");
  q->add_option("--arch", search.c.arch)->required();
  q->add_option("--checkpoint", search.checkpoint)->required();
  q->add_option("--weights", search.weights, "synthetic:<seed> or summaries file")->capture_default_str();
  q->add_option("--grid", search.grid)->capture_default_str();
  q->add_option("--tau", search.tau)->capture_default_str();
  q->add_option("--num", search.num, "candidates to sample")->capture_default_str();
  q->add_option("--top-m", search.top_m)->capture_default_str();
  q->add_option("--top-k", search.top_k)->capture_default_str();
  q->add_option("--oracle", search.oracle, "proxy or cmd:<command>")->capture_default_str();
  q->add_option("--light-epochs", search.light_epochs)->capture_default_str();
  q->add_option("--full-epochs", search.full_epochs)->capture_default_str();
  q->add_option("--workers", search.workers)->capture_default_str();
  q->add_option("--seed", search.c.seed)->capture_default_str();
  q->add_option("--out", search.c.out, "report file (default stdout)");

  GradcheckArgs gc;
  auto *c = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  c->add_option("--seed", gc.c.seed)->capture_default_str();
  c->add_option("--dims", gc.dims, "d,h,e")->capture_default_str();
  c->add_option("--nodes", gc.nodes)->capture_default_str();
  c->add_option("--pairs", gc.pairs)->capture_default_str();
  c->add_option("--tolerance", gc.tolerance)->capture_default_str();
  c->add_flag("--corrupt", gc.corrupt, "perturb one gradient entry (negative control)");
  c->add_option("--out", gc.c.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*s) return cmd_stats(stats);
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(train);
    if (*q) return cmd_search(search);
    if (*c) return cmd_gradcheck(gc);
  } catch (const ValidationError &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const RuntimeFailure &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::filesystem::filesystem_error &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
