// Command-line front end: decode, compare, bon-sweep, gen-data, serve-toy,
// verify. Standard output is line-delimited JSON; artifacts are written
// atomically; every flag has a config-file equivalent (JSON, flag wins) and
// the effective configuration is echoed into every output artifact.
//
// Exit codes: 0 success, 2 usage/input error, 3 backend error,
// 4 verification failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <aad/common.hpp>
#include <aad/core.hpp>
#include <aad/dataforge.hpp>
#include <aad/decoding.hpp>
#include <aad/evalharness.hpp>
#include <aad/fixtures.hpp>
#include <aad/oracle.hpp>
#include <aad/parallel.hpp>
#include <aad/remote.hpp>
#include <aad/rewards.hpp>
#include <aad/server.hpp>
#include <aad/tabular.hpp>
#include <aad/verify.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace {

using namespace aad;
using nlohmann::json;
using nlohmann::ordered_json;

struct UsageError : Error {
  using Error::Error;
};

// ============================================================================
// Sources from locators
// ============================================================================

/// Type-erased token source the strategy templates run against.
struct DynSource {
  std::function<core::TokenDistribution(std::span<const Token>)> next;
  int vocab = 0;
  std::set<Token> eos;
  std::string locator;
  bool loaded = false;

  core::TokenDistribution next_distribution(std::span<const Token> ctx) const {
    return next(ctx);
  }
  int vocab_size() const { return vocab; }
  const std::set<Token>& eos_ids() const { return eos; }
};

bool is_url(const std::string& locator) {
  return locator.rfind("http://", 0) == 0 || locator.rfind("https://", 0) == 0;
}

std::pair<std::string, std::string> split_label(const std::string& locator,
                                                const std::string& default_label) {
  const auto hash = locator.rfind('#');
  if (hash == std::string::npos) return {locator, default_label};
  return {locator.substr(0, hash), locator.substr(hash + 1)};
}

DynSource open_source(const std::string& locator, const std::string& default_label,
                      int pool_size) {
  DynSource src;
  src.locator = locator;
  if (is_url(locator)) {
    const auto [url, label] = split_label(locator, default_label);
    auto cfg = models::discover_remote(url, label, std::max(pool_size, 2));
    auto remote = std::make_shared<models::RemoteSource>(std::move(cfg));
    src.vocab = remote->vocab_size();
    src.eos = remote->eos_ids();
    src.next = [remote](std::span<const Token> ctx) { return remote->next_distribution(ctx); };
  } else {
    auto model = std::make_shared<models::TabularModel>(models::load_tabular(locator));
    src.vocab = model->vocab_size();
    src.eos = model->eos_ids();
    src.next = [model](std::span<const Token> ctx) { return model->next_distribution(ctx); };
  }
  src.loaded = true;
  return src;
}

/// Reward locators: "implicit[:beta]" (implicit reward from the dpo/sft
/// pair), a URL (remote reward service), or a tabular reward file.
rewards::FnReward open_reward(const std::string& locator, const DynSource& dpo,
                              const DynSource& sft, const std::string& flag) {
  if (locator.rfind("implicit", 0) == 0) {
    double beta = 0.1;
    const auto colon = locator.find(':');
    if (colon != std::string::npos) {
      try {
        beta = std::stod(locator.substr(colon + 1));
      } catch (const std::exception&) {
        throw UsageError(flag + ": cannot parse beta in '" + locator + "'");
      }
    }
    if (!(beta > 0.0)) throw UsageError(flag + ": implicit reward needs beta > 0");
    if (!dpo.loaded || !sft.loaded) {
      throw UsageError(flag + "=implicit requires both --dpo and --sft");
    }
    return rewards::FnReward{[dpo, sft, beta](std::span<const Token> p,
                                              std::span<const Token> c) {
      return core::sequence_implicit_reward(dpo, sft, p, c, beta);
    }};
  }
  if (is_url(locator)) {
    models::RemoteConfig cfg;
    cfg.base_url = split_label(locator, "").first;
    auto remote = std::make_shared<models::RemoteReward>(std::move(cfg));
    return rewards::FnReward{[remote](std::span<const Token> p, std::span<const Token> c) {
      return remote->score(p, c);
    }};
  }
  auto table = std::make_shared<rewards::TabularReward>(rewards::load_reward(locator));
  return rewards::FnReward{[table](std::span<const Token> p, std::span<const Token> c) {
    return table->score(p, c);
  }};
}

// ============================================================================
// Options (flag <- config file <- built-in default)
// ============================================================================

struct Options {
  std::string config_path;
  std::string dpo, sft, picker, oracle;
  std::string prompts, out = "out.jsonl", out_dir = ".";
  std::string strategy, method = "aad";
  std::string baselines = "greedy-sft,greedy-dpo,bon,eft";
  std::string n_values = "1,2,4,8";
  std::vector<std::string> sweep_pickers;
  std::string host = "127.0.0.1";
  std::string reward_file;
  std::string init = "sft";
  decoding::DecodeConfig cfg;
  bool eos_from_config = false;  // an explicit eos_ids entry, even [], wins
  int bon_n = 2;
  int iteration = 1;
  int workers = 1;
  int port = 8080;
  int verify_fixtures = 50;
  std::uint64_t verify_seed = 2024;
};

json load_config_file(int argc, char** argv) {
  std::string path;
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") path = argv[i + 1];
  }
  if (path.empty()) {
    if (const char* env = std::getenv("AAD_CONFIG")) path = env;
  }
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  try {
    json doc;
    in >> doc;
    if (!doc.is_object()) throw UsageError("config file must hold a JSON object: " + path);
    return doc;
  } catch (const json::exception& e) {
    throw UsageError("config file " + path + ": " + e.what());
  }
}

void apply_config_defaults(Options& opt, const json& fc) {
  opt.dpo = fc.value("dpo", opt.dpo);
  opt.sft = fc.value("sft", opt.sft);
  opt.picker = fc.value("picker", opt.picker);
  opt.oracle = fc.value("oracle", opt.oracle);
  opt.prompts = fc.value("prompts", opt.prompts);
  opt.out = fc.value("out", opt.out);
  opt.out_dir = fc.value("out_dir", opt.out_dir);
  opt.strategy = fc.value("strategy", opt.strategy);
  opt.method = fc.value("method", opt.method);
  opt.baselines = fc.value("baselines", opt.baselines);
  opt.n_values = fc.value("n_values", opt.n_values);
  opt.host = fc.value("host", opt.host);
  opt.reward_file = fc.value("reward", opt.reward_file);
  opt.init = fc.value("init", opt.init);
  opt.cfg.alpha = fc.value("alpha", opt.cfg.alpha);
  opt.cfg.tau = fc.value("tau", opt.cfg.tau);
  opt.cfg.beam_width = fc.value("beam_width", opt.cfg.beam_width);
  opt.cfg.nucleus_p = fc.value("nucleus_p", opt.cfg.nucleus_p);
  opt.cfg.eft_beta = fc.value("eft_beta", opt.cfg.eft_beta);
  opt.cfg.max_new_tokens = fc.value("max_new_tokens", opt.cfg.max_new_tokens);
  opt.cfg.seed = fc.value("seed", opt.cfg.seed);
  opt.cfg.nu_scale = fc.value("nu_scale", opt.cfg.nu_scale);
  opt.cfg.eft_sample = fc.value("eft_sample", opt.cfg.eft_sample);
  if (fc.contains("eos_ids")) {
    opt.cfg.eos_ids.clear();
    for (const auto& v : fc.at("eos_ids")) opt.cfg.eos_ids.insert(v.get<Token>());
    opt.eos_from_config = true;
  }
  opt.bon_n = fc.value("bon_n", opt.bon_n);
  opt.iteration = fc.value("iteration", opt.iteration);
  opt.workers = fc.value("workers", opt.workers);
  opt.port = fc.value("port", opt.port);
  opt.verify_fixtures = fc.value("verify_fixtures", opt.verify_fixtures);
  opt.verify_seed = fc.value("verify_seed", opt.verify_seed);
  if (fc.contains("sweep_pickers")) {
    opt.sweep_pickers.clear();
    for (const auto& v : fc.at("sweep_pickers")) opt.sweep_pickers.push_back(v.get<std::string>());
  }
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    std::size_t next = csv.find(',', pos);
    if (next == std::string::npos) next = csv.size();
    const auto part = csv.substr(pos, next - pos);
    if (!part.empty()) out.push_back(part);
    pos = next + 1;
    if (next == csv.size()) break;
  }
  return out;
}

void require(bool condition, const std::string& message) {
  if (!condition) throw UsageError(message);
}

/// Sources feeding nu must share the token space.
void check_roles(const DynSource& dpo, const DynSource& sft) {
  if (!dpo.loaded || !sft.loaded) return;
  if (dpo.vocab != sft.vocab) {
    throw UsageError("--dpo and --sft declare different vocab sizes (" +
                     std::to_string(dpo.vocab) + " vs " + std::to_string(sft.vocab) + ")");
  }
  if (dpo.eos != sft.eos) {
    throw UsageError("--dpo and --sft declare different eos id sets");
  }
}

void fill_eos(Options& opt, const DynSource& dpo, const DynSource& sft) {
  if (opt.eos_from_config) return;
  if (dpo.loaded) {
    opt.cfg.eos_ids = dpo.eos;
  } else if (sft.loaded) {
    opt.cfg.eos_ids = sft.eos;
  }
}

ordered_json sources_echo(const Options& opt) {
  ordered_json j;
  if (!opt.dpo.empty()) j["dpo"] = opt.dpo;
  if (!opt.sft.empty()) j["sft"] = opt.sft;
  if (!opt.picker.empty()) j["picker"] = opt.picker;
  if (!opt.oracle.empty()) j["oracle"] = opt.oracle;
  j["workers"] = opt.workers;
  return j;
}

// ============================================================================
// Subcommands
// ============================================================================

int cmd_decode(const Options& opt) {
  require(!opt.strategy.empty(), "decode requires --strategy");
  const eval::StrategyKind kind = [&] {
    try {
      return eval::parse_strategy(opt.strategy);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }();
  require(!opt.prompts.empty(), "decode requires --prompts");
  require(!eval::needs_dpo(kind) || !opt.dpo.empty(),
          "strategy '" + opt.strategy + "' requires --dpo");
  require(!eval::needs_sft(kind) || !opt.sft.empty(),
          "strategy '" + opt.strategy + "' requires --sft");
  require(!eval::needs_picker(kind) || !opt.picker.empty(),
          "strategy '" + opt.strategy + "' requires --picker");

  Options merged = opt;
  DynSource dpo, sft;
  if (!opt.dpo.empty()) dpo = open_source(opt.dpo, "dpo", opt.workers);
  if (!opt.sft.empty()) sft = open_source(opt.sft, "sft", opt.workers);
  check_roles(dpo, sft);
  fill_eos(merged, dpo, sft);
  merged.cfg.validate();

  rewards::FnReward picker{[](auto, auto) { return 0.0; }};
  if (!opt.picker.empty()) picker = open_reward(opt.picker, dpo, sft, "--picker");

  const auto prompts = eval::load_prompts(opt.prompts);
  struct Line {
    std::string text;
  };
  const auto lines = parallel_map<Line>(prompts.size(), opt.workers, [&](std::size_t i) {
    decoding::DecodeConfig cfg = merged.cfg;
    cfg.seed = splitmix64(merged.cfg.seed + i);
    const auto rec =
        eval::run_strategy(kind, dpo, sft, picker, prompts[i].prompt, cfg, opt.bon_n);
    ordered_json j;
    j["id"] = prompts[i].id;
    j.update(decoding::record_json(rec));
    j["sources"] = sources_echo(opt);
    return Line{j.dump()};
  });
  for (const auto& line : lines) std::cout << line.text << "\n";
  return 0;
}

int cmd_compare(const Options& opt) {
  require(!opt.prompts.empty(), "compare requires --prompts");
  require(!opt.oracle.empty(), "compare requires --oracle");
  eval::CompareOptions copt;
  try {
    copt.method = eval::parse_strategy(opt.method);
    for (const auto& name : split_csv(opt.baselines)) {
      copt.baselines.push_back(eval::parse_strategy(name));
    }
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  require(!copt.baselines.empty(), "compare requires at least one baseline");

  bool any_needs_sft = eval::needs_sft(copt.method);
  bool any_needs_picker = eval::needs_picker(copt.method);
  for (auto k : copt.baselines) {
    any_needs_sft = any_needs_sft || eval::needs_sft(k);
    any_needs_picker = any_needs_picker || eval::needs_picker(k);
  }
  require(!opt.dpo.empty(), "compare requires --dpo");
  require(!any_needs_sft || !opt.sft.empty(), "selected strategies require --sft");
  require(!any_needs_picker || !opt.picker.empty(),
          "best-of-n baselines require --picker");

  Options merged = opt;
  DynSource dpo = open_source(opt.dpo, "dpo", opt.workers);
  DynSource sft;
  if (!opt.sft.empty()) sft = open_source(opt.sft, "sft", opt.workers);
  check_roles(dpo, sft);
  fill_eos(merged, dpo, sft);
  merged.cfg.validate();

  rewards::FnReward picker{[](auto, auto) { return 0.0; }};
  if (!opt.picker.empty()) picker = open_reward(opt.picker, dpo, sft, "--picker");
  const rewards::FnReward oracle = open_reward(opt.oracle, dpo, sft, "--oracle");

  copt.cfg = merged.cfg;
  copt.bon_n = opt.bon_n;
  copt.workers = opt.workers;

  const auto prompts = eval::load_prompts(opt.prompts);
  auto report = eval::compare(copt, prompts, dpo, sft, picker, oracle);
  report.config_echo["sources"] = sources_echo(opt);
  report.config_echo["baselines"] = split_csv(opt.baselines);
  report.config_echo["prompts"] = opt.prompts;

  const std::string json_path = opt.out_dir + "/report.json";
  const std::string csv_path = opt.out_dir + "/rows.csv";
  eval::write_report(report, json_path, csv_path);

  ordered_json summary;
  summary["event"] = "report";
  summary["report"] = json_path;
  summary["rows"] = csv_path;
  summary["n_prompts"] = report.n_prompts;
  summary["R"] = report.avg_reward;
  summary["W"] = report.win_rate;
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_bon_sweep(const Options& opt) {
  require(!opt.prompts.empty(), "bon-sweep requires --prompts");
  require(!opt.dpo.empty(), "bon-sweep requires --dpo");
  require(!opt.oracle.empty(), "bon-sweep requires --oracle");

  Options merged = opt;
  DynSource dpo = open_source(opt.dpo, "dpo", opt.workers);
  DynSource sft;
  if (!opt.sft.empty()) sft = open_source(opt.sft, "sft", opt.workers);
  check_roles(dpo, sft);
  fill_eos(merged, dpo, sft);
  merged.cfg.validate();

  const rewards::FnReward oracle = open_reward(opt.oracle, dpo, sft, "--oracle");
  std::vector<std::pair<std::string, rewards::FnReward>> pickers;
  pickers.emplace_back("oracle", oracle);
  for (std::size_t i = 0; i < opt.sweep_pickers.size(); ++i) {
    pickers.emplace_back("picker" + std::to_string(i),
                         open_reward(opt.sweep_pickers[i], dpo, sft, "--picker"));
  }

  std::vector<int> ns;
  for (const auto& part : split_csv(opt.n_values)) {
    try {
      ns.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw UsageError("--n-values: cannot parse '" + part + "'");
    }
  }
  require(!ns.empty(), "--n-values must name at least one n");

  const auto prompts = eval::load_prompts(opt.prompts);
  auto table = eval::bon_sweep(prompts, dpo, pickers, oracle, ns, merged.cfg, opt.workers);
  table.config_echo["sources"] = sources_echo(opt);
  for (std::size_t i = 0; i < opt.sweep_pickers.size(); ++i) {
    table.config_echo["picker" + std::to_string(i)] = opt.sweep_pickers[i];
  }

  eval::detail::atomic_write(opt.out, eval::sweep_json(table).dump(2) + "\n");
  ordered_json summary;
  summary["event"] = "bon-sweep";
  summary["out"] = opt.out;
  summary["n_values"] = table.n_values;
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_gen_data(const Options& opt) {
  require(!opt.prompts.empty(), "gen-data requires --prompts");
  require(!opt.dpo.empty(), "gen-data requires --dpo");
  require(!opt.sft.empty(), "gen-data requires --sft");
  require(opt.init == "sft" || opt.init == "dpo", "--init must be 'sft' or 'dpo'");

  Options merged = opt;
  DynSource dpo = open_source(opt.dpo, "dpo", opt.workers);
  DynSource sft = open_source(opt.sft, "sft", opt.workers);
  check_roles(dpo, sft);
  fill_eos(merged, dpo, sft);
  merged.cfg.validate();

  dataforge::ForgeOptions fopt;
  fopt.cfg = merged.cfg;
  fopt.iteration = opt.iteration;
  fopt.init = opt.init;
  fopt.workers = opt.workers;
  const auto summary = dataforge::build_dataset(opt.prompts, dpo, sft, fopt, opt.out);

  ordered_json line;
  line["event"] = "dataset";
  line["out"] = opt.out;
  line["pairs_written"] = summary.pairs_written;
  line["degenerate_count"] = summary.degenerate_count;
  line["sources"] = sources_echo(opt);
  std::cout << line.dump() << "\n";
  return 0;
}

std::atomic<bool> g_stop{false};

int cmd_serve_toy(const Options& opt) {
  require(!opt.dpo.empty(), "serve-toy requires --dpo");
  require(!opt.sft.empty(), "serve-toy requires --sft");
  require(!is_url(opt.dpo) && !is_url(opt.sft), "serve-toy serves local tabular files");

  models::ToyServer server;
  {
    auto dpo = models::load_tabular(opt.dpo);
    auto sft = models::load_tabular(opt.sft);
    models::require_compatible(dpo, sft);
    server.add_model("dpo", std::move(dpo));
    server.add_model("sft", std::move(sft));
  }
  if (!opt.reward_file.empty()) server.set_reward(rewards::load_reward(opt.reward_file));
  server.start(opt.host, opt.port);

  ordered_json line;
  line["event"] = "listening";
  line["host"] = opt.host;
  line["port"] = server.port();
  line["models"] = {"dpo", "sft"};
  line["reward"] = !opt.reward_file.empty();
  std::cout << line.dump() << std::endl;  // flush: readers wait for this line

  std::signal(SIGINT, [](int) { g_stop.store(true); });
  std::signal(SIGTERM, [](int) { g_stop.store(true); });
  while (!g_stop.load()) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  server.stop();
  return 0;
}

int cmd_verify(const Options& opt) {
  ordered_json header;
  header["event"] = "verify-config";
  header["seed"] = opt.verify_seed;
  header["fixtures"] = opt.verify_fixtures;
  std::cout << header.dump() << "\n";

  const auto results = verify::run_all({opt.verify_seed, opt.verify_fixtures});
  int failed = 0;
  for (const auto& r : results) {
    if (!r.pass) ++failed;
    ordered_json line;
    line["check"] = r.name;
    line["pass"] = r.pass;
    line["detail"] = r.detail;
    std::cout << line.dump() << "\n";
  }
  ordered_json footer;
  footer["event"] = "verify-summary";
  footer["passed"] = static_cast<int>(results.size()) - failed;
  footer["failed"] = failed;
  std::cout << footer.dump() << "\n";
  return failed == 0 ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  try {
    apply_config_defaults(opt, load_config_file(argc, argv));
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"Inference-time alignment decoding engine over tabular and remote toy models"};
  app.require_subcommand(1);
  std::string config_sink;
  app.add_option("--config", config_sink, "JSON config file (or env AAD_CONFIG)");

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_sink, "JSON config file (or env AAD_CONFIG)");
    sub->add_option("--workers", opt.workers, "prompt-level parallelism")
        ->capture_default_str();
    sub->add_option("--seed", opt.cfg.seed, "master seed")->capture_default_str();
  };
  const auto add_decode_params = [&](CLI::App* sub) {
    sub->add_option("--alpha", opt.cfg.alpha, "plausible-set filter in (0,1]")
        ->capture_default_str();
    sub->add_option("--tau", opt.cfg.tau, "entropy gate threshold (nats)")
        ->capture_default_str();
    sub->add_option("--beam-width", opt.cfg.beam_width, "beam width")->capture_default_str();
    sub->add_option("--nucleus-p", opt.cfg.nucleus_p, "top-p mass")->capture_default_str();
    sub->add_option("--eft-beta", opt.cfg.eft_beta, "combined-score weight")
        ->capture_default_str();
    sub->add_option("--max-new-tokens", opt.cfg.max_new_tokens, "generation length cap")
        ->capture_default_str();
    sub->add_option("--nu-scale", opt.cfg.nu_scale, "positive scale on nu (diagnostic)")
        ->capture_default_str();
    sub->add_option("--bon-n", opt.bon_n, "candidates for best-of-n")->capture_default_str();
  };
  const auto add_sources = [&](CLI::App* sub, bool with_picker, bool with_oracle) {
    sub->add_option("--dpo", opt.dpo, "aligned model: tabular file or http URL[#label]");
    sub->add_option("--sft", opt.sft, "reference model: tabular file or http URL[#label]");
    if (with_picker) {
      sub->add_option("--picker", opt.picker,
                      "picker reward: reward file, URL, or implicit[:beta]");
    }
    if (with_oracle) {
      sub->add_option("--oracle", opt.oracle,
                      "oracle reward: reward file, URL, or implicit[:beta]");
    }
  };

  CLI::App* decode = app.add_subcommand("decode", "decode prompts, one JSON record per line");
  decode->add_option("--strategy", opt.strategy,
                     "greedy-sft|greedy-dpo|nucleus|aad|aad-beam|eft|bon");
  decode->add_option("--prompts", opt.prompts, "prompts JSONL file");
  add_sources(decode, true, false);
  add_decode_params(decode);
  add_common(decode);

  CLI::App* compare = app.add_subcommand("compare", "win-rate/reward comparison report");
  compare->add_option("--prompts", opt.prompts, "prompts JSONL file");
  compare->add_option("--method", opt.method, "designated method")->capture_default_str();
  compare->add_option("--baselines", opt.baselines, "comma-separated baselines")
      ->capture_default_str();
  compare->add_option("--out-dir", opt.out_dir, "directory for report.json and rows.csv")
      ->capture_default_str();
  add_sources(compare, true, true);
  add_decode_params(compare);
  add_common(compare);

  CLI::App* sweep = app.add_subcommand("bon-sweep", "best-of-n sweep table");
  sweep->add_option("--prompts", opt.prompts, "prompts JSONL file");
  sweep->add_option("--n-values", opt.n_values, "comma-separated candidate counts, ascending")
      ->capture_default_str();
  sweep->add_option("--picker", opt.sweep_pickers,
                    "additional picker reward locators (oracle is always swept)");
  sweep->add_option("--oracle", opt.oracle, "oracle reward locator");
  sweep->add_option("--dpo", opt.dpo, "aligned model locator");
  sweep->add_option("--sft", opt.sft, "reference model locator (for implicit rewards)");
  sweep->add_option("--out", opt.out, "output JSON path")->capture_default_str();
  add_decode_params(sweep);
  add_common(sweep);

  CLI::App* forge = app.add_subcommand("gen-data", "synthetic preference dataset");
  forge->add_option("--prompts", opt.prompts, "prompts JSONL file");
  forge->add_option("--out", opt.out, "output JSONL path")->capture_default_str();
  forge->add_option("--iteration", opt.iteration, "iteration tag for the dataset meta")
      ->capture_default_str();
  forge->add_option("--init", opt.init, "which model the next round retrains from: sft|dpo")
      ->capture_default_str();
  add_sources(forge, false, false);
  add_decode_params(forge);
  add_common(forge);

  CLI::App* serve = app.add_subcommand("serve-toy", "serve tabular models over HTTP");
  serve->add_option("--config", config_sink, "JSON config file (or env AAD_CONFIG)");
  serve->add_option("--dpo", opt.dpo, "aligned tabular model file");
  serve->add_option("--sft", opt.sft, "reference tabular model file");
  serve->add_option("--reward", opt.reward_file, "optional tabular reward file to serve");
  serve->add_option("--host", opt.host, "bind host")->capture_default_str();
  serve->add_option("--port", opt.port, "bind port (0 picks a free one)")
      ->capture_default_str();

  CLI::App* verify_cmd = app.add_subcommand("verify", "closed-form identity self-checks");
  verify_cmd->add_option("--config", config_sink, "JSON config file (or env AAD_CONFIG)");
  verify_cmd->add_option("--fixtures", opt.verify_fixtures, "randomized fixture count")
      ->capture_default_str();
  verify_cmd->add_option("--verify-seed", opt.verify_seed, "fixture seed")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (decode->parsed()) return cmd_decode(opt);
    if (compare->parsed()) return cmd_compare(opt);
    if (sweep->parsed()) return cmd_bon_sweep(opt);
    if (forge->parsed()) return cmd_gen_data(opt);
    if (serve->parsed()) return cmd_serve_toy(opt);
    if (verify_cmd->parsed()) return cmd_verify(opt);
    std::cerr << "error: no subcommand selected\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const BackendUnavailable& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return 3;
  } catch (const MalformedResponse& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return 3;
  } catch (const BindFailure& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return 3;
  } catch (const MaskedToken& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
