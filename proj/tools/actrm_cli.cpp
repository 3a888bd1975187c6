// Command-line front end. Every subcommand writes <out>/<subcommand>.json and
// prints a short summary. Exit codes: 0 success, 1 usage, 2 runtime failure.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "actrm/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = ".";
  bool seed_given() const { return seed_option && seed_option->count() > 0; }
  CLI::Option* seed_option = nullptr;
};

std::string out_path(const Globals& g, const std::string& name) { return (fs::path(g.out) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  actrm::write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_result(const Globals& g, const std::string& cmd, const ordered_json& j) {
  write_text(out_path(g, cmd + ".json"), j.dump(2) + "\n");
}

// Wall-clock time lives beside the result so results stay byte-reproducible.
void write_timing(const Globals& g, const std::string& cmd, std::chrono::steady_clock::time_point start) {
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text(out_path(g, cmd + ".timing.json"), ordered_json{{"command", cmd}, {"seconds", s}}.dump(2) + "\n");
}

actrm::ExperimentConfig load_config_arg(const Globals& g) {
  if (g.config.empty()) throw UsageError("--config <file> is required");
  if (!fs::exists(g.config)) throw UsageError("config file not found: " + g.config);
  auto c = actrm::load_config(g.config);
  if (g.seed_given()) {
    c.seed = g.seed;
    c.select.seed = g.seed;
  }
  return c;
}

ordered_json heads_json(const std::set<actrm::HeadLocation>& heads) {
  auto arr = ordered_json::array();
  for (const auto& l : heads) arr.push_back({l.layer, l.head});
  return arr;
}

std::string model_path_or_default(const Globals& g, const std::string& given) {
  return given.empty() ? out_path(g, "model.ckpt") : given;
}

// TRAIN records of one JSONL file, starting at `skip`, at most `n` (all if n < 0).
std::vector<actrm::PreferenceRecord> train_records(const std::string& path, int skip, int n) {
  auto recs = actrm::records_in(actrm::read_jsonl(path), actrm::Split::kTrain);
  if (skip < 0 || static_cast<std::size_t>(skip) > recs.size())
    throw actrm::ArgumentError("--skip " + std::to_string(skip) + " exceeds TRAIN size " + std::to_string(recs.size()));
  recs.erase(recs.begin(), recs.begin() + skip);
  if (n >= 0) {
    if (static_cast<std::size_t>(n) > recs.size())
      throw actrm::ArgumentError("--n " + std::to_string(n) + " exceeds available TRAIN records " +
                                 std::to_string(recs.size()));
    recs.resize(static_cast<std::size_t>(n));
  }
  if (recs.empty()) throw actrm::ArgumentError("no TRAIN records selected from " + path);
  return recs;
}

struct TrainModelArgs {
  actrm::PlantConfig defaults;
  int layers = defaults.model.n_layers, heads = defaults.model.n_heads, d_model = defaults.model.d_model;
  int examples = defaults.train_examples;
  long steps = defaults.train.steps;
  std::string criterion = defaults.criterion, prefix = defaults.mode_prefix, unprefixed = "both";
};

int cmd_train_model(const Globals& g, const TrainModelArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  actrm::PlantConfig pc;
  pc.model.n_layers = a.layers;
  pc.model.n_heads = a.heads;
  pc.model.d_model = a.d_model;
  pc.train.steps = a.steps;
  pc.train_examples = a.examples;
  pc.criterion = a.criterion;
  pc.mode_prefix = a.prefix;
  pc.unprefixed = a.unprefixed == "both" ? actrm::UnprefixedTargets::kBoth : actrm::UnprefixedTargets::kSharedCoin;
  pc.seed = g.seed;
  actrm::TrainResult tr;
  const auto model = actrm::train_planted_model(pc, &tr);
  const auto path = out_path(g, "model.ckpt");
  actrm::save_checkpoint(model, path);
  const auto held_out = actrm::gen_split(a.criterion, actrm::mix_seed(g.seed, 0x4e1d), 200);
  const double pre = actrm::verification_accuracy(model, held_out, a.prefix);
  const double plain = actrm::verification_accuracy(model, held_out);
  double tail = 0.0;
  const std::size_t k = std::min<std::size_t>(50, tr.losses.size());
  for (std::size_t i = tr.losses.size() - k; i < tr.losses.size(); ++i) tail += tr.losses[i];
  ordered_json j;
  j["command"] = "train-model";
  j["seed"] = g.seed;
  j["checkpoint"] = path;
  j["checkpoint_sha256"] = actrm::to_hex(actrm::sha256_of(actrm::checkpoint_bytes(model)));
  j["model"] = {{"n_layers", a.layers}, {"n_heads", a.heads}, {"d_model", a.d_model}};
  j["criterion"] = a.criterion;
  j["mode_prefix"] = a.prefix;
  j["unprefixed_targets"] = a.unprefixed;
  j["steps"] = a.steps;
  j["final_loss"] = k ? tail / static_cast<double>(k) : 0.0;
  j["prefixed_accuracy"] = pre;
  j["unprefixed_accuracy"] = plain;
  write_result(g, "train-model", j);
  write_timing(g, "train-model", t0);
  std::cout << "trained " << path << "\nprefixed accuracy " << pre << "  unprefixed accuracy " << plain << '\n';
  return 0;
}

struct GenDataArgs {
  std::string bias, criterion = "safety";
  int train_n = 80, eval_n = 920;
  std::size_t max_chars = actrm::kDefaultMaxResponseChars;
};

int cmd_gen_data(const Globals& g, const GenDataArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto bias = actrm::parse_bias(a.bias);
  const auto base = actrm::to_pairs(actrm::gen_split(a.criterion, actrm::mix_seed(g.seed, 0xba5e),
                                                     2 * (a.train_n + a.eval_n)));
  const auto recs = actrm::make_pairs(base, bias, g.seed, a.train_n, a.eval_n, a.max_chars);
  const auto path = out_path(g, a.bias + ".jsonl");
  actrm::write_jsonl(recs, path);
  std::size_t chosen_a = 0;
  for (const auto& r : recs) chosen_a += r.chosen == actrm::Choice::kA ? 1 : 0;
  ordered_json j;
  j["command"] = "gen-data";
  j["seed"] = g.seed;
  j["bias"] = a.bias;
  j["criterion"] = a.criterion;
  j["path"] = path;
  j["sha256"] = actrm::to_hex(actrm::sha256_of(actrm::records_to_jsonl(recs)));
  j["train"] = a.train_n;
  j["eval"] = a.eval_n;
  j["chosen_A"] = chosen_a;
  write_result(g, "gen-data", j);
  write_timing(g, "gen-data", t0);
  std::cout << "wrote " << recs.size() << " records (" << a.train_n << " train, " << a.eval_n << " eval) to " << path
            << '\n';
  return 0;
}

struct ExtractArgs {
  std::string model, data, criterion = "safety", prefix, profile_out;
  int n = -1, skip = 0;
};

int cmd_extract(const Globals& g, const ExtractArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = actrm::load_checkpoint(model_path_or_default(g, a.model));
  std::vector<actrm::PreferenceExample> exs;
  for (const auto& r : train_records(a.data, a.skip, a.n))
    for (auto& e : actrm::to_examples(r, a.criterion)) exs.push_back(std::move(e));
  const auto profile = actrm::extract_mean_activations(model, exs, actrm::find_criterion(a.criterion), a.prefix);
  const auto path = a.profile_out.empty() ? out_path(g, "profile.bin") : a.profile_out;
  actrm::save_profile(profile, path);
  ordered_json j;
  j["command"] = "extract";
  j["profile"] = path;
  j["criterion"] = a.criterion;
  j["n_examples"] = profile.n_examples;
  j["heads"] = profile.means.size();
  j["sha256"] = actrm::to_hex(actrm::sha256_of(actrm::profile_bytes(profile)));
  write_result(g, "extract", j);
  write_timing(g, "extract", t0);
  std::cout << "extracted means for " << profile.means.size() << " heads from " << profile.n_examples
            << " examples to " << path << '\n';
  return 0;
}

struct SelectArgs {
  std::string model, profile, data, profile_out;
  int n = -1, skip = 0;
  actrm::SelectHyper hyper;
  std::string readout = "raw_yes";
};

int cmd_select_heads(const Globals& g, SelectArgs a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = actrm::load_checkpoint(model_path_or_default(g, a.model));
  const auto in_path = a.profile.empty() ? out_path(g, "profile.bin") : a.profile;
  auto profile = actrm::load_profile(in_path, model.config);
  std::vector<actrm::PairItem> val;
  for (const auto& r : train_records(a.data, a.skip, a.n)) val.push_back(actrm::to_pair_item(r));
  a.hyper.seed = g.seed;
  const auto& crit = actrm::find_criterion(profile.criterion);
  const auto res = actrm::select_heads(model, profile, val, crit, a.hyper, actrm::parse_readout(a.readout));
  profile.selected = res.selected;
  const auto path = a.profile_out.empty() ? in_path : a.profile_out;
  actrm::save_profile(profile, path);
  std::ostringstream csv;
  actrm::write_trace_csv(csv, res.trace);
  write_text(out_path(g, "select-trace.csv"), csv.str());
  ordered_json j;
  j["command"] = "select-heads";
  j["seed"] = g.seed;
  j["profile"] = path;
  j["selected_heads"] = heads_json(res.selected);
  j["validation_pairs"] = val.size();
  j["steps"] = a.hyper.steps;
  j["validation_accuracy"] = actrm::mask_reward(model, profile, res.selected, val, crit);
  write_result(g, "select-heads", j);
  write_timing(g, "select-heads", t0);
  std::cout << "selected " << res.selected.size() << " heads:";
  for (const auto& l : res.selected) std::cout << ' ' << actrm::to_string(l);
  std::cout << "\nvalidation accuracy " << j["validation_accuracy"].get<double>() << '\n';
  return 0;
}

struct ScoreArgs {
  std::string model, profile, prompt, response, readout = "raw_yes";
};

int cmd_score(const Globals& g, const ScoreArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = actrm::load_checkpoint(model_path_or_default(g, a.model));
  const auto profile = actrm::load_profile(a.profile, model.config);
  const auto s = actrm::activation_rm_score(model, profile, a.prompt, a.response,
                                            actrm::find_criterion(profile.criterion), actrm::parse_readout(a.readout));
  ordered_json j;
  j["command"] = "score";
  j["criterion"] = profile.criterion;
  j["value"] = s.value;
  j["method"] = s.method;
  j["steered"] = s.steered;
  j["readout"] = a.readout;
  write_result(g, "score", j);
  write_timing(g, "score", t0);
  std::cout << "score " << s.value << (s.steered ? " (steered)" : " (no heads selected)") << '\n';
  return 0;
}

int cmd_eval(const Globals& g) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = load_config_arg(g);
  const auto in = actrm::load_inputs(c);
  actrm::EvalReport report;
  if (c.method == actrm::Method::kActivationRm) {
    auto run = actrm::run_activation_rm(c, in);
    actrm::save_profile(run.profile, out_path(g, "profile.bin"));
    std::ostringstream csv;
    actrm::write_trace_csv(csv, run.trace);
    write_text(out_path(g, "select-trace.csv"), csv.str());
    report = std::move(run.report);
  } else {
    report = actrm::run_baseline(c, in);
  }
  write_text(out_path(g, "eval.json"), actrm::report_text(report));
  write_timing(g, "eval", t0);
  std::cout << actrm::report_summary(report);
  if (report.errors) std::cerr << "warning: " << report.errors << " items failed and were scored incorrect\n";
  return 0;
}

int cmd_ablate(const Globals& g, const std::vector<int>& budgets) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = load_config_arg(g);
  const auto rows = actrm::shots_ablation(c, actrm::load_inputs(c), budgets);
  write_text(out_path(g, "ablation.csv"), actrm::ablation_csv(rows));
  ordered_json j;
  j["command"] = "ablate-shots";
  j["seed"] = c.seed;
  auto arr = ordered_json::array();
  for (const auto& r : rows)
    arr.push_back({{"budget", r.budget}, {"overall", r.report.overall}, {"macro", r.report.macro}});
  j["rows"] = arr;
  write_result(g, "ablate-shots", j);
  write_timing(g, "ablate-shots", t0);
  std::cout << actrm::ablation_csv(rows);
  return 0;
}

int cmd_report(const Globals& g, const std::string& given) {
  const auto path = given.empty() ? out_path(g, "eval.json") : given;
  const auto bytes = actrm::read_file_bytes(path);
  nlohmann::json rep;
  try {
    rep = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw actrm::ParseError(path + ": not a JSON report: " + e.what(), 0);
  }
  if (!rep.is_object() || rep.value("schema", "") != "actrm-eval-report")
    throw actrm::ParseError(path + ": not an actrm-eval-report", 0);
  const auto check = actrm::verify_report_json(rep);
  ordered_json j;
  j["command"] = "report";
  j["report"] = path;
  j["consistent"] = check.consistent;
  j["overall"] = check.overall;
  j["macro"] = check.macro;
  write_result(g, "report", j);
  std::cout << "method " << rep.at("method").get<std::string>() << '\n';
  for (const auto& s : rep.at("splits"))
    std::cout << "  " << s.at("name").get<std::string>() << ": " << s.at("accuracy").get<double>() << " ("
              << s.at("n").get<std::size_t>() << " items)\n";
  std::cout << "overall " << check.overall << "  macro " << check.macro << "  recomputed totals "
            << (check.consistent ? "match" : "DO NOT match") << '\n';
  if (!check.consistent) throw actrm::Error("report aggregates do not match its items");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Activation reward model experiments on a tiny transformer."};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  g.seed_option = app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--config", g.config, "Experiment config file (JSON)");
  app.add_option("--out", g.out, "Output directory");

  TrainModelArgs tm;
  auto* train = app.add_subcommand("train-model", "Train the planted dual-mode model");
  train->add_option("--layers", tm.layers);
  train->add_option("--heads", tm.heads);
  train->add_option("--d-model", tm.d_model);
  train->add_option("--steps", tm.steps);
  train->add_option("--examples", tm.examples, "Task examples in the training split");
  train->add_option("--criterion", tm.criterion);
  train->add_option("--prefix", tm.prefix, "Mode prefix");
  train->add_option("--unprefixed", tm.unprefixed, "Unprefixed targets: both | coin")
      ->check(CLI::IsMember({"both", "coin"}));

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a biased preference dataset (JSONL)");
  gen->add_option("--bias", gd.bias, "length | format | positivity | none")->required();
  gen->add_option("--criterion", gd.criterion);
  gen->add_option("--train", gd.train_n, "TRAIN records");
  gen->add_option("--eval", gd.eval_n, "EVAL records");
  gen->add_option("--max-chars", gd.max_chars);

  ExtractArgs ex;
  auto* extract = app.add_subcommand("extract", "Extract mean head activations from TRAIN records");
  extract->add_option("--model", ex.model, "Checkpoint (default <out>/model.ckpt)");
  extract->add_option("--data", ex.data, "JSONL dataset")->required();
  extract->add_option("--n", ex.n, "TRAIN records to use (default all)");
  extract->add_option("--skip", ex.skip, "TRAIN records to skip first");
  extract->add_option("--criterion", ex.criterion);
  extract->add_option("--prefix", ex.prefix, "Context prefix for extraction queries");
  extract->add_option("--profile-out", ex.profile_out, "Default <out>/profile.bin");

  SelectArgs sa;
  auto* select = app.add_subcommand("select-heads", "Select heads with REINFORCE on validation records");
  select->add_option("--model", sa.model);
  select->add_option("--profile", sa.profile, "Default <out>/profile.bin");
  select->add_option("--data", sa.data, "JSONL dataset")->required();
  select->add_option("--n", sa.n);
  select->add_option("--skip", sa.skip);
  select->add_option("--steps", sa.hyper.steps);
  select->add_option("--batch-masks", sa.hyper.batch_masks);
  select->add_option("--lr", sa.hyper.learning_rate);
  select->add_option("--l0", sa.hyper.l0_penalty);
  select->add_option("--readout", sa.readout);
  select->add_option("--profile-out", sa.profile_out, "Default: overwrite --profile");

  ScoreArgs sc;
  auto* score = app.add_subcommand("score", "Steered reward score for one response");
  score->add_option("--model", sc.model, "Checkpoint (default <out>/model.ckpt)");
  score->add_option("--profile", sc.profile)->required();
  score->add_option("--prompt", sc.prompt)->required();
  score->add_option("--response", sc.response)->required();
  score->add_option("--readout", sc.readout);

  auto* eval = app.add_subcommand("eval", "Run the configured method on EVAL records");

  std::vector<int> budgets;
  auto* ablate = app.add_subcommand("ablate-shots", "Activation RM accuracy across shot budgets");
  ablate->add_option("--budgets", budgets, "Comma-separated budgets")->required()->delimiter(',');

  std::string report_path;
  auto* report = app.add_subcommand("report", "Check and summarize an evaluation report");
  report->add_option("--report", report_path, "Default <out>/eval.json");

  // The first token that is not a global option or its value names the subcommand.
  for (int i = 1; i < argc; ++i) {
    const std::string_view arg = argv[i];
    if (arg == "--seed" || arg == "--config" || arg == "--out") {
      ++i;
      continue;
    }
    if (arg.starts_with("-")) continue;
    if (!app.get_subcommand_no_throw(std::string(arg))) {
      std::cerr << "error: unknown subcommand '" << arg << "'\n\n" << app.help();
      return 1;
    }
    break;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    fs::create_directories(g.out);
    if (*train) return cmd_train_model(g, tm);
    if (*gen) return cmd_gen_data(g, gd);
    if (*extract) return cmd_extract(g, ex);
    if (*select) return cmd_select_heads(g, sa);
    if (*score) return cmd_score(g, sc);
    if (*eval) return cmd_eval(g);
    if (*ablate) return cmd_ablate(g, budgets);
    if (*report) return cmd_report(g, report_path);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const actrm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const actrm::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
