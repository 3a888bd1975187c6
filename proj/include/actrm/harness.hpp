#pragma once

// Experiment orchestration: config, budgeted extraction/selection, pairwise
// evaluation and reports.
//
// A report is a pure function of (checkpoint, datasets, config). Wall-clock
// timing is kept out of it so two runs compare byte for byte.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "actrm/benchgen.hpp"
#include "actrm/checkpoint.hpp"
#include "actrm/corpus.hpp"
#include "actrm/extract.hpp"
#include "actrm/scoring.hpp"
#include "actrm/select.hpp"
#include "actrm/train.hpp"

namespace actrm {

enum class Method { kActivationRm, kZsJudge, kFsJudge, kZsGenScore, kVote, kSav };
enum class TiePolicy { kAWins, kHalfCredit };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kActivationRm: return "activation_rm";
    case Method::kZsJudge: return "zs_judge";
    case Method::kFsJudge: return "fs_judge";
    case Method::kZsGenScore: return "zs_gen_score";
    case Method::kVote: return "vote";
    case Method::kSav: return "sav";
  }
  return "";
}

inline Method parse_method(std::string_view s) {
  for (auto m : {Method::kActivationRm, Method::kZsJudge, Method::kFsJudge, Method::kZsGenScore, Method::kVote,
                 Method::kSav})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

inline std::string to_string(TiePolicy t) { return t == TiePolicy::kAWins ? "a_wins" : "half_credit"; }

inline TiePolicy parse_tie_policy(std::string_view s) {
  if (s == "a_wins") return TiePolicy::kAWins;
  if (s == "half_credit") return TiePolicy::kHalfCredit;
  throw ConfigError("unknown tie_policy '" + std::string(s) + "'");
}

inline constexpr int kMaxShotBudget = 130;

struct ExperimentConfig {
  std::string checkpoint;
  std::vector<std::pair<std::string, std::string>> datasets;  // split name -> JSONL path, sorted by name
  std::string criterion = "safety";
  Method method = Method::kActivationRm;
  std::optional<int> budget;  // records; absent = min(130, TRAIN size)
  double extraction_fraction = 0.5;
  std::string extraction_prefix;
  Readout readout = Readout::kRawYes;
  TiePolicy tie_policy = TiePolicy::kAWins;
  std::uint64_t seed = 0;
  SelectHyper select;
  int vote_k = 3;
  double vote_temperature = 0.7;
  int sav_heads = 16;
  int fs_shots = 8;

  void validate() const {
    if (budget && *budget < 0) throw ConfigError("budget must be >= 0");
    if (!(extraction_fraction >= 0.0 && extraction_fraction <= 1.0))
      throw ConfigError("extraction_fraction must be in [0,1]");
    if (!extraction_prefix.empty()) Vocab::check_text(extraction_prefix, "extraction_prefix");
    find_criterion(criterion);
    select.validate();
    check_vote_k(vote_k);
    if (!(vote_temperature >= 0.0)) throw ConfigError("vote temperature must be >= 0");
    if (sav_heads < 1) throw ConfigError("sav_heads must be >= 1");
    if (fs_shots < 0) throw ConfigError("fs_shots must be >= 0");
  }
};

// Config file: JSON object; unknown keys are errors.
inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["checkpoint"] = c.checkpoint;
  nlohmann::ordered_json ds = nlohmann::ordered_json::object();
  for (const auto& [name, path] : c.datasets) ds[name] = path;
  j["datasets"] = ds;
  j["criterion"] = c.criterion;
  j["method"] = to_string(c.method);
  if (c.budget) j["budget"] = *c.budget;
  j["extraction_fraction"] = c.extraction_fraction;
  j["extraction_prefix"] = c.extraction_prefix;
  j["readout"] = to_string(c.readout);
  j["tie_policy"] = to_string(c.tie_policy);
  j["seed"] = c.seed;
  j["select"] = {{"steps", c.select.steps},
                 {"batch_masks", c.select.batch_masks},
                 {"learning_rate", c.select.learning_rate},
                 {"l0_penalty", c.select.l0_penalty},
                 {"init_inclusion_prob", c.select.init_inclusion_prob},
                 {"threshold", c.select.threshold}};
  j["vote"] = {{"k", c.vote_k}, {"temperature", c.vote_temperature}};
  j["sav_heads"] = c.sav_heads;
  j["fs_shots"] = c.fs_shots;
  return j;
}

namespace detail {

template <typename J>
void reject_unknown(const J& j, std::initializer_list<std::string_view> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <typename T, typename J>
T get_as(const J& j, const char* key, const std::string& where) {
  try {
    return j.at(key).template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::get_as;
  detail::reject_unknown(j,
                         {"checkpoint", "datasets", "criterion", "method", "budget", "extraction_fraction",
                          "extraction_prefix", "readout", "tie_policy", "seed", "select", "vote", "sav_heads",
                          "fs_shots"},
                         "config");
  ExperimentConfig c;
  if (j.contains("checkpoint")) c.checkpoint = get_as<std::string>(j, "checkpoint", "config");
  if (j.contains("datasets")) {
    const auto& ds = j.at("datasets");
    if (!ds.is_object()) throw ConfigError("config: 'datasets' must map split names to paths");
    for (const auto& [name, path] : ds.items()) {
      if (!path.is_string()) throw ConfigError("config: dataset '" + name + "' path must be a string");
      c.datasets.emplace_back(name, path.get<std::string>());
    }
  }
  if (j.contains("criterion")) c.criterion = get_as<std::string>(j, "criterion", "config");
  if (j.contains("method")) c.method = parse_method(get_as<std::string>(j, "method", "config"));
  if (j.contains("budget")) c.budget = get_as<int>(j, "budget", "config");
  if (j.contains("extraction_fraction")) c.extraction_fraction = get_as<double>(j, "extraction_fraction", "config");
  if (j.contains("extraction_prefix")) c.extraction_prefix = get_as<std::string>(j, "extraction_prefix", "config");
  if (j.contains("readout")) {
    try {
      c.readout = parse_readout(get_as<std::string>(j, "readout", "config"));
    } catch (const ArgumentError& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("tie_policy")) c.tie_policy = parse_tie_policy(get_as<std::string>(j, "tie_policy", "config"));
  if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j, "seed", "config");
  if (j.contains("select")) {
    const auto& s = j.at("select");
    detail::reject_unknown(s, {"steps", "batch_masks", "learning_rate", "l0_penalty", "init_inclusion_prob", "threshold"},
                           "config.select");
    if (s.contains("steps")) c.select.steps = get_as<int>(s, "steps", "config.select");
    if (s.contains("batch_masks")) c.select.batch_masks = get_as<int>(s, "batch_masks", "config.select");
    if (s.contains("learning_rate")) c.select.learning_rate = get_as<double>(s, "learning_rate", "config.select");
    if (s.contains("l0_penalty")) c.select.l0_penalty = get_as<double>(s, "l0_penalty", "config.select");
    if (s.contains("init_inclusion_prob"))
      c.select.init_inclusion_prob = get_as<double>(s, "init_inclusion_prob", "config.select");
    if (s.contains("threshold")) c.select.threshold = get_as<double>(s, "threshold", "config.select");
  }
  if (j.contains("vote")) {
    const auto& v = j.at("vote");
    detail::reject_unknown(v, {"k", "temperature"}, "config.vote");
    if (v.contains("k")) c.vote_k = get_as<int>(v, "k", "config.vote");
    if (v.contains("temperature")) c.vote_temperature = get_as<double>(v, "temperature", "config.vote");
  }
  if (j.contains("sav_heads")) c.sav_heads = get_as<int>(j, "sav_heads", "config");
  if (j.contains("fs_shots")) c.fs_shots = get_as<int>(j, "fs_shots", "config");
  std::sort(c.datasets.begin(), c.datasets.end());
  c.select.seed = c.seed;
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const EncodingError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig config_from_text(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

// Relative paths in the file resolve against the file's directory.
inline ExperimentConfig load_config(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  auto c = config_from_text(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  const auto base = std::filesystem::path(path).parent_path();
  const auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.checkpoint);
  for (auto& [name, p] : c.datasets) resolve(p);
  return c;
}

inline Digest config_digest(const ExperimentConfig& c) { return sha256_of(config_to_json(c).dump()); }

struct Dataset {
  std::string name;
  std::vector<PreferenceRecord> records;
  Digest hash{};
};

// Everything a run reads, already loaded.
struct ExperimentInputs {
  Parameters<float> model;
  Digest checkpoint_hash{};
  std::vector<Dataset> datasets;
};

inline Dataset make_dataset(std::string name, std::vector<PreferenceRecord> records) {
  Dataset d{std::move(name), std::move(records), {}};
  d.hash = sha256_of(records_to_jsonl(d.records));
  return d;
}

inline ExperimentInputs make_inputs(Parameters<float> model, std::vector<Dataset> datasets) {
  ExperimentInputs in{std::move(model), {}, std::move(datasets)};
  in.checkpoint_hash = sha256_of(checkpoint_bytes(in.model));
  std::sort(in.datasets.begin(), in.datasets.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return in;
}

inline ExperimentInputs load_inputs(const ExperimentConfig& c) {
  if (c.checkpoint.empty()) throw ConfigError("config: 'checkpoint' is required");
  if (c.datasets.empty()) throw ConfigError("config: 'datasets' is empty");
  const auto ckpt = read_file_bytes(c.checkpoint);
  ExperimentInputs in{parse_checkpoint(ckpt), sha256_of(ckpt), {}};
  for (const auto& [name, path] : c.datasets) {
    const auto bytes = read_file_bytes(path);
    const std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    in.datasets.push_back({name, records_from_jsonl(text), sha256_of(bytes)});
  }
  return in;
}

// Per-item outcome. `credit` is 1, 0, or 0.5 for a tie under HALF_CREDIT.
struct ItemResult {
  std::string split;
  std::string id;
  Choice choice = Choice::kA;
  Choice chosen = Choice::kA;
  bool tie = false;
  double credit = 0.0;
  std::optional<double> score_a;
  std::optional<double> score_b;
  std::string error;
};

inline double item_credit(const PairDecision& d, Choice chosen, TiePolicy policy) {
  if (d.tie && policy == TiePolicy::kHalfCredit) return 0.5;
  return d.choice == chosen ? 1.0 : 0.0;
}

struct SplitAccuracy {
  std::string name;
  std::size_t n = 0;
  double credit = 0.0;
  double accuracy = 0.0;
};

struct EvalReport {
  std::string method;
  std::string criterion;
  TiePolicy tie_policy = TiePolicy::kAWins;
  Readout readout = Readout::kRawYes;
  std::uint64_t seed = 0;
  Digest checkpoint_hash{};
  Digest config_hash{};
  std::vector<std::pair<std::string, Digest>> dataset_hashes;
  std::optional<std::pair<int, int>> budget_split;  // extraction, selection records
  std::optional<std::vector<HeadLocation>> selected_heads;
  std::vector<SplitAccuracy> splits;
  double overall = 0.0;
  double macro = 0.0;
  std::size_t ties = 0;
  std::size_t errors = 0;
  std::vector<ItemResult> items;
  double seconds = 0.0;  // not serialized
};

// Per-split, overall (item-weighted) and macro (split-mean) accuracy from the
// items, in item order.
inline void aggregate(EvalReport& r) {
  r.splits.clear();
  std::map<std::string, std::size_t> index;
  double total = 0.0;
  r.ties = r.errors = 0;
  for (const auto& it : r.items) {
    auto [pos, fresh] = index.emplace(it.split, r.splits.size());
    if (fresh) r.splits.push_back({it.split, 0, 0.0, 0.0});
    auto& s = r.splits[pos->second];
    ++s.n;
    s.credit += it.credit;
    total += it.credit;
    r.ties += it.tie ? 1 : 0;
    r.errors += it.error.empty() ? 0 : 1;
  }
  if (r.items.empty()) throw ArgumentError("report: no evaluated items");
  double macro = 0.0;
  for (auto& s : r.splits) {
    s.accuracy = s.credit / static_cast<double>(s.n);
    macro += s.accuracy;
  }
  r.overall = total / static_cast<double>(r.items.size());
  r.macro = macro / static_cast<double>(r.splits.size());
}

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = "actrm-eval-report";
  j["version"] = 1;
  j["method"] = r.method;
  j["criterion"] = r.criterion;
  j["tie_policy"] = to_string(r.tie_policy);
  j["readout"] = to_string(r.readout);
  j["seed"] = r.seed;
  nlohmann::ordered_json hashes;
  hashes["checkpoint"] = to_hex(r.checkpoint_hash);
  hashes["config"] = to_hex(r.config_hash);
  nlohmann::ordered_json ds = nlohmann::ordered_json::object();
  for (const auto& [name, h] : r.dataset_hashes) ds[name] = to_hex(h);
  hashes["datasets"] = ds;
  j["hashes"] = hashes;
  if (r.budget_split) j["budget"] = {{"extraction", r.budget_split->first}, {"selection", r.budget_split->second}};
  if (r.selected_heads) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& l : *r.selected_heads) arr.push_back({l.layer, l.head});
    j["selected_heads"] = arr;
  }
  auto splits = nlohmann::ordered_json::array();
  for (const auto& s : r.splits)
    splits.push_back({{"name", s.name}, {"n", s.n}, {"credit", s.credit}, {"accuracy", s.accuracy}});
  j["splits"] = splits;
  j["overall"] = r.overall;
  j["macro"] = r.macro;
  j["ties"] = r.ties;
  j["errors"] = r.errors;
  auto items = nlohmann::ordered_json::array();
  for (const auto& it : r.items) {
    nlohmann::ordered_json o;
    o["split"] = it.split;
    o["id"] = it.id;
    o["choice"] = to_string(it.choice);
    o["chosen"] = to_string(it.chosen);
    o["tie"] = it.tie;
    o["credit"] = it.credit;
    if (it.score_a) o["score_A"] = *it.score_a;
    if (it.score_b) o["score_B"] = *it.score_b;
    if (!it.error.empty()) o["error"] = it.error;
    items.push_back(o);
  }
  j["items"] = items;
  return j;
}

inline std::string report_text(const EvalReport& r) { return report_to_json(r).dump(2) + "\n"; }

// Recomputes the aggregates of a serialized report from its items.
struct ReportCheck {
  bool consistent = false;
  double overall = 0.0;
  double macro = 0.0;
};

inline ReportCheck verify_report_json(const nlohmann::json& j) {
  std::map<std::string, std::pair<double, std::size_t>> per;
  std::vector<std::string> order;
  double total = 0.0;
  const auto& items = j.at("items");
  for (const auto& it : items) {
    const auto split = it.at("split").get<std::string>();
    if (!per.contains(split)) order.push_back(split);
    auto& [credit, n] = per[split];
    credit += it.at("credit").get<double>();
    ++n;
    total += it.at("credit").get<double>();
  }
  ReportCheck c;
  if (items.empty()) return c;
  c.overall = total / static_cast<double>(items.size());
  for (const auto& s : order) c.macro += per[s].first / static_cast<double>(per[s].second);
  c.macro /= static_cast<double>(order.size());
  c.consistent = c.overall == j.at("overall").get<double>() && c.macro == j.at("macro").get<double>();
  return c;
}

inline std::string report_summary(const EvalReport& r) {
  std::ostringstream os;
  os << "method " << r.method << "  criterion " << r.criterion << "  tie policy " << to_string(r.tie_policy) << '\n';
  for (const auto& s : r.splits) os << "  " << s.name << ": " << s.accuracy << " (" << s.credit << "/" << s.n << ")\n";
  os << "overall " << r.overall << "  macro " << r.macro << "  ties " << r.ties << "  errors " << r.errors << '\n';
  if (r.selected_heads) {
    os << "selected heads:";
    for (const auto& l : *r.selected_heads) os << ' ' << to_string(l);
    os << '\n';
  }
  return os.str();
}

namespace detail {

inline EvalReport report_shell(const ExperimentConfig& c, const ExperimentInputs& in) {
  EvalReport r;
  r.method = to_string(c.method);
  r.criterion = c.criterion;
  r.tie_policy = c.tie_policy;
  r.readout = c.readout;
  r.seed = c.seed;
  r.checkpoint_hash = in.checkpoint_hash;
  r.config_hash = config_digest(c);
  for (const auto& d : in.datasets) r.dataset_hashes.emplace_back(d.name, d.hash);
  return r;
}

inline void check_eval_present(const ExperimentInputs& in) {
  std::size_t n = 0;
  for (const auto& d : in.datasets) n += records_in(d.records, Split::kEval).size();
  if (n == 0) throw ArgumentError("no EVAL records in any dataset");
}

// TRAIN records of all datasets, interleaved round-robin in dataset order.
inline std::vector<PreferenceRecord> pooled_train(const ExperimentInputs& in) {
  std::vector<std::vector<PreferenceRecord>> per;
  for (const auto& d : in.datasets) per.push_back(records_in(d.records, Split::kTrain));
  std::vector<PreferenceRecord> out;
  for (std::size_t i = 0;; ++i) {
    bool any = false;
    for (const auto& p : per)
      if (i < p.size()) {
        out.push_back(p[i]);
        any = true;
      }
    if (!any) break;
  }
  return out;
}

template <typename Decide>
void evaluate_items(EvalReport& r, const ExperimentInputs& in, TiePolicy policy, Decide&& decide) {
  for (const auto& d : in.datasets) {
    for (const auto& rec : d.records) {
      if (rec.split != Split::kEval) continue;
      ItemResult it;
      it.split = d.name;
      it.id = rec.id;
      it.chosen = rec.chosen;
      const PairDecision dec = decide(rec, it);
      if (it.error.empty()) {
        it.choice = dec.choice;
        it.tie = dec.tie;
        it.credit = item_credit(dec, rec.chosen, policy);
        if (dec.score_a) it.score_a = dec.score_a->value;
        if (dec.score_b) it.score_b = dec.score_b->value;
      } else {
        it.credit = 0.0;
      }
      r.items.push_back(std::move(it));
    }
  }
  aggregate(r);
}

}  // namespace detail

struct BudgetSplit {
  std::vector<PreferenceRecord> extraction;
  std::vector<PreferenceRecord> selection;
};

// The first `budget` pooled TRAIN records: round(budget * fraction) for
// extraction (at least one), the rest for selection (at least one).
inline BudgetSplit split_budget(const std::vector<PreferenceRecord>& train, int budget, double fraction) {
  if (budget < 2) throw ArgumentError("budget must be >= 2 records, got " + std::to_string(budget));
  if (static_cast<std::size_t>(budget) > train.size())
    throw ArgumentError("budget " + std::to_string(budget) + " exceeds TRAIN size " + std::to_string(train.size()));
  int n_ext = static_cast<int>(std::lround(budget * fraction));
  n_ext = std::clamp(n_ext, 1, budget - 1);
  BudgetSplit s;
  s.extraction.assign(train.begin(), train.begin() + n_ext);
  s.selection.assign(train.begin() + n_ext, train.begin() + budget);
  return s;
}

inline int effective_budget(const ExperimentConfig& c, std::size_t train_size) {
  if (c.budget) return *c.budget;
  return static_cast<int>(std::min<std::size_t>(kMaxShotBudget, train_size));
}

struct ActivationRmRun {
  SteeringProfile profile;
  EvalReport report;
  std::vector<SelectTraceRow> trace;
};

inline ActivationRmRun run_activation_rm(const ExperimentConfig& c, const ExperimentInputs& in) {
  c.validate();
  detail::check_eval_present(in);
  const auto& crit = find_criterion(c.criterion);
  const auto train = detail::pooled_train(in);
  if (train.size() < 2) throw ArgumentError("activation RM needs >= 2 TRAIN records, have " + std::to_string(train.size()));
  const auto budget = split_budget(train, effective_budget(c, train.size()), c.extraction_fraction);

  std::vector<PreferenceExample> ext;
  for (const auto& r : budget.extraction)
    for (auto& e : to_examples(r, c.criterion)) ext.push_back(std::move(e));
  std::vector<PairItem> val;
  for (const auto& r : budget.selection) val.push_back(to_pair_item(r));

  ActivationRmRun run;
  run.profile = extract_mean_activations(in.model, ext, crit, c.extraction_prefix);
  SelectHyper sh = c.select;
  sh.seed = c.seed;
  auto sel = select_heads(in.model, run.profile, val, crit, sh, c.readout);
  run.profile.selected = sel.selected;
  run.trace = std::move(sel.trace);

  run.report = detail::report_shell(c, in);
  run.report.budget_split = std::make_pair(static_cast<int>(budget.extraction.size()),
                                           static_cast<int>(budget.selection.size()));
  run.report.selected_heads = std::vector<HeadLocation>(sel.selected.begin(), sel.selected.end());
  const auto inj = run.profile.injection();
  detail::evaluate_items(run.report, in, c.tie_policy, [&](const PreferenceRecord& rec, ItemResult&) {
    const auto qa = scalar_query(in.model, rec.prompt, rec.response_a, crit);
    const auto qb = scalar_query(in.model, rec.prompt, rec.response_b, crit);
    const double a = readout_value(next_token_distribution(in.model, qa, &inj), c.readout);
    const double b = readout_value(next_token_distribution(in.model, qb, &inj), c.readout);
    return pair_from_scores(RewardScore{a, "activation_rm", true}, RewardScore{b, "activation_rm", true});
  });
  return run;
}

inline EvalReport run_baseline(const ExperimentConfig& c, const ExperimentInputs& in) {
  c.validate();
  if (c.method == Method::kActivationRm) return run_activation_rm(c, in).report;
  detail::check_eval_present(in);
  const auto& crit = find_criterion(c.criterion);
  auto report = detail::report_shell(c, in);
  const auto& model = in.model;

  switch (c.method) {
    case Method::kZsGenScore:
      detail::evaluate_items(report, in, c.tie_policy, [&](const PreferenceRecord& rec, ItemResult&) {
        return pair_from_scores(zs_generative_score(model, rec.prompt, rec.response_a, crit, c.readout),
                                zs_generative_score(model, rec.prompt, rec.response_b, crit, c.readout));
      });
      break;
    case Method::kZsJudge:
      detail::evaluate_items(report, in, c.tie_policy, [&](const PreferenceRecord& rec, ItemResult&) {
        return judge_prefer(model, rec.prompt, rec.response_a, rec.response_b, crit);
      });
      break;
    case Method::kFsJudge: {
      // Shots are drawn once per dataset from its TRAIN split.
      std::map<std::string, std::vector<SolvedRankedExample>> shots;
      Rng rng(mix_seed(c.seed, 0xf5));
      for (const auto& d : in.datasets) {
        auto pool = records_in(d.records, Split::kTrain);
        if (pool.empty()) throw ArgumentError("fs_judge: dataset '" + d.name + "' has no TRAIN records");
        rng.shuffle(pool);
        auto& s = shots[d.name];
        for (std::size_t i = 0; i < pool.size() && i < static_cast<std::size_t>(c.fs_shots); ++i)
          s.push_back({pool[i].prompt, pool[i].response_a, pool[i].response_b, pool[i].chosen == Choice::kA});
      }
      detail::evaluate_items(report, in, c.tie_policy, [&](const PreferenceRecord& rec, ItemResult& it) {
        try {
          return judge_prefer(model, rec.prompt, rec.response_a, rec.response_b, crit, shots.at(it.split));
        } catch (const RenderError& e) {
          it.error = e.what();
          return PairDecision{};
        }
      });
      break;
    }
    case Method::kVote: {
      std::size_t k = 0;
      detail::evaluate_items(report, in, c.tie_policy, [&](const PreferenceRecord& rec, ItemResult&) {
        return vote_prefer(model, rec.prompt, rec.response_a, rec.response_b, crit, c.vote_k, c.vote_temperature,
                           mix_seed(c.seed, k++));
      });
      break;
    }
    case Method::kSav: {
      const auto train = detail::pooled_train(in);
      const auto n = std::min<std::size_t>(static_cast<std::size_t>(effective_budget(c, train.size())), train.size());
      std::vector<PreferenceExample> few;
      for (std::size_t i = 0; i < n; ++i)
        for (auto& e : to_examples(train[i], c.criterion)) few.push_back(std::move(e));
      const auto sav = fit_sav(model, few, crit, c.sav_heads);
      detail::evaluate_items(report, in, c.tie_policy, [&](const PreferenceRecord& rec, ItemResult&) {
        return sav_prefer(model, sav, rec.prompt, rec.response_a, rec.response_b, crit);
      });
      break;
    }
    case Method::kActivationRm: break;
  }
  return report;
}

inline EvalReport run_experiment(const ExperimentConfig& c, const ExperimentInputs& in) {
  return c.method == Method::kActivationRm ? run_activation_rm(c, in).report : run_baseline(c, in);
}

struct AblationRow {
  int budget = 0;
  EvalReport report;
};

// Reruns the activation RM per budget with the config's seed. Rows come back
// in the given order; no trend is assumed.
inline std::vector<AblationRow> shots_ablation(const ExperimentConfig& c, const ExperimentInputs& in,
                                               const std::vector<int>& budgets) {
  const auto train_n = detail::pooled_train(in).size();
  for (int b : budgets)
    if (b < 0 || static_cast<std::size_t>(b) > train_n)
      throw ArgumentError("ablation budget " + std::to_string(b) + " exceeds TRAIN size " + std::to_string(train_n));
  std::vector<AblationRow> rows;
  for (int b : budgets) {
    ExperimentConfig cb = c;
    cb.method = Method::kActivationRm;
    cb.budget = b;
    rows.push_back({b, run_activation_rm(cb, in).report});
  }
  return rows;
}

// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "budget,overall,macro\n";
  for (const auto& r : rows)
    out += std::to_string(r.budget) + ',' + format_double(r.report.overall) + ',' + format_double(r.report.macro) + '\n';
  return out;
}

// The planted dual-mode model: a tiny model taught to verify the criterion
// only when the mode prefix precedes the query.
struct PlantConfig {
  ModelConfig model;
  std::string criterion = "safety";
  std::string mode_prefix = "[[[[ ";  // characters that never occur in task text
  UnprefixedTargets unprefixed = UnprefixedTargets::kBoth;
  int train_examples = 4000;
  TrainHyper train;
  std::uint64_t seed = 0;

  PlantConfig() {
    model.n_layers = 1;
    model.n_heads = 8;
    model.d_model = 16;
    model.vocab_size = Vocab::size();
    train.steps = 3000;
    train.batch = 16;
    train.learning_rate = 0.003;
    train.optimizer = Optimizer::kAdam;
    train.targets = LossTargets::kFinalToken;
  }
};

inline Parameters<float> train_planted_model(const PlantConfig& pc, TrainResult* result = nullptr) {
  ModelConfig mc = pc.model;
  mc.seed = mix_seed(pc.seed, 0x3011);
  mc.validate();
  auto params = init_params<float>(mc);
  const auto split = gen_split(pc.criterion, mix_seed(pc.seed, 0x7a1), pc.train_examples);
  const auto corpus = make_dual_mode_corpus(split, pc.mode_prefix, mix_seed(pc.seed, 0xc0), pc.unprefixed);
  TrainHyper h = pc.train;
  h.seed = mix_seed(pc.seed, 0x7e);
  return train_lm(params, corpus, h, result);
}

// Fraction of examples whose YES/NO argmax matches the label, with the
// query optionally preceded by `context_prefix`.
template <typename T>
double verification_accuracy(const Parameters<T>& model, const std::vector<PreferenceExample>& examples,
                             std::string_view context_prefix = {}) {
  if (examples.empty()) throw ArgumentError("verification accuracy: no examples");
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    const auto q = scalar_query(model, ex.prompt, ex.response, find_criterion(ex.criterion), context_prefix);
    const auto d = next_token_distribution(model, q);
    correct += (d[tok::kYes] > d[tok::kNo]) == ex.label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

}  // namespace actrm
