// Acceptance checks A1-A7. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <regex>
#include <string>
#include <vector>

#include "actrm/harness.hpp"

namespace {

using namespace actrm;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
  void note(const std::string& s) {
    if (!detail.empty()) detail += "; ";
    detail += s;
  }
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

ModelConfig small_config(int layers, int heads, int d, std::uint64_t seed, int max_context = 128) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.vocab_size = Vocab::size();
  c.max_context = max_context;
  c.seed = seed;
  return c;
}

template <typename T>
void perturb(Parameters<T>& p, std::uint64_t seed, double sd) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> n(0.0, sd);
  for (auto& v : p.data) v = static_cast<T>(v + n(gen));
}

std::vector<int> random_tokens(std::mt19937_64& gen, std::size_t n, int vocab) {
  std::uniform_int_distribution<int> dist(0, vocab - 1);
  std::vector<int> out(n);
  for (auto& t : out) t = dist(gen);
  return out;
}

// ---------------------------------------------------------------- A1

Outcome a1() {
  Outcome o;
  auto p = init_params<float>(small_config(2, 4, 16, 11));
  perturb(p, 2, 0.05);
  std::mt19937_64 gen(1);

  int identical = 0;
  InjectionSpec empty;
  for (int i = 0; i < 100; ++i) {
    const auto toks = random_tokens(gen, 1 + gen() % 60, p.config.vocab_size);
    identical += forward(p, toks).logits == forward(p, toks, {}, &empty).logits;
  }
  o.require(identical == 100, "empty injection differs on " + std::to_string(100 - identical) + " inputs");

  double worst_sum = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto d = next_token_distribution(p, random_tokens(gen, 1 + gen() % 60, p.config.vocab_size));
    double s = 0.0;
    for (double v : d) s += v;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }
  o.require(worst_sum <= 1e-6, "softmax sum off by " + sci(worst_sum));

  auto pd = init_params<double>(small_config(1, 2, 8, 21));
  perturb(pd, 4, 0.3);
  const std::vector<TokenSeq> batch = {{1, 40, 41, 42, 43, 3}, {1, 50, 7, 60, 4}};
  std::vector<double> grad;
  batch_loss_and_grad<double>(pd, batch, LossTargets::kAllTokens, grad);
  double worst_rel = 0.0;
  int checked = 0;
  std::uniform_int_distribution<std::size_t> pick(0, pd.data.size() - 1);
  while (checked < 40) {
    const auto i = pick(gen);
    if (std::abs(grad[i]) < 1e-6) continue;
    const double h = 1e-5, orig = pd.data[i];
    std::vector<double> scratch;
    pd.data[i] = orig + h;
    const double lp = batch_loss_and_grad<double>(pd, batch, LossTargets::kAllTokens, scratch);
    pd.data[i] = orig - h;
    const double lm = batch_loss_and_grad<double>(pd, batch, LossTargets::kAllTokens, scratch);
    pd.data[i] = orig;
    const double fd = (lp - lm) / (2 * h);
    worst_rel = std::max(worst_rel, std::abs(fd - grad[i]) / std::max(std::abs(fd), std::abs(grad[i])));
    ++checked;
  }
  o.require(worst_rel <= 1e-4, "gradient rel error " + sci(worst_rel));

  // Oracle: full forward per example, sums in long double over a shuffled order.
  const auto& crit = find_criterion("safety");
  auto exs = gen_split("safety", 9, 24);
  const auto locs = all_head_locations(p.config);
  const std::set<HeadLocation> taps(locs.begin(), locs.end());
  std::map<HeadLocation, std::vector<long double>> oracle;
  for (const auto& ex : exs)
    for (const auto& rec : forward(p, format_scalar(ex.prompt, ex.response, crit, "[[v]] "), taps).taps_out) {
      auto& s = oracle[rec.location];
      s.resize(rec.vector.size(), 0.0L);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += rec.vector[i];
    }
  double worst_mean = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(exs.begin(), exs.end(), gen);
    const auto prof = extract_mean_activations(p, exs, crit, "[[v]] ");
    for (const auto& [loc, s] : oracle)
      for (std::size_t i = 0; i < s.size(); ++i)
        worst_mean = std::max(worst_mean, std::abs(static_cast<double>(s[i] / exs.size()) - prof.means.at(loc)[i]));
  }
  o.require(worst_mean <= 1e-9, "extraction differs from oracle by " + sci(worst_mean));
  o.note("softmax dev " + sci(worst_sum) + ", grad rel " + sci(worst_rel) + ", mean dev " + sci(worst_mean));
  return o;
}

// ---------------------------------------------------------------- A2

Outcome a2() {
  Outcome o;
  std::vector<HeadLocation> heads;
  for (int l = 0; l < 4; ++l)
    for (int h = 0; h < 4; ++h) heads.push_back({l, h});
  const Mask g = {{0, 1}, {1, 3}, {2, 0}, {3, 2}};
  const auto reward = [&](const Mask& m) {
    double hit = 0, miss = 0;
    for (const auto& l : m) (g.contains(l) ? hit : miss) += 1;
    return hit / static_cast<double>(g.size()) - 0.5 * miss / static_cast<double>(heads.size());
  };
  int exact = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    SelectHyper h;
    h.seed = seed;
    exact += reinforce_select(heads, reward, h).selected == g;
  }
  o.require(exact >= 9, "exact recovery in " + std::to_string(exact) + "/10 seeds");
  o.note(std::to_string(exact) + "/10 seeds exact");
  return o;
}

// ---------------------------------------------------------------- A3 / A7

struct PipelineRun {
  double prefixed = 0.0;
  double unprefixed = 0.0;
  double activation_rm = 0.0;
  double zs_gen_score = 0.0;
  std::size_t selected = 0;
  std::vector<std::uint8_t> checkpoint;
  std::string dataset;
  std::string report;
  std::vector<std::uint8_t> profile;
};

PipelineRun run_pipeline(std::uint64_t seed) {
  PipelineRun out;
  PlantConfig pc;
  pc.seed = seed;
  const auto model = train_planted_model(pc);
  out.checkpoint = checkpoint_bytes(model);

  const auto held_out = gen_split(pc.criterion, mix_seed(seed, 0x4e1d), 200);
  out.prefixed = verification_accuracy(model, held_out, pc.mode_prefix);
  out.unprefixed = verification_accuracy(model, held_out);

  const auto base = to_pairs(gen_split(pc.criterion, mix_seed(seed, 0xba5e), 2000));
  const auto records = make_pairs(base, Bias::kNone, seed, 80, 920);
  out.dataset = records_to_jsonl(records);
  const auto in = make_inputs(model, {make_dataset("safety", records)});

  ExperimentConfig c;
  c.criterion = pc.criterion;
  c.seed = seed;
  c.budget = 24;  // 8 records -> 16 extraction examples, 16 validation pairs
  c.extraction_fraction = 1.0 / 3.0;
  c.extraction_prefix = pc.mode_prefix;
  const auto run = run_activation_rm(c, in);
  out.activation_rm = run.report.overall;
  out.selected = run.profile.selected ? run.profile.selected->size() : 0;
  out.report = report_text(run.report);
  out.profile = profile_bytes(run.profile);

  c.method = Method::kZsGenScore;
  out.zs_gen_score = run_experiment(c, in).overall;
  return out;
}

Outcome a3(PipelineRun& first) {
  Outcome o;
  int ok = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = run_pipeline(seed);
    const bool good = r.prefixed >= 0.9 && r.unprefixed <= 0.6 && r.activation_rm >= 0.8 && r.zs_gen_score <= 0.6;
    ok += good;
    o.note("seed " + std::to_string(seed) + ": pre " + fmt(r.prefixed) + " plain " + fmt(r.unprefixed) + " rm " +
           fmt(r.activation_rm) + " zs " + fmt(r.zs_gen_score) + " heads " + std::to_string(r.selected) +
           (good ? "" : " (miss)"));
    if (seed == 1) first = r;
  }
  o.require(ok >= 4, "only " + std::to_string(ok) + "/5 seeds meet all thresholds");
  o.note(std::to_string(ok) + "/5 seeds pass");
  return o;
}

Outcome a7(const PipelineRun& first) {
  Outcome o;
  const auto again = run_pipeline(1);
  o.require(again.checkpoint == first.checkpoint, "checkpoint bytes differ");
  o.require(again.dataset == first.dataset, "dataset bytes differ");
  o.require(again.report == first.report, "report bytes differ");
  o.require(again.profile == first.profile, "profile bytes differ");
  o.note(std::to_string(first.report.size()) + " report bytes, " + std::to_string(first.profile.size()) +
         " profile bytes, " + std::to_string(first.dataset.size()) + " dataset bytes");
  return o;
}

// ---------------------------------------------------------------- A4

Outcome a4() {
  Outcome o;
  const std::regex grammar("First, [^\n]+\nSecond, [^\n]+\nThird, [^\n]+");
  for (const char* crit : {"arithmetic", "safety"}) {
    const auto base = to_pairs(gen_split(crit, 17, 2000));
    for (auto bias : {Bias::kLength, Bias::kFormat, Bias::kPositivity, Bias::kNone}) {
      const auto recs = make_pairs(base, bias, 3, 80, 920);
      const std::string tag = std::string(crit) + "/" + to_string(bias);
      o.require(records_in(recs, Split::kTrain).size() == 80 && records_in(recs, Split::kEval).size() == 920,
                tag + " split sizes");
      int a = 0;
      std::size_t short_len = 0, bad_format = 0, not_positive = 0, claims = 0;
      for (std::size_t i = 0; i < recs.size(); ++i) {
        const auto& r = recs[i];
        a += r.chosen == Choice::kA;
        const auto& rej = r.rejected_response();
        const auto& src = base[i];
        if (bias == Bias::kLength && rej.size() < 2 * src.bad.size()) ++short_len;
        if (bias == Bias::kFormat && !std::regex_match(rej, grammar)) ++bad_format;
        if (bias == Bias::kPositivity && !(sentiment_score(rej) > sentiment_score(src.bad))) ++not_positive;
        const bool good_kept = r.chosen_response() == src.good;
        const bool label_kept = !label_witness(crit, r.prompt, rej);
        const bool claim_kept =
            std::string(crit) != "arithmetic" || extract_claim(rej) == extract_claim(src.bad);
        if (!(good_kept && label_kept && claim_kept)) ++claims;
      }
      o.require(short_len == 0, tag + " " + std::to_string(short_len) + " responses under 2x");
      o.require(bad_format == 0, tag + " " + std::to_string(bad_format) + " grammar violations");
      o.require(not_positive == 0, tag + " " + std::to_string(not_positive) + " without higher positivity");
      o.require(claims == 0, tag + " " + std::to_string(claims) + " claims or labels changed");
      const double n = static_cast<double>(recs.size());
      o.require(std::abs(a - n / 2) <= 3 * std::sqrt(n / 4), tag + " A count " + std::to_string(a));
    }
  }
  o.note("8 criterion/bias datasets of 80/920 records checked");
  return o;
}

// ---------------------------------------------------------------- A5

ItemResult hand_item(double a, double b, TiePolicy policy) {
  ItemResult it;
  it.split = "toy";
  it.chosen = Choice::kA;
  const auto d = pair_from_scores(a, b);
  it.choice = d.choice;
  it.tie = d.tie;
  it.credit = item_credit(d, it.chosen, policy);
  return it;
}

// Credit and aggregates rebuilt from the serialized items alone.
std::pair<long double, long double> recompute(const nlohmann::json& j) {
  const bool half = j.at("tie_policy") == "half_credit";
  std::vector<std::string> order;
  std::map<std::string, std::pair<long double, long double>> per;
  long double total = 0;
  for (const auto& it : j.at("items")) {
    long double credit = 0;
    if (it.contains("error")) credit = 0;
    else if (it.at("tie").get<bool>() && half) credit = 0.5L;
    else credit = it.at("choice") == it.at("chosen") ? 1 : 0;
    const auto s = it.at("split").get<std::string>();
    if (!per.contains(s)) order.push_back(s);
    per[s].first += credit;
    per[s].second += 1;
    total += credit;
  }
  long double macro = 0;
  for (const auto& s : order) macro += per[s].first / per[s].second;
  return {total / static_cast<long double>(j.at("items").size()), macro / static_cast<long double>(order.size())};
}

Outcome a5() {
  Outcome o;
  for (auto [policy, want] : {std::pair{TiePolicy::kHalfCredit, 0.625}, std::pair{TiePolicy::kAWins, 0.75}}) {
    EvalReport r;
    r.items = {hand_item(0.9, 0.1, policy), hand_item(0.2, 0.8, policy), hand_item(0.5, 0.5, policy),
               hand_item(0.6, 0.4, policy)};
    aggregate(r);
    o.require(r.overall == want, to_string(policy) + " gives " + std::to_string(r.overall));
  }

  auto cfg = small_config(1, 4, 16, 3, 256);
  auto model = init_params<float>(cfg);
  perturb(model, 6, 0.05);
  std::vector<Dataset> ds;
  for (auto [name, bias, eval_n] : {std::tuple{"fmt", Bias::kFormat, 30}, std::tuple{"len", Bias::kLength, 11},
                                    std::tuple{"plain", Bias::kNone, 7}}) {
    const auto base = to_pairs(gen_split("safety", eval_n, 2 * (4 + eval_n)));
    ds.push_back(make_dataset(name, make_pairs(base, bias, 2, 4, eval_n)));
  }
  const auto in = make_inputs(model, ds);
  for (auto m : {Method::kZsJudge, Method::kZsGenScore}) {
    for (auto policy : {TiePolicy::kAWins, TiePolicy::kHalfCredit}) {
      ExperimentConfig c;
      c.method = m;
      c.tie_policy = policy;
      const auto j = nlohmann::json::parse(report_text(run_experiment(c, in)));
      const auto [overall, macro] = recompute(j);
      const bool ok = std::abs(overall - j.at("overall").get<double>()) <= 1e-12 &&
                      std::abs(macro - j.at("macro").get<double>()) <= 1e-12;
      o.require(ok, to_string(m) + "/" + to_string(policy) + " aggregates disagree");
    }
  }
  o.note("hand cases 0.625/0.75; 4 reports recomputed");
  return o;
}

// ---------------------------------------------------------------- A6

using Acts = SavClassifier::Activations;

Acts tapped(const Parameters<float>& p, const std::vector<int>& q, const InjectionSpec& inj) {
  const auto locs = all_head_locations(p.config);
  Acts out;
  for (const auto& r : forward(p, q, std::set<HeadLocation>(locs.begin(), locs.end()), &inj).taps_out)
    out.emplace(r.location, std::vector<double>(r.vector.begin(), r.vector.end()));
  return out;
}

Outcome a6() {
  Outcome o;
  const auto& crit = find_criterion("safety");
  auto model = init_params<float>(small_config(2, 4, 16, 8, 256));
  perturb(model, 9, 0.1);

  const auto pairs = to_pairs(gen_split("safety", 12, 400));
  int agree = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto& pr = pairs[i];
    const bool swap = i % 2;
    const auto& a = swap ? pr.bad : pr.good;
    const auto& b = swap ? pr.good : pr.bad;
    agree += vote_prefer(model, pr.prompt, a, b, crit, 5, 1e-7, i).choice ==
             judge_prefer(model, pr.prompt, a, b, crit).choice;
  }
  o.require(agree == 200, "low-temperature vote matches judge on " + std::to_string(agree) + "/200");

  const double la = 0.3, lb = 0.0, temp = 0.7;
  const double q = restricted_ab(la, lb, temp).first;
  const double want = q * q * q + 3 * q * q * (1 - q);
  const int n = 4000;
  int wins = 0;
  for (int i = 0; i < n; ++i)
    wins += vote_from_ab_logits(la, lb, 3, temp, static_cast<std::uint64_t>(i)).choice == Choice::kA;
  const double sd = std::sqrt(n * want * (1 - want));
  o.require(std::abs(wins - n * want) <= 3 * sd, "vote wins " + std::to_string(wins) + " vs " + fmt(n * want, 1));

  const std::set<HeadLocation> planted = {{0, 3}, {1, 1}};
  const auto planted_inj = [&](bool positive) {
    InjectionSpec inj;
    for (const auto& loc : planted) inj.entries[loc] = std::vector<float>(4, positive ? 1.0f : -1.0f);
    return inj;
  };
  const auto exs = gen_split("safety", 4, 216);
  std::vector<Acts> pos, neg;
  for (std::size_t i = 0; i < 16; ++i) {
    const auto q16 = format_scalar(exs[i].prompt, exs[i].response, crit);
    (i % 2 ? neg : pos).push_back(tapped(model, q16, planted_inj(i % 2 == 0)));
  }
  const SavClassifier sav(pos, neg, 2);
  o.require(std::set<HeadLocation>(sav.heads().begin(), sav.heads().end()) == planted, "SAV picked other heads");
  std::mt19937_64 gen(5);
  int right = 0;
  for (std::size_t i = 16; i < exs.size(); ++i) {
    const bool positive = gen() % 2 == 0;
    const auto qi = format_scalar(exs[i].prompt, exs[i].response, crit);
    right += (sav.score(tapped(model, qi, planted_inj(positive))) > 0) == positive;
  }
  o.require(right == 200, "SAV classified " + std::to_string(right) + "/200");

  // Every third record gets identical responses; only those may tie.
  auto recs = make_pairs(to_pairs(gen_split("safety", 21, 120)), Bias::kNone, 4, 6, 54);
  std::set<std::string> constructed;
  for (std::size_t i = 0; i < recs.size(); i += 3) {
    recs[i].response_b = recs[i].response_a;
    if (recs[i].split == Split::kEval) constructed.insert(recs[i].id);
  }
  const auto in = make_inputs(model, {make_dataset("ties", recs)});
  for (auto m : {Method::kZsGenScore, Method::kActivationRm}) {
    ExperimentConfig c;
    c.method = m;
    c.select.steps = 30;
    std::set<std::string> flagged;
    for (const auto& it : run_experiment(c, in).items)
      if (it.tie) flagged.insert(it.id);
    o.require(flagged == constructed, to_string(m) + " flagged " + std::to_string(flagged.size()) + " ties, built " +
                                          std::to_string(constructed.size()));
  }
  o.note("vote/judge " + std::to_string(agree) + "/200, vote wins " + std::to_string(wins) + " expected " +
         fmt(n * want, 1) + ", SAV " + std::to_string(right) + "/200, " + std::to_string(constructed.size()) +
         " constructed ties");
  return o;
}

}  // namespace

int main() {
  int failures = 0;
  const auto run = [&](const char* name, double limit_s, const std::function<Outcome()>& fn) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double s = std::chrono::duration<double>(Clock::now() - t0).count();
    o.require(s <= limit_s, "took " + fmt(s, 1) + " s, limit " + fmt(limit_s, 0) + " s");
    failures += !o.pass;
    std::printf("%s %s (%.1f s) %s\n", name, o.pass ? "PASS" : "FAIL", s, o.detail.c_str());
    std::fflush(stdout);
  };
  PipelineRun first;
  run("A1", 10, a1);
  run("A2", 120, a2);
  run("A3", 480, [&] { return a3(first); });
  run("A4", 30, a4);
  run("A5", 5, a5);
  run("A6", 60, a6);
  run("A7", 120, [&] { return a7(first); });
  return failures == 0 ? 0 : 1;
}
