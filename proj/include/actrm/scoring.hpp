#pragma once

// Scalar reward scores and pairwise preference methods.
//
// Scores are raw P(YES) by default. Pairwise decisions compare two values
// strictly and break exact ties toward A, always flagging the tie.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "actrm/corpus.hpp"
#include "actrm/extract.hpp"
#include "actrm/model.hpp"
#include "actrm/prompts.hpp"
#include "actrm/rng.hpp"

namespace actrm {

enum class Readout { kRawYes, kYesVsNo };

inline std::string to_string(Readout r) { return r == Readout::kRawYes ? "raw_yes" : "yes_vs_no"; }

inline Readout parse_readout(std::string_view s) {
  if (s == "raw_yes") return Readout::kRawYes;
  if (s == "yes_vs_no") return Readout::kYesVsNo;
  throw ArgumentError("unknown readout '" + std::string(s) + "'");
}

struct RewardScore {
  double value = 0.0;
  std::string method;
  bool steered = false;
};

enum class Choice { kA, kB };

inline std::string to_string(Choice c) { return c == Choice::kA ? "A" : "B"; }

struct PairDecision {
  Choice choice = Choice::kA;
  std::optional<RewardScore> score_a;
  std::optional<RewardScore> score_b;
  std::string method;
  bool tie = false;
};

inline PairDecision pair_from_scores(const RewardScore& a, const RewardScore& b) {
  PairDecision d;
  d.choice = a.value >= b.value ? Choice::kA : Choice::kB;
  d.tie = a.value == b.value;
  d.score_a = a;
  d.score_b = b;
  d.method = a.method;
  return d;
}

inline PairDecision pair_from_scores(double a, double b) { return pair_from_scores(RewardScore{a, "", false}, RewardScore{b, "", false}); }

inline double readout_value(std::span<const double> dist, Readout readout) {
  const double yes = dist[tok::kYes];
  if (readout == Readout::kRawYes) return yes;
  const double both = yes + dist[tok::kNo];
  return both > 0.0 ? yes / both : 0.5;
}

// The scalar query for one (prompt, response), validated against the model.
template <typename T>
std::vector<int> scalar_query(const Parameters<T>& model, std::string_view prompt, std::string_view response,
                              const CriterionSpec& criterion, std::string_view context_prefix = {}) {
  auto q = format_scalar(prompt, response, criterion, context_prefix);
  check_fits(q, model.config.max_context);
  return q;
}

template <typename T>
RewardScore zs_generative_score(const Parameters<T>& model, std::string_view prompt, std::string_view response,
                                const CriterionSpec& criterion, Readout readout = Readout::kRawYes) {
  const auto q = scalar_query(model, prompt, response, criterion);
  const auto dist = next_token_distribution(model, q);
  return {readout_value(dist, readout), "zs_gen_score", false};
}

// With an empty selection this is zs_generative_score, bit for bit.
template <typename T>
RewardScore activation_rm_score(const Parameters<T>& model, const SteeringProfile& profile, std::string_view prompt,
                                std::string_view response, const CriterionSpec& criterion,
                                Readout readout = Readout::kRawYes) {
  check_compatible(profile, model.config);
  const auto q = scalar_query(model, prompt, response, criterion);
  const auto inj = profile.injection();
  const auto dist = next_token_distribution(model, q, inj.empty() ? nullptr : &inj);
  return {readout_value(dist, readout), "activation_rm", !inj.empty()};
}

// Scores one fixed set of queries under many injections. Each query's prefix
// runs once.
template <typename T>
class QueryBatch {
 public:
  QueryBatch(const Parameters<T>& model, const std::vector<std::vector<int>>& queries) {
    runs_.reserve(queries.size());
    for (const auto& q : queries) runs_.emplace_back(model, q);
  }

  std::size_t size() const { return runs_.size(); }

  double score(std::size_t i, const InjectionSpec& inj, Readout readout) const {
    const auto logits = runs_[i].last_logits(inj.empty() ? nullptr : &inj);
    const auto dist = distribution_from_logits<T>(logits);
    return readout_value(dist, readout);
  }

 private:
  std::vector<PrefixRun<T>> runs_;
};

// Probabilities of A and B renormalized over the two tokens, at temperature.
inline std::pair<double, double> restricted_ab(double logit_a, double logit_b, double temperature = 1.0) {
  const double z = (logit_a - logit_b) / temperature;
  return {1.0 / (1.0 + std::exp(-z)), 1.0 / (1.0 + std::exp(z))};
}

template <typename T>
std::vector<int> ranked_query(const Parameters<T>& model, std::string_view prompt, std::string_view response_a,
                              std::string_view response_b, const CriterionSpec& criterion,
                              const std::vector<SolvedRankedExample>& shots) {
  auto q = shots.empty() ? format_ranked(prompt, response_a, response_b, criterion)
                         : format_ranked_few_shot(shots, prompt, response_a, response_b, criterion);
  check_fits(q, model.config.max_context);
  return q;
}

template <typename T>
std::pair<double, double> ab_logits(const Parameters<T>& model, std::span<const int> query) {
  PrefixRun<T> run(model, query);
  const auto logits = run.last_logits();
  return {static_cast<double>(logits[tok::kA]), static_cast<double>(logits[tok::kB])};
}

inline PairDecision decision_from_ab_logits(double la, double lb, std::string method) {
  const auto [pa, pb] = restricted_ab(la, lb);
  PairDecision d;
  d.choice = la >= lb ? Choice::kA : Choice::kB;
  d.tie = la == lb;
  d.score_a = RewardScore{pa, method, false};
  d.score_b = RewardScore{pb, method, false};
  d.method = std::move(method);
  return d;
}

template <typename T>
PairDecision judge_prefer(const Parameters<T>& model, std::string_view prompt, std::string_view response_a,
                          std::string_view response_b, const CriterionSpec& criterion,
                          const std::vector<SolvedRankedExample>& shots = {}) {
  const auto q = ranked_query(model, prompt, response_a, response_b, criterion, shots);
  const auto [la, lb] = ab_logits(model, q);
  return decision_from_ab_logits(la, lb, shots.empty() ? "zs_judge" : "fs_judge");
}

inline constexpr double kGreedyTemperature = 1e-6;

inline void check_vote_k(int k) {
  if (k < 1 || k % 2 == 0) throw ArgumentError("vote: k must be odd and positive, got " + std::to_string(k));
}

// Majority over k single-token draws from the tempered A/B distribution.
inline PairDecision vote_from_ab_logits(double la, double lb, int k, double temperature, std::uint64_t seed) {
  check_vote_k(k);
  if (!(temperature >= 0.0)) throw ArgumentError("vote: temperature must be >= 0");
  if (temperature < kGreedyTemperature) return decision_from_ab_logits(la, lb, "vote");
  const double pa = restricted_ab(la, lb, temperature).first;
  Rng rng(mix_seed(seed, 0x70fe));
  int votes_a = 0;
  for (int i = 0; i < k; ++i) votes_a += rng.uniform() < pa ? 1 : 0;
  PairDecision d;
  d.choice = 2 * votes_a > k ? Choice::kA : Choice::kB;
  d.score_a = RewardScore{static_cast<double>(votes_a) / k, "vote", false};
  d.score_b = RewardScore{static_cast<double>(k - votes_a) / k, "vote", false};
  d.method = "vote";
  return d;
}

template <typename T>
PairDecision vote_prefer(const Parameters<T>& model, std::string_view prompt, std::string_view response_a,
                         std::string_view response_b, const CriterionSpec& criterion, int k = 3,
                         double temperature = 0.7, std::uint64_t seed = 0) {
  check_vote_k(k);
  const auto q = ranked_query(model, prompt, response_a, response_b, criterion, {});
  const auto [la, lb] = ab_logits(model, q);
  return vote_from_ab_logits(la, lb, k, temperature, seed);
}

// Sparse-attention-vector style classifier over last-token head outputs.
class SavClassifier {
 public:
  using Activations = std::map<HeadLocation, std::vector<double>>;

  SavClassifier(const std::vector<Activations>& positives, const std::vector<Activations>& negatives, int m_heads) {
    if (positives.empty() || negatives.empty()) throw ArgumentError("sav: few-shot set needs both labels");
    if (m_heads < 1) throw ArgumentError("sav: m_heads must be >= 1");
    const auto pos_mean = mean(positives);
    const auto neg_mean = mean(negatives);
    std::vector<std::pair<double, HeadLocation>> ranked;
    for (const auto& [loc, mp] : pos_mean) {
      const auto& mn = neg_mean.at(loc);
      const double between = std::sqrt(sq_dist(mp, mn));
      double within = 0.0;
      for (const auto& a : positives) within += sq_dist(a.at(loc), mp);
      for (const auto& a : negatives) within += sq_dist(a.at(loc), mn);
      within = std::sqrt(within / static_cast<double>(positives.size() + negatives.size()));
      double ratio = 0.0;
      if (between > 0.0) ratio = within > 0.0 ? between / within : std::numeric_limits<double>::infinity();
      ranked.emplace_back(ratio, loc);
    }
    // Larger separation first; equal separations keep location order.
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    const auto m = std::min<std::size_t>(static_cast<std::size_t>(m_heads), ranked.size());
    for (std::size_t i = 0; i < m; ++i) {
      const auto& loc = ranked[i].second;
      heads_.push_back(loc);
      pos_mean_.emplace(loc, pos_mean.at(loc));
      neg_mean_.emplace(loc, neg_mean.at(loc));
    }
  }

  const std::vector<HeadLocation>& heads() const { return heads_; }

  double score(const Activations& acts) const {
    double s = 0.0;
    for (const auto& loc : heads_) {
      const auto& x = acts.at(loc);
      s += cosine(x, pos_mean_.at(loc)) - cosine(x, neg_mean_.at(loc));
    }
    return s;
  }

  static double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
  }

 private:
  static Activations mean(const std::vector<Activations>& xs) {
    Activations out;
    for (const auto& a : xs)
      for (const auto& [loc, v] : a) {
        auto& s = out[loc];
        s.resize(v.size(), 0.0);
        for (std::size_t i = 0; i < v.size(); ++i) s[i] += v[i];
      }
    for (auto& [loc, s] : out)
      for (auto& v : s) v /= static_cast<double>(xs.size());
    return out;
  }

  static double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  }

  std::vector<HeadLocation> heads_;
  Activations pos_mean_;
  Activations neg_mean_;
};

template <typename T>
SavClassifier fit_sav(const Parameters<T>& model, const std::vector<PreferenceExample>& few_shot,
                      const CriterionSpec& criterion, int m_heads = 16) {
  std::vector<SavClassifier::Activations> pos, neg;
  for (const auto& ex : few_shot) {
    const auto q = scalar_query(model, ex.prompt, ex.response, criterion);
    (ex.label ? pos : neg).push_back(last_token_activations(model, q));
  }
  return SavClassifier(pos, neg, m_heads);
}

template <typename T>
PairDecision sav_prefer(const Parameters<T>& model, const SavClassifier& sav, std::string_view prompt,
                        std::string_view response_a, std::string_view response_b, const CriterionSpec& criterion) {
  const double a = sav.score(last_token_activations(model, scalar_query(model, prompt, response_a, criterion)));
  const double b = sav.score(last_token_activations(model, scalar_query(model, prompt, response_b, criterion)));
  auto d = pair_from_scores(RewardScore{a, "sav", false}, RewardScore{b, "sav", false});
  // Cosine margins can be negative, so the scores stay out of RewardScore's [0,1] range.
  d.score_a.reset();
  d.score_b.reset();
  return d;
}

template <typename T>
PairDecision sav_prefer(const Parameters<T>& model, const std::vector<PreferenceExample>& few_shot,
                        std::string_view prompt, std::string_view response_a, std::string_view response_b,
                        const CriterionSpec& criterion, int m_heads = 16) {
  return sav_prefer(model, fit_sav(model, few_shot, criterion, m_heads), prompt, response_a, response_b, criterion);
}

}  // namespace actrm
