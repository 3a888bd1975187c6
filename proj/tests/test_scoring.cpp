#include <gtest/gtest.h>

#include <random>

#include "actrm/scoring.hpp"
#include "test_util.hpp"

namespace actrm {
namespace {

Parameters<float> model(std::uint64_t seed = 7) {
  auto cfg = testing::tiny_config(2, 4, 16, seed);
  cfg.max_context = 256;
  return init_params<float>(cfg);
}

const CriterionSpec& safety() { return find_criterion("safety"); }

TEST(Scalar, EmptySelectionIsZeroShotBitForBit) {
  const auto p = model();
  auto prof = extract_mean_activations(p, gen_split("safety", 1, 4), safety());
  prof.selected = std::set<HeadLocation>{};
  for (const auto& ex : gen_split("safety", 2, 20)) {
    const auto zs = zs_generative_score(p, ex.prompt, ex.response, safety());
    const auto ar = activation_rm_score(p, prof, ex.prompt, ex.response, safety());
    EXPECT_EQ(zs.value, ar.value);
    EXPECT_FALSE(ar.steered);
    EXPECT_EQ(ar.method, "activation_rm");
  }
}

TEST(Scalar, SteeringChangesScoresAndStaysInRange) {
  const auto p = model();
  auto prof = extract_mean_activations(p, gen_split("safety", 1, 8), safety(), "[[v]] ");
  prof.selected = std::set<HeadLocation>{{0, 0}, {1, 2}};
  int changed = 0;
  for (const auto& ex : gen_split("safety", 2, 20)) {
    const auto ar = activation_rm_score(p, prof, ex.prompt, ex.response, safety());
    const auto zs = zs_generative_score(p, ex.prompt, ex.response, safety());
    EXPECT_TRUE(ar.steered);
    EXPECT_GE(ar.value, 0.0);
    EXPECT_LE(ar.value, 1.0);
    changed += ar.value != zs.value;
    const auto vs = activation_rm_score(p, prof, ex.prompt, ex.response, safety(), Readout::kYesVsNo);
    EXPECT_GE(vs.value, 0.0);
    EXPECT_LE(vs.value, 1.0);
  }
  EXPECT_GT(changed, 0);
}

TEST(Scalar, ReadoutsOnHandDistributions) {
  std::vector<double> d(tok::kVocabSize, 0.0);
  d[tok::kYes] = 0.2;
  d[tok::kNo] = 0.6;
  d[10] = 0.2;
  EXPECT_DOUBLE_EQ(readout_value(d, Readout::kRawYes), 0.2);
  EXPECT_DOUBLE_EQ(readout_value(d, Readout::kYesVsNo), 0.25);
  d[tok::kYes] = d[tok::kNo] = 0.0;
  EXPECT_EQ(readout_value(d, Readout::kYesVsNo), 0.5);
  EXPECT_EQ(parse_readout("yes_vs_no"), Readout::kYesVsNo);
  EXPECT_THROW(parse_readout("logit"), ArgumentError);
}

TEST(Scalar, IncompatibleProfileRejected) {
  const auto p = model();
  const auto prof = extract_mean_activations(model(9), gen_split("safety", 1, 4), safety());
  EXPECT_THROW(activation_rm_score(p, prof, "p", "r", safety()), IncompatibleError);
}

TEST(Pairs, DecisionFromScores) {
  auto d = pair_from_scores(0.7, 0.3);
  EXPECT_EQ(d.choice, Choice::kA);
  EXPECT_FALSE(d.tie);
  d = pair_from_scores(0.3, 0.7);
  EXPECT_EQ(d.choice, Choice::kB);
  EXPECT_FALSE(d.tie);
  d = pair_from_scores(0.5, 0.5);
  EXPECT_EQ(d.choice, Choice::kA);
  EXPECT_TRUE(d.tie);
  d = pair_from_scores(0.5, std::nextafter(0.5, 1.0));
  EXPECT_EQ(d.choice, Choice::kB);
  EXPECT_FALSE(d.tie);
}

TEST(Pairs, RestrictedProbabilitiesIgnoreOtherTokensAndShift) {
  const auto [pa, pb] = restricted_ab(2.0, 0.5);
  EXPECT_NEAR(pa + pb, 1.0, 1e-15);
  const auto [qa, qb] = restricted_ab(102.0, 100.5);
  EXPECT_NEAR(pa, qa, 1e-12);
  EXPECT_GT(pa, 0.5);
  EXPECT_EQ(restricted_ab(1.0, 1.0).first, 0.5);
}

TEST(Judge, ChoosesArgmaxOfAB) {
  const auto p = model();
  for (const auto& ex : to_pairs(gen_split("safety", 3, 20))) {
    const auto d = judge_prefer(p, ex.prompt, ex.good, ex.bad, safety());
    const auto [la, lb] = ab_logits(p, format_ranked(ex.prompt, ex.good, ex.bad, safety()));
    EXPECT_EQ(d.choice, la >= lb ? Choice::kA : Choice::kB);
    EXPECT_EQ(d.method, "zs_judge");
    EXPECT_NEAR(d.score_a->value + d.score_b->value, 1.0, 1e-12);
  }
  const std::vector<SolvedRankedExample> shots = {{"say hi", "sun", "s#n", true}};
  EXPECT_EQ(judge_prefer(p, "p", "a", "b", safety(), shots).method, "fs_judge");
}

TEST(Vote, GreedyEqualsJudge) {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int i = 0; i < 200; ++i) {
    const double la = n(gen), lb = n(gen);
    const auto v = vote_from_ab_logits(la, lb, 5, 1e-7, static_cast<std::uint64_t>(i));
    EXPECT_EQ(v.choice, decision_from_ab_logits(la, lb, "x").choice);
  }
}

TEST(Vote, MajorityMatchesBinomial) {
  const double la = 0.3, lb = 0.0, temp = 0.7;
  const double q = restricted_ab(la, lb, temp).first;
  const double want = q * q * q + 3 * q * q * (1 - q);
  const int n = 4000;
  int a = 0;
  for (int i = 0; i < n; ++i) a += vote_from_ab_logits(la, lb, 3, temp, static_cast<std::uint64_t>(i)).choice == Choice::kA;
  const double sd = std::sqrt(n * want * (1 - want));
  EXPECT_NEAR(a, n * want, 3 * sd);
}

TEST(Vote, RejectsBadK) {
  EXPECT_THROW(vote_from_ab_logits(0, 0, 2, 1.0, 0), ArgumentError);
  EXPECT_THROW(vote_from_ab_logits(0, 0, 0, 1.0, 0), ArgumentError);
  EXPECT_THROW(vote_from_ab_logits(0, 0, 3, -1.0, 0), ArgumentError);
  const auto p = model();
  EXPECT_THROW(vote_prefer(p, "p", "a", "b", safety(), 4), ArgumentError);
}

TEST(Vote, DeterministicPerSeed) {
  const auto a = vote_from_ab_logits(0.1, 0.0, 7, 1.0, 42);
  const auto b = vote_from_ab_logits(0.1, 0.0, 7, 1.0, 42);
  EXPECT_EQ(a.choice, b.choice);
  EXPECT_EQ(a.score_a->value, b.score_a->value);
  EXPECT_NEAR(a.score_a->value + a.score_b->value, 1.0, 1e-15);
}

using Acts = SavClassifier::Activations;

Acts tapped(const Parameters<float>& p, const std::vector<int>& q, const InjectionSpec& inj) {
  const auto locs = all_head_locations(p.config);
  Acts out;
  for (const auto& r : forward(p, q, std::set<HeadLocation>(locs.begin(), locs.end()), &inj).taps_out)
    out.emplace(r.location, std::vector<double>(r.vector.begin(), r.vector.end()));
  return out;
}

TEST(Sav, PlantedClustersAreFoundAndClassified) {
  const auto p = model();
  const std::set<HeadLocation> planted = {{0, 3}, {1, 1}};
  std::mt19937_64 gen(5);
  auto make = [&](bool positive) {
    InjectionSpec inj;
    for (const auto& loc : planted) inj.entries[loc] = std::vector<float>(4, positive ? 1.0f : -1.0f);
    return inj;
  };
  const auto exs = gen_split("safety", 4, 40);
  std::vector<Acts> pos, neg;
  for (std::size_t i = 0; i < 16; ++i) {
    const auto q = format_scalar(exs[i].prompt, exs[i].response, safety());
    (i % 2 ? neg : pos).push_back(tapped(p, q, make(i % 2 == 0)));
  }
  const SavClassifier sav(pos, neg, 2);
  EXPECT_EQ(std::set<HeadLocation>(sav.heads().begin(), sav.heads().end()), planted);
  for (std::size_t i = 16; i < exs.size(); ++i) {
    const auto q = format_scalar(exs[i].prompt, exs[i].response, safety());
    const bool positive = gen() % 2 == 0;
    EXPECT_EQ(sav.score(tapped(p, q, make(positive))) > 0, positive);
  }
}

TEST(Sav, DegenerateSetupTiesTowardA) {
  const auto p = model();
  const std::vector<PreferenceExample> shots = {{"p", "x", true, "safety", "1"}, {"p", "x", false, "safety", "2"}};
  const auto d = sav_prefer(p, shots, "p", "a", "b", safety(), 4);
  // Equal class means: every head scores zero.
  EXPECT_EQ(d.choice, Choice::kA);
  EXPECT_TRUE(d.tie);
  EXPECT_FALSE(d.score_a);
}

TEST(Sav, CosineIsScaleInvariant) {
  const std::vector<double> a = {1, 2, 3}, b = {-2, 0.5, 4};
  const std::vector<double> a3 = {3, 6, 9};
  EXPECT_NEAR(SavClassifier::cosine(a, b), SavClassifier::cosine(a3, b), 1e-15);
  EXPECT_EQ(SavClassifier::cosine({0, 0, 0}, b), 0.0);
}

TEST(Sav, NeedsBothLabels) {
  const auto p = model();
  const std::vector<PreferenceExample> shots = {{"p", "x", true, "safety", "1"}};
  EXPECT_THROW(fit_sav(p, shots, safety()), ArgumentError);
}

}  // namespace
}  // namespace actrm
