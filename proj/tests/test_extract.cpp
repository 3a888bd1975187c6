#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "actrm/extract.hpp"
#include "test_util.hpp"

namespace actrm {
namespace {

using testing::tiny_config;

Parameters<float> model(std::uint64_t seed = 7) {
  auto cfg = tiny_config(2, 4, 16, seed);
  cfg.max_context = 128;
  return init_params<float>(cfg);
}

std::vector<PreferenceExample> examples(int n, std::uint64_t seed = 1) { return gen_split("safety", seed, n); }

// Brute force: full forward per example, taps read in float, sums in long
// double in reverse order.
std::map<HeadLocation, std::vector<long double>> oracle_means(const Parameters<float>& p,
                                                              const std::vector<PreferenceExample>& exs,
                                                              std::string_view prefix) {
  const auto locs = all_head_locations(p.config);
  const std::set<HeadLocation> taps(locs.begin(), locs.end());
  std::map<HeadLocation, std::vector<long double>> sum;
  for (auto it = exs.rbegin(); it != exs.rend(); ++it) {
    const auto q = format_scalar(it->prompt, it->response, find_criterion("safety"), prefix);
    for (const auto& rec : forward(p, q, taps).taps_out) {
      auto& s = sum[rec.location];
      s.resize(rec.vector.size(), 0.0L);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += rec.vector[i];
    }
  }
  for (auto& [l, s] : sum)
    for (auto& v : s) v /= static_cast<long double>(exs.size());
  return sum;
}

void expect_close(const SteeringProfile& prof, const std::map<HeadLocation, std::vector<long double>>& want,
                  double tol) {
  ASSERT_EQ(prof.means.size(), want.size());
  for (const auto& [loc, v] : want) {
    const auto& got = prof.means.at(loc);
    ASSERT_EQ(got.size(), v.size());
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(got[i], static_cast<double>(v[i]), tol);
  }
}

TEST(Extract, MatchesBruteForceOracle) {
  const auto p = model();
  const auto exs = examples(16);
  const auto prof = extract_mean_activations(p, exs, find_criterion("safety"), "[[v]] ");
  expect_close(prof, oracle_means(p, exs, "[[v]] "), 1e-9);
  EXPECT_EQ(prof.n_examples, 16u);
  EXPECT_EQ(prof.criterion, "safety");
  EXPECT_EQ(prof.config_hash, config_hash(p.config));
  EXPECT_FALSE(prof.selected);
  EXPECT_EQ(prof.means.size(), 8u);
}

TEST(Extract, PermutationAndDuplicationInvariant) {
  const auto p = model();
  auto exs = examples(12);
  const auto base = extract_mean_activations(p, exs, find_criterion("safety"));
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(exs.begin(), exs.end(), gen);
    const auto perm = extract_mean_activations(p, exs, find_criterion("safety"));
    for (const auto& [loc, v] : base.means)
      for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(perm.means.at(loc)[i], v[i], 1e-9);
  }
  auto doubled = exs;
  doubled.insert(doubled.end(), exs.begin(), exs.end());
  const auto dup = extract_mean_activations(p, doubled, find_criterion("safety"));
  for (const auto& [loc, v] : base.means)
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(dup.means.at(loc)[i], v[i], 1e-9);
}

TEST(Extract, IdenticalExamplesGiveTheirActivation) {
  const auto p = model();
  const auto one = examples(2);
  const std::vector<PreferenceExample> same(5, one[0]);
  const auto prof = extract_mean_activations(p, same, find_criterion("safety"));
  const auto q = format_scalar(one[0].prompt, one[0].response, find_criterion("safety"));
  const auto direct = last_token_activations(p, q);
  for (const auto& [loc, v] : direct)
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(prof.means.at(loc)[i], v[i], 1e-12);
}

TEST(Extract, TwoPointMeanByInjectionReadback) {
  // Activations written by injection read back exactly, so two single-query
  // runs with planted vectors [1,2,...] and [3,4,...] average to [2,3,...].
  const auto p = model();
  const std::vector<int> q = {tok::kBos, 20, 21};
  std::map<HeadLocation, std::vector<double>> sum;
  for (float base : {1.0f, 3.0f}) {
    InjectionSpec inj;
    std::vector<float> v(4);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = base + static_cast<float>(i);
    inj.entries[{1, 2}] = v;
    const auto res = forward(p, q, {{1, 2}}, &inj);
    ASSERT_EQ(res.taps_out.size(), 1u);
    auto& s = sum[{1, 2}];
    s.resize(4, 0.0);
    for (std::size_t i = 0; i < 4; ++i) s[i] += res.taps_out[0].vector[i] / 2.0;
  }
  EXPECT_EQ(sum.begin()->second, (std::vector<double>{2, 3, 4, 5}));
}

TEST(Extract, Errors) {
  const auto p = model();
  EXPECT_THROW(extract_mean_activations(p, {}, find_criterion("safety")), ArgumentError);
  auto mixed = examples(4);
  mixed[1].criterion = "arithmetic";
  EXPECT_THROW(extract_mean_activations(p, mixed, find_criterion("safety")), ArgumentError);
  auto small = tiny_config(1, 2, 8);
  small.max_context = 20;
  EXPECT_THROW(extract_mean_activations(init_params<float>(small), examples(2), find_criterion("safety")),
               RenderError);
}

TEST(Extract, RankedUsesRankedTemplate) {
  const auto p = model();
  const std::vector<SolvedRankedExample> shots = {{"say hi", "sun", "s#n", true}};
  const auto prof = extract_mean_activations_ranked(p, shots, find_criterion("safety"));
  EXPECT_EQ(prof.format, ProfileFormat::kRanked);
  const auto direct = last_token_activations(p, format_ranked("say hi", "sun", "s#n", find_criterion("safety")));
  EXPECT_EQ(prof.means, direct);
}

TEST(Profile, RoundTripsExactly) {
  testing::TempDir dir("prof");
  const auto p = model();
  auto prof = extract_mean_activations(p, examples(6), find_criterion("safety"));
  save_profile(prof, dir.file("a.prof"));
  EXPECT_EQ(load_profile(dir.file("a.prof"), p.config), prof);
  prof.selected = std::set<HeadLocation>{{0, 1}, {1, 3}};
  save_profile(prof, dir.file("b.prof"));
  const auto back = load_profile(dir.file("b.prof"));
  EXPECT_EQ(back, prof);
  EXPECT_EQ(back.injection().entries.size(), 2u);
}

TEST(Profile, RejectsCorruptionAndMismatch) {
  testing::TempDir dir("prof");
  const auto p = model();
  const auto prof = extract_mean_activations(p, examples(4), find_criterion("safety"));
  auto bytes = profile_bytes(prof);
  EXPECT_THROW(parse_profile(std::span(bytes).first(bytes.size() - 5)), IoError);
  bytes[20] ^= 1;
  EXPECT_THROW(parse_profile(bytes), IoError);
  save_profile(prof, dir.file("p.prof"));
  EXPECT_THROW(load_profile(dir.file("p.prof"), model(8).config), IncompatibleError);
  EXPECT_THROW(load_profile(dir.file("missing.prof")), IoError);
}

TEST(Profile, InjectionForUnknownHeadIsAnError) {
  SteeringProfile prof;
  prof.means[{0, 0}] = {1.0, 2.0};
  EXPECT_EQ(prof.injection().entries.size(), 0u);
  EXPECT_EQ(prof.injection_for({{0, 0}}).entries.at({0, 0}), (std::vector<float>{1.0f, 2.0f}));
  EXPECT_THROW(prof.injection_for({{0, 1}}), ArgumentError);
}

}  // namespace
}  // namespace actrm
