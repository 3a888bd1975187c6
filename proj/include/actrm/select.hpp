#pragma once

// Head selection: REINFORCE over independent Bernoulli inclusion variables,
// one per head location.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "actrm/corpus.hpp"
#include "actrm/extract.hpp"
#include "actrm/rng.hpp"
#include "actrm/scoring.hpp"

namespace actrm {

inline constexpr double kLogitClamp = 10.0;

struct SelectHyper {
  int steps = 600;
  int batch_masks = 8;
  double learning_rate = 0.1;
  double l0_penalty = 0.01;
  double init_inclusion_prob = 0.1;
  double threshold = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 0) throw ConfigError("select: steps must be >= 0");
    if (batch_masks < 1) throw ConfigError("select: batch_masks must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("select: learning_rate must be > 0");
    if (!(l0_penalty >= 0.0) || !std::isfinite(l0_penalty)) throw ConfigError("select: l0_penalty must be >= 0");
    if (!(init_inclusion_prob > 0.0 && init_inclusion_prob < 1.0))
      throw ConfigError("select: init_inclusion_prob must be in (0,1)");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("select: threshold must be in (0,1)");
  }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct SelectionPolicy {
  std::vector<HeadLocation> heads;  // fixed order for sampling
  std::map<HeadLocation, double> logits;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  double prob(const HeadLocation& l) const { return sigmoid(logits.at(l)); }

  double expected_size() const {
    double s = 0.0;
    for (const auto& l : heads) s += prob(l);
    return s;
  }
};

inline SelectionPolicy init_policy(const std::vector<HeadLocation>& heads, const SelectHyper& h) {
  if (heads.empty()) throw ArgumentError("select: no head locations");
  SelectionPolicy p;
  p.heads = heads;
  p.seed = h.seed;
  const double logit = std::log(h.init_inclusion_prob / (1.0 - h.init_inclusion_prob));
  for (const auto& l : heads) p.logits[l] = logit;
  return p;
}

using Mask = std::set<HeadLocation>;

// Per-sample REINFORCE contribution: (R_b - baseline) * (m_b - p), summed.
// The baseline is the batch mean written as an offset from the first reward,
// so a constant reward yields an exactly zero update.
inline std::map<HeadLocation, double> policy_gradient(const SelectionPolicy& policy, const std::vector<Mask>& masks,
                                                      const std::vector<double>& rewards) {
  double offset = 0.0;
  for (double r : rewards) offset += r - rewards.front();
  const double baseline = rewards.front() + offset / static_cast<double>(rewards.size());
  std::map<HeadLocation, double> grad;
  for (const auto& l : policy.heads) grad[l] = 0.0;
  for (std::size_t b = 0; b < masks.size(); ++b) {
    const double adv = rewards[b] - baseline;
    if (adv == 0.0) continue;
    for (const auto& l : policy.heads) {
      const double m = masks[b].contains(l) ? 1.0 : 0.0;
      grad[l] += adv * (m - policy.prob(l));
    }
  }
  return grad;
}

inline void apply_update(SelectionPolicy& policy, const std::map<HeadLocation, double>& grad, double lr) {
  for (auto& [l, logit] : policy.logits) {
    const double next = logit + lr * grad.at(l);
    if (!std::isfinite(next)) throw TrainingError("select: non-finite policy update", static_cast<long>(policy.step));
    logit = std::clamp(next, -kLogitClamp, kLogitClamp);
  }
  ++policy.step;
}

inline Mask sample_mask(const SelectionPolicy& policy, Rng& rng) {
  Mask m;
  for (const auto& l : policy.heads)
    if (rng.uniform() < policy.prob(l)) m.insert(l);
  return m;
}

// Heads above threshold, else the single most probable head (first in
// location order on ties).
inline Mask threshold_mask(const SelectionPolicy& policy, double threshold) {
  Mask out;
  for (const auto& l : policy.heads)
    if (policy.prob(l) > threshold) out.insert(l);
  if (out.empty()) {
    const HeadLocation* best = &policy.heads.front();
    for (const auto& l : policy.heads)
      if (policy.logits.at(l) > policy.logits.at(*best)) best = &l;
    out.insert(*best);
  }
  return out;
}

struct SelectTraceRow {
  int step = 0;
  double mean_reward = 0.0;
  double best_reward = 0.0;
  double expected_mask_size = 0.0;
};

inline void write_trace_csv(std::ostream& os, const std::vector<SelectTraceRow>& rows) {
  os << "step,mean_reward,best_reward,expected_mask_size\n";
  for (const auto& r : rows) os << r.step << ',' << r.mean_reward << ',' << r.best_reward << ',' << r.expected_mask_size << '\n';
}

struct SelectResult {
  Mask selected;
  SelectionPolicy policy;
  std::vector<SelectTraceRow> trace;
};

using MaskRewardFn = std::function<double(const Mask&)>;

// The optimizer proper. `reward` is the task reward before the size penalty
// and must be deterministic; it is memoized per mask.
inline SelectResult reinforce_select(const std::vector<HeadLocation>& heads, const MaskRewardFn& reward,
                                     const SelectHyper& hyper) {
  hyper.validate();
  SelectResult res;
  res.policy = init_policy(heads, hyper);
  auto& policy = res.policy;
  Rng rng(mix_seed(hyper.seed, 0x5e1ec7));
  std::map<Mask, double> memo;
  const double n_heads = static_cast<double>(heads.size());
  for (int s = 0; s < hyper.steps; ++s) {
    std::vector<Mask> masks;
    std::vector<double> rewards;
    for (int b = 0; b < hyper.batch_masks; ++b) {
      Mask m = sample_mask(policy, rng);
      auto it = memo.find(m);
      if (it == memo.end()) it = memo.emplace(m, reward(m)).first;
      rewards.push_back(it->second - hyper.l0_penalty * static_cast<double>(m.size()) / n_heads);
      masks.push_back(std::move(m));
    }
    SelectTraceRow row;
    row.step = s;
    for (double r : rewards) row.mean_reward += r;
    row.best_reward = *std::max_element(rewards.begin(), rewards.end());
    row.mean_reward /= static_cast<double>(rewards.size());
    apply_update(policy, policy_gradient(policy, masks, rewards), hyper.learning_rate);
    row.expected_mask_size = policy.expected_size();
    res.trace.push_back(row);
  }
  res.selected = threshold_mask(policy, hyper.threshold);
  return res;
}

// Pairwise accuracy of steered scalar scores over validation pairs. Queries
// are prepared once and re-scored per mask.
template <typename T>
class MaskRewardEvaluator {
 public:
  MaskRewardEvaluator(const Parameters<T>& model, const SteeringProfile& profile, const std::vector<PairItem>& pairs,
                      const CriterionSpec& criterion, Readout readout = Readout::kRawYes)
      : profile_(&profile), readout_(readout), batch_(model, queries(model, profile, pairs, criterion)) {}

  double operator()(const Mask& mask) const {
    const auto inj = profile_->injection_for(mask);
    double acc = 0.0;
    for (std::size_t i = 0; i < batch_.size(); i += 2) {
      const double good = batch_.score(i, inj, readout_);
      const double bad = batch_.score(i + 1, inj, readout_);
      acc += good > bad ? 1.0 : (good == bad ? 0.5 : 0.0);
    }
    return acc / static_cast<double>(batch_.size() / 2);
  }

 private:
  static std::vector<std::vector<int>> queries(const Parameters<T>& model, const SteeringProfile& profile,
                                               const std::vector<PairItem>& pairs, const CriterionSpec& criterion) {
    check_compatible(profile, model.config);
    if (pairs.empty()) throw ArgumentError("mask reward: no validation pairs");
    std::vector<std::vector<int>> out;
    for (const auto& p : pairs) {
      out.push_back(scalar_query(model, p.prompt, p.good, criterion));
      out.push_back(scalar_query(model, p.prompt, p.bad, criterion));
    }
    return out;
  }

  const SteeringProfile* profile_;
  Readout readout_;
  QueryBatch<T> batch_;
};

template <typename T>
double mask_reward(const Parameters<T>& model, const SteeringProfile& profile, const Mask& mask,
                   const std::vector<PairItem>& val_pairs, const CriterionSpec& criterion,
                   Readout readout = Readout::kRawYes) {
  return MaskRewardEvaluator<T>(model, profile, val_pairs, criterion, readout)(mask);
}

template <typename T>
SelectResult select_heads(const Parameters<T>& model, const SteeringProfile& profile,
                          const std::vector<PairItem>& val_pairs, const CriterionSpec& criterion,
                          const SelectHyper& hyper, Readout readout = Readout::kRawYes) {
  hyper.validate();
  const MaskRewardEvaluator<T> eval(model, profile, val_pairs, criterion, readout);
  std::vector<HeadLocation> heads;
  for (const auto& [l, v] : profile.means) heads.push_back(l);
  return reinforce_select(heads, std::cref(eval), hyper);
}

template <typename T>
SelectResult select_heads(const Parameters<T>& model, const SteeringProfile& profile,
                          const std::vector<PreferenceExample>& val_examples, const CriterionSpec& criterion,
                          const SelectHyper& hyper, Readout readout = Readout::kRawYes) {
  return select_heads(model, profile, to_pairs(val_examples), criterion, hyper, readout);
}

}  // namespace actrm
