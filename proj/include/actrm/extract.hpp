#pragma once

// Few-shot mean head activations and their on-disk form.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "actrm/binary_io.hpp"
#include "actrm/corpus.hpp"
#include "actrm/model.hpp"
#include "actrm/prompts.hpp"

namespace actrm {

enum class ProfileFormat : std::uint8_t { kScalar = 0, kRanked = 1 };

struct SteeringProfile {
  std::string criterion;
  Digest config_hash{};
  std::map<HeadLocation, std::vector<double>> means;
  std::optional<std::set<HeadLocation>> selected;
  std::uint32_t n_examples = 0;
  ProfileFormat format = ProfileFormat::kScalar;

  bool operator==(const SteeringProfile&) const = default;

  // Injection of the selected heads' means (empty when nothing is selected).
  InjectionSpec injection(PositionRule rule = PositionRule::kLastInputToken) const {
    InjectionSpec spec;
    spec.position_rule = rule;
    if (!selected) return spec;
    for (const auto& loc : *selected) spec.entries.emplace(loc, to_float(means.at(loc)));
    return spec;
  }

  InjectionSpec injection_for(const std::set<HeadLocation>& mask) const {
    InjectionSpec spec;
    for (const auto& loc : mask) {
      const auto it = means.find(loc);
      if (it == means.end()) throw ArgumentError("mask head " + to_string(loc) + " has no mean in the profile");
      spec.entries.emplace(loc, to_float(it->second));
    }
    return spec;
  }

  static std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }
};

inline void check_compatible(const SteeringProfile& profile, const ModelConfig& config) {
  if (profile.config_hash != config_hash(config))
    throw IncompatibleError("steering profile was extracted from a model with a different configuration");
}

// Head outputs at the last token of `tokens`, one entry per head location.
template <typename T>
std::map<HeadLocation, std::vector<double>> last_token_activations(const Parameters<T>& model,
                                                                   std::span<const int> tokens) {
  const auto locs = all_head_locations(model.config);
  const std::set<HeadLocation> taps(locs.begin(), locs.end());
  std::vector<ActivationRecord> recs;
  PrefixRun<T> run(model, tokens);
  run.last_logits(nullptr, &taps, &recs);
  std::map<HeadLocation, std::vector<double>> out;
  for (auto& rec : recs) out.emplace(rec.location, std::vector<double>(rec.vector.begin(), rec.vector.end()));
  return out;
}

// Means over `queries` of the head outputs at each query's last token. The
// fold runs in query order in double precision.
template <typename T>
std::map<HeadLocation, std::vector<double>> mean_head_activations(const Parameters<T>& model,
                                                                  const std::vector<std::vector<int>>& queries) {
  if (queries.empty()) throw ArgumentError("mean activations: no queries");
  const auto dh = static_cast<std::size_t>(model.config.d_head());
  std::map<HeadLocation, std::vector<double>> sums;
  for (const auto& l : all_head_locations(model.config)) sums[l].assign(dh, 0.0);
  for (const auto& q : queries) {
    for (const auto& [loc, v] : last_token_activations(model, q)) {
      auto& s = sums[loc];
      for (std::size_t i = 0; i < dh; ++i) s[i] += v[i];
    }
  }
  const double n = static_cast<double>(queries.size());
  for (auto& [loc, s] : sums)
    for (auto& v : s) v /= n;
  return sums;
}

// Per-example activations are read at the last token of the rendered query.
// The gold label token that follows it in the demonstration cannot change
// those activations under the causal mask, so it is not run.
template <typename T>
SteeringProfile extract_mean_activations(const Parameters<T>& model, const std::vector<PreferenceExample>& examples,
                                         const CriterionSpec& criterion, std::string_view context_prefix = {}) {
  if (examples.empty()) throw ArgumentError("extract: no examples");
  std::vector<std::vector<int>> queries;
  queries.reserve(examples.size());
  for (const auto& ex : examples) {
    if (ex.criterion != criterion.id)
      throw ArgumentError("extract: example " + ex.id + " has criterion '" + ex.criterion + "', expected '" +
                          criterion.id + "'");
    auto q = format_scalar(ex.prompt, ex.response, criterion, context_prefix);
    check_fits(q, model.config.max_context);
    queries.push_back(std::move(q));
  }
  SteeringProfile p;
  p.criterion = criterion.id;
  p.config_hash = config_hash(model.config);
  p.means = mean_head_activations(model, queries);
  p.n_examples = static_cast<std::uint32_t>(examples.size());
  p.format = ProfileFormat::kScalar;
  return p;
}

template <typename T>
SteeringProfile extract_mean_activations_ranked(const Parameters<T>& model,
                                                const std::vector<SolvedRankedExample>& examples,
                                                const CriterionSpec& criterion, std::string_view context_prefix = {}) {
  if (examples.empty()) throw ArgumentError("extract: no examples");
  std::vector<std::vector<int>> queries;
  for (const auto& ex : examples) {
    auto q = format_ranked(ex.prompt, ex.response_a, ex.response_b, criterion, context_prefix);
    check_fits(q, model.config.max_context);
    queries.push_back(std::move(q));
  }
  SteeringProfile p;
  p.criterion = criterion.id;
  p.config_hash = config_hash(model.config);
  p.means = mean_head_activations(model, queries);
  p.n_examples = static_cast<std::uint32_t>(examples.size());
  p.format = ProfileFormat::kRanked;
  return p;
}

// Profile file: "ACTRM-PROF", u16 version, criterion, 32-byte config hash,
// format tag, n_examples, location count, d_head, per location (layer u16,
// head u16, d_head float64), selected-set section, trailing CRC32.
inline constexpr std::string_view kProfileMagic = "ACTRM-PROF";
inline constexpr std::uint16_t kProfileVersion = 1;

inline std::vector<std::uint8_t> profile_bytes(const SteeringProfile& p) {
  ByteWriter w;
  w.raw(kProfileMagic);
  w.u16(kProfileVersion);
  w.str(p.criterion);
  w.raw(p.config_hash);
  w.u8(static_cast<std::uint8_t>(p.format));
  w.u32(p.n_examples);
  w.u32(static_cast<std::uint32_t>(p.means.size()));
  const std::size_t dh = p.means.empty() ? 0 : p.means.begin()->second.size();
  w.u32(static_cast<std::uint32_t>(dh));
  for (const auto& [loc, v] : p.means) {
    if (v.size() != dh) throw ArgumentError("profile: mean vectors differ in length");
    w.u16(static_cast<std::uint16_t>(loc.layer));
    w.u16(static_cast<std::uint16_t>(loc.head));
    for (double x : v) w.f64(x);
  }
  w.u8(p.selected ? 1 : 0);
  if (p.selected) {
    w.u32(static_cast<std::uint32_t>(p.selected->size()));
    for (const auto& loc : *p.selected) {
      w.u16(static_cast<std::uint16_t>(loc.layer));
      w.u16(static_cast<std::uint16_t>(loc.head));
    }
  }
  w.append_crc();
  return w.bytes();
}

inline SteeringProfile parse_profile(std::span<const std::uint8_t> bytes) {
  ByteReader r = open_framed(bytes, kProfileMagic, kProfileVersion, "profile");
  SteeringProfile p;
  p.criterion = r.str();
  const auto hash = r.raw(32);
  std::copy(hash.begin(), hash.end(), p.config_hash.begin());
  const auto fmt = r.u8();
  if (fmt > 1) throw IoError("profile: unknown format tag " + std::to_string(fmt));
  p.format = static_cast<ProfileFormat>(fmt);
  p.n_examples = r.u32();
  const auto count = r.u32();
  const auto dh = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    HeadLocation loc{r.u16(), 0};
    loc.head = r.u16();
    std::vector<double> v(dh);
    for (auto& x : v) x = r.f64();
    p.means.emplace(loc, std::move(v));
  }
  if (r.u8()) {
    std::set<HeadLocation> sel;
    const auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      HeadLocation loc{r.u16(), 0};
      loc.head = r.u16();
      if (!p.means.contains(loc)) throw IoError("profile: selected head " + to_string(loc) + " has no mean");
      sel.insert(loc);
    }
    p.selected = std::move(sel);
  }
  if (r.remaining() != 0) throw IoError("profile: trailing bytes");
  if (p.n_examples < 1) throw IoError("profile: n_examples is zero");
  return p;
}

inline void save_profile(const SteeringProfile& p, const std::string& path) { write_file_bytes(path, profile_bytes(p)); }

inline SteeringProfile load_profile(const std::string& path) { return parse_profile(read_file_bytes(path)); }

// Loads and checks the profile against the model it will steer.
inline SteeringProfile load_profile(const std::string& path, const ModelConfig& model_config) {
  auto p = load_profile(path);
  check_compatible(p, model_config);
  return p;
}

}  // namespace actrm
