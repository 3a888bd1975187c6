#pragma once

// Tiny pre-norm decoder-only transformer with per-head taps and injection.
//
// The head-output site is the value-weighted sum of one attention head,
// before the concatenated heads pass through the output projection. Taps
// read that vector; injection replaces it.
//
// Every forward path (full sequence, cached prefix, training) runs the same
// per-position step function, so results agree bit-for-bit between them.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "actrm/binary_io.hpp"
#include "actrm/error.hpp"
#include "actrm/rng.hpp"

namespace actrm {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 32;
  int vocab_size = 103;
  int max_context = 256;
  std::uint64_t seed = 0;
  bool tied_unembedding = false;

  int d_head() const { return d_model / n_heads; }
  int d_ff() const { return 4 * d_model; }
  int n_head_locations() const { return n_layers * n_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || vocab_size < 1 || max_context < 1)
      throw ConfigError("model config: all counts must be >= 1");
    if (d_model % n_heads != 0)
      throw ConfigError("model config: d_model " + std::to_string(d_model) +
                        " is not divisible by n_heads " + std::to_string(n_heads));
  }

  void serialize(ByteWriter& w) const {
    w.u32(static_cast<std::uint32_t>(n_layers));
    w.u32(static_cast<std::uint32_t>(n_heads));
    w.u32(static_cast<std::uint32_t>(d_model));
    w.u32(static_cast<std::uint32_t>(vocab_size));
    w.u32(static_cast<std::uint32_t>(max_context));
    w.u64(seed);
    w.u8(tied_unembedding ? 1 : 0);
  }

  static ModelConfig deserialize(ByteReader& r) {
    ModelConfig c;
    c.n_layers = static_cast<int>(r.u32());
    c.n_heads = static_cast<int>(r.u32());
    c.d_model = static_cast<int>(r.u32());
    c.vocab_size = static_cast<int>(r.u32());
    c.max_context = static_cast<int>(r.u32());
    c.seed = r.u64();
    c.tied_unembedding = r.u8() != 0;
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

inline Digest config_hash(const ModelConfig& config) {
  ByteWriter w;
  config.serialize(w);
  return sha256_of(w.bytes());
}

struct HeadLocation {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadLocation&) const = default;
};

inline std::string to_string(const HeadLocation& l) {
  return "(" + std::to_string(l.layer) + "," + std::to_string(l.head) + ")";
}

inline std::vector<HeadLocation> all_head_locations(const ModelConfig& c) {
  std::vector<HeadLocation> out;
  out.reserve(static_cast<std::size_t>(c.n_head_locations()));
  for (int l = 0; l < c.n_layers; ++l)
    for (int h = 0; h < c.n_heads; ++h) out.push_back({l, h});
  return out;
}

inline void check_location(const ModelConfig& c, const HeadLocation& l) {
  if (l.layer < 0 || l.layer >= c.n_layers || l.head < 0 || l.head >= c.n_heads)
    throw RangeError("head location " + to_string(l) + " out of range");
}

struct ActivationRecord {
  HeadLocation location;
  int position = 0;
  std::vector<float> vector;
};

enum class PositionRule { kLastInputToken, kAllPositions };

struct InjectionSpec {
  std::map<HeadLocation, std::vector<float>> entries;
  PositionRule position_rule = PositionRule::kLastInputToken;

  bool empty() const { return entries.empty(); }
};

// Parameter tensors live in one flat buffer; TensorSlot names a region.
struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

struct LayerSlots {
  std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_pr, b_pr;
};

struct ParamLayout {
  std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, w_out = 0;
  std::vector<LayerSlots> layers;
  std::vector<TensorSlot> tensors;  // declaration order
  std::size_t total = 0;

  static ParamLayout build(const ModelConfig& c) {
    ParamLayout p;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff());
    const auto add = [&p](std::string name, std::size_t rows, std::size_t cols) {
      TensorSlot s{std::move(name), p.total, rows, cols};
      p.total += s.size();
      p.tensors.push_back(s);
      return s.offset;
    };
    p.tok_emb = add("tok_emb", static_cast<std::size_t>(c.vocab_size), d);
    p.pos_emb = add("pos_emb", static_cast<std::size_t>(c.max_context), d);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      LayerSlots s{};
      s.ln1_g = add(pre + "ln1_g", 1, d);
      s.ln1_b = add(pre + "ln1_b", 1, d);
      s.w_qkv = add(pre + "w_qkv", 3 * d, d);
      s.b_qkv = add(pre + "b_qkv", 1, 3 * d);
      s.w_o = add(pre + "w_o", d, d);
      s.b_o = add(pre + "b_o", 1, d);
      s.ln2_g = add(pre + "ln2_g", 1, d);
      s.ln2_b = add(pre + "ln2_b", 1, d);
      s.w_fc = add(pre + "w_fc", ff, d);
      s.b_fc = add(pre + "b_fc", 1, ff);
      s.w_pr = add(pre + "w_pr", d, ff);
      s.b_pr = add(pre + "b_pr", 1, d);
      p.layers.push_back(s);
    }
    p.lnf_g = add("lnf_g", 1, d);
    p.lnf_b = add("lnf_b", 1, d);
    p.w_out = c.tied_unembedding ? p.tok_emb : add("w_out", static_cast<std::size_t>(c.vocab_size), d);
    return p;
  }
};

template <typename T>
struct Parameters {
  ModelConfig config;
  ParamLayout layout;
  std::vector<T> data;

  const T* at(std::size_t offset) const { return data.data() + offset; }
  T* at(std::size_t offset) { return data.data() + offset; }

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out{config, layout, std::vector<U>(data.size())};
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }
};

template <typename T = float>
Parameters<T> init_params(const ModelConfig& config) {
  config.validate();
  Parameters<T> p{config, ParamLayout::build(config), {}};
  p.data.assign(p.layout.total, T(0));
  Rng rng(config.seed);
  const double std_w = 0.02;
  const double std_res = 0.02 / std::sqrt(2.0 * config.n_layers);
  const auto fill_normal = [&](std::size_t off, std::size_t n, double std) {
    for (std::size_t i = 0; i < n; ++i) p.data[off + i] = static_cast<T>(rng.normal() * std);
  };
  const auto fill_ones = [&](std::size_t off, std::size_t n) {
    std::fill_n(p.data.begin() + static_cast<std::ptrdiff_t>(off), n, T(1));
  };
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff());
  fill_normal(p.layout.tok_emb, static_cast<std::size_t>(config.vocab_size) * d, std_w);
  fill_normal(p.layout.pos_emb, static_cast<std::size_t>(config.max_context) * d, std_w);
  for (const auto& s : p.layout.layers) {
    fill_ones(s.ln1_g, d);
    fill_normal(s.w_qkv, 3 * d * d, std_w);
    fill_normal(s.w_o, d * d, std_res);
    fill_ones(s.ln2_g, d);
    fill_normal(s.w_fc, ff * d, std_w);
    fill_normal(s.w_pr, d * ff, std_res);
  }
  fill_ones(p.layout.lnf_g, d);
  if (!config.tied_unembedding)
    fill_normal(p.layout.w_out, static_cast<std::size_t>(config.vocab_size) * d, std_w);
  return p;
}

namespace kernel {

// Four independent partial sums: deterministic and friendlier to the
// vectorizer than a single serial chain.
template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// y = W x + b, W row-major [rows x cols]. b may be null.
template <typename T>
inline void matvec(const T* w, const T* b, const T* x, T* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T acc = dot(w + r * cols, x, cols);
    y[r] = b ? acc + b[r] : acc;
  }
}

template <typename T>
struct NormStats {
  T mean;
  T rstd;
};

template <typename T>
inline NormStats<T> layernorm(const T* x, const T* g, const T* b, T* y, std::size_t n) {
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += x[i];
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + 1e-5);
  for (std::size_t i = 0; i < n; ++i)
    y[i] = static_cast<T>((x[i] - mean) * rstd) * g[i] + b[i];
  return {static_cast<T>(mean), static_cast<T>(rstd)};
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
inline T gelu(T x) {
  const double xd = x;
  return static_cast<T>(0.5 * xd * (1.0 + std::tanh(kGeluC * (xd + 0.044715 * xd * xd * xd))));
}

template <typename T>
inline double gelu_grad(T x) {
  const double xd = x;
  const double u = kGeluC * (xd + 0.044715 * xd * xd * xd);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * xd * xd);
  return 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du;
}

}  // namespace kernel

// Softmax accumulated in double.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

// Per-position keys and values for every layer.
template <typename T>
struct KvCache {
  std::vector<std::vector<T>> k, v;  // [layer][pos * d_model]
  int length = 0;

  explicit KvCache(const ModelConfig& c)
      : k(static_cast<std::size_t>(c.n_layers)), v(static_cast<std::size_t>(c.n_layers)) {}
};

// Activations of one position kept for backpropagation.
template <typename T>
struct LayerTrace {
  std::vector<T> x_in, ln1, q, att, head_out, x_mid, ln2, fc, act;
  kernel::NormStats<T> ln1_stats{}, ln2_stats{};
};

template <typename T>
struct PositionTrace {
  int token = 0;
  std::vector<LayerTrace<T>> layers;
  std::vector<T> x_final, lnf;
  kernel::NormStats<T> lnf_stats{};
};

struct StepRequest {
  const InjectionSpec* injection = nullptr;  // applied at this position when non-null
  const std::set<HeadLocation>* taps = nullptr;
  std::vector<ActivationRecord>* taps_out = nullptr;
  bool want_logits = true;
};

// Runs one position through the network, appending its keys/values to the
// cache. Returns logits (empty when not requested).
template <typename T>
std::vector<T> step(const Parameters<T>& p, KvCache<T>& cache, int token, const StepRequest& req,
                    PositionTrace<T>* trace = nullptr) {
  const ModelConfig& c = p.config;
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head());
  const auto ff = static_cast<std::size_t>(c.d_ff());
  const int pos = cache.length;
  if (pos >= c.max_context)
    throw RangeError("sequence length exceeds max_context " + std::to_string(c.max_context));
  if (token < 0 || token >= c.vocab_size) throw RangeError("token id " + std::to_string(token) + " out of range");

  std::vector<T> x(d);
  {
    const T* te = p.at(p.layout.tok_emb + static_cast<std::size_t>(token) * d);
    const T* pe = p.at(p.layout.pos_emb + static_cast<std::size_t>(pos) * d);
    for (std::size_t i = 0; i < d; ++i) x[i] = te[i] + pe[i];
  }
  if (trace) {
    trace->token = token;
    trace->layers.resize(static_cast<std::size_t>(c.n_layers));
  }

  std::vector<T> ln(d), qkv(3 * d), head_out(d), proj(d), fc(ff), act(ff), mlp(d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto n_ctx = static_cast<std::size_t>(pos) + 1;
  std::vector<double> scores(n_ctx);
  std::vector<T> att_all(static_cast<std::size_t>(c.n_heads) * n_ctx);

  for (int l = 0; l < c.n_layers; ++l) {
    const LayerSlots& s = p.layout.layers[static_cast<std::size_t>(l)];
    LayerTrace<T>* lt = trace ? &trace->layers[static_cast<std::size_t>(l)] : nullptr;
    if (lt) lt->x_in = x;

    const auto st1 = kernel::layernorm(x.data(), p.at(s.ln1_g), p.at(s.ln1_b), ln.data(), d);
    kernel::matvec(p.at(s.w_qkv), p.at(s.b_qkv), ln.data(), qkv.data(), 3 * d, d);
    if (lt) {
      lt->ln1 = ln;
      lt->ln1_stats = st1;
      lt->q.assign(qkv.begin(), qkv.begin() + static_cast<std::ptrdiff_t>(d));
    }

    auto& kc = cache.k[static_cast<std::size_t>(l)];
    auto& vc = cache.v[static_cast<std::size_t>(l)];
    kc.resize(n_ctx * d);
    vc.resize(n_ctx * d);
    std::copy_n(qkv.begin() + static_cast<std::ptrdiff_t>(d), d, kc.begin() + static_cast<std::ptrdiff_t>(pos * d));
    std::copy_n(qkv.begin() + static_cast<std::ptrdiff_t>(2 * d), d, vc.begin() + static_cast<std::ptrdiff_t>(pos * d));

    for (int h = 0; h < c.n_heads; ++h) {
      const std::size_t ho = static_cast<std::size_t>(h) * dh;
      const T* q = qkv.data() + ho;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n_ctx; ++j) {
        scores[j] = static_cast<double>(kernel::dot(q, kc.data() + j * d + ho, dh)) * scale;
        mx = std::max(mx, scores[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < n_ctx; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        sum += scores[j];
      }
      T* att = att_all.data() + static_cast<std::size_t>(h) * n_ctx;
      for (std::size_t j = 0; j < n_ctx; ++j) att[j] = static_cast<T>(scores[j] / sum);
      for (std::size_t i = 0; i < dh; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n_ctx; ++j) acc += static_cast<double>(att[j]) * vc[j * d + ho + i];
        head_out[ho + i] = static_cast<T>(acc);
      }
    }

    if (req.injection) {
      for (const auto& [loc, vec] : req.injection->entries) {
        if (loc.layer != l) continue;
        const std::size_t ho = static_cast<std::size_t>(loc.head) * dh;
        for (std::size_t i = 0; i < dh; ++i) head_out[ho + i] = static_cast<T>(vec[i]);
      }
    }
    if (req.taps && req.taps_out) {
      for (const auto& loc : *req.taps) {
        if (loc.layer != l) continue;
        const std::size_t ho = static_cast<std::size_t>(loc.head) * dh;
        ActivationRecord rec{loc, pos, std::vector<float>(dh)};
        for (std::size_t i = 0; i < dh; ++i) rec.vector[i] = static_cast<float>(head_out[ho + i]);
        req.taps_out->push_back(std::move(rec));
      }
    }

    kernel::matvec(p.at(s.w_o), p.at(s.b_o), head_out.data(), proj.data(), d, d);
    for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
    if (lt) {
      lt->att = att_all;
      lt->head_out = head_out;
      lt->x_mid = x;
    }

    const auto st2 = kernel::layernorm(x.data(), p.at(s.ln2_g), p.at(s.ln2_b), ln.data(), d);
    kernel::matvec(p.at(s.w_fc), p.at(s.b_fc), ln.data(), fc.data(), ff, d);
    for (std::size_t i = 0; i < ff; ++i) act[i] = kernel::gelu(fc[i]);
    kernel::matvec(p.at(s.w_pr), p.at(s.b_pr), act.data(), mlp.data(), d, ff);
    for (std::size_t i = 0; i < d; ++i) x[i] += mlp[i];
    if (lt) {
      lt->ln2 = ln;
      lt->ln2_stats = st2;
      lt->fc = fc;
      lt->act = act;
    }
  }
  cache.length = pos + 1;

  if (!req.want_logits && !trace) return {};
  const auto stf = kernel::layernorm(x.data(), p.at(p.layout.lnf_g), p.at(p.layout.lnf_b), ln.data(), d);
  if (trace) {
    trace->x_final = x;
    trace->lnf = ln;
    trace->lnf_stats = stf;
  }
  if (!req.want_logits) return {};
  std::vector<T> logits(static_cast<std::size_t>(c.vocab_size));
  kernel::matvec(p.at(p.layout.w_out), static_cast<const T*>(nullptr), ln.data(), logits.data(),
                 static_cast<std::size_t>(c.vocab_size), d);
  return logits;
}

inline void validate_injection(const ModelConfig& c, const InjectionSpec& inj) {
  for (const auto& [loc, vec] : inj.entries) {
    check_location(c, loc);
    if (vec.size() != static_cast<std::size_t>(c.d_head()))
      throw RangeError("injection vector at " + to_string(loc) + " has length " + std::to_string(vec.size()) +
                       ", expected " + std::to_string(c.d_head()));
  }
}

inline void check_request(const ModelConfig& c, std::span<const int> tokens, const std::set<HeadLocation>& taps,
                          const InjectionSpec* injection) {
  if (tokens.empty()) throw ArgumentError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(c.max_context))
    throw RangeError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_context " +
                     std::to_string(c.max_context));
  for (const auto& l : taps) check_location(c, l);
  if (injection) validate_injection(c, *injection);
}

template <typename T>
struct ForwardResult {
  std::vector<T> logits;  // [len x vocab], row-major
  std::vector<ActivationRecord> taps_out;

  std::span<const T> row(std::size_t pos, std::size_t vocab) const {
    return std::span<const T>(logits).subspan(pos * vocab, vocab);
  }
};

// Full forward pass. Taps report the head outputs at the last input position,
// after injection.
template <typename T>
ForwardResult<T> forward(const Parameters<T>& p, std::span<const int> tokens, const std::set<HeadLocation>& taps = {},
                         const InjectionSpec* injection = nullptr) {
  check_request(p.config, tokens, taps, injection);
  ForwardResult<T> out;
  const auto vocab = static_cast<std::size_t>(p.config.vocab_size);
  out.logits.reserve(tokens.size() * vocab);
  KvCache<T> cache(p.config);
  const bool all_positions = injection && injection->position_rule == PositionRule::kAllPositions;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const bool last = i + 1 == tokens.size();
    StepRequest req;
    if (injection && !injection->empty() && (all_positions || last)) req.injection = injection;
    if (last) {
      req.taps = &taps;
      req.taps_out = &out.taps_out;
    }
    auto logits = step(p, cache, tokens[i], req);
    out.logits.insert(out.logits.end(), logits.begin(), logits.end());
  }
  return out;
}

// Runs every position except the last once, so the last position can be
// re-evaluated cheaply under many LAST_INPUT_TOKEN injections.
template <typename T>
class PrefixRun {
 public:
  PrefixRun(const Parameters<T>& p, std::span<const int> tokens) : params_(&p), cache_(p.config) {
    check_request(p.config, tokens, {}, nullptr);
    last_token_ = tokens.back();
    StepRequest req;
    req.want_logits = false;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) step(p, cache_, tokens[i], req);
  }

  std::vector<T> last_logits(const InjectionSpec* injection = nullptr, const std::set<HeadLocation>* taps = nullptr,
                             std::vector<ActivationRecord>* taps_out = nullptr) const {
    if (injection) {
      if (injection->position_rule != PositionRule::kLastInputToken)
        throw ArgumentError("PrefixRun supports LAST_INPUT_TOKEN injection only");
      validate_injection(params_->config, *injection);
    }
    if (taps)
      for (const auto& l : *taps) check_location(params_->config, l);
    KvCache<T> cache = cache_;
    StepRequest req;
    if (injection && !injection->empty()) req.injection = injection;
    req.taps = taps;
    req.taps_out = taps_out;
    return step(*params_, cache, last_token_, req);
  }

 private:
  const Parameters<T>* params_;
  KvCache<T> cache_;
  int last_token_ = 0;
};

template <typename T>
std::vector<double> to_double(std::span<const T> v) {
  return std::vector<double>(v.begin(), v.end());
}

// Softmax of the last-position logits, optionally shifted by a constant.
template <typename T>
std::vector<double> distribution_from_logits(std::span<const T> logits, double logit_offset = 0.0) {
  auto d = to_double(logits);
  for (auto& v : d) v += logit_offset;
  return softmax(d);
}

template <typename T>
std::vector<double> next_token_distribution(const Parameters<T>& p, std::span<const int> tokens,
                                            const InjectionSpec* injection = nullptr) {
  if (!injection || injection->position_rule == PositionRule::kLastInputToken) {
    PrefixRun<T> run(p, tokens);
    const auto logits = run.last_logits(injection);
    return distribution_from_logits<T>(logits);
  }
  const auto res = forward(p, tokens, {}, injection);
  return distribution_from_logits(res.row(tokens.size() - 1, static_cast<std::size_t>(p.config.vocab_size)));
}

}  // namespace actrm
