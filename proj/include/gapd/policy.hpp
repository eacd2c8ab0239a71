#pragma once

// Sparse featurized linear-softmax next-token policy.
//
//   score(v | ctx) = sum_{r in ctx.rows} W[r][v] + sum_{c in ctx.cands, c.token == v} w[c.feature] * c.value
//
// Context rows index a (rows x V) weight table; candidate features are scalar-weighted
// indicators on specific (context, token) pairs. Teacher contexts add a gold block.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gapd/rng.hpp"

namespace gapd {

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TokenClass { Special, Keyword, Open, Sep, Close, OrderMode, CompareMode, Slot, Head, Fragment, Entity, Literal, Dtype };

class Vocab {
 public:
  int add(const std::string& token, TokenClass cls) {
    auto it = index_.find(token);
    if (it != index_.end()) {
      if (classes_[static_cast<std::size_t>(it->second)] != cls)
        throw PolicyError("token '" + token + "' registered with two classes");
      return it->second;
    }
    int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    classes_.push_back(cls);
    index_.emplace(token, id);
    return id;
  }

  std::optional<int> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int id(std::string_view token) const {
    auto f = find(token);
    if (!f) throw PolicyError("token '" + std::string(token) + "' not in vocabulary");
    return *f;
  }

  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  TokenClass cls(int id) const { return classes_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::vector<TokenClass> classes_;
  std::map<std::string, int> index_;
};

struct CandidateFeature {
  int token = 0;
  int feature = 0;
  double value = 1.0;
  bool operator==(const CandidateFeature&) const = default;
};

struct ContextState {
  std::vector<int> rows;
  std::vector<CandidateFeature> cands;
  bool teacher = false;
  bool operator==(const ContextState&) const = default;
};

// Parameter vector: row-major (rows x vocab) table followed by `scalars` candidate weights.
struct PolicyParams {
  int rows = 0;
  int vocab = 0;
  int scalars = 0;
  std::vector<double> theta;

  PolicyParams() = default;
  PolicyParams(int rows_, int vocab_, int scalars_)
      : rows(rows_), vocab(vocab_), scalars(scalars_),
        theta(static_cast<std::size_t>(rows_) * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(scalars_), 0.0) {
    if (rows_ < 1 || vocab_ < 1 || scalars_ < 0) throw PolicyError("invalid policy dimensions");
  }

  std::size_t size() const { return theta.size(); }
  std::size_t row_offset(int r) const { return static_cast<std::size_t>(r) * static_cast<std::size_t>(vocab); }
  std::size_t scalar_offset(int f) const { return row_offset(rows) + static_cast<std::size_t>(f); }
  double& W(int r, int v) { return theta[row_offset(r) + static_cast<std::size_t>(v)]; }
  double W(int r, int v) const { return theta[row_offset(r) + static_cast<std::size_t>(v)]; }
  double& w(int f) { return theta[scalar_offset(f)]; }
  double w(int f) const { return theta[scalar_offset(f)]; }

  bool finite() const {
    return std::all_of(theta.begin(), theta.end(), [](double x) { return std::isfinite(x); });
  }
};

// Frozen copy used for pi_old and the KL reference.
using FrozenParams = std::shared_ptr<const PolicyParams>;

inline FrozenParams snapshot(const PolicyParams& p) { return std::make_shared<const PolicyParams>(p); }

inline void check_context(const PolicyParams& p, const ContextState& ctx) {
  for (int r : ctx.rows)
    if (r < 0 || r >= p.rows) throw PolicyError("context row out of range");
  for (const auto& c : ctx.cands)
    if (c.token < 0 || c.token >= p.vocab || c.feature < 0 || c.feature >= p.scalars)
      throw PolicyError("candidate feature out of range");
}

inline void scores_into(const PolicyParams& p, const ContextState& ctx, std::vector<double>& s) {
  s.assign(static_cast<std::size_t>(p.vocab), 0.0);
  for (int r : ctx.rows) {
    const double* row = p.theta.data() + p.row_offset(r);
    for (int v = 0; v < p.vocab; ++v) s[static_cast<std::size_t>(v)] += row[v];
  }
  for (const auto& c : ctx.cands) s[static_cast<std::size_t>(c.token)] += p.w(c.feature) * c.value;
}

// Stable softmax of scores / temperature; returns log-normalizer of the scaled scores.
inline double softmax_into(const std::vector<double>& s, double temperature, std::vector<double>& probs) {
  const double inv = 1.0 / temperature;
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : s) mx = std::max(mx, x * inv);
  probs.resize(s.size());
  double z = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    probs[i] = std::exp(s[i] * inv - mx);
    z += probs[i];
  }
  for (double& x : probs) x /= z;
  return mx + std::log(z);
}

struct Distribution {
  std::vector<double> probs;
  std::vector<double> logp;
};

inline Distribution next_token_distribution(const PolicyParams& p, const ContextState& ctx, double temperature = 1.0) {
  if (!(temperature > 0)) throw PolicyError("temperature must be positive");
  std::vector<double> s;
  scores_into(p, ctx, s);
  Distribution d;
  double lse = softmax_into(s, temperature, d.probs);
  d.logp.resize(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) d.logp[i] = s[i] / temperature - lse;
  return d;
}

inline double log_prob(const PolicyParams& p, const ContextState& ctx, int token) {
  if (token < 0 || token >= p.vocab) throw PolicyError("token out of range");
  return next_token_distribution(p, ctx).logp[static_cast<std::size_t>(token)];
}

// Adds scale * d(score)/d(theta) contracted with dscore (size V) into grad.
inline void accumulate_score_grad(const PolicyParams& p, const ContextState& ctx, const std::vector<double>& dscore,
                                  double scale, std::vector<double>& grad) {
  for (int r : ctx.rows) {
    double* g = grad.data() + p.row_offset(r);
    for (int v = 0; v < p.vocab; ++v) g[v] += scale * dscore[static_cast<std::size_t>(v)];
  }
  for (const auto& c : ctx.cands)
    grad[p.scalar_offset(c.feature)] += scale * dscore[static_cast<std::size_t>(c.token)] * c.value;
}

// d log pi(token | ctx) / d theta = phi(ctx, token) - sum_v p(v) phi(ctx, v).
inline std::vector<double> grad_log_prob(const PolicyParams& p, const ContextState& ctx, int token) {
  auto d = next_token_distribution(p, ctx);
  std::vector<double> dscore(d.probs.size());
  for (std::size_t v = 0; v < dscore.size(); ++v) dscore[v] = -d.probs[v];
  dscore[static_cast<std::size_t>(token)] += 1.0;
  std::vector<double> grad(p.size(), 0.0);
  accumulate_score_grad(p, ctx, dscore, 1.0, grad);
  return grad;
}

// Exact KL(p || q) between two distributions over the same vocabulary.
inline double kl_divergence(const Distribution& p, const Distribution& q) {
  double kl = 0;
  for (std::size_t v = 0; v < p.probs.size(); ++v) kl += p.probs[v] * (p.logp[v] - q.logp[v]);
  return std::max(kl, 0.0);
}

// ---------------------------------------------------------------------------
// Sampling

// Nucleus sampling: smallest probability-sorted prefix (ties by id) with mass >= top_p.
inline int sample_nucleus(const std::vector<double>& probs, double top_p, Rng& rng) {
  if (!(top_p > 0 && top_p <= 1)) throw PolicyError("top_p must lie in (0, 1]");
  const std::size_t n = probs.size();
  if (top_p >= 1.0) {
    double u = rng.uniform(), cum = 0;
    for (std::size_t v = 0; v < n; ++v) {
      cum += probs[v];
      if (u < cum) return static_cast<int>(v);
    }
    for (std::size_t v = n; v-- > 0;)
      if (probs[v] > 0) return static_cast<int>(v);
    return 0;
  }
  auto less = [&](int a, int b) {
    double pa = probs[static_cast<std::size_t>(a)], pb = probs[static_cast<std::size_t>(b)];
    return pa < pb || (pa == pb && a > b);
  };
  std::vector<int> heap(n);
  for (std::size_t v = 0; v < n; ++v) heap[v] = static_cast<int>(v);
  std::make_heap(heap.begin(), heap.end(), less);
  std::vector<int> kept;
  double mass = 0;
  auto end = heap.end();
  while (end != heap.begin() && mass < top_p) {
    std::pop_heap(heap.begin(), end, less);
    --end;
    kept.push_back(*end);
    mass += probs[static_cast<std::size_t>(*end)];
  }
  double u = rng.uniform() * mass, cum = 0;
  for (int v : kept) {
    cum += probs[static_cast<std::size_t>(v)];
    if (u < cum) return v;
  }
  return kept.back();
}

inline int argmax_token(const std::vector<double>& probs) {
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

struct SampledTurn {
  std::vector<int> tokens;
  std::vector<ContextState> contexts;
  std::vector<double> logp;  // under the temperature-1 distribution
  bool ended = false;        // emitted the end-of-turn token
};

// `Provider` exposes `ContextState context() const` and `void push(int token)`.
// Greedy decoding when `greedy` is set; otherwise nucleus sampling at `temperature`.
template <class Provider>
SampledTurn sample_turn(const PolicyParams& p, Provider provider, double temperature, double top_p, Rng& rng,
                        int eot_token, int max_tokens, bool greedy = false) {
  if (!(temperature > 0)) throw PolicyError("temperature must be positive");
  SampledTurn out;
  std::vector<double> s, probs, probs_t;
  for (int k = 0; k < max_tokens; ++k) {
    ContextState ctx = provider.context();
    scores_into(p, ctx, s);
    double lse = softmax_into(s, 1.0, probs);
    int tok;
    if (greedy) {
      tok = argmax_token(probs);
    } else if (temperature == 1.0) {
      tok = sample_nucleus(probs, top_p, rng);
    } else {
      softmax_into(s, temperature, probs_t);
      tok = sample_nucleus(probs_t, top_p, rng);
    }
    out.tokens.push_back(tok);
    out.logp.push_back(s[static_cast<std::size_t>(tok)] - lse);
    out.contexts.push_back(std::move(ctx));
    provider.push(tok);
    if (tok == eot_token) {
      out.ended = true;
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json params_to_json(const PolicyParams& p, const nlohmann::json& layout = nlohmann::json::object()) {
  return {{"format", "gapd-policy"},
          {"version", 1},
          {"rows", p.rows},
          {"vocab", p.vocab},
          {"scalars", p.scalars},
          {"layout", layout},
          {"theta", p.theta}};
}

inline PolicyParams params_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "gapd-policy" || j.value("version", 0) != 1)
    throw PolicyError("unrecognized checkpoint header");
  PolicyParams p(j.at("rows").get<int>(), j.at("vocab").get<int>(), j.at("scalars").get<int>());
  auto theta = j.at("theta").get<std::vector<double>>();
  if (theta.size() != p.size()) throw PolicyError("checkpoint size does not match its header");
  p.theta = std::move(theta);
  if (!p.finite()) throw PolicyError("checkpoint contains non-finite parameters");
  return p;
}

}  // namespace gapd
