#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "promptmatch/corpus.hpp"
#include "promptmatch/error.hpp"
#include "promptmatch/rng.hpp"

namespace promptmatch {

// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

// One-hidden-layer ReLU network: out = W2 relu(W1 x + b1) + b2.
struct MlpParams {
  Matrix w1;  // hidden x in
  Vector b1;  // hidden
  Matrix w2;  // out x hidden
  Vector b2;  // out

  std::size_t in_dim() const noexcept { return w1.cols; }
  std::size_t hidden_dim() const noexcept { return w1.rows; }
  std::size_t out_dim() const noexcept { return w2.rows; }

  static MlpParams zeros(std::size_t in, std::size_t hidden, std::size_t out) {
    return {Matrix(hidden, in), Vector(hidden, 0.0), Matrix(out, hidden), Vector(out, 0.0)};
  }

  bool operator==(const MlpParams&) const = default;
};

// Matching network weights. `key_net` maps prompt embeddings (dim d) to keys,
// `query_net` maps the state representation (dim 2d) to the query; logits are
// scale * <query, key_i>.
//
// The same type doubles as the gradient container.
struct MatchingNetParams {
  MlpParams key_net;
  MlpParams query_net;
  double scale = 1.0;

  std::size_t embed_dim() const noexcept { return key_net.in_dim(); }
  std::size_t hidden_dim() const noexcept { return key_net.hidden_dim(); }
  std::size_t out_dim() const noexcept { return key_net.out_dim(); }

  static MatchingNetParams zeros(std::size_t d, std::size_t hidden, std::size_t out) {
    return {MlpParams::zeros(d, hidden, out), MlpParams::zeros(2 * d, hidden, out),
            1.0 / std::sqrt(static_cast<double>(out))};
  }

  // Visits the eight parameter blocks in checkpoint order:
  // key W1, b1, W2, b2, then query W1, b1, W2, b2.
  template <typename F>
  void for_each_block(F&& f) {
    for (MlpParams* m : {&key_net, &query_net}) {
      f(std::span<double>(m->w1.data));
      f(std::span<double>(m->b1));
      f(std::span<double>(m->w2.data));
      f(std::span<double>(m->b2));
    }
  }
  template <typename F>
  void for_each_block(F&& f) const {
    for (const MlpParams* m : {&key_net, &query_net}) {
      f(std::span<const double>(m->w1.data));
      f(std::span<const double>(m->b1));
      f(std::span<const double>(m->w2.data));
      f(std::span<const double>(m->b2));
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_block([&](std::span<const double> b) { n += b.size(); });
    return n;
  }

  bool same_shape(const MatchingNetParams& o) const {
    auto eq = [](const MlpParams& a, const MlpParams& b) {
      return a.in_dim() == b.in_dim() && a.hidden_dim() == b.hidden_dim() && a.out_dim() == b.out_dim() &&
             a.b1.size() == b.b1.size() && a.b2.size() == b.b2.size();
    };
    return eq(key_net, o.key_net) && eq(query_net, o.query_net);
  }

  bool operator==(const MatchingNetParams&) const = default;
};

using PolicyGradient = MatchingNetParams;

inline PolicyGradient zeros_like(const MatchingNetParams& p) {
  PolicyGradient g = MatchingNetParams::zeros(p.embed_dim(), p.hidden_dim(), p.out_dim());
  g.scale = p.scale;
  return g;
}

inline double squared_norm(const PolicyGradient& g) {
  double s = 0.0;
  g.for_each_block([&](std::span<const double> b) {
    for (double x : b) s += x * x;
  });
  return s;
}

inline bool all_finite(const MatchingNetParams& p) {
  bool ok = std::isfinite(p.scale);
  p.for_each_block([&](std::span<const double> b) {
    for (double x : b) ok = ok && std::isfinite(x);
  });
  return ok;
}

// y += a * x over every block.
inline void axpy(double a, const MatchingNetParams& x, MatchingNetParams& y) {
  if (!x.same_shape(y)) throw DimensionError("parameter shapes differ");
  std::vector<std::span<const double>> src;
  x.for_each_block([&](std::span<const double> b) { src.push_back(b); });
  std::size_t k = 0;
  y.for_each_block([&](std::span<double> b) {
    const auto& s = src[k++];
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += a * s[i];
  });
}

// Rounds every weight to the nearest binary32 value, the precision of the
// checkpoint file. Parameters on this grid survive save/load bit-exactly.
inline void round_to_f32(MatchingNetParams& p) {
  p.for_each_block([](std::span<double> b) {
    for (double& x : b) x = static_cast<double>(static_cast<float>(x));
  });
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, scale
// 1/sqrt(out). Weights are drawn on the binary32 grid.
inline MatchingNetParams init_params(std::uint64_t seed, std::size_t d, std::size_t hidden, std::size_t out) {
  if (d == 0 || hidden == 0 || out == 0) throw DimensionError("init_params: dimensions must be positive");
  Rng rng(seed);
  MatchingNetParams p = MatchingNetParams::zeros(d, hidden, out);
  auto fill = [&](Matrix& m) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.cols));
    for (double& w : m.data) w = rng.uniform(-bound, bound);
  };
  fill(p.key_net.w1);
  fill(p.key_net.w2);
  fill(p.query_net.w1);
  fill(p.query_net.w2);
  round_to_f32(p);
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

// Intermediate activations kept for backpropagation.
struct MlpTrace {
  Vector pre;     // W1 x + b1
  Vector hidden;  // relu(pre)
  Vector out;
};

inline MlpTrace mlp_forward_trace(const MlpParams& p, std::span<const double> x) {
  if (x.size() != p.in_dim()) {
    throw DimensionError("mlp_forward: input has " + std::to_string(x.size()) + " values, expected " +
                         std::to_string(p.in_dim()));
  }
  MlpTrace t;
  t.pre = p.b1;
  for (std::size_t h = 0; h < p.hidden_dim(); ++h) t.pre[h] += dot(p.w1.row(h), x);
  t.hidden.resize(t.pre.size());
  for (std::size_t h = 0; h < t.pre.size(); ++h) t.hidden[h] = t.pre[h] > 0.0 ? t.pre[h] : 0.0;
  t.out = p.b2;
  for (std::size_t o = 0; o < p.out_dim(); ++o) t.out[o] += dot(p.w2.row(o), t.hidden);
  return t;
}

inline Vector mlp_forward(const MlpParams& p, std::span<const double> x) {
  return mlp_forward_trace(p, x).out;
}

// Accumulates d(loss)/d(params) given d(loss)/d(out) into `grad`.
inline void mlp_backward(const MlpParams& p, std::span<const double> x, const MlpTrace& t,
                         std::span<const double> d_out, MlpParams& grad) {
  const std::size_t hidden = p.hidden_dim();
  const std::size_t out = p.out_dim();
  const std::size_t in = p.in_dim();
  Vector d_pre(hidden, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    const double g = d_out[o];
    if (g == 0.0) continue;
    grad.b2[o] += g;
    double* gw = grad.w2.data.data() + o * hidden;
    const double* w = p.w2.data.data() + o * hidden;
    for (std::size_t h = 0; h < hidden; ++h) {
      gw[h] += g * t.hidden[h];
      d_pre[h] += g * w[h];
    }
  }
  for (std::size_t h = 0; h < hidden; ++h) {
    if (t.pre[h] <= 0.0) continue;
    const double g = d_pre[h];
    if (g == 0.0) continue;
    grad.b1[h] += g;
    double* gw = grad.w1.data.data() + h * in;
    for (std::size_t i = 0; i < in; ++i) gw[i] += g * x[i];
  }
}

// Keys c_i = key_net(f_i) for a fixed pool. Keys depend only on the
// parameters and the pool, so one cache serves a whole episode or batch.
struct KeyCache {
  const EmbeddingSet* embeddings = nullptr;
  std::vector<MlpTrace> traces;

  std::size_t size() const noexcept { return traces.size(); }
  const Vector& key(std::size_t i) const { return traces[i].out; }
};

inline KeyCache compute_keys(const MatchingNetParams& p, const EmbeddingSet& set) {
  if (set.dim != p.embed_dim()) {
    throw DimensionError("embedding dim " + std::to_string(set.dim) + " does not match policy input " +
                         std::to_string(p.embed_dim()));
  }
  KeyCache cache;
  cache.embeddings = &set;
  cache.traces.reserve(set.size());
  for (const auto& f : set.vectors) cache.traces.push_back(mlp_forward_trace(p.key_net, f));
  return cache;
}

struct ActionDistribution {
  Vector logits;            // -inf at masked indices
  Vector probs;
  std::vector<bool> mask;   // true = forbidden

  std::size_t size() const noexcept { return probs.size(); }

  double entropy() const {
    double h = 0.0;
    for (double p : probs) {
      if (p > 0.0) h -= p * std::log(p);
    }
    return h;
  }
};

inline std::vector<bool> make_mask(std::size_t n, std::span<const std::size_t> masked) {
  std::vector<bool> mask(n, false);
  for (std::size_t i : masked) {
    if (i >= n) throw ContractError("mask index " + std::to_string(i) + " out of range");
    mask[i] = true;
  }
  return mask;
}

// Softmax over the unmasked logits. Masked entries get probability exactly 0.
inline ActionDistribution softmax_masked(Vector logits, std::vector<bool> mask) {
  ActionDistribution dist;
  const std::size_t n = logits.size();
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) {
      logits[i] = -std::numeric_limits<double>::infinity();
    } else {
      max_logit = std::max(max_logit, logits[i]);
    }
  }
  if (max_logit == -std::numeric_limits<double>::infinity()) throw ContractError("all actions are masked");
  dist.probs.assign(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) continue;
    dist.probs[i] = std::exp(logits[i] - max_logit);
    total += dist.probs[i];
  }
  for (double& p : dist.probs) p /= total;
  dist.logits = std::move(logits);
  dist.mask = std::move(mask);
  return dist;
}

inline ActionDistribution forward(const MatchingNetParams& p, const KeyCache& keys,
                                  std::span<const double> state, std::span<const std::size_t> masked) {
  const Vector query = mlp_forward(p.query_net, state);
  Vector logits(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) logits[i] = p.scale * dot(query, keys.key(i));
  return softmax_masked(std::move(logits), make_mask(keys.size(), masked));
}

inline ActionDistribution forward(const MatchingNetParams& p, const EmbeddingSet& set,
                                  std::span<const double> state, std::span<const std::size_t> masked) {
  return forward(p, compute_keys(p, set), state, masked);
}

inline std::size_t sample_action(const ActionDistribution& dist, Rng& rng) { return rng.categorical(dist.probs); }

// Argmax of the probabilities; ties go to the smallest index.
inline std::size_t greedy_action(const ActionDistribution& dist) {
  std::size_t best = dist.size();
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist.mask[i]) continue;
    if (best == dist.size() || dist.probs[i] > dist.probs[best]) best = i;
  }
  if (best == dist.size()) throw ContractError("greedy_action: no unmasked action");
  return best;
}

// Sums weight * grad log pi(action | state) over many steps that share one
// parameter snapshot. Query-net gradients are backpropagated per step; key
// gradients are collected as d/dc_i and pushed through the key net once in
// finish(), since the keys are shared.
class ScoreGradientAccumulator {
 public:
  ScoreGradientAccumulator(const MatchingNetParams& params, const KeyCache& keys)
      : params_(params), keys_(keys), grad_(zeros_like(params)),
        d_keys_(keys.size(), Vector(params.out_dim(), 0.0)) {}

  // Adds weight * grad log pi(action). Returns the distribution used.
  ActionDistribution add(std::span<const double> state, std::span<const std::size_t> masked, std::size_t action,
                         double weight) {
    const std::size_t n = keys_.size();
    if (action >= n) throw ContractError("action " + std::to_string(action) + " out of range");
    const MlpTrace q = mlp_forward_trace(params_.query_net, state);
    Vector logits(n);
    for (std::size_t i = 0; i < n; ++i) logits[i] = params_.scale * dot(q.out, keys_.key(i));
    ActionDistribution dist = softmax_masked(std::move(logits), make_mask(n, masked));
    if (dist.mask[action]) throw ContractError("action " + std::to_string(action) + " is masked");
    if (weight == 0.0) return dist;

    // d log pi(a) / d logit_i = [i == a] - pi_i on unmasked i.
    const std::size_t out = params_.out_dim();
    Vector d_query(out, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (dist.mask[i]) continue;
      const double coeff = weight * params_.scale * ((i == action ? 1.0 : 0.0) - dist.probs[i]);
      if (coeff == 0.0) continue;
      const Vector& key = keys_.key(i);
      Vector& dk = d_keys_[i];
      for (std::size_t o = 0; o < out; ++o) {
        d_query[o] += coeff * key[o];
        dk[o] += coeff * q.out[o];
      }
    }
    mlp_backward(params_.query_net, state, q, d_query, grad_.query_net);
    return dist;
  }

  PolicyGradient finish() && {
    const EmbeddingSet& set = *keys_.embeddings;
    for (std::size_t i = 0; i < keys_.size(); ++i) {
      mlp_backward(params_.key_net, set[i], keys_.traces[i], d_keys_[i], grad_.key_net);
    }
    return std::move(grad_);
  }

 private:
  const MatchingNetParams& params_;
  const KeyCache& keys_;
  PolicyGradient grad_;
  std::vector<Vector> d_keys_;
};

// Exact gradient of log pi(action | state) with respect to every weight.
inline PolicyGradient grad_log_prob(const MatchingNetParams& p, const EmbeddingSet& set, std::span<const double> state,
                                    std::span<const std::size_t> masked, std::size_t action) {
  const KeyCache keys = compute_keys(p, set);
  ScoreGradientAccumulator acc(p, keys);
  acc.add(state, masked, action, 1.0);
  return std::move(acc).finish();
}

// Gradient ascent step: p + lr * g.
inline MatchingNetParams apply_update(const MatchingNetParams& p, const PolicyGradient& g, double lr) {
  if (!all_finite(g)) throw NumericError("apply_update: gradient contains non-finite entries");
  MatchingNetParams next = p;
  axpy(lr, g, next);
  return next;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "PMK1" '\n'
//   "<d> <hidden> <out> <scale>" '\n'
//   float32 little-endian weights: key W1, b1, W2, b2, query W1, b1, W2, b2

inline constexpr char kCheckpointMagic[4] = {'P', 'M', 'K', '1'};

inline void write_checkpoint(std::ostream& out, const MatchingNetParams& p) {
  out.write(kCheckpointMagic, 4);
  std::ostringstream header;
  header << std::setprecision(std::numeric_limits<double>::max_digits10) << '\n'
         << p.embed_dim() << ' ' << p.hidden_dim() << ' ' << p.out_dim() << ' ' << p.scale << '\n';
  out << header.str();
  p.for_each_block([&](std::span<const double> block) {
    for (double x : block) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
      const unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                      static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
      out.write(reinterpret_cast<const char*>(bytes), 4);
    }
  });
}

inline MatchingNetParams read_checkpoint(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw DataError("checkpoint: bad magic (expected PMK1)");
  }
  std::string line;
  if (!std::getline(in, line) || !line.empty()) throw DataError("checkpoint: malformed header");
  if (!std::getline(in, line)) throw DataError("checkpoint: missing header");
  std::istringstream hs(line);
  long long d = 0, hidden = 0, out = 0;
  double scale = 0.0;
  if (!(hs >> d >> hidden >> out >> scale) || d <= 0 || hidden <= 0 || out <= 0 || !(scale > 0.0) ||
      !std::isfinite(scale)) {
    throw DataError("checkpoint: malformed header '" + line + "'");
  }
  std::string rest;
  if (hs >> rest) throw DataError("checkpoint: trailing header fields");

  MatchingNetParams p = MatchingNetParams::zeros(static_cast<std::size_t>(d), static_cast<std::size_t>(hidden),
                                                 static_cast<std::size_t>(out));
  p.scale = scale;
  p.for_each_block([&](std::span<double> block) {
    for (double& x : block) {
      unsigned char bytes[4];
      in.read(reinterpret_cast<char*>(bytes), 4);
      if (in.gcount() != 4) throw DataError("checkpoint: truncated weight data");
      const std::uint32_t bits = std::uint32_t(bytes[0]) | (std::uint32_t(bytes[1]) << 8) |
                                 (std::uint32_t(bytes[2]) << 16) | (std::uint32_t(bytes[3]) << 24);
      x = static_cast<double>(std::bit_cast<float>(bits));
      if (!std::isfinite(x)) throw DataError("checkpoint: non-finite weight");
    }
  });
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("checkpoint: weight data longer than declared dimensions");
  }
  return p;
}

inline void save_checkpoint(const MatchingNetParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  write_checkpoint(out, p);
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

inline MatchingNetParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  try {
    return read_checkpoint(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace promptmatch
