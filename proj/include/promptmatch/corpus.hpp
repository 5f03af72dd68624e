#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "promptmatch/error.hpp"

namespace promptmatch {

using Vector = std::vector<double>;

// One pool entry. `id` is the entry's position in its pool.
struct PromptTriple {
  std::size_t id = 0;
  std::string question;
  std::string context;
  std::string answer;

  bool operator==(const PromptTriple&) const = default;
};

// Parses one line of the pool file format:
//   {"question": "...", "context": "...", "answer": "..."}
// `context` is optional and defaults to empty. The id is left at 0; the
// loader assigns positions.
inline PromptTriple parse_pool_record(std::string_view line) {
  nlohmann::json record;
  try {
    record = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("malformed record: ") + e.what());
  }
  if (!record.is_object()) throw DataError("malformed record: expected an object");

  auto text_field = [&](const char* name, bool required) -> std::string {
    auto it = record.find(name);
    if (it == record.end() || it->is_null()) {
      if (required) throw DataError(std::string("missing ") + name);
      return {};
    }
    if (!it->is_string()) throw DataError(std::string("field ") + name + " is not a string");
    return it->get<std::string>();
  };

  PromptTriple triple;
  triple.question = text_field("question", true);
  triple.answer = text_field("answer", true);
  triple.context = text_field("context", false);
  if (triple.question.empty()) throw DataError("empty question");
  if (triple.answer.empty()) throw DataError("empty answer");
  return triple;
}

inline std::string serialize_pool_record(const PromptTriple& triple) {
  nlohmann::ordered_json record;
  record["question"] = triple.question;
  if (!triple.context.empty()) record["context"] = triple.context;
  record["answer"] = triple.answer;
  return record.dump();
}

// Ordered, non-empty set of prompt triples with ids 0..n-1.
class PromptPool {
 public:
  PromptPool() = default;

  explicit PromptPool(std::vector<PromptTriple> entries) : entries_(std::move(entries)) {
    if (entries_.empty()) throw DataError("prompt pool must contain at least one entry");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& e = entries_[i];
      e.id = i;
      if (e.question.empty() || e.answer.empty()) {
        throw DataError("entry " + std::to_string(i) + ": question and answer must be non-empty");
      }
    }
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const PromptTriple& operator[](std::size_t i) const { return entries_[i]; }
  const PromptTriple& at(std::size_t i) const { return entries_.at(i); }
  const std::vector<PromptTriple>& entries() const noexcept { return entries_; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<PromptTriple> entries_;
};

// Reads a pool from newline-delimited records. Blank lines are skipped;
// any parse failure aborts with the 1-based line number.
inline PromptPool read_pool(std::istream& in) {
  std::vector<PromptTriple> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      entries.push_back(parse_pool_record(line));
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (entries.empty()) throw DataError("pool file contains no records");
  return PromptPool(std::move(entries));
}

inline PromptPool load_pool(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open pool file: " + path);
  try {
    return read_pool(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline void write_pool(std::ostream& out, const PromptPool& pool) {
  for (const auto& e : pool) out << serialize_pool_record(e) << '\n';
}

inline void save_pool(const std::string& path, const PromptPool& pool) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write pool file: " + path);
  write_pool(out, pool);
}

// ---------------------------------------------------------------------------
// Vector primitives

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

// Cosine similarity; 0 when either vector is zero.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine: dimension mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  const double c = dot(a, b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

// Element-wise mean. An empty sequence yields the zero vector of `dim`.
inline Vector mean_aggregate(const std::vector<const Vector*>& vectors, std::size_t dim) {
  Vector out(dim, 0.0);
  if (vectors.empty()) return out;
  for (const Vector* v : vectors) {
    if (v->size() != dim) throw DimensionError("mean_aggregate: dimension mismatch");
    for (std::size_t i = 0; i < dim; ++i) out[i] += (*v)[i];
  }
  const double inv = 1.0 / static_cast<double>(vectors.size());
  for (double& x : out) x *= inv;
  return out;
}

inline Vector mean_aggregate(const std::vector<Vector>& vectors, std::size_t dim) {
  std::vector<const Vector*> ptrs;
  ptrs.reserve(vectors.size());
  for (const auto& v : vectors) ptrs.push_back(&v);
  return mean_aggregate(ptrs, dim);
}

// ---------------------------------------------------------------------------
// Encoders

using Encoder = std::function<Vector(std::string_view)>;

// Deterministic bag of hashed character trigrams. The text is padded with one
// space on each side so that short words still produce grams. Each gram adds
// +1 or -1 (top bit of its hash) to bucket hash % dim; the result is
// L2-normalized. Empty text, or grams that cancel exactly, give the zero
// vector.
class HashNgramEncoder {
 public:
  static constexpr std::uint64_t kSeed = 0x9e3779b97f4a7c15ULL;
  static constexpr std::size_t kMinDim = 8;

  explicit HashNgramEncoder(std::size_t dim) : dim_(dim) {
    if (dim_ < kMinDim) throw DimensionError("hash encoder dimension must be >= 8");
  }

  std::size_t dim() const noexcept { return dim_; }

  Vector operator()(std::string_view text) const {
    Vector v(dim_, 0.0);
    if (text.empty()) return v;
    std::string padded;
    padded.reserve(text.size() + 2);
    padded.push_back(' ');
    padded.append(text);
    padded.push_back(' ');
    for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
      const auto h = gram_hash(std::string_view(padded).substr(i, 3));
      v[h % dim_] += (h >> 63) ? -1.0 : 1.0;
    }
    const double n = l2_norm(v);
    if (n > 0.0) {
      for (double& x : v) x /= n;
    }
    return v;
  }

 private:
  static std::uint64_t gram_hash(std::string_view gram) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ kSeed;
    for (unsigned char c : gram) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::size_t dim_;
};

inline Vector hash_ngram_encode(std::string_view text, std::size_t dim) {
  return HashNgramEncoder(dim)(text);
}

// Pool embeddings f_i, one row per pool id.
struct EmbeddingSet {
  std::size_t dim = 0;
  std::vector<Vector> vectors;

  std::size_t size() const noexcept { return vectors.size(); }
  const Vector& operator[](std::size_t i) const { return vectors[i]; }
  bool operator==(const EmbeddingSet&) const = default;
};

inline std::string pool_entry_text(const PromptTriple& t) { return t.question + "\n" + t.answer; }

inline std::string query_text(std::string_view question, std::string_view context) {
  std::string text(question);
  if (!context.empty()) {
    text += '\n';
    text += context;
  }
  return text;
}

inline EmbeddingSet encode_pool(const PromptPool& pool, const Encoder& encoder) {
  EmbeddingSet set;
  set.vectors.reserve(pool.size());
  for (const auto& entry : pool) {
    Vector v;
    try {
      v = encoder(pool_entry_text(entry));
    } catch (const std::exception& e) {
      throw DataError("encoding pool entry " + std::to_string(entry.id) + ": " + e.what());
    }
    if (set.vectors.empty()) {
      set.dim = v.size();
    } else if (v.size() != set.dim) {
      throw DimensionError("encoder returned inconsistent dimension for entry " +
                           std::to_string(entry.id));
    }
    set.vectors.push_back(std::move(v));
  }
  return set;
}

// Precomputed embeddings: header `dim=<d> count=<n>`, then n rows of d
// space-separated decimals. Nonzero rows are normalized to unit length.
inline EmbeddingSet read_embeddings(std::istream& in, std::optional<std::size_t> expected_count = {}) {
  std::string header;
  if (!std::getline(in, header)) throw DataError("embedding file: missing header");
  std::size_t dim = 0, count = 0;
  {
    std::istringstream hs(header);
    std::string dim_tok, count_tok;
    hs >> dim_tok >> count_tok;
    auto value_of = [](const std::string& tok, std::string_view key) -> std::size_t {
      if (tok.rfind(key, 0) != 0) throw DataError("embedding file: malformed header");
      try {
        return std::stoul(tok.substr(key.size()));
      } catch (const std::exception&) {
        throw DataError("embedding file: malformed header");
      }
    };
    dim = value_of(dim_tok, "dim=");
    count = value_of(count_tok, "count=");
  }
  if (dim == 0) throw DataError("embedding file: dim must be positive");
  if (expected_count && *expected_count != count) {
    throw DataError("embedding file: count " + std::to_string(count) + " does not match " +
                    std::to_string(*expected_count) + " entries");
  }
  EmbeddingSet set;
  set.dim = dim;
  std::string line;
  for (std::size_t row = 0; row < count; ++row) {
    if (!std::getline(in, line)) throw DataError("embedding file: truncated at row " + std::to_string(row));
    std::istringstream ls(line);
    Vector v;
    std::string tok;
    while (ls >> tok) {
      try {
        v.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw DataError("embedding file: bad number in row " + std::to_string(row));
      }
      if (!std::isfinite(v.back())) throw DataError("embedding file: non-finite value in row " + std::to_string(row));
    }
    if (v.size() != dim) {
      throw DataError("embedding file: row " + std::to_string(row) + " has " + std::to_string(v.size()) +
                      " values, expected " + std::to_string(dim));
    }
    const double n = l2_norm(v);
    if (n > 0.0) {
      for (double& x : v) x /= n;
    }
    set.vectors.push_back(std::move(v));
  }
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) {
      throw DataError("embedding file: more rows than declared count");
    }
  }
  return set;
}

inline EmbeddingSet load_embeddings(const std::string& path, std::optional<std::size_t> expected_count = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding file: " + path);
  return read_embeddings(in, expected_count);
}

inline void write_embeddings(std::ostream& out, const EmbeddingSet& set) {
  out << "dim=" << set.dim << " count=" << set.size() << '\n';
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& v : set.vectors) {
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << v[i];
    out << '\n';
  }
}

}  // namespace promptmatch
