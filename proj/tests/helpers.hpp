#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "promptmatch/promptmatch.hpp"

namespace testing {

namespace fs = std::filesystem;

// Fresh per-test scratch directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("promptmatch_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// n random unit vectors of dimension d.
inline promptmatch::EmbeddingSet random_embeddings(promptmatch::Rng& rng, std::size_t n, std::size_t d) {
  promptmatch::EmbeddingSet set;
  set.dim = d;
  for (std::size_t i = 0; i < n; ++i) {
    promptmatch::Vector v(d);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    const double norm = promptmatch::l2_norm(v);
    for (double& x : v) x /= norm;
    set.vectors.push_back(std::move(v));
  }
  return set;
}

inline promptmatch::Vector random_vector(promptmatch::Rng& rng, std::size_t d, double lo = -1.0, double hi = 1.0) {
  promptmatch::Vector v(d);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline promptmatch::PromptPool small_pool(std::size_t n) {
  std::vector<promptmatch::PromptTriple> entries;
  for (std::size_t i = 0; i < n; ++i) {
    entries.push_back({0, "question " + std::to_string(i), "", "answer " + std::to_string(i)});
  }
  return promptmatch::PromptPool(std::move(entries));
}

}  // namespace testing
