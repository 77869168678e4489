#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rationale_lab/corpus.hpp"
#include "rationale_lab/vocab.hpp"

namespace testing_support {

// Every printable ASCII character, nothing longer.
inline rlab::SubwordVocab char_vocab() {
  rlab::SubwordVocab v;
  for (char c = 33; c < 127; ++c) v.add(std::string(1, c));
  return v;
}

inline rlab::GeneratorSpec small_spec(int classes = 5, std::size_t docs = 400, std::uint64_t seed = 3) {
  rlab::GeneratorSpec s;
  s.num_classes = classes;
  s.num_docs = docs;
  s.seed = seed;
  return s;
}

inline std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("rlab_test_" + name)).string();
}

}  // namespace testing_support
