#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "selftpt/encoders.hpp"
#include "selftpt/prompts.hpp"

namespace selftpt {

// Labeled image features. Feature vectors are only reachable through
// feature(), which counts every access, so a phase that must not look at
// images can prove it did not.
class SampleSet {
 public:
  SampleSet() = default;
  explicit SampleSet(std::size_t embed_dim) : embed_dim_(embed_dim) {}

  void add(std::vector<double> feature, std::size_t label);
  std::size_t size() const { return labels_.size(); }
  std::size_t embed_dim() const { return embed_dim_; }
  std::size_t label(std::size_t i) const;
  std::span<const std::size_t> labels() const { return labels_; }

  // One {embed_dim} feature vector; bumps the read counter.
  DiffTensor feature(std::size_t i) const;
  std::size_t feature_reads() const { return feature_reads_; }

  // Samples of the listed classes, relabeled to their positions in the
  // list. Dataset plumbing, so it does not count as feature access.
  SampleSet subset(std::span<const std::size_t> classes) const;

 private:
  std::size_t embed_dim_ = 0;
  std::vector<std::vector<double>> features_;
  std::vector<std::size_t> labels_;
  mutable std::size_t feature_reads_ = 0;
};

struct WorldConfig {
  std::size_t class_count = 40;
  std::size_t train_per_class = 50;
  std::size_t eval_per_class = 50;
  double sample_noise = 0.4;
};

// A classification problem living entirely in the shared embedding space:
// class prototypes are the hand-prompt text encodings of generated token
// sequences, and image features are noisy draws around them, renormalized
// to the unit sphere.
struct SyntheticWorld {
  WorldConfig config;
  std::array<int, 4> hand_tokens{0, 1, 2, 3};
  ClassVocabulary vocab;   // generated names and 1-3 token sequences
  DiffTensor prototypes;   // class_count x embed_dim, unit rows
  SampleSet train;
  SampleSet eval;
};

// Token sequences are drawn from ids [4, vocab) and are unique per class;
// configurations with more classes than distinct sequences are rejected.
SyntheticWorld generate_world(const FrozenTextEncoder& enc, std::uint64_t seed,
                              const WorldConfig& config = {});

// First half / second half of the class indices. Odd counts are rejected.
struct BaseNewSplit {
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;
};
BaseNewSplit split_base_new(std::size_t class_count);

// Class list restricted to the chosen indices, preserving list order.
ClassVocabulary filter_vocab(const ClassVocabulary& vocab, std::span<const std::size_t> classes);

// Evaluation features for the listed classes drawn around prototypes pushed
// off their manifold: normalize(prototype + bias + noise * gauss), with one
// shared bias direction of the given length. Labels are subset positions.
SampleSet make_domain_shift(const SyntheticWorld& world, std::uint64_t seed,
                            std::span<const std::size_t> classes, double bias_length,
                            double noise, std::size_t per_class);

}  // namespace selftpt
