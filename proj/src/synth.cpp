#include "selftpt/synth.hpp"

#include <cmath>
#include <random>
#include <set>
#include <stdexcept>
#include <string>

#include "selftpt/rng.hpp"

namespace selftpt {
namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::invalid_argument(where + ": " + msg);
}

void normalize_in_place(std::vector<double>& v, const char* where) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  if (sq == 0.0) fail(where, "zero-norm vector cannot be placed on the sphere");
  const double inv = 1.0 / std::sqrt(sq);
  for (double& x : v) x *= inv;
}

std::vector<double> prototype_row(const FrozenTextEncoder& enc,
                                  const std::array<int, 4>& hand_tokens,
                                  std::span<const int> class_tokens) {
  std::vector<int> ids(hand_tokens.begin(), hand_tokens.end());
  ids.insert(ids.end(), class_tokens.begin(), class_tokens.end());
  DiffTensor e = encode_token_ids(enc, ids);
  std::vector<double> row(e.values().begin(), e.values().end());
  normalize_in_place(row, "generate_world");
  return row;
}

void draw_samples(SampleSet& out, const DiffTensor& prototypes, double noise,
                  std::size_t per_class, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t dim = prototypes.cols();
  for (std::size_t k = 0; k < prototypes.rows(); ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> f(dim);
      for (std::size_t j = 0; j < dim; ++j) f[j] = prototypes.at(k, j) + noise * gauss(rng);
      normalize_in_place(f, "generate_world");
      out.add(std::move(f), k);
    }
  }
}

}  // namespace

void SampleSet::add(std::vector<double> feature, std::size_t label) {
  if (feature.size() != embed_dim_) {
    fail("SampleSet::add", "feature of size " + std::to_string(feature.size()) +
                               " in a set of width " + std::to_string(embed_dim_));
  }
  features_.push_back(std::move(feature));
  labels_.push_back(label);
}

std::size_t SampleSet::label(std::size_t i) const {
  if (i >= labels_.size()) fail("SampleSet::label", "index " + std::to_string(i) + " out of range");
  return labels_[i];
}

DiffTensor SampleSet::feature(std::size_t i) const {
  if (i >= features_.size()) {
    fail("SampleSet::feature", "index " + std::to_string(i) + " out of range");
  }
  ++feature_reads_;
  return DiffTensor(Shape{embed_dim_}, features_[i]);
}

SampleSet SampleSet::subset(std::span<const std::size_t> classes) const {
  SampleSet out(embed_dim_);
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    for (std::size_t pos = 0; pos < classes.size(); ++pos) {
      if (labels_[i] == classes[pos]) {
        out.add(features_[i], pos);
        break;
      }
    }
  }
  return out;
}

SyntheticWorld generate_world(const FrozenTextEncoder& enc, std::uint64_t seed,
                              const WorldConfig& config) {
  if (config.class_count == 0) fail("generate_world", "need at least one class");
  if (config.sample_noise < 0.0) fail("generate_world", "sample noise must be nonnegative");
  if (enc.dims.vocab <= 4) {
    fail("generate_world", "vocabulary of " + std::to_string(enc.dims.vocab) +
                               " leaves no class tokens beyond the four hand-prompt ids");
  }
  const double n = double(enc.dims.vocab - 4);
  if (double(config.class_count) > n + n * n + n * n * n) {
    fail("generate_world", std::to_string(config.class_count) +
                               " classes cannot get unique sequences from " +
                               std::to_string(enc.dims.vocab - 4) + " class tokens");
  }

  SyntheticWorld world;
  world.config = config;

  {
    auto rng = substream(seed, "world-classes");
    std::uniform_int_distribution<int> length(1, 3);
    std::uniform_int_distribution<int> token(4, int(enc.dims.vocab) - 1);
    std::set<std::vector<int>> seen;
    for (std::size_t k = 0; k < config.class_count; ++k) {
      std::vector<int> toks;
      for (int attempt = 0;; ++attempt) {
        if (attempt >= 10000) {
          fail("generate_world", "could not draw a unique token sequence for class " +
                                     std::to_string(k));
        }
        toks.resize(std::size_t(length(rng)));
        for (int& t : toks) t = token(rng);
        if (seen.insert(toks).second) break;
      }
      world.vocab.names.push_back("class-" + std::to_string(k));
      world.vocab.tokens.push_back(toks);
    }
  }

  std::vector<DiffTensor> rows;
  rows.reserve(config.class_count);
  for (std::size_t k = 0; k < config.class_count; ++k) {
    rows.push_back(DiffTensor::vector(
        prototype_row(enc, world.hand_tokens, world.vocab.tokens[k])));
  }
  world.prototypes = concat_rows(rows);

  world.train = SampleSet(enc.dims.embed_dim);
  world.eval = SampleSet(enc.dims.embed_dim);
  {
    auto rng = substream(seed, "world-train");
    draw_samples(world.train, world.prototypes, config.sample_noise, config.train_per_class, rng);
  }
  {
    auto rng = substream(seed, "world-eval");
    draw_samples(world.eval, world.prototypes, config.sample_noise, config.eval_per_class, rng);
  }
  return world;
}

BaseNewSplit split_base_new(std::size_t class_count) {
  if (class_count == 0 || class_count % 2 != 0) {
    fail("split_base_new", "class count " + std::to_string(class_count) +
                               " cannot split into equal base and new halves");
  }
  BaseNewSplit split;
  for (std::size_t k = 0; k < class_count / 2; ++k) split.base.push_back(k);
  for (std::size_t k = class_count / 2; k < class_count; ++k) split.novel.push_back(k);
  return split;
}

ClassVocabulary filter_vocab(const ClassVocabulary& vocab, std::span<const std::size_t> classes) {
  ClassVocabulary out;
  for (std::size_t k : classes) {
    if (k >= vocab.size()) {
      fail("filter_vocab", "class index " + std::to_string(k) + " out of range for " +
                               std::to_string(vocab.size()) + " classes");
    }
    out.names.push_back(vocab.names[k]);
    out.tokens.push_back(vocab.tokens[k]);
  }
  return out;
}

SampleSet make_domain_shift(const SyntheticWorld& world, std::uint64_t seed,
                            std::span<const std::size_t> classes, double bias_length,
                            double noise, std::size_t per_class) {
  if (bias_length < 0.0 || noise < 0.0) {
    fail("make_domain_shift", "bias length and noise must be nonnegative");
  }
  const std::size_t dim = world.prototypes.cols();
  std::vector<double> bias(dim, 0.0);
  {
    auto rng = substream(seed, "domain-bias");
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (double& x : bias) x = gauss(rng);
    normalize_in_place(bias, "make_domain_shift");
    for (double& x : bias) x *= bias_length;
  }

  SampleSet out(dim);
  auto rng = substream(seed, "domain-samples");
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t pos = 0; pos < classes.size(); ++pos) {
    const std::size_t k = classes[pos];
    if (k >= world.prototypes.rows()) {
      fail("make_domain_shift", "class index " + std::to_string(k) + " out of range");
    }
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> f(dim);
      for (std::size_t j = 0; j < dim; ++j) {
        f[j] = world.prototypes.at(k, j) + bias[j] + noise * gauss(rng);
      }
      normalize_in_place(f, "make_domain_shift");
      out.add(std::move(f), pos);
    }
  }
  return out;
}

}  // namespace selftpt
