#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <set>
#include <vector>

#include "doctest.h"
#include "selftpt/losses.hpp"
#include "selftpt/synth.hpp"

using namespace selftpt;

namespace {

WorldConfig tiny_config() {
  WorldConfig cfg;
  cfg.class_count = 6;
  cfg.train_per_class = 8;
  cfg.eval_per_class = 8;
  cfg.sample_noise = 0.4;
  return cfg;
}

// Argmax cosine against class rows; features and rows need not be unit.
double nearest_prototype_accuracy(const SampleSet& samples, const DiffTensor& rows) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    DiffTensor f = samples.feature(i);
    double best = -2.0;
    std::size_t arg = 0;
    for (std::size_t k = 0; k < rows.rows(); ++k) {
      double s = 0.0, nf = 0.0, nr = 0.0;
      for (std::size_t j = 0; j < rows.cols(); ++j) {
        s += f.at(j) * rows.at(k, j);
        nf += f.at(j) * f.at(j);
        nr += rows.at(k, j) * rows.at(k, j);
      }
      const double c = s / std::sqrt(nf * nr);
      if (c > best) {
        best = c;
        arg = k;
      }
    }
    if (arg == samples.label(i)) ++hits;
  }
  return double(hits) / double(samples.size());
}

}  // namespace

TEST_CASE("worlds are reproducible from their seed") {
  FrozenTextEncoder enc = make_text_encoder(31);
  SyntheticWorld a = generate_world(enc, 5, tiny_config());
  SyntheticWorld b = generate_world(enc, 5, tiny_config());
  SyntheticWorld c = generate_world(enc, 6, tiny_config());

  CHECK(a.vocab.tokens == b.vocab.tokens);
  CHECK(std::memcmp(a.prototypes.values().data(), b.prototypes.values().data(),
                    a.prototypes.numel() * sizeof(double)) == 0);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    DiffTensor fa = a.train.feature(i);
    DiffTensor fb = b.train.feature(i);
    CHECK(std::memcmp(fa.values().data(), fb.values().data(),
                      fa.numel() * sizeof(double)) == 0);
  }
  CHECK(a.vocab.tokens != c.vocab.tokens);
}

TEST_CASE("class token sequences are unique, short, and avoid hand ids") {
  FrozenTextEncoder enc = make_text_encoder(31);
  WorldConfig cfg = tiny_config();
  cfg.class_count = 40;
  SyntheticWorld world = generate_world(enc, 9, cfg);
  std::set<std::vector<int>> seen;
  for (const auto& toks : world.vocab.tokens) {
    CHECK(toks.size() >= 1);
    CHECK(toks.size() <= 3);
    for (int t : toks) {
      CHECK(t >= 4);
      CHECK(t < int(enc.dims.vocab));
    }
    CHECK(seen.insert(toks).second);
  }
  CHECK(world.vocab.size() == 40);
}

TEST_CASE("prototypes are the normalized hand-view encodings, and samples are unit") {
  FrozenTextEncoder enc = make_text_encoder(31);
  SyntheticWorld world = generate_world(enc, 5, tiny_config());

  for (std::size_t k = 0; k < world.vocab.size(); ++k) {
    std::vector<int> ids = {0, 1, 2, 3};
    ids.insert(ids.end(), world.vocab.tokens[k].begin(), world.vocab.tokens[k].end());
    DiffTensor want = l2_normalize(encode_token_ids(enc, ids));
    for (std::size_t j = 0; j < want.numel(); ++j) {
      CHECK(world.prototypes.at(k, j) == doctest::Approx(want.at(j)).epsilon(1e-12));
    }
  }
  for (std::size_t i = 0; i < world.eval.size(); ++i) {
    DiffTensor f = world.eval.feature(i);
    double sq = 0.0;
    for (std::size_t j = 0; j < f.numel(); ++j) sq += f.at(j) * f.at(j);
    CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("noise-free samples sit on their prototypes") {
  FrozenTextEncoder enc = make_text_encoder(31);
  WorldConfig cfg = tiny_config();
  cfg.sample_noise = 0.0;
  SyntheticWorld world = generate_world(enc, 5, cfg);
  for (std::size_t i = 0; i < world.train.size(); ++i) {
    DiffTensor f = world.train.feature(i);
    const std::size_t k = world.train.label(i);
    for (std::size_t j = 0; j < f.numel(); ++j) {
      CHECK(f.at(j) == doctest::Approx(world.prototypes.at(k, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("nearest-prototype reading of noisy samples beats chance in every seed") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    FrozenTextEncoder enc = make_text_encoder(seed);
    WorldConfig cfg;
    cfg.class_count = 10;
    cfg.train_per_class = 0;
    cfg.eval_per_class = 20;
    cfg.sample_noise = 0.4;
    SyntheticWorld world = generate_world(enc, seed, cfg);
    const double acc = nearest_prototype_accuracy(world.eval, world.prototypes);
    CHECK(acc > 1.0 / double(cfg.class_count));
  }
}

TEST_CASE("feature reads are counted; labels and subsets are free") {
  FrozenTextEncoder enc = make_text_encoder(31);
  SyntheticWorld world = generate_world(enc, 5, tiny_config());
  const SampleSet& s = world.train;
  CHECK(s.feature_reads() == 0);
  (void)s.label(0);
  (void)s.labels();
  CHECK(s.feature_reads() == 0);
  (void)s.feature(0);
  (void)s.feature(1);
  CHECK(s.feature_reads() == 2);

  std::vector<std::size_t> keep = {1, 3};
  SampleSet sub = s.subset(keep);
  CHECK(s.feature_reads() == 2);  // subsetting did not count
  CHECK(sub.size() == 16);        // 8 per kept class
  for (std::size_t i = 0; i < sub.size(); ++i) CHECK(sub.label(i) < 2);
  CHECK_THROWS_AS(s.feature(s.size()), std::invalid_argument);
}

TEST_CASE("base and new halves partition the classes; odd counts are rejected") {
  BaseNewSplit split = split_base_new(6);
  CHECK(split.base == std::vector<std::size_t>{0, 1, 2});
  CHECK(split.novel == std::vector<std::size_t>{3, 4, 5});
  CHECK_THROWS_AS(split_base_new(5), std::invalid_argument);
  CHECK_THROWS_AS(split_base_new(0), std::invalid_argument);

  ClassVocabulary vocab;
  vocab.names = {"a", "b", "c"};
  vocab.tokens = {{4}, {5}, {6}};
  ClassVocabulary sub = filter_vocab(vocab, std::vector<std::size_t>{2, 0});
  CHECK(sub.names == std::vector<std::string>{"c", "a"});
  CHECK_THROWS_AS(filter_vocab(vocab, std::vector<std::size_t>{3}), std::invalid_argument);
}

TEST_CASE("stronger domain bias drags samples further from their prototypes") {
  FrozenTextEncoder enc = make_text_encoder(31);
  SyntheticWorld world = generate_world(enc, 5, tiny_config());
  const std::vector<std::size_t> classes = {3, 4, 5};

  auto mean_proto_cosine = [&](double bias_length) {
    SampleSet shifted = make_domain_shift(world, 77, classes, bias_length, 0.1, 10);
    double total = 0.0;
    for (std::size_t i = 0; i < shifted.size(); ++i) {
      DiffTensor f = shifted.feature(i);
      const std::size_t k = classes[shifted.label(i)];
      double s = 0.0;
      for (std::size_t j = 0; j < f.numel(); ++j) s += f.at(j) * world.prototypes.at(k, j);
      total += s;  // both sides unit
    }
    return total / double(shifted.size());
  };

  const double none = mean_proto_cosine(0.0);
  const double mild = mean_proto_cosine(0.5);
  const double heavy = mean_proto_cosine(2.0);
  CHECK(none > mild);
  CHECK(mild > heavy);

  SampleSet shifted = make_domain_shift(world, 77, classes, 0.5, 0.1, 10);
  CHECK(shifted.size() == 30);
  CHECK_THROWS_AS(make_domain_shift(world, 77, classes, -1.0, 0.1, 10), std::invalid_argument);
}

TEST_CASE("impossible vocabularies are rejected up front") {
  EncoderDims dims;
  dims.vocab = 5;  // one usable class token: 3 distinct sequences at most
  dims.token_dim = 4;
  dims.hidden_dim = 4;
  dims.embed_dim = 4;
  dims.max_len = 8;
  FrozenTextEncoder enc = make_text_encoder(31, dims);
  WorldConfig cfg = tiny_config();
  cfg.class_count = 4;
  CHECK_THROWS_AS(generate_world(enc, 5, cfg), std::invalid_argument);
  cfg.class_count = 3;
  CHECK_NOTHROW(generate_world(enc, 5, cfg));

  dims.vocab = 4;
  FrozenTextEncoder none = make_text_encoder(31, dims);
  CHECK_THROWS_AS(generate_world(none, 5, cfg), std::invalid_argument);
}
