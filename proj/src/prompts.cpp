#include "selftpt/prompts.hpp"

#include <stdexcept>

namespace selftpt {
namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::invalid_argument(where + ": " + msg);
}

void require_class(const ClassVocabulary& vocab, std::size_t class_index, const char* where) {
  if (class_index >= vocab.size()) {
    fail(where, "class index " + std::to_string(class_index) + " out of range for " +
                    std::to_string(vocab.size()) + " classes");
  }
  const auto& toks = vocab.tokens[class_index];
  if (toks.empty() || toks.size() > 3) {
    fail(where, "class '" + vocab.names[class_index] + "' must have 1-3 tokens, has " +
                    std::to_string(toks.size()));
  }
}

}  // namespace

PromptBank make_prompt_bank(const FrozenTextEncoder& enc, std::size_t prompt_len,
                            std::array<int, 4> hand_tokens) {
  if (prompt_len == 0) fail("make_prompt_bank", "prompt length must be positive");
  std::vector<double> rows;
  rows.reserve(prompt_len * enc.dims.token_dim);
  for (std::size_t j = 0; j < prompt_len; ++j) {
    DiffTensor row = token_embedding_row(enc, hand_tokens[j % hand_tokens.size()]);
    rows.insert(rows.end(), row.values().begin(), row.values().end());
  }
  PromptBank bank;
  bank.rows = DiffTensor::matrix(prompt_len, enc.dims.token_dim, std::move(rows));
  bank.hand_tokens = hand_tokens;
  return bank;
}

ViewKind parse_view_kind(const std::string& name) {
  if (name == "end") return ViewKind::kEnd;
  if (name == "front") return ViewKind::kFront;
  if (name == "mid") return ViewKind::kMid;
  if (name == "hand") return ViewKind::kHand;
  fail("parse_view_kind", "unknown view kind '" + name + "'");
}

const char* view_kind_name(ViewKind kind) {
  switch (kind) {
    case ViewKind::kEnd:
      return "end";
    case ViewKind::kFront:
      return "front";
    case ViewKind::kMid:
      return "mid";
    case ViewKind::kHand:
      return "hand";
  }
  fail("view_kind_name", "invalid view kind value");
}

std::vector<ViewToken> build_view(const PromptBank& bank, const ClassVocabulary& vocab,
                                  std::size_t class_index, ViewKind kind) {
  require_class(vocab, class_index, "build_view");
  const std::size_t m = bank.prompt_len();
  const auto& class_tokens = vocab.tokens[class_index];

  std::vector<ViewToken> view;
  view.reserve(m + class_tokens.size());
  auto push_prompts = [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) view.push_back({true, int(j)});
  };
  auto push_class = [&] {
    for (int id : class_tokens) view.push_back({false, id});
  };

  switch (kind) {
    case ViewKind::kEnd:
      push_prompts(0, m);
      push_class();
      break;
    case ViewKind::kFront:
      push_class();
      push_prompts(0, m);
      break;
    case ViewKind::kMid:
      push_prompts(0, m / 2);
      push_class();
      push_prompts(m / 2, m);
      break;
    case ViewKind::kHand:
      for (int id : bank.hand_tokens) view.push_back({false, id});
      push_class();
      break;
  }
  return view;
}

DiffTensor encode_view(const FrozenTextEncoder& enc, const DiffTensor& prompt_rows,
                       std::span<const ViewToken> view) {
  if (!prompt_rows.defined() || prompt_rows.rank() != 2 ||
      prompt_rows.cols() != enc.dims.token_dim) {
    fail("encode_view", "prompt rows must be a matrix of width " +
                            std::to_string(enc.dims.token_dim));
  }
  std::vector<DiffTensor> rows;
  rows.reserve(view.size());
  for (const ViewToken& t : view) {
    if (t.is_prompt) {
      const std::size_t j = std::size_t(t.index);
      if (t.index < 0 || j >= prompt_rows.rows()) {
        fail("encode_view", "prompt row " + std::to_string(t.index) + " out of range");
      }
      rows.push_back(slice_rows(prompt_rows, j, j + 1));
    } else {
      rows.push_back(token_embedding_row(enc, t.index));
    }
  }
  return encode_rows(enc, rows);
}

DiffTensor encode_class_features(const FrozenTextEncoder& enc, const DiffTensor& prompt_rows,
                                 const PromptBank& bank, const ClassVocabulary& vocab) {
  if (vocab.size() == 0) fail("encode_class_features", "empty class vocabulary");
  std::vector<DiffTensor> rows;
  rows.reserve(vocab.size());
  for (std::size_t k = 0; k < vocab.size(); ++k) {
    rows.push_back(encode_view(enc, prompt_rows, build_view(bank, vocab, k, ViewKind::kEnd)));
  }
  return concat_rows(rows);
}

ViewEncodings encode_all_views(const FrozenTextEncoder& enc, const DiffTensor& prompt_rows,
                               const PromptBank& bank, const ClassVocabulary& vocab,
                               const ProjectionHead& head, bool normalize_projection) {
  if (vocab.size() == 0) fail("encode_all_views", "empty class vocabulary");
  constexpr ViewKind kOrder[] = {ViewKind::kEnd, ViewKind::kFront, ViewKind::kMid,
                                 ViewKind::kHand};
  std::vector<DiffTensor> blocks;
  blocks.reserve(4);
  ViewEncodings out;
  for (ViewKind kind : kOrder) {
    std::vector<DiffTensor> rows;
    rows.reserve(vocab.size());
    for (std::size_t k = 0; k < vocab.size(); ++k) {
      rows.push_back(encode_view(enc, prompt_rows, build_view(bank, vocab, k, kind)));
    }
    blocks.push_back(concat_rows(rows));
    if (kind == ViewKind::kEnd) out.w_end = blocks.back();
  }
  out.z = project_rows(head, concat_rows(blocks), normalize_projection);
  return out;
}

std::array<std::size_t, 3> positives_of(std::size_t i, std::size_t class_count) {
  if (class_count == 0) fail("positives_of", "class count must be positive");
  if (i >= 4 * class_count) {
    fail("positives_of", "row " + std::to_string(i) + " out of range for " +
                             std::to_string(4 * class_count) + " view rows");
  }
  const std::size_t base = i % class_count;
  std::array<std::size_t, 3> out{};
  std::size_t w = 0;
  for (std::size_t block = 0; block < 4; ++block) {
    const std::size_t j = block * class_count + base;
    if (j != i) out[w++] = j;
  }
  return out;
}

}  // namespace selftpt
