#pragma once

#include <array>
#include <string>
#include <vector>

#include "selftpt/encoders.hpp"
#include "selftpt/tensor.hpp"

namespace selftpt {

// Ordered class list with 1-3 vocabulary tokens per class name.
struct ClassVocabulary {
  std::vector<std::string> names;
  std::vector<std::vector<int>> tokens;

  std::size_t size() const { return names.size(); }
};

// Learnable soft-prompt rows plus the ids of the four fixed hand-prompt
// tokens they were initialized from.
struct PromptBank {
  DiffTensor rows;  // prompt_len x token_dim, untracked storage
  std::array<int, 4> hand_tokens{0, 1, 2, 3};

  std::size_t prompt_len() const { return rows.rows(); }
  std::size_t token_dim() const { return rows.cols(); }
};

// Prompt rows start at the hand-prompt token embeddings (cycled when the
// prompt length is not four), so training begins exactly at the hand-crafted
// baseline.
PromptBank make_prompt_bank(const FrozenTextEncoder& enc, std::size_t prompt_len,
                            std::array<int, 4> hand_tokens = {0, 1, 2, 3});

// Where the class tokens sit relative to the learned prompt rows. Each class
// contributes one sequence per view; Hand uses only fixed tokens and thus
// carries no prompt gradient.
enum class ViewKind { kEnd, kFront, kMid, kHand };

ViewKind parse_view_kind(const std::string& name);  // "end"|"front"|"mid"|"hand"
const char* view_kind_name(ViewKind kind);

// One slot of a view sequence: either a learned prompt row or a frozen
// vocabulary token.
struct ViewToken {
  bool is_prompt = false;
  int index = 0;  // prompt row or vocabulary id
};

// Token layout of one class's view. Mid splits the prompt after
// floor(prompt_len / 2) rows.
std::vector<ViewToken> build_view(const PromptBank& bank, const ClassVocabulary& vocab,
                                  std::size_t class_index, ViewKind kind);

// Embeds a view sequence, substituting rows of `prompt_rows` (tracked or
// not) for prompt slots.
DiffTensor encode_view(const FrozenTextEncoder& enc, const DiffTensor& prompt_rows,
                       std::span<const ViewToken> view);

// End-view embeddings for every class, stacked C x embed_dim. These are the
// classification weights.
DiffTensor encode_class_features(const FrozenTextEncoder& enc, const DiffTensor& prompt_rows,
                                 const PromptBank& bank, const ClassVocabulary& vocab);

// All four views of every class. z rows are ordered [end | front | mid |
// hand] with class k of view b at row b*C + k; w_end is the unprojected end
// block, identical to encode_class_features.
struct ViewEncodings {
  DiffTensor z;      // 4C x proj_dim
  DiffTensor w_end;  // C x embed_dim
};
ViewEncodings encode_all_views(const FrozenTextEncoder& enc, const DiffTensor& prompt_rows,
                               const PromptBank& bank, const ClassVocabulary& vocab,
                               const ProjectionHead& head, bool normalize_projection = true);

// The three rows sharing class (i mod C) with row i, across the four view
// blocks of a 4C-row stack.
std::array<std::size_t, 3> positives_of(std::size_t i, std::size_t class_count);

}  // namespace selftpt
