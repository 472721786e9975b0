#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "selftpt/tensor.hpp"

namespace selftpt {

struct EncoderDims {
  std::size_t vocab = 256;
  std::size_t token_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t embed_dim = 32;
  std::size_t max_len = 16;
};

// Frozen token-sequence encoder. Each position's token embedding plus its
// positional row passes through one tanh layer; the per-position hidden
// vectors are mean-pooled and mapped linearly to the shared embedding
// space. Pooling after the nonlinearity is what makes the output depend on
// token order. All tables are constants: they never receive gradients, but
// prompt rows substituted for token embeddings are differentiated through.
struct FrozenTextEncoder {
  EncoderDims dims;
  DiffTensor token_table;     // vocab x token_dim
  DiffTensor position_table;  // max_len x token_dim, sinusoidal
  DiffTensor w_hidden;        // token_dim x hidden_dim
  DiffTensor b_hidden;        // {hidden_dim}
  DiffTensor w_out;           // hidden_dim x embed_dim
  DiffTensor b_out;           // {embed_dim}
};

FrozenTextEncoder make_text_encoder(std::uint64_t seed, const EncoderDims& dims = {});

// Embedding row for one vocabulary id, as an untracked {token_dim} vector.
DiffTensor token_embedding_row(const FrozenTextEncoder& enc, int token_id);

// Sequences pushed through any encoder since process start. Deltas around a
// phase show how many text encodings it spent.
std::size_t encoder_invocation_count();

// Encodes a sequence given one {token_dim} (or {1,token_dim}) vector per
// position. Rows may be tracked (prompt vectors) or constants.
DiffTensor encode_rows(const FrozenTextEncoder& enc, std::span<const DiffTensor> rows);

// Encodes a sequence of frozen vocabulary ids.
DiffTensor encode_token_ids(const FrozenTextEncoder& enc, std::span<const int> ids);

// Image features already live in the shared embedding space; this is an
// identity with a dimension check.
DiffTensor encode_image(const DiffTensor& feature, std::size_t embed_dim);

// Two-layer projection head (ReLU hidden) mapping text embeddings into the
// space where the contrastive view loss operates.
struct ProjectionHead {
  DiffTensor w_in;   // embed_dim x proj_dim
  DiffTensor b_in;   // {proj_dim}
  DiffTensor w_out;  // proj_dim x proj_dim
  DiffTensor b_out;  // {proj_dim}

  std::size_t embed_dim() const { return w_in.rows(); }
  std::size_t proj_dim() const { return w_in.cols(); }
};

// Xavier-uniform weights, zero biases.
ProjectionHead make_projection_head(std::uint64_t seed, std::size_t embed_dim,
                                    std::size_t proj_dim = 128);

// Projects one {embed_dim} vector (or a matrix of row vectors). With
// normalize set, each output is scaled to unit length; a zero-norm output
// is rejected rather than divided through.
DiffTensor project(const ProjectionHead& head, const DiffTensor& w, bool normalize = true);
DiffTensor project_rows(const ProjectionHead& head, const DiffTensor& w, bool normalize = true);

}  // namespace selftpt
