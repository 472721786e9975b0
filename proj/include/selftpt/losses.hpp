#pragma once

#include <span>
#include <string>
#include <vector>

#include "selftpt/prompts.hpp"
#include "selftpt/tensor.hpp"

namespace selftpt {

// Softmax over cosine similarities between one feature and the class rows,
// sharpened by 1/tau. Both sides are normalized internally, so callers may
// pass raw embeddings.
DiffTensor class_probabilities(const DiffTensor& feature, const DiffTensor& class_rows,
                               double tau = 0.07);

// Row-batched variant: features B x D against class_rows C x D -> B x C.
DiffTensor batch_class_probabilities(const DiffTensor& features, const DiffTensor& class_rows,
                                     double tau = 0.07);

// Mean negative log probability of each row's label. Rows must be
// distributions (entries nonnegative, summing to one within 1e-3); a zero
// probability at a label is rejected rather than evaluated to -inf.
DiffTensor cross_entropy(const DiffTensor& probs, std::span<const std::size_t> labels);

// Shannon entropy in nats of one distribution, or the mean over the rows of
// a matrix of distributions. Zero entries contribute exactly zero, with zero
// gradient.
DiffTensor entropy(const DiffTensor& probs);

// Contrastive loss over stacked view embeddings (4 blocks of rows/4
// classes, as produced by encode_all_views). Each row is pulled toward the
// other three views of its class and pushed from everything else:
//   sum_i [ lse_{j != i}(S_ij / tau) - lse_{j in pos(i)}(S_ij / tau) ]
// where S = z z^T. With a single class the two sets coincide and the loss
// is exactly zero.
DiffTensor cpt_loss(const DiffTensor& z, double tau = 0.07);

// Cosine of the angle between two flat gradients. Rejects zero vectors and
// size mismatches.
double grad_cosine(std::span<const double> a, std::span<const double> b);

// Exponentially weighted history of classification prompt-gradients,
// smoothing out small-batch noise to give gradient matching a stable
// target direction. The first update copies; later ones blend as
// alpha * ema + (1 - alpha) * grad.
struct GmState {
  std::vector<double> ema;
  double alpha = 0.9;
  std::size_t updates = 0;
};

void ema_update(GmState& state, std::span<const double> grad);

// Alignment penalty 1 - cos(ema, current) together with its derivative in
// the `current` argument:
//   d/d current = (ema . current) current / (|ema| |current|^3)
//               - ema / (|ema| |current|)
// Both vectors must be nonzero.
struct AlignmentGrad {
  double loss = 0.0;
  std::vector<double> d_current;
};
AlignmentGrad cosine_alignment(std::span<const double> ema, std::span<const double> current);

// One gradient-matching evaluation at the current prompt rows: the
// contrastive gradient b, the penalty 1 - cos(ema, b), and its gradient in
// the prompt rows, which is the contrastive Hessian applied to the
// alignment direction. Degenerate states (no history yet, zero history,
// zero current gradient) skip with a reason instead of failing.
struct GmEvaluation {
  bool skipped = false;
  std::string skip_reason;
  double loss = 0.0;
  DiffTensor cpt_grad;  // prompt_len x token_dim, always filled
  DiffTensor gm_grad;   // prompt_len x token_dim, zeros when skipped
};

GmEvaluation gm_loss_and_grad(const FrozenTextEncoder& enc, const PromptBank& bank,
                              const ClassVocabulary& vocab, const ProjectionHead& head,
                              const GmState& state, HvpBackend backend,
                              bool normalize_projection = true, double tau = 0.07);

}  // namespace selftpt
