#include "selftpt/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace selftpt {
namespace {

constexpr double kMask = -1e9;
constexpr double kRowSumTolerance = 1e-3;

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::invalid_argument(where + ": " + msg);
}

void require_distribution_rows(const DiffTensor& probs, const char* where) {
  if (!probs.defined() || probs.rank() == 0 || probs.rank() > 2) {
    fail(where, "expected a probability vector or matrix, got shape " +
                    (probs.defined() ? shape_str(probs.shape()) : "<none>"));
  }
  const std::size_t cols = probs.rank() == 2 ? probs.cols() : probs.numel();
  const std::size_t rows = probs.rank() == 2 ? probs.rows() : 1;
  const auto v = probs.values();
  for (std::size_t i = 0; i < rows; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double p = v[i * cols + j];
      if (p < 0.0) fail(where, "negative probability at row " + std::to_string(i));
      total += p;
    }
    if (std::abs(total - 1.0) > kRowSumTolerance) {
      fail(where, "row " + std::to_string(i) + " sums to " + std::to_string(total) +
                      ", not a distribution");
    }
  }
}

double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace

DiffTensor batch_class_probabilities(const DiffTensor& features, const DiffTensor& class_rows,
                                     double tau) {
  if (tau <= 0.0) fail("class_probabilities", "tau must be positive");
  if (!features.defined() || features.rank() != 2 || !class_rows.defined() ||
      class_rows.rank() != 2 || features.cols() != class_rows.cols()) {
    fail("class_probabilities",
         "feature rows and class rows must share their embedding width, got " +
             (features.defined() ? shape_str(features.shape()) : "<none>") + " vs " +
             (class_rows.defined() ? shape_str(class_rows.shape()) : "<none>"));
  }
  DiffTensor fn = l2_normalize_rows(features);
  DiffTensor wn = l2_normalize_rows(class_rows);
  DiffTensor logits = scalar_mul(matmul(fn, transpose(wn)), 1.0 / tau);
  return softmax_row(logits);
}

DiffTensor class_probabilities(const DiffTensor& feature, const DiffTensor& class_rows,
                               double tau) {
  if (!feature.defined() || feature.rank() != 1) {
    fail("class_probabilities", "expected a feature vector, got shape " +
                                    (feature.defined() ? shape_str(feature.shape()) : "<none>"));
  }
  DiffTensor row = reshape(feature, Shape{1, feature.numel()});
  DiffTensor p = batch_class_probabilities(row, class_rows, tau);
  return reshape(p, Shape{p.cols()});
}

DiffTensor cross_entropy(const DiffTensor& probs, std::span<const std::size_t> labels) {
  require_distribution_rows(probs, "cross_entropy");
  DiffTensor rows = probs.rank() == 2 ? probs : reshape(probs, Shape{1, probs.numel()});
  if (labels.size() != rows.rows()) {
    fail("cross_entropy", std::to_string(labels.size()) + " labels for " +
                              std::to_string(rows.rows()) + " probability rows");
  }
  std::vector<double> onehot(rows.rows() * rows.cols(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= rows.cols()) {
      fail("cross_entropy", "label " + std::to_string(labels[i]) + " out of range for " +
                                std::to_string(rows.cols()) + " classes");
    }
    if (rows.at(i, labels[i]) == 0.0) {
      fail("cross_entropy", "zero probability at the label of row " + std::to_string(i));
    }
    onehot[i * rows.cols() + labels[i]] = 1.0;
  }
  DiffTensor picked =
      row_sums(elementwise_mul(rows, DiffTensor::matrix(rows.rows(), rows.cols(), std::move(onehot))));
  return scalar_mul(mean(log(picked)), -1.0);
}

DiffTensor entropy(const DiffTensor& probs) {
  require_distribution_rows(probs, "entropy");
  DiffTensor rows = probs.rank() == 2 ? probs : reshape(probs, Shape{1, probs.numel()});
  // log(p) is undefined at p = 0 but the entropy term p log p tends to zero
  // there. Shifting only the zero entries by one makes each such term an
  // exact 0 * log(1) with zero derivative, and leaves other entries alone.
  const auto v = rows.values();
  std::vector<double> shift(v.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) shift[i] = v[i] == 0.0 ? 1.0 : 0.0;
  DiffTensor shifted = add(rows, DiffTensor::matrix(rows.rows(), rows.cols(), std::move(shift)));
  DiffTensor per_row = row_sums(elementwise_mul(rows, log(shifted)));
  return scalar_mul(mean(per_row), -1.0);
}

DiffTensor cpt_loss(const DiffTensor& z, double tau) {
  if (tau <= 0.0) fail("cpt_loss", "tau must be positive");
  if (!z.defined() || z.rank() != 2 || z.rows() < 4 || z.rows() % 4 != 0) {
    fail("cpt_loss", "expected four stacked view blocks, got shape " +
                         (z.defined() ? shape_str(z.shape()) : "<none>"));
  }
  const std::size_t n = z.rows();
  const std::size_t c = n / 4;
  std::vector<double> pos_mask(n * n, kMask);
  std::vector<double> nonself_mask(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    nonself_mask[i * n + i] = kMask;
    for (std::size_t j : positives_of(i, c)) pos_mask[i * n + j] = 0.0;
  }
  DiffTensor s = scalar_mul(matmul(z, transpose(z)), 1.0 / tau);
  DiffTensor lse_pos = logsumexp_row(add(s, DiffTensor::matrix(n, n, std::move(pos_mask))));
  DiffTensor lse_nonself =
      logsumexp_row(add(s, DiffTensor::matrix(n, n, std::move(nonself_mask))));
  return sum(sub(lse_nonself, lse_pos));
}

double grad_cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    fail("grad_cosine", "vectors of size " + std::to_string(a.size()) + " and " +
                            std::to_string(b.size()));
  }
  const double na = std::sqrt(squared_norm(a));
  const double nb = std::sqrt(squared_norm(b));
  if (na == 0.0 || nb == 0.0) fail("grad_cosine", "zero-norm vector");
  double ab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i];
  return ab / (na * nb);
}

void ema_update(GmState& state, std::span<const double> grad) {
  if (grad.empty()) fail("ema_update", "empty gradient");
  if (state.alpha < 0.0 || state.alpha >= 1.0) {
    fail("ema_update", "alpha must lie in [0, 1), got " + std::to_string(state.alpha));
  }
  if (state.updates == 0) {
    state.ema.assign(grad.begin(), grad.end());
  } else {
    if (state.ema.size() != grad.size()) {
      fail("ema_update", "gradient size changed from " + std::to_string(state.ema.size()) +
                             " to " + std::to_string(grad.size()));
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
      state.ema[i] = state.alpha * state.ema[i] + (1.0 - state.alpha) * grad[i];
    }
  }
  ++state.updates;
}

AlignmentGrad cosine_alignment(std::span<const double> ema, std::span<const double> current) {
  if (ema.size() != current.size() || ema.empty()) {
    fail("cosine_alignment", "vectors of size " + std::to_string(ema.size()) + " and " +
                                 std::to_string(current.size()));
  }
  const double na = std::sqrt(squared_norm(ema));
  const double nb = std::sqrt(squared_norm(current));
  if (na == 0.0 || nb == 0.0) fail("cosine_alignment", "zero-norm vector");
  double s = 0.0;
  for (std::size_t i = 0; i < ema.size(); ++i) s += ema[i] * current[i];
  AlignmentGrad out;
  out.loss = 1.0 - s / (na * nb);
  out.d_current.resize(current.size());
  for (std::size_t i = 0; i < current.size(); ++i) {
    out.d_current[i] = s * current[i] / (na * nb * nb * nb) - ema[i] / (na * nb);
  }
  return out;
}

GmEvaluation gm_loss_and_grad(const FrozenTextEncoder& enc, const PromptBank& bank,
                              const ClassVocabulary& vocab, const ProjectionHead& head,
                              const GmState& state, HvpBackend backend,
                              bool normalize_projection, double tau) {
  auto contrastive = [&](GradientTape&, const DiffTensor& p) {
    return cpt_loss(encode_all_views(enc, p, bank, vocab, head, normalize_projection).z, tau);
  };

  GmEvaluation out;
  {
    GradientTape tape;
    DiffTensor p = tape.leaf(bank.rows);
    DiffTensor leaves[] = {p};
    out.cpt_grad = backward(contrastive(tape, p), leaves)[0].detached();
  }
  const Shape grad_shape = out.cpt_grad.shape();

  auto skip = [&](const char* why) {
    out.skipped = true;
    out.skip_reason = why;
    out.gm_grad = DiffTensor::zeros(grad_shape);
    return out;
  };
  if (state.updates == 0 || state.ema.empty()) return skip("no gradient history yet");
  if (state.ema.size() != out.cpt_grad.numel()) {
    fail("gm_loss_and_grad", "history of size " + std::to_string(state.ema.size()) +
                                 " against a gradient of size " +
                                 std::to_string(out.cpt_grad.numel()));
  }
  if (squared_norm(state.ema) == 0.0) return skip("gradient history is zero");
  if (squared_norm(out.cpt_grad.values()) == 0.0) return skip("current gradient is zero");

  AlignmentGrad align = cosine_alignment(state.ema, out.cpt_grad.values());
  out.loss = align.loss;
  DiffTensor v(grad_shape, std::move(align.d_current));
  out.gm_grad = hessian_vector_product(contrastive, bank.rows, v, backend);
  return out;
}

}  // namespace selftpt
