#include "selftpt/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

#include "selftpt/rng.hpp"

namespace selftpt {
namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::invalid_argument(where + ": " + msg);
}

double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

// theta - lr * sum of the defined gradients, as a fresh constant tensor.
DiffTensor descend(const DiffTensor& theta, std::initializer_list<const DiffTensor*> grads,
                   double lr) {
  std::vector<double> v(theta.values().begin(), theta.values().end());
  for (const DiffTensor* g : grads) {
    if (g == nullptr || !g->defined()) continue;
    const auto gv = g->values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * gv[i];
  }
  return DiffTensor(theta.shape(), std::move(v));
}

DiffTensor batch_features(const SampleSet& samples, std::span<const std::size_t> indices) {
  std::vector<DiffTensor> rows;
  rows.reserve(indices.size());
  for (std::size_t i : indices) rows.push_back(samples.feature(i));
  return concat_rows(rows);
}

void check_labels(const SampleSet& samples, std::size_t class_count, const char* where) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples.label(i) >= class_count) {
      fail(where, "sample " + std::to_string(i) + " labeled " +
                      std::to_string(samples.label(i)) + " in a problem of " +
                      std::to_string(class_count) + " classes");
    }
  }
}

std::size_t argmax_index(const DiffTensor& p) {
  std::size_t arg = 0;
  for (std::size_t j = 1; j < p.numel(); ++j) {
    if (p.at(j) > p.at(arg)) arg = j;
  }
  return arg;
}

std::uint64_t nanos_since(std::chrono::steady_clock::time_point start) {
  return std::uint64_t(std::chrono::duration_cast<std::chrono::nanoseconds>(
                           std::chrono::steady_clock::now() - start)
                           .count());
}

}  // namespace

double stage1_learning_rate(double peak_lr, double warmup_lr, std::size_t step,
                            std::size_t warmup_steps, std::size_t total_steps) {
  if (peak_lr <= 0.0 || warmup_lr <= 0.0) {
    fail("stage1_learning_rate", "rates must be positive");
  }
  if (warmup_steps > total_steps || step >= total_steps) {
    fail("stage1_learning_rate", "step " + std::to_string(step) + " with warmup " +
                                     std::to_string(warmup_steps) + " of " +
                                     std::to_string(total_steps) + " total");
  }
  if (step < warmup_steps) return warmup_lr;
  const double progress =
      double(step - warmup_steps) / double(total_steps - warmup_steps);
  return 0.5 * peak_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  auto rng = substream(seed, "stage1-epoch-" + std::to_string(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Stage1Result stage1_train(const FrozenTextEncoder& enc, const ClassVocabulary& vocab,
                          const SampleSet& train, const PromptBank& bank,
                          const ProjectionHead& head, const TrainConfig& cfg) {
  if (vocab.size() == 0) fail("stage1_train", "empty class vocabulary");
  if (cfg.batch_size == 0) fail("stage1_train", "batch size must be positive");
  if (cfg.lr <= 0.0 || cfg.warmup_lr <= 0.0) fail("stage1_train", "learning rates must be positive");
  if (cfg.tau_cls <= 0.0 || cfg.tau_cpt <= 0.0) fail("stage1_train", "tau must be positive");
  if (cfg.use_gm && !cfg.use_cpt) {
    fail("stage1_train", "gradient matching needs the contrastive loss it regularizes");
  }
  if (train.embed_dim() != enc.dims.embed_dim) {
    fail("stage1_train", "sample width " + std::to_string(train.embed_dim()) +
                             " does not match encoder embedding " +
                             std::to_string(enc.dims.embed_dim));
  }
  check_labels(train, vocab.size(), "stage1_train");

  Stage1Result out;
  out.bank = bank;
  out.head = head;
  out.gm.alpha = cfg.gm_alpha;
  if (cfg.epochs == 0) return out;
  if (train.size() == 0) fail("stage1_train", "no training samples");

  const std::size_t n = train.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::size_t global_step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(cfg.seed, epoch, n);
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(begin + cfg.batch_size, n);
      const std::span<const std::size_t> batch(order.data() + begin, end - begin);

      StepRow row;
      row.epoch = epoch;
      row.step = global_step;
      row.lr = stage1_learning_rate(cfg.lr, cfg.warmup_lr, global_step, steps_per_epoch,
                                    total_steps);

      DiffTensor features = batch_features(train, batch);
      std::vector<std::size_t> labels;
      labels.reserve(batch.size());
      for (std::size_t i : batch) labels.push_back(train.label(i));

      GradientTape tape;
      DiffTensor p = tape.leaf(out.bank.rows);
      DiffTensor g_ce, g_cpt, g_gm;
      DiffTensor g_w_in, g_b_in, g_w_out, g_b_out;

      if (cfg.use_cpt) {
        ProjectionHead tracked_head{tape.leaf(out.head.w_in), tape.leaf(out.head.b_in),
                                    tape.leaf(out.head.w_out), tape.leaf(out.head.b_out)};
        ViewEncodings ve = encode_all_views(enc, p, out.bank, vocab, tracked_head,
                                            cfg.normalize_projection);
        DiffTensor cpt = cpt_loss(ve.z, cfg.tau_cpt);
        DiffTensor ce = cross_entropy(batch_class_probabilities(features, ve.w_end, cfg.tau_cls),
                                      labels);
        row.cpt = cpt.item();
        row.ce = ce.item();

        std::array<DiffTensor, 5> cpt_wrt{p, tracked_head.w_in, tracked_head.b_in,
                                          tracked_head.w_out, tracked_head.b_out};
        std::vector<DiffTensor> cpt_grads = backward(cpt, cpt_wrt);
        g_cpt = cpt_grads[0];
        g_w_in = cpt_grads[1];
        g_b_in = cpt_grads[2];
        g_w_out = cpt_grads[3];
        g_b_out = cpt_grads[4];
        std::array<DiffTensor, 1> ce_wrt{p};
        g_ce = backward(ce, ce_wrt)[0];
      } else {
        DiffTensor w_end = encode_class_features(enc, p, out.bank, vocab);
        DiffTensor ce = cross_entropy(batch_class_probabilities(features, w_end, cfg.tau_cls),
                                      labels);
        row.ce = ce.item();
        std::array<DiffTensor, 1> ce_wrt{p};
        g_ce = backward(ce, ce_wrt)[0];
      }

      if (!std::isfinite(row.ce) || !std::isfinite(row.cpt)) {
        throw std::runtime_error("stage1_train: non-finite loss at epoch " +
                                 std::to_string(epoch) + " step " + std::to_string(global_step) +
                                 " (ce=" + std::to_string(row.ce) +
                                 ", cpt=" + std::to_string(row.cpt) + ")");
      }

      if (g_cpt.defined() && squared_norm(g_ce.values()) > 0.0 &&
          squared_norm(g_cpt.values()) > 0.0) {
        row.ce_cpt_cosine = grad_cosine(g_ce.values(), g_cpt.values());
        row.cosine_valid = true;
      }

      if (cfg.use_gm) {
        // The fresh classification gradient joins the smoothed history
        // before the penalty is taken, so matching is live from step one.
        ema_update(out.gm, g_ce.values());
        if (squared_norm(out.gm.ema) > 0.0 && squared_norm(g_cpt.values()) > 0.0) {
          AlignmentGrad align = cosine_alignment(out.gm.ema, g_cpt.values());
          row.gm = align.loss;
          row.gm_active = true;
          DiffTensor v(g_cpt.shape(), std::move(align.d_current));
          auto contrastive = [&](GradientTape&, const DiffTensor& pp) {
            return cpt_loss(encode_all_views(enc, pp, out.bank, vocab, out.head,
                                             cfg.normalize_projection)
                                .z,
                            cfg.tau_cpt);
          };
          g_gm = hessian_vector_product(contrastive, out.bank.rows, v, cfg.hvp_backend);
        }
      }

      out.bank.rows = descend(out.bank.rows, {&g_ce, &g_cpt, &g_gm}, row.lr);
      if (cfg.use_cpt) {
        out.head.w_in = descend(out.head.w_in, {&g_w_in}, row.lr);
        out.head.b_in = descend(out.head.b_in, {&g_b_in}, row.lr);
        out.head.w_out = descend(out.head.w_out, {&g_w_out}, row.lr);
        out.head.b_out = descend(out.head.b_out, {&g_b_out}, row.lr);
      }
      out.log.push_back(row);
      ++global_step;
    }
  }
  return out;
}

Stage2Result stage2_adapt(const FrozenTextEncoder& enc, const PromptBank& bank,
                          const ClassVocabulary& vocab, const ProjectionHead& head,
                          const Stage2Config& cfg) {
  if (vocab.size() == 0) fail("stage2_adapt", "empty class vocabulary");
  if (cfg.lr <= 0.0) fail("stage2_adapt", "learning rate must be positive");
  if (cfg.tau <= 0.0) fail("stage2_adapt", "tau must be positive");

  Stage2Result out;
  out.bank = bank;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    GradientTape tape;
    DiffTensor p = tape.leaf(out.bank.rows);
    DiffTensor loss = cpt_loss(
        encode_all_views(enc, p, out.bank, vocab, head, cfg.normalize_projection).z, cfg.tau);
    out.cpt_losses.push_back(loss.item());
    std::array<DiffTensor, 1> wrt{p};
    DiffTensor g = backward(loss, wrt)[0];
    out.bank.rows = descend(out.bank.rows, {&g}, cfg.lr);
  }

  out.cpt_losses.push_back(
      cpt_loss(
          encode_all_views(enc, out.bank.rows, out.bank, vocab, head, cfg.normalize_projection)
              .z,
          cfg.tau)
          .item());
  return out;
}

PredictionResult stage3_predict(const FrozenTextEncoder& enc, const PromptBank& bank,
                                const ClassVocabulary& vocab, const SampleSet& samples,
                                double tau) {
  if (vocab.size() == 0) fail("stage3_predict", "empty class vocabulary");
  if (samples.size() == 0) fail("stage3_predict", "no samples to classify");
  check_labels(samples, vocab.size(), "stage3_predict");

  const auto start = std::chrono::steady_clock::now();
  const std::size_t backwards_before = backward_pass_count();
  const std::size_t encodes_before = encoder_invocation_count();

  DiffTensor w_end = encode_class_features(enc, bank.rows, bank, vocab);
  PredictionResult out;
  out.predicted.reserve(samples.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    DiffTensor probs = class_probabilities(samples.feature(i), w_end, tau);
    ++out.meter.forward_count;
    const std::size_t guess = argmax_index(probs);
    out.predicted.push_back(guess);
    if (guess == samples.label(i)) ++hits;
  }
  out.accuracy = double(hits) / double(samples.size());
  out.meter.images = samples.size();
  out.meter.backward_count = backward_pass_count() - backwards_before;
  out.meter.encoder_invocations = encoder_invocation_count() - encodes_before;
  out.meter.wall_nanos = nanos_since(start);
  return out;
}

PredictionResult baseline_tpt_predict(const FrozenTextEncoder& enc, const PromptBank& bank,
                                      const ClassVocabulary& vocab, const SampleSet& samples,
                                      const TptConfig& cfg) {
  if (vocab.size() == 0) fail("baseline_tpt_predict", "empty class vocabulary");
  if (samples.size() == 0) fail("baseline_tpt_predict", "no samples to classify");
  if (cfg.augments == 0) fail("baseline_tpt_predict", "need at least one augmented copy");
  if (cfg.lr <= 0.0 || cfg.tau <= 0.0) {
    fail("baseline_tpt_predict", "learning rate and tau must be positive");
  }
  check_labels(samples, vocab.size(), "baseline_tpt_predict");

  auto rng = substream(cfg.seed, "tpt-augment");
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t dim = enc.dims.embed_dim;

  const auto start = std::chrono::steady_clock::now();
  const std::size_t backwards_before = backward_pass_count();
  const std::size_t encodes_before = encoder_invocation_count();

  PredictionResult out;
  out.predicted.reserve(samples.size());
  std::size_t hits = 0;

  for (std::size_t i = 0; i < samples.size(); ++i) {
    DiffTensor clean = samples.feature(i);
    std::vector<double> aug(cfg.augments * dim);
    for (std::size_t a = 0; a < cfg.augments; ++a) {
      for (std::size_t j = 0; j < dim; ++j) {
        aug[a * dim + j] = clean.at(j) + cfg.augment_noise * gauss(rng);
      }
    }
    DiffTensor augmented = DiffTensor::matrix(cfg.augments, dim, std::move(aug));

    // Each image adapts a throwaway copy of the prompts; the next image
    // starts from the caller's rows again.
    PromptBank adapted = bank;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      GradientTape tape;
      DiffTensor p = tape.leaf(adapted.rows);
      DiffTensor w_end = encode_class_features(enc, p, adapted, vocab);
      DiffTensor probs = batch_class_probabilities(augmented, w_end, cfg.tau);
      DiffTensor mean_prob = scalar_mul(col_sums(probs), 1.0 / double(cfg.augments));
      DiffTensor loss = entropy(mean_prob);
      ++out.meter.forward_count;
      std::array<DiffTensor, 1> wrt{p};
      DiffTensor g = backward(loss, wrt)[0];
      adapted.rows = descend(adapted.rows, {&g}, cfg.lr);
    }

    DiffTensor w_end = encode_class_features(enc, adapted.rows, adapted, vocab);
    const std::size_t guess = argmax_index(class_probabilities(clean, w_end, cfg.tau));
    ++out.meter.forward_count;
    out.predicted.push_back(guess);
    if (guess == samples.label(i)) ++hits;
  }
  out.accuracy = double(hits) / double(samples.size());
  out.meter.images = samples.size();
  out.meter.backward_count = backward_pass_count() - backwards_before;
  out.meter.encoder_invocations = encoder_invocation_count() - encodes_before;
  out.meter.wall_nanos = nanos_since(start);
  return out;
}

double diagnose_grad_alignment(const FrozenTextEncoder& enc, const PromptBank& bank,
                               const ClassVocabulary& vocab, const ProjectionHead& head,
                               const SampleSet& samples, double tau_cls, double tau_cpt,
                               bool normalize_projection) {
  if (vocab.size() == 0) fail("diagnose_grad_alignment", "empty class vocabulary");
  if (samples.size() == 0) fail("diagnose_grad_alignment", "no labeled samples");
  check_labels(samples, vocab.size(), "diagnose_grad_alignment");

  std::vector<std::size_t> all(samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  DiffTensor features = batch_features(samples, all);
  std::vector<std::size_t> labels(samples.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = samples.label(i);

  // Both losses differentiated at the same prompt rows; cross_entropy is
  // already the mean over its rows, so one batch of everything is the
  // dataset average.
  GradientTape tape;
  DiffTensor p = tape.leaf(bank.rows);
  ViewEncodings ve = encode_all_views(enc, p, bank, vocab, head, normalize_projection);
  DiffTensor ce = cross_entropy(batch_class_probabilities(features, ve.w_end, tau_cls), labels);
  DiffTensor cpt = cpt_loss(ve.z, tau_cpt);
  std::array<DiffTensor, 1> wrt{p};
  DiffTensor g_ce = backward(ce, wrt)[0];
  DiffTensor g_cpt = backward(cpt, wrt)[0];
  return grad_cosine(g_ce.values(), g_cpt.values());
}

}  // namespace selftpt
