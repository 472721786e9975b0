#pragma once

#include <cstdint>
#include <vector>

#include "selftpt/losses.hpp"
#include "selftpt/synth.hpp"

namespace selftpt {

// Source-phase training settings. The seed drives only the per-epoch batch
// shuffles; prompt and head initialization belong to the caller.
struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double lr = 0.002;
  double warmup_lr = 1e-5;
  double tau_cls = 0.07;
  double tau_cpt = 0.07;
  double gm_alpha = 0.9;
  bool use_cpt = true;
  bool use_gm = true;
  bool normalize_projection = true;
  HvpBackend hvp_backend = HvpBackend::kDoubleBackward;
};

// Warmup value through the first epoch, then a half cosine from the peak
// rate toward zero across the remaining steps.
double stage1_learning_rate(double peak_lr, double warmup_lr, std::size_t step,
                            std::size_t warmup_steps, std::size_t total_steps);

// The visiting order of sample indices in one epoch. Exposed so training
// can be replicated step for step outside stage1_train.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n);

struct StepRow {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global step index
  double lr = 0.0;
  double ce = 0.0;
  double cpt = 0.0;  // zero when the contrastive loss is disabled
  double gm = 0.0;   // zero when gradient matching is off or skipped
  bool gm_active = false;
  double ce_cpt_cosine = 0.0;  // alignment of the two prompt gradients
  bool cosine_valid = false;
};

struct Stage1Result {
  PromptBank bank;
  ProjectionHead head;
  GmState gm;
  std::vector<StepRow> log;
};

// Source-phase descent from the given initial prompts and head: prompts
// take classification, contrastive, and gradient-matching gradients; the
// projection head takes only the contrastive one (classification never
// touches it, and gradient matching is restricted to the prompts by
// design). Each step folds the fresh classification prompt-gradient into
// the EMA first, then penalizes the contrastive gradient's misalignment
// against that smoothed direction. A non-finite loss aborts with the step
// identified. epochs=0 returns the inputs unchanged with an empty log.
Stage1Result stage1_train(const FrozenTextEncoder& enc, const ClassVocabulary& vocab,
                          const SampleSet& train, const PromptBank& bank,
                          const ProjectionHead& head, const TrainConfig& cfg);

// Test-time class-set adaptation settings.
struct Stage2Config {
  std::size_t steps = 25;
  double lr = 0.02;
  double tau = 0.07;
  bool normalize_projection = true;
};

struct Stage2Result {
  PromptBank bank;
  std::vector<double> cpt_losses;  // before each step, plus the final value
};

// Adapts the prompts to a class list by plain descent on the contrastive
// view loss, using only the class names: the signature admits no image
// data, so zero test-image access is structural. The head is read, never
// written.
Stage2Result stage2_adapt(const FrozenTextEncoder& enc, const PromptBank& bank,
                          const ClassVocabulary& vocab, const ProjectionHead& head,
                          const Stage2Config& cfg);

// Operation counts and wall time for one prediction phase. Counts are
// deterministic; wall_nanos is measured and never belongs in a
// deterministic report.
struct CostMeter {
  std::size_t images = 0;
  std::size_t forward_count = 0;        // scoring / loss evaluations
  std::size_t backward_count = 0;       // reverse-mode sweeps
  std::size_t encoder_invocations = 0;  // sequences through the text encoder
  std::uint64_t wall_nanos = 0;

  double per_image_wall_nanos() const {
    return images == 0 ? 0.0 : double(wall_nanos) / double(images);
  }
};

struct PredictionResult {
  std::vector<std::size_t> predicted;
  double accuracy = 0.0;
  CostMeter meter;
};

// Direct prediction: class rows are encoded once from the current prompts,
// then every feature is read exactly once and classified by sharpened
// cosine similarity. No tape, no reverse sweeps; the meter proves it.
PredictionResult stage3_predict(const FrozenTextEncoder& enc, const PromptBank& bank,
                                const ClassVocabulary& vocab, const SampleSet& samples,
                                double tau = 0.07);

// Per-image entropy-minimization baseline for cost comparison.
struct TptConfig {
  std::size_t steps = 10;
  double lr = 0.1;
  std::size_t augments = 8;
  double augment_noise = 0.1;
  double tau = 0.07;
  std::uint64_t seed = 0;
};

// For every image: copy the prompts, take `steps` descent steps on the
// entropy of the mean prediction over noisy copies of the feature, predict
// on the clean feature, and discard the adapted copy. The caller's prompts
// are never modified. Costs exactly `steps` reverse sweeps per image.
PredictionResult baseline_tpt_predict(const FrozenTextEncoder& enc, const PromptBank& bank,
                                      const ClassVocabulary& vocab, const SampleSet& samples,
                                      const TptConfig& cfg);

// Alignment of the classification and contrastive tasks at the given
// parameters: the cosine between the dataset-average classification
// prompt-gradient and the contrastive prompt-gradient. Rejects zero
// gradients.
double diagnose_grad_alignment(const FrozenTextEncoder& enc, const PromptBank& bank,
                               const ClassVocabulary& vocab, const ProjectionHead& head,
                               const SampleSet& samples, double tau_cls = 0.07,
                               double tau_cpt = 0.07, bool normalize_projection = true);

}  // namespace selftpt
