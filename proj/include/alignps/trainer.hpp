#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "alignps/data.hpp"
#include "alignps/eval.hpp"
#include "alignps/pipeline.hpp"

namespace alignps {

/// Optimization schedule and loss weighting. The stock values mirror the
/// shipped default config: SGD with momentum 0.9, weight decay 5e-4, base lr
/// 1e-3 warmed up linearly over 300 steps and cut by 10x at the start of
/// epochs 16 and 22 of a 24-epoch run, batch size 4.
struct TrainConfig {
  float base_lr = 0.001f;
  float momentum = 0.9f;
  float weight_decay = 0.0005f;
  std::vector<int> lr_decay_epochs = {16, 22};  // 0-based epoch indices
  float lr_decay_factor = 0.1f;
  int total_epochs = 24;
  int warmup_steps = 300;
  int batch_size = 4;
  float w_det = 1.f, w_reid = 1.f;
  int max_steps = 0;      // optional hard cap on steps; 0 = full schedule
  int queue_slots = 5000; // unlabeled-feature memory capacity
  std::uint64_t seed = 1;
  ReidLossConfig reid;
  TransformConfig transforms;
};

/// lr(step) = base * warmup_factor * decay_factor. Warmup ramps linearly
/// from base/warmup_steps to base over the first warmup_steps steps; decay
/// multiplies by lr_decay_factor once per listed epoch already begun.
float lr_at(const TrainConfig &cfg, int step, int steps_per_epoch);

/// Everything one training run mutates, bundled for checkpointing. `params`
/// holds the stable registration order that velocity buffers and checkpoint
/// records follow.
struct TrainState {
  ModelConfig mcfg;
  TrainConfig tcfg;
  Model model;
  ReidMemory mem;
  ParamSet<float> params;
  std::vector<Tensor> velocity;  // SGD momentum, parallel to params.items
  int step = 0;
};

TrainState make_train_state(const ModelConfig &mcfg, const TrainConfig &tcfg,
                            int labeled_identities);

struct StepStats {
  int step = 0;
  float lr = 0;
  float total = 0, det_cls = 0, det_reg = 0, det_ctr = 0;
  float reid_softmax = 0, reid_triplet = 0;
};

/// Forward + backward + SGD update + memory update over an already
/// transformed batch. Throws with a per-term dump if any loss goes
/// non-finite. With w_reid == 0 the identity memory is left untouched.
StepStats train_step(TrainState &st, const std::vector<SceneImage> &batch, int steps_per_epoch);

std::vector<SceneImage> load_all_scenes(const DatasetManifest &m, const std::string &dir);

/// Deterministic full loop over preloaded scenes: per-epoch index shuffles
/// and per-step augmentations are re-derived from (seed, step), so resuming
/// from a checkpoint continues the exact same stream. Appends one JSON line
/// per step to `metrics` when given.
std::vector<StepStats> train_loop(TrainState &st, const std::vector<SceneImage> &scenes,
                                  std::ostream *metrics);

/// Stable digest of every semantically relevant model/train field; two runs
/// agree on it iff their configurations match. max_steps is excluded — it
/// only truncates the (otherwise identical) trajectory, so a capped run's
/// checkpoint stays valid for resuming the full schedule.
std::uint64_t config_hash(const ModelConfig &mcfg, const TrainConfig &tcfg);

/// Binary archive of parameters, optimizer velocity, identity memory, and
/// the step counter, keyed by the config hash. Round trips bit-exactly.
void save_checkpoint(const TrainState &st, const std::string &path);

/// Restores into a state built with the same configs; a digest mismatch or
/// shape mismatch is an error.
void load_checkpoint(TrainState &st, const std::string &path);

struct AblationSpec {
  std::string variant;
  ModelConfig mcfg;
  TrainConfig tcfg;
};

/// Expand a preset name into its variant list. Presets: "scale" (emitted
/// pyramid levels), "region" (lateral/output conv kind x fusion), "task"
/// (where the embedding taps the head), "loss" (softmax-memory term with and
/// without the triplet and stored centers), "dcn" (which backbone stages get
/// deformable convs). Unknown names are an error.
std::vector<AblationSpec> ablation_preset(const std::string &preset, const ModelConfig &base_m,
                                          const TrainConfig &base_t);

struct AblationRow {
  std::string variant;
  std::uint64_t hash = 0;
  double recall = 0, ap = 0, map = 0, top1 = 0;
};

/// Train one variant and score it on the test split.
AblationRow run_variant(const AblationSpec &spec, const DatasetManifest &train_m,
                        const std::string &train_dir, const DatasetManifest &test_m,
                        const std::string &test_dir, std::ostream *metrics);

std::vector<AblationRow> run_ablation(const std::string &preset, const ModelConfig &base_m,
                                      const TrainConfig &base_t, const DatasetManifest &train_m,
                                      const std::string &train_dir, const DatasetManifest &test_m,
                                      const std::string &test_dir, std::ostream *metrics);

/// CSV with header "variant,recall,ap,map,top1".
std::string ablation_csv(const std::vector<AblationRow> &rows);

}  // namespace alignps
