#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dmha/checkpoint.hpp"
#include "dmha/config.hpp"
#include "dmha/manifest.hpp"
#include "dmha/model.hpp"
#include "dmha/rng.hpp"

namespace dmha {

struct Utterance {
  std::string id;
  std::size_t label = 0;
  Tensor frames;  // [N, n_mels], mean-normalized
};

struct Dataset {
  std::vector<std::string> speakers;  // label -> speaker id
  std::vector<Utterance> utterances;
};

// Labels follow the order in which speakers first appear.
Dataset load_dataset(const std::vector<ManifestEntry>& manifest, const FeatureConfig& features);

// Exactly `chunk_frames` consecutive frames at a uniformly random offset.
// Utterances shorter than the chunk are first repeated end to end until they
// cover it.
Tensor sample_chunk(const Tensor& frames, std::size_t chunk_frames, Rng& rng);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  Tensor m;
  Tensor v;
};

// One Adam update of `param` (step number `t` >= 1, bias-corrected) with L2
// weight decay added to the gradient before the moments.
void adam_update(Tensor& param, const Tensor& grad, AdamMoments& state, std::size_t t, double lr,
                 double weight_decay, const AdamHyper& hyper = {});

class Adam {
 public:
  explicit Adam(std::vector<NamedParam> params, AdamHyper hyper = {});

  // Applies one update from the parameters' accumulated gradients.
  void step(double lr, double weight_decay);
  void zero_grad();

  std::size_t steps() const { return steps_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<AdamMoments>& moments() { return moments_; }
  const std::vector<AdamMoments>& moments() const { return moments_; }
  void restore(std::size_t steps, std::vector<AdamMoments> moments);

 private:
  std::vector<NamedParam> params_;
  std::vector<AdamMoments> moments_;
  AdamHyper hyper_;
  std::size_t steps_ = 0;
};

// Multiplies the learning rate by `factor` once `patience` consecutive epochs
// pass without a strictly lower validation loss, then starts counting again.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, std::size_t patience, double factor);

  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t bad_epochs() const { return bad_epochs_; }

  struct Outcome {
    bool improved = false;
    bool annealed = false;
  };
  Outcome observe(double val_loss);
  void restore(double lr, double best, std::size_t bad_epochs);

 private:
  double lr_;
  std::size_t patience_;
  double factor_;
  double best_;
  std::size_t bad_epochs_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // rate used during the epoch
  bool improved = false;
  bool annealed = false;
};

// Speaker-classification training. Every epoch visits each training
// utterance once through a random chunk; batches come from a seeded
// permutation, so a run is a pure function of (config, dataset).
class Trainer {
 public:
  Trainer(const RunConfig& config, const Dataset& data);
  // Resumes at the exact step recorded in the checkpoint.
  Trainer(const Checkpoint& checkpoint, const Dataset& data);

  const RunConfig& config() const { return config_; }
  SpeakerModel& model() { return model_; }
  const std::vector<std::size_t>& train_indices() const { return train_; }
  const std::vector<std::size_t>& validation_indices() const { return validation_; }

  std::size_t epoch() const { return epoch_; }  // completed epochs
  std::size_t step_in_epoch() const { return step_; }
  std::size_t steps_per_epoch() const { return batches_.size(); }
  double lr() const { return scheduler_.lr(); }
  bool finished() const { return epoch_ >= config_.train.max_epochs; }

  // One optimizer step on the next batch of the current epoch. Returns the
  // batch loss before the update.
  double step();
  // Runs the remaining steps of the epoch, validates and updates the
  // learning-rate schedule.
  EpochRecord run_epoch();
  double validation_loss();

  Checkpoint checkpoint();

  // Trains until max_epochs and returns the checkpoint with the lowest
  // validation loss.
  Checkpoint train(const std::function<void(const EpochRecord&)>& on_epoch = {});

 private:
  void init_split();
  void plan_epoch();

  RunConfig config_;
  const Dataset& data_;
  SpeakerModel model_;
  Adam adam_;
  PlateauScheduler scheduler_;
  std::vector<std::size_t> train_;
  std::vector<std::size_t> validation_;
  std::vector<std::vector<std::size_t>> batches_;  // positions into train_
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
  double loss_sum_ = 0.0;
  std::size_t loss_count_ = 0;
};

// Config stored in a checkpoint, with run-state keys removed.
RunConfig run_config_from(const Checkpoint& checkpoint);

// Model with the checkpoint's parameters and batch-norm statistics.
SpeakerModel load_model(const Checkpoint& checkpoint);
void load_weights(SpeakerModel& model, const Checkpoint& checkpoint);

}  // namespace dmha
