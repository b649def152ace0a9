#include "dmha/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include "dmha/head.hpp"
#include "dmha/wav.hpp"

namespace dmha {

Dataset load_dataset(const std::vector<ManifestEntry>& manifest, const FeatureConfig& features) {
  Dataset data;
  std::map<std::string, std::size_t> labels;
  for (const auto& e : manifest) {
    auto [it, inserted] = labels.emplace(e.speaker, data.speakers.size());
    if (inserted) data.speakers.push_back(e.speaker);
    const auto audio = read_wav(e.wav, features.sample_rate);
    data.utterances.push_back(
        {e.utterance, it->second, compute_features(audio, features.sample_rate, features).frames});
  }
  return data;
}

Tensor sample_chunk(const Tensor& frames, std::size_t chunk_frames, Rng& rng) {
  if (frames.rank() != 2 || frames.dim(0) == 0)
    throw std::invalid_argument("sample_chunk: expected non-empty [N, F] frames");
  const std::size_t n = frames.dim(0), f = frames.dim(1);
  const std::size_t copies = (chunk_frames + n - 1) / n;
  const std::size_t total = copies * n;
  const std::size_t offset = uniform_index(rng, total - chunk_frames + 1);
  Tensor out({chunk_frames, f});
  for (std::size_t t = 0; t < chunk_frames; ++t) {
    const std::size_t src = (offset + t) % n;
    std::copy_n(frames.data() + src * f, f, out.data() + t * f);
  }
  return out;
}

void adam_update(Tensor& param, const Tensor& grad, AdamMoments& state, std::size_t t, double lr,
                 double weight_decay, const AdamHyper& hyper) {
  if (grad.shape() != param.shape() || state.m.shape() != param.shape() ||
      state.v.shape() != param.shape()) {
    throw std::invalid_argument("adam: shape mismatch between parameter " +
                                shape_str(param.shape()) + ", gradient " +
                                shape_str(grad.shape()) + " and moments");
  }
  if (t == 0) throw std::invalid_argument("adam: step numbers start at 1");
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + weight_decay * param[i];
    state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
    state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
  }
}

Adam::Adam(std::vector<NamedParam> params, AdamHyper hyper)
    : params_(std::move(params)), hyper_(hyper) {
  for (const auto& p : params_)
    moments_.push_back({Tensor(p.var.shape(), 0.0), Tensor(p.var.shape(), 0.0)});
}

void Adam::step(double lr, double weight_decay) {
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Var& v = params_[i].var;
    adam_update(v.mutable_value(), v.grad(), moments_[i], steps_, lr, weight_decay, hyper_);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void Adam::restore(std::size_t steps, std::vector<AdamMoments> moments) {
  if (moments.size() != params_.size()) throw std::invalid_argument("adam: moment count mismatch");
  for (std::size_t i = 0; i < moments.size(); ++i) {
    if (moments[i].m.shape() != params_[i].var.shape() ||
        moments[i].v.shape() != params_[i].var.shape())
      throw std::invalid_argument("adam: moment shape mismatch for " + params_[i].name);
  }
  steps_ = steps;
  moments_ = std::move(moments);
}

PlateauScheduler::PlateauScheduler(double lr, std::size_t patience, double factor)
    : lr_(lr), patience_(patience), factor_(factor), best_(std::numeric_limits<double>::infinity()) {
  if (patience == 0) throw std::invalid_argument("scheduler: patience must be at least 1");
  if (!(factor > 0.0 && factor < 1.0)) throw std::invalid_argument("scheduler: factor must lie in (0, 1)");
}

PlateauScheduler::Outcome PlateauScheduler::observe(double val_loss) {
  Outcome out;
  if (val_loss < best_) {
    best_ = val_loss;
    bad_epochs_ = 0;
    out.improved = true;
    return out;
  }
  if (++bad_epochs_ >= patience_) {
    lr_ *= factor_;
    bad_epochs_ = 0;
    out.annealed = true;
  }
  return out;
}

void PlateauScheduler::restore(double lr, double best, std::size_t bad_epochs) {
  lr_ = lr;
  best_ = best;
  bad_epochs_ = bad_epochs;
}

namespace {

constexpr std::string_view kStatePrefix = "state.";

void check_dataset(const Dataset& data) {
  if (data.speakers.size() < 2) throw std::invalid_argument("training needs at least 2 speakers");
  std::vector<std::size_t> counts(data.speakers.size(), 0);
  for (const auto& u : data.utterances) {
    if (u.label >= counts.size()) throw std::invalid_argument("utterance label out of range");
    ++counts[u.label];
  }
  for (std::size_t s = 0; s < counts.size(); ++s) {
    if (counts[s] < 2) {
      throw std::invalid_argument("speaker " + data.speakers[s] + " has " +
                                  std::to_string(counts[s]) + " utterance(s); training needs 2");
    }
  }
}

RunConfig with_speakers(RunConfig config, const Dataset& data) {
  config.model.num_speakers = data.speakers.size();
  config.validate();
  return config;
}

double parse_state_double(const Checkpoint& ck, std::string_view key) {
  return std::strtod(ck.value(std::string(kStatePrefix) + std::string(key)).c_str(), nullptr);
}

std::size_t parse_state_size(const Checkpoint& ck, std::string_view key) {
  return static_cast<std::size_t>(
      std::stoull(ck.value(std::string(kStatePrefix) + std::string(key))));
}

}  // namespace

RunConfig run_config_from(const Checkpoint& checkpoint) {
  KeyValues kv;
  for (const auto& entry : checkpoint.config)
    if (!entry.first.starts_with(kStatePrefix)) kv.push_back(entry);
  RunConfig config;
  dmha::apply(config, kv);
  config.validate();
  return config;
}

void load_weights(SpeakerModel& model, const Checkpoint& checkpoint) {
  for (auto& p : model.named_parameters()) {
    const Tensor& t = checkpoint.tensor(p.name);
    if (t.shape() != p.var.shape()) {
      throw std::runtime_error("checkpoint tensor " + p.name + " has shape " + shape_str(t.shape()) +
                               ", model expects " + shape_str(p.var.shape()));
    }
    p.var.mutable_value() = t;
  }
  for (auto& b : model.named_buffers()) {
    const Tensor& t = checkpoint.tensor(b.name);
    if (t.shape() != b.tensor->shape())
      throw std::runtime_error("checkpoint buffer " + b.name + " has the wrong shape");
    *b.tensor = t;
  }
}

SpeakerModel load_model(const Checkpoint& checkpoint) {
  const RunConfig config = run_config_from(checkpoint);
  SpeakerModel model(config.model, config.train.seed);
  load_weights(model, checkpoint);
  return model;
}

Trainer::Trainer(const RunConfig& config, const Dataset& data)
    : config_(with_speakers(config, data)),
      data_(data),
      model_(config_.model, config_.train.seed),
      adam_(model_.named_parameters()),
      scheduler_(config_.train.lr, config_.train.anneal_patience, config_.train.anneal_factor) {
  check_dataset(data_);
  init_split();
  plan_epoch();
}

Trainer::Trainer(const Checkpoint& checkpoint, const Dataset& data)
    : config_(run_config_from(checkpoint)),
      data_(data),
      model_(config_.model, config_.train.seed),
      adam_(model_.named_parameters()),
      scheduler_(config_.train.lr, config_.train.anneal_patience, config_.train.anneal_factor) {
  check_dataset(data_);
  if (data_.speakers.size() != config_.model.num_speakers) {
    throw std::invalid_argument("checkpoint was trained on " +
                                std::to_string(config_.model.num_speakers) +
                                " speakers, dataset has " + std::to_string(data_.speakers.size()));
  }
  load_weights(model_, checkpoint);
  std::vector<AdamMoments> moments;
  for (const auto& p : adam_.params())
    moments.push_back({checkpoint.tensor("adam.m." + p.name), checkpoint.tensor("adam.v." + p.name)});
  adam_.restore(parse_state_size(checkpoint, "adam_steps"), std::move(moments));
  scheduler_.restore(parse_state_double(checkpoint, "lr"), parse_state_double(checkpoint, "best_val"),
                     parse_state_size(checkpoint, "bad_epochs"));
  epoch_ = parse_state_size(checkpoint, "epoch");
  step_ = parse_state_size(checkpoint, "step");
  loss_sum_ = parse_state_double(checkpoint, "loss_sum");
  loss_count_ = parse_state_size(checkpoint, "loss_count");
  init_split();
  plan_epoch();
  if (step_ > batches_.size()) throw std::runtime_error("checkpoint step lies beyond its epoch");
}

void Trainer::init_split() {
  // Per speaker, a seeded shuffle picks round(fraction * n) validation
  // utterances (at least one when the fraction is positive), always leaving
  // at least one for training.
  std::vector<std::vector<std::size_t>> by_speaker(data_.speakers.size());
  for (std::size_t i = 0; i < data_.utterances.size(); ++i)
    by_speaker[data_.utterances[i].label].push_back(i);
  train_.clear();
  validation_.clear();
  Rng rng = make_stream(config_.train.seed, "validation-split");
  for (auto& utts : by_speaker) {
    for (std::size_t i = utts.size(); i > 1; --i) std::swap(utts[i - 1], utts[uniform_index(rng, i)]);
    std::size_t n_val = 0;
    if (config_.train.validation_fraction > 0.0) {
      n_val = static_cast<std::size_t>(
          std::llround(config_.train.validation_fraction * static_cast<double>(utts.size())));
      n_val = std::clamp<std::size_t>(n_val, 1, utts.size() - 1);
    }
    validation_.insert(validation_.end(), utts.begin(), utts.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_.insert(train_.end(), utts.begin() + static_cast<std::ptrdiff_t>(n_val), utts.end());
  }
  std::sort(train_.begin(), train_.end());
  std::sort(validation_.begin(), validation_.end());
  if (train_.size() < 2) throw std::invalid_argument("training split has fewer than 2 utterances");
}

void Trainer::plan_epoch() {
  std::vector<std::size_t> order = train_;
  Rng rng = make_stream(config_.train.seed, "epoch-order", epoch_);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  batches_.clear();
  const std::size_t bs = config_.train.batch_size;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(order.size(), start + bs);
    batches_.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                          order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  // Batch norm needs two samples; a trailing singleton joins the previous batch.
  if (batches_.size() > 1 && batches_.back().size() == 1) {
    batches_[batches_.size() - 2].push_back(batches_.back()[0]);
    batches_.pop_back();
  }
}

double Trainer::step() {
  if (step_ >= batches_.size()) throw std::logic_error("trainer: epoch already complete");
  const auto& batch = batches_[step_];
  std::vector<Tensor> chunks;
  std::vector<std::size_t> labels;
  for (std::size_t idx : batch) {
    Rng rng = make_stream(config_.train.seed, "chunk", (static_cast<std::uint64_t>(epoch_) << 32) | idx);
    chunks.push_back(sample_chunk(data_.utterances[idx].frames, config_.train.chunk_frames, rng));
    labels.push_back(data_.utterances[idx].label);
  }
  auto out = model_.forward(chunks, ad::BatchNormMode::kTrain);
  ad::Var loss = am_softmax_loss(out.cos_logits, labels, config_.model.am_scale, config_.model.am_margin);
  adam_.zero_grad();
  ad::backward(loss);
  adam_.step(scheduler_.lr(), config_.train.weight_decay);
  const double value = loss.value()[0];
  loss_sum_ += value * static_cast<double>(batch.size());
  loss_count_ += batch.size();
  ++step_;
  return value;
}

double Trainer::validation_loss() {
  if (validation_.empty()) throw std::logic_error("trainer: no validation utterances");
  ad::NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t idx : validation_) {
    const Tensor inputs[1] = {data_.utterances[idx].frames};
    auto out = model_.forward(inputs, ad::BatchNormMode::kEval);
    const std::size_t label[1] = {data_.utterances[idx].label};
    total += am_softmax_loss(out.cos_logits, label, config_.model.am_scale, config_.model.am_margin)
                 .value()[0];
  }
  return total / static_cast<double>(validation_.size());
}

EpochRecord Trainer::run_epoch() {
  if (finished()) throw std::logic_error("trainer: all epochs completed");
  while (step_ < batches_.size()) step();
  EpochRecord rec;
  rec.epoch = epoch_ + 1;
  rec.lr = scheduler_.lr();
  rec.train_loss = loss_sum_ / static_cast<double>(loss_count_);
  rec.val_loss = validation_.empty() ? rec.train_loss : validation_loss();
  const auto outcome = scheduler_.observe(rec.val_loss);
  rec.improved = outcome.improved;
  rec.annealed = outcome.annealed;
  ++epoch_;
  step_ = 0;
  loss_sum_ = 0.0;
  loss_count_ = 0;
  plan_epoch();
  return rec;
}

Checkpoint Trainer::checkpoint() {
  Checkpoint ck;
  ck.config = to_key_values(config_);
  auto state = [&](const std::string& key, std::string value) {
    ck.config.emplace_back(std::string(kStatePrefix) + key, std::move(value));
  };
  state("epoch", std::to_string(epoch_));
  state("step", std::to_string(step_));
  state("lr", format_double(scheduler_.lr()));
  state("best_val", format_double(scheduler_.best()));
  state("bad_epochs", std::to_string(scheduler_.bad_epochs()));
  state("adam_steps", std::to_string(adam_.steps()));
  state("loss_sum", format_double(loss_sum_));
  state("loss_count", std::to_string(loss_count_));
  for (const auto& p : model_.named_parameters()) ck.tensors.emplace_back(p.name, p.var.value());
  for (const auto& b : model_.named_buffers()) ck.tensors.emplace_back(b.name, *b.tensor);
  const auto& params = adam_.params();
  const auto& moments = adam_.moments();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.tensors.emplace_back("adam.m." + params[i].name, moments[i].m);
    ck.tensors.emplace_back("adam.v." + params[i].name, moments[i].v);
  }
  return ck;
}

Checkpoint Trainer::train(const std::function<void(const EpochRecord&)>& on_epoch) {
  Checkpoint best;
  bool have_best = false;
  while (!finished()) {
    const EpochRecord rec = run_epoch();
    if (rec.improved || !have_best) {
      best = checkpoint();
      have_best = true;
    }
    if (on_epoch) on_epoch(rec);
  }
  if (!have_best) best = checkpoint();
  return best;
}

}  // namespace dmha
