#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "dmha/checkpoint.hpp"
#include "dmha/head.hpp"
#include "dmha/trainer.hpp"
#include "fixtures.hpp"
#include "support.hpp"

using namespace dmha;
using testing::pattern_dataset;
using testing::random_tensor;
using testing::tiny_run_config;

TEST_CASE("sample_chunk") {
  Tensor frames({7, 3});
  for (std::size_t i = 0; i < frames.size(); ++i) frames[i] = static_cast<double>(i);
  Rng rng = make_stream(1, "chunk-test");

  SUBCASE("equal length is the identity") { CHECK(sample_chunk(frames, 7, rng) == frames); }

  SUBCASE("offsets stay inside the utterance") {
    Tensor longer({700, 1});
    for (std::size_t i = 0; i < 700; ++i) longer[i] = static_cast<double>(i);
    bool saw_start = false, saw_end = false;
    for (int k = 0; k < 2000; ++k) {
      const Tensor c = sample_chunk(longer, 350, rng);
      REQUIRE(c.shape() == Shape{350, 1});
      const double off = c[0];
      CHECK(off >= 0.0);
      CHECK(off <= 350.0);
      for (std::size_t t = 0; t < 350; ++t) CHECK(c[t] == off + static_cast<double>(t));
      saw_start |= off == 0.0;
      saw_end |= off == 350.0;
    }
    CHECK(saw_start);
    CHECK(saw_end);
  }

  SUBCASE("short utterances wrap") {
    const Tensor c = sample_chunk(frames, 20, rng);
    REQUIRE(c.shape() == Shape{20, 3});
    const std::size_t start = static_cast<std::size_t>(c.at(0, 0)) / 3;
    for (std::size_t t = 0; t < 20; ++t)
      for (std::size_t f = 0; f < 3; ++f) CHECK(c.at(t, f) == frames.at((start + t) % 7, f));
  }
}

TEST_CASE("adam matches a hand computation") {
  Tensor p = Tensor::vector({1.0, -2.0, 0.5});
  const Tensor g1 = Tensor::vector({0.3, -0.1, 0.0});
  const Tensor g2 = Tensor::vector({-0.2, 0.4, 1e-3});
  AdamMoments st{Tensor({3}, 0.0), Tensor({3}, 0.0)};
  const double lr = 0.01, wd = 0.1;
  const Tensor p0 = p;
  adam_update(p, g1, st, 1, lr, wd);
  adam_update(p, g2, st, 2, lr, wd);
  for (std::size_t i = 0; i < 3; ++i) {
    double x = p0[i], m = 0, v = 0;
    const double gs[2] = {g1[i], g2[i]};
    for (int t = 1; t <= 2; ++t) {
      const double g = gs[t - 1] + wd * x;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      x -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(std::abs(p[i] - x) <= 1e-15);
  }
}

TEST_CASE("adam first step moves by lr per coordinate") {
  Tensor p = Tensor::vector({0.0, 3.0, -1.0});
  AdamMoments st{Tensor({3}, 0.0), Tensor({3}, 0.0)};
  adam_update(p, Tensor::vector({2.0, -5e-3, 0.7}), st, 1, 0.1, 0.0);
  CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-7));
  CHECK(p[1] == doctest::Approx(3.1).epsilon(1e-7));
  CHECK(p[2] == doctest::Approx(-1.1).epsilon(1e-7));
}

TEST_CASE("adam edge cases") {
  Tensor p = random_tensor({4}, 1);
  const Tensor before = p;
  AdamMoments st{Tensor({4}, 0.0), Tensor({4}, 0.0)};
  for (std::size_t t = 1; t <= 5; ++t) adam_update(p, Tensor({4}, 0.0), st, t, 0.1, 0.0);
  CHECK(p == before);

  double norm = 0;
  for (double v : p.values()) norm += v * v;
  for (std::size_t t = 1; t <= 50; ++t) {
    adam_update(p, Tensor({4}, 0.0), st, t, 1e-3, 0.01);
    double n = 0;
    for (double v : p.values()) n += v * v;
    CHECK(n < norm);
    norm = n;
  }

  CHECK_THROWS_AS(adam_update(p, Tensor({3}, 0.0), st, 1, 0.1, 0.0), std::invalid_argument);
}

TEST_CASE("plateau scheduler") {
  PlateauScheduler s(1.0, 3, 0.5);
  CHECK(s.observe(5.0).improved);
  CHECK_FALSE(s.observe(5.0).annealed);
  CHECK_FALSE(s.observe(6.0).annealed);
  CHECK(s.observe(5.5).annealed);
  CHECK(s.lr() == 0.5);
  CHECK(s.observe(4.0).improved);
  CHECK(s.lr() == 0.5);

  // Non-increasing under any sequence of validation losses.
  PlateauScheduler r(0.1, 2, 0.7);
  Rng rng = make_stream(4, "plateau");
  double last = r.lr();
  for (int e = 0; e < 200; ++e) {
    r.observe(uniform(rng, 0.0, 1.0));
    CHECK(r.lr() <= last);
    last = r.lr();
  }
  CHECK_THROWS_AS(PlateauScheduler(1.0, 0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(PlateauScheduler(1.0, 2, 1.0), std::invalid_argument);
}

TEST_CASE("frozen training anneals exactly after the patience window") {
  RunConfig c = tiny_run_config(3);
  c.train.lr = 0.0;
  c.model.bn_momentum = 0.0;
  c.train.anneal_patience = 3;
  c.train.max_epochs = 8;
  const Dataset d = pattern_dataset(3, 4, 16, 3);
  Trainer t(c, d);
  std::vector<EpochRecord> log;
  t.train([&](const EpochRecord& r) { log.push_back(r); });
  REQUIRE(log.size() == 8);
  CHECK(log[0].improved);
  for (std::size_t e = 1; e < log.size(); ++e) {
    CHECK(log[e].val_loss == log[0].val_loss);
    CHECK_FALSE(log[e].improved);
  }
  // Epoch 1 sets the best; epochs 2..4 do not improve; the third of them
  // (epoch patience + 1) anneals, and the count restarts.
  for (std::size_t e = 0; e < log.size(); ++e) CHECK(log[e].annealed == (e + 1 == 4 || e + 1 == 7));
}

TEST_CASE("dataset checks and validation split") {
  const RunConfig c = tiny_run_config();
  const Dataset one = pattern_dataset(1, 4, 16, 1);
  CHECK_THROWS_AS(Trainer(c, one), std::invalid_argument);

  Dataset lonely = pattern_dataset(2, 3, 16, 1);
  lonely.utterances.pop_back();
  lonely.utterances.pop_back();
  CHECK_THROWS_AS(Trainer(c, lonely), std::invalid_argument);

  const Dataset d = pattern_dataset(3, 4, 16, 2);
  Trainer t(c, d);
  std::vector<int> train_per(3, 0), val_per(3, 0);
  for (std::size_t i : t.train_indices()) ++train_per[d.utterances[i].label];
  for (std::size_t i : t.validation_indices()) ++val_per[d.utterances[i].label];
  for (int s = 0; s < 3; ++s) {
    CHECK(train_per[s] == 3);
    CHECK(val_per[s] == 1);
  }
  for (std::size_t i : t.train_indices())
    for (std::size_t j : t.validation_indices()) CHECK(i != j);
}

TEST_CASE("a tiny step lowers the batch loss") {
  RunConfig c = tiny_run_config(5);
  c.model.num_speakers = 3;
  const Dataset d = pattern_dataset(3, 4, 16, 5);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    SpeakerModel model(c.model, seed);
    Adam adam(model.named_parameters());
    std::vector<Tensor> batch;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < d.utterances.size(); i += 2) {
      batch.push_back(d.utterances[i].frames);
      labels.push_back(d.utterances[i].label);
    }
    auto loss_now = [&] {
      auto out = model.forward(batch, ad::BatchNormMode::kTrain);
      return am_softmax_loss(out.cos_logits, labels, c.model.am_scale, c.model.am_margin);
    };
    ad::Var l0 = loss_now();
    ad::backward(l0);
    adam.step(1e-6, 0.0);
    CHECK(loss_now().value()[0] < l0.value()[0]);
  }
}

TEST_CASE("two speakers fall below chance loss") {
  RunConfig c = tiny_run_config(7);
  c.train.max_epochs = 50;
  c.train.batch_size = 4;
  c.train.lr = 3e-3;
  const Dataset d = pattern_dataset(2, 6, 16, 7);
  Trainer t(c, d);
  double best = 1e300;
  t.train([&](const EpochRecord& r) { best = std::min(best, r.train_loss); });
  CHECK(best < std::log(2.0));
}

TEST_CASE("training is deterministic and resumable") {
  const RunConfig c = tiny_run_config(9);
  const Dataset d = pattern_dataset(3, 4, 16, 9);

  Trainer a(c, d), b(c, d);
  a.run_epoch();
  b.run_epoch();
  CHECK(a.checkpoint().serialize() == b.checkpoint().serialize());

  // Stop mid-epoch, restore, and continue for three steps.
  Trainer unbroken(c, d);
  unbroken.step();
  const Checkpoint mid = unbroken.checkpoint();
  Trainer resumed(Checkpoint::parse(mid.serialize()), d);
  CHECK(resumed.step_in_epoch() == 1);
  for (int k = 0; k < 3; ++k) {
    if (unbroken.step_in_epoch() == unbroken.steps_per_epoch()) {
      unbroken.run_epoch();
      resumed.run_epoch();
    }
    CHECK(unbroken.step() == resumed.step());
  }
  CHECK(unbroken.checkpoint().serialize() == resumed.checkpoint().serialize());

  // Across an epoch boundary, including the schedule and validation.
  const EpochRecord ra = unbroken.run_epoch();
  const EpochRecord rb = resumed.run_epoch();
  CHECK(ra.train_loss == rb.train_loss);
  CHECK(ra.val_loss == rb.val_loss);
  CHECK(unbroken.checkpoint().serialize() == resumed.checkpoint().serialize());
}

TEST_CASE("checkpoint files") {
  testing::TempDir dir("ckpt");
  const RunConfig c = tiny_run_config(11);
  const Dataset d = pattern_dataset(2, 4, 16, 11);
  Trainer t(c, d);
  t.step();
  const Checkpoint ck = t.checkpoint();
  ck.save(dir / "a.ckpt");
  const Checkpoint back = Checkpoint::load(dir / "a.ckpt");
  back.save(dir / "b.ckpt");
  CHECK(back.serialize() == ck.serialize());
  for (const auto& [name, tensor] : ck.tensors) CHECK(back.tensor(name) == tensor);
  CHECK(back.config == ck.config);

  // The model rebuilt from the checkpoint embeds like the trained one.
  SpeakerModel m = load_model(back);
  const MelSpectrogram probe{d.utterances[0].frames};
  CHECK(m.embed(probe) == t.model().embed(probe));

  const std::string bytes = ck.serialize();
  CHECK_THROWS(Checkpoint::parse(bytes.substr(0, bytes.size() - 3)));
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS(Checkpoint::parse(bad));
  CHECK_THROWS(Checkpoint::load(dir / "missing.ckpt"));
  CHECK_FALSE(back.has_tensor("nope"));
  CHECK_THROWS(back.tensor("nope"));
}
