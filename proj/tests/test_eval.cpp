#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "doctest.h"
#include "dmha/eval.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dmha;

namespace {

struct ScoreSet {
  std::vector<double> tar, non;
};

// Random sizes and score distributions; some sets are quantized so that
// ties between and within classes are common.
ScoreSet random_scores(std::uint64_t seed) {
  Rng rng = make_stream(seed, "score-set");
  ScoreSet s;
  const std::size_t nt = 1 + uniform_index(rng, 100), nn = 1 + uniform_index(rng, 100);
  const double shift = uniform(rng, -1.0, 3.0);
  const bool quantize = seed % 3 == 0;
  auto draw = [&](double mu) {
    const double v = mu + normal(rng);
    return quantize ? std::round(v * 4.0) / 4.0 : v;
  };
  for (std::size_t i = 0; i < nt; ++i) s.tar.push_back(draw(shift));
  for (std::size_t i = 0; i < nn; ++i) s.non.push_back(draw(0.0));
  return s;
}

}  // namespace

TEST_CASE("cosine score") {
  const std::vector<double> a{1, 2, 3}, b{2, 4, 6}, c{-1, -2, -3}, d{3, 0, -1};
  CHECK(cosine_score(a, b) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine_score(a, c) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(std::abs(cosine_score(a, d)) <= 1e-16);
  CHECK(cosine_score(std::vector<double>{1, 0}, std::vector<double>{1, 1}) ==
        doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(cosine_score(a, std::vector<double>{1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(cosine_score(a, std::vector<double>{0, 0, 0}), std::invalid_argument);
}

TEST_CASE("eer fixtures") {
  CHECK(compute_eer(std::vector<double>{0.9, 0.8}, std::vector<double>{0.1, 0.2, 0.3}) == 0.0);
  CHECK(compute_eer(std::vector<double>{0.1, 0.2}, std::vector<double>{0.8, 0.9}) == 1.0);
  const double e = compute_eer(std::vector<double>{0.8, 0.6, 0.4}, std::vector<double>{0.7, 0.5, 0.3});
  CHECK(e == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  // All scores tied: no threshold separates anything.
  CHECK(compute_eer(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5}) == doctest::Approx(0.5));
  CHECK_THROWS_AS(compute_eer(std::vector<double>{}, std::vector<double>{0.1}), std::invalid_argument);
}

TEST_CASE("operating points") {
  const auto pts = operating_points(std::vector<double>{0.8, 0.6, 0.4}, std::vector<double>{0.7, 0.5, 0.3});
  REQUIRE(pts.size() == 7);
  CHECK(std::isinf(pts.front().threshold));
  CHECK(pts.front().threshold < 0);
  CHECK(std::isinf(pts.back().threshold));
  CHECK(pts.back().threshold > 0);
  CHECK(pts[1].threshold == doctest::Approx(0.35));
  for (std::size_t k = 1; k < pts.size(); ++k) {
    CHECK(pts[k].threshold > pts[k - 1].threshold);
    CHECK(pts[k].p_miss >= pts[k - 1].p_miss);
    CHECK(pts[k].p_fa <= pts[k - 1].p_fa);
  }
  CHECK(pts.back().p_miss == 1.0);
  CHECK(pts.back().p_fa == 0.0);
}

TEST_CASE("metrics match the threshold sweep oracle") {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const ScoreSet s = random_scores(seed);
    const double eer = compute_eer(s.tar, s.non);
    CHECK(eer == oracle::eer(s.tar, s.non));
    CHECK(eer >= 0.0);
    CHECK(eer <= 1.0);
    const double dcf = compute_min_dcf(s.tar, s.non);
    CHECK(dcf == oracle::min_dcf(s.tar, s.non, 1.0, 1.0, 0.01));
    // Rejecting everything costs (1 - p_t) * c_fa * 0 + p_t * c_m.
    CHECK(dcf <= 0.01);
    const DcfConfig other{2.0, 10.0, 0.05};
    CHECK(compute_min_dcf(s.tar, s.non, other) == oracle::min_dcf(s.tar, s.non, 10.0, 2.0, 0.05));
  }
}

TEST_CASE("metrics are invariant to strictly increasing score maps") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const ScoreSet s = random_scores(seed);
    ScoreSet t;
    for (double v : s.tar) t.tar.push_back(std::exp(v / 2.0) + 3.0);
    for (double v : s.non) t.non.push_back(std::exp(v / 2.0) + 3.0);
    CHECK(compute_eer(s.tar, s.non) == compute_eer(t.tar, t.non));
    CHECK(compute_min_dcf(s.tar, s.non) == compute_min_dcf(t.tar, t.non));
  }
}

TEST_CASE("eer is symmetric under swapping classes and negating scores") {
  for (std::uint64_t seed = 1; seed < 300; seed += 3) {
    const ScoreSet s = random_scores(seed);  // never quantized, so no ties
    std::vector<double> tar, non;
    for (double v : s.non) tar.push_back(-v);
    for (double v : s.tar) non.push_back(-v);
    CHECK(std::abs(compute_eer(s.tar, s.non) - compute_eer(tar, non)) <= 1e-12);
  }
}

TEST_CASE("min dcf with a rare nontarget class") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const ScoreSet s = random_scores(seed);
    const DcfConfig c{1.0, 1.0, 0.999};
    const double dcf = compute_min_dcf(s.tar, s.non, c);
    CHECK(dcf == oracle::min_dcf(s.tar, s.non, 1.0, 1.0, 0.999));
    // Accepting everything costs only the false alarms.
    CHECK(dcf <= 0.001 + 1e-15);
  }
  CHECK_THROWS_AS(compute_min_dcf(std::vector<double>{1}, std::vector<double>{0}, DcfConfig{1, 1, 1.0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(compute_min_dcf(std::vector<double>{1}, std::vector<double>{0}, DcfConfig{0, 1, 0.5}),
                  std::invalid_argument);
}

TEST_CASE("trial and score files") {
  testing::TempDir dir("eval");
  const std::vector<Trial> trials{{true, "a", "b"}, {false, "a", "c"}, {true, "c", "c2"}};
  write_trials(dir / "trials.txt", trials);
  const auto back = read_trials(dir / "trials.txt");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].target == trials[i].target);
    CHECK(back[i].enroll == trials[i].enroll);
    CHECK(back[i].test == trials[i].test);
  }

  const std::vector<double> scores{0.123456789, -0.5, 1.0};
  write_scores(dir / "scores.txt", trials, scores);
  const auto read = read_scores(dir / "scores.txt", trials);
  for (std::size_t i = 0; i < 3; ++i) CHECK(read[i] == scores[i]);
  CHECK_THROWS(read_scores(dir / "scores.txt", std::span(trials).first(2)));
  std::vector<Trial> swapped = trials;
  std::swap(swapped[0], swapped[1]);
  CHECK_THROWS(read_scores(dir / "scores.txt", swapped));

  std::ofstream(dir / "bad.txt") << "1 a b\n2 a c\n";
  CHECK_THROWS(read_trials(dir / "bad.txt"));
  std::ofstream(dir / "short.txt") << "1 a\n";
  CHECK_THROWS(read_trials(dir / "short.txt"));
}

TEST_CASE("embedding files round-trip exactly") {
  testing::TempDir dir("emb");
  EmbeddingTable t;
  const dmha::Tensor r = testing::random_tensor({4, 5}, 3);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> v(r.values().begin() + 5 * i, r.values().begin() + 5 * (i + 1));
    t.add("utt" + std::to_string(i), v);
  }
  t.vectors[0][0] = 1.0 / 3.0;
  write_embeddings(dir / "e.txt", t);
  const EmbeddingTable back = read_embeddings(dir / "e.txt");
  CHECK(back.dim == 5);
  CHECK(back.ids == t.ids);
  CHECK(back.vectors == t.vectors);
  CHECK_THROWS_AS(t.add("utt0", std::vector<double>(5)), std::invalid_argument);
  CHECK_THROWS_AS(t.add("x", std::vector<double>(4)), std::invalid_argument);
  CHECK(t.find("nope") == nullptr);

  std::ofstream(dir / "count.txt") << "dim=2 count=3\na 1 2\n";
  CHECK_THROWS(read_embeddings(dir / "count.txt"));
}

TEST_CASE("trial evaluation") {
  EmbeddingTable table;
  table.add("e1", {1, 0});
  table.add("e2", {0, 1});
  try {
    score_trials(std::vector<Trial>{{true, "e1", "zz"}, {false, "yy", "e2"}}, table);
    FAIL("expected missing ids");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("zz") != std::string::npos);
    CHECK(msg.find("yy") != std::string::npos);
  }

  // Embeddings are computed once per distinct id, duplicates score twice.
  std::map<std::string, int> calls;
  const std::map<std::string, std::vector<double>> vecs{
      {"a", {1, 0}}, {"b", {0.9, 0.1}}, {"c", {0, 1}}, {"d", {0.2, 1}}};
  const std::vector<Trial> trials{{true, "a", "b"}, {false, "a", "c"}, {true, "a", "b"}, {false, "b", "d"}};
  const TrialEvaluation ev = evaluate_trials(trials, [&](const std::string& id) {
    ++calls[id];
    return vecs.at(id);
  });
  for (const auto& [id, n] : calls) CHECK(n == 1);
  CHECK(calls.size() == 4);
  REQUIRE(ev.scores.size() == 4);
  CHECK(ev.scores[0] == ev.scores[2]);
  CHECK(ev.report.num_target == 2);
  CHECK(ev.report.num_nontarget == 2);
  CHECK(ev.report.eer == 0.0);
  CHECK(ev.report.format().find("eer=0\n") != std::string::npos);

  CHECK_THROWS_AS(evaluate_trials(std::vector<Trial>{}, [](const std::string&) { return std::vector<double>{1}; }),
                  std::invalid_argument);
  CHECK_THROWS_AS(evaluate_scores(std::vector<Trial>{}, std::vector<double>{}), std::invalid_argument);
  // A trial list with one class only cannot yield an error rate.
  CHECK_THROWS(evaluate_scores(std::vector<Trial>{{true, "a", "b"}}, std::vector<double>{0.3}));
}

TEST_CASE("mean log mel reference embedding") {
  MelSpectrogram m{dmha::Tensor({2, 3})};
  m.frames.at(0, 0) = 1;
  m.frames.at(1, 0) = 3;
  m.frames.at(0, 2) = -2;
  const auto v = mean_log_mel_embedding(m);
  CHECK(v == std::vector<double>{2, 0, -1});
}
