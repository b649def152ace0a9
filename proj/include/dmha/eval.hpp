#pragma once

// Verification back-end: cosine scoring of trial pairs, equal error rate and
// minimum detection cost.
//
// Operating points follow one convention everywhere: a trial is accepted when
// score >= threshold, and thresholds are -inf, +inf and the midpoints between
// adjacent distinct observed scores.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dmha/features.hpp"

namespace dmha {

struct Trial {
  bool target = false;
  std::string enroll;
  std::string test;
};

// "<label 1|0> <enroll-id> <test-id>" per line.
std::vector<Trial> read_trials(const std::filesystem::path& path);
void write_trials(const std::filesystem::path& path, std::span<const Trial> trials);

struct DcfConfig {
  double c_fa = 1.0;
  double c_m = 1.0;
  double p_t = 0.01;

  void validate() const;
};

// dot(a, b) / (|a| |b|); rejects zero vectors and length mismatches.
double cosine_score(std::span<const double> a, std::span<const double> b);

struct OperatingPoint {
  double threshold;
  double p_miss;
  double p_fa;
};

// Operating points in order of increasing threshold (p_miss non-decreasing,
// p_fa non-increasing). Both score sets must be non-empty.
std::vector<OperatingPoint> operating_points(std::span<const double> target,
                                             std::span<const double> nontarget);

// Equal error rate from a sequence of operating points ordered as above: the
// first point with p_miss >= p_fa is located; if the two rates are equal there
// that value is returned, otherwise the crossing of the straight segment from
// the previous point.
double eer_from_points(std::span<const OperatingPoint> points);

double compute_eer(std::span<const double> target, std::span<const double> nontarget);

// min over thresholds of c_m * p_t * P_miss + c_fa * (1 - p_t) * P_fa, not
// normalized by the cost of the best trivial system.
double compute_min_dcf(std::span<const double> target, std::span<const double> nontarget,
                       const DcfConfig& config = {});

// Embedding file: "dim=<d> count=<n>" header, then "<id> <d values>" lines.
struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<std::vector<double>> vectors;

  void add(std::string id, std::vector<double> v);
  // nullptr when absent.
  const std::vector<double>* find(const std::string& id) const;

 private:
  std::map<std::string, std::size_t> index_;
};

EmbeddingTable read_embeddings(const std::filesystem::path& path);
// Values use 17 significant digits.
void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);

// Scores in trial order. Every referenced id must be present; otherwise the
// error lists all missing ids.
std::vector<double> score_trials(std::span<const Trial> trials, const EmbeddingTable& table);

// "<enroll-id> <test-id> <score>" with 9 decimals, in trial order.
void write_scores(const std::filesystem::path& path, std::span<const Trial> trials,
                  std::span<const double> scores);
// Reads the score column of a score file; ids must match the trials in order.
std::vector<double> read_scores(const std::filesystem::path& path, std::span<const Trial> trials);

struct EvalReport {
  double eer = 0.0;
  double min_dcf = 0.0;
  std::size_t num_trials = 0;
  std::size_t num_target = 0;
  std::size_t num_nontarget = 0;

  // One summary line followed by key=value lines.
  std::string format() const;
};

EvalReport evaluate_scores(std::span<const Trial> trials, std::span<const double> scores,
                           const DcfConfig& dcf = {});

// Builds embeddings once per distinct utterance through `embed`, then scores
// and evaluates. Rejects an empty trial list.
struct TrialEvaluation {
  EvalReport report;
  std::vector<double> scores;
  EmbeddingTable embeddings;
};
TrialEvaluation evaluate_trials(std::span<const Trial> trials,
                                const std::function<std::vector<double>(const std::string&)>& embed,
                                const DcfConfig& dcf = {});

// Reference embedding without any model: the time average of the log mel
// spectrogram before mean normalization.
std::vector<double> mean_log_mel_embedding(const MelSpectrogram& raw_log_mel);

}  // namespace dmha
