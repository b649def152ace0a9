#include "dmha/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace dmha {

std::vector<Trial> read_trials(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read trial list " + path.string());
  std::vector<Trial> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string label, enroll, test, extra;
    if (!(ls >> label)) continue;
    if (!(ls >> enroll >> test) || (ls >> extra) || (label != "0" && label != "1")) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected '<1|0> <enroll-id> <test-id>'");
    }
    out.push_back({label == "1", enroll, test});
  }
  return out;
}

void write_trials(const std::filesystem::path& path, std::span<const Trial> trials) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trial list " + path.string());
  for (const auto& t : trials) out << (t.target ? 1 : 0) << ' ' << t.enroll << ' ' << t.test << '\n';
}

void DcfConfig::validate() const {
  if (!(c_fa > 0.0 && c_m > 0.0)) throw std::invalid_argument("dcf: costs must be positive");
  if (!(p_t > 0.0 && p_t < 1.0)) throw std::invalid_argument("dcf: p_t must lie in (0, 1)");
}

double cosine_score(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine_score: dimension mismatch " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_score: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<OperatingPoint> operating_points(std::span<const double> target,
                                             std::span<const double> nontarget) {
  if (target.empty() || nontarget.empty())
    throw std::invalid_argument("metrics need at least one target and one nontarget score");
  struct Scored {
    double score;
    bool target;
  };
  std::vector<Scored> all;
  all.reserve(target.size() + nontarget.size());
  for (double s : target) all.push_back({s, true});
  for (double s : nontarget) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score < b.score; });

  const double nt = static_cast<double>(target.size());
  const double nn = static_cast<double>(nontarget.size());
  // Threshold -inf accepts everything.
  std::size_t misses = 0, false_alarms = nontarget.size();
  std::vector<OperatingPoint> points;
  points.push_back({-std::numeric_limits<double>::infinity(), 0.0, 1.0});
  std::size_t i = 0;
  while (i < all.size()) {
    // Raise the threshold past every score equal to all[i].score.
    const double s = all[i].score;
    while (i < all.size() && all[i].score == s) {
      if (all[i].target) ++misses;
      else --false_alarms;
      ++i;
    }
    const double threshold =
        i < all.size() ? s + (all[i].score - s) / 2.0 : std::numeric_limits<double>::infinity();
    points.push_back({threshold, static_cast<double>(misses) / nt,
                      static_cast<double>(false_alarms) / nn});
  }
  return points;
}

double eer_from_points(std::span<const OperatingPoint> points) {
  for (std::size_t k = 0; k < points.size(); ++k) {
    const double d = points[k].p_miss - points[k].p_fa;
    if (d < 0.0) continue;
    if (d == 0.0 || k == 0) return points[k].p_miss;
    const OperatingPoint& a = points[k - 1];
    const OperatingPoint& b = points[k];
    const double da = a.p_fa - a.p_miss;  // > 0
    const double db = b.p_miss - b.p_fa;  // > 0
    const double t = da / (da + db);
    return a.p_miss + t * (b.p_miss - a.p_miss);
  }
  throw std::logic_error("operating points never cross");
}

double compute_eer(std::span<const double> target, std::span<const double> nontarget) {
  const auto points = operating_points(target, nontarget);
  return eer_from_points(points);
}

double compute_min_dcf(std::span<const double> target, std::span<const double> nontarget,
                       const DcfConfig& config) {
  config.validate();
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : operating_points(target, nontarget)) {
    best = std::min(best, config.c_m * config.p_t * p.p_miss + config.c_fa * (1.0 - config.p_t) * p.p_fa);
  }
  return best;
}

void EmbeddingTable::add(std::string id, std::vector<double> v) {
  if (ids.empty() && dim == 0) dim = v.size();
  if (v.size() != dim) {
    throw std::invalid_argument("embedding " + id + " has " + std::to_string(v.size()) +
                                " values, table dimension is " + std::to_string(dim));
  }
  if (!index_.emplace(id, ids.size()).second)
    throw std::invalid_argument("duplicate embedding id " + id);
  ids.push_back(std::move(id));
  vectors.push_back(std::move(v));
}

const std::vector<double>* EmbeddingTable::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &vectors[it->second];
}

EmbeddingTable read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read embeddings " + path.string());
  std::string header;
  std::getline(in, header);
  std::size_t dim = 0, count = 0;
  if (std::sscanf(header.c_str(), "dim=%zu count=%zu", &dim, &count) != 2)
    throw std::runtime_error(path.string() + ": expected 'dim=<d> count=<n>' header");
  EmbeddingTable table;
  table.dim = dim;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id;
    ls >> id;
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) v.push_back(std::strtod(tok.c_str(), nullptr));
    table.add(std::move(id), std::move(v));
  }
  if (table.ids.size() != count) {
    throw std::runtime_error(path.string() + ": header announces " + std::to_string(count) +
                             " embeddings, file has " + std::to_string(table.ids.size()));
  }
  return table;
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write embeddings " + path.string());
  out << "dim=" << table.dim << " count=" << table.ids.size() << '\n';
  char buf[40];
  for (std::size_t i = 0; i < table.ids.size(); ++i) {
    out << table.ids[i];
    for (double v : table.vectors[i]) {
      std::snprintf(buf, sizeof buf, " %.17g", v);
      out << buf;
    }
    out << '\n';
  }
}

std::vector<double> score_trials(std::span<const Trial> trials, const EmbeddingTable& table) {
  std::set<std::string> missing;
  for (const auto& t : trials) {
    if (!table.find(t.enroll)) missing.insert(t.enroll);
    if (!table.find(t.test)) missing.insert(t.test);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : " ") + id;
    throw std::invalid_argument("missing embeddings for: " + list);
  }
  std::vector<double> scores;
  scores.reserve(trials.size());
  for (const auto& t : trials) scores.push_back(cosine_score(*table.find(t.enroll), *table.find(t.test)));
  return scores;
}

void write_scores(const std::filesystem::path& path, std::span<const Trial> trials,
                  std::span<const double> scores) {
  if (trials.size() != scores.size()) throw std::invalid_argument("write_scores: size mismatch");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write scores " + path.string());
  char buf[64];
  for (std::size_t i = 0; i < trials.size(); ++i) {
    std::snprintf(buf, sizeof buf, " %.9f\n", scores[i]);
    out << trials[i].enroll << ' ' << trials[i].test << buf;
  }
}

std::vector<double> read_scores(const std::filesystem::path& path, std::span<const Trial> trials) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read scores " + path.string());
  std::vector<double> scores;
  std::string enroll, test, value;
  while (in >> enroll >> test >> value) {
    const std::size_t i = scores.size();
    if (i >= trials.size() || trials[i].enroll != enroll || trials[i].test != test) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(i + 1) +
                               " does not match the trial list");
    }
    scores.push_back(std::strtod(value.c_str(), nullptr));
  }
  if (scores.size() != trials.size()) {
    throw std::runtime_error(path.string() + ": " + std::to_string(scores.size()) + " scores for " +
                             std::to_string(trials.size()) + " trials");
  }
  return scores;
}

std::string EvalReport::format() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "EER %.4f%%  minDCF %.6f  (%zu trials: %zu target, %zu nontarget)\n"
                "eer=%.17g\nmin_dcf=%.17g\nnum_trials=%zu\nnum_target=%zu\nnum_nontarget=%zu\n",
                100.0 * eer, min_dcf, num_trials, num_target, num_nontarget, eer, min_dcf, num_trials,
                num_target, num_nontarget);
  return buf;
}

EvalReport evaluate_scores(std::span<const Trial> trials, std::span<const double> scores,
                           const DcfConfig& dcf) {
  if (trials.empty()) throw std::invalid_argument("empty trial list");
  if (trials.size() != scores.size()) throw std::invalid_argument("evaluate_scores: size mismatch");
  std::vector<double> tar, non;
  for (std::size_t i = 0; i < trials.size(); ++i) (trials[i].target ? tar : non).push_back(scores[i]);
  EvalReport r;
  r.eer = compute_eer(tar, non);
  r.min_dcf = compute_min_dcf(tar, non, dcf);
  r.num_trials = trials.size();
  r.num_target = tar.size();
  r.num_nontarget = non.size();
  return r;
}

TrialEvaluation evaluate_trials(std::span<const Trial> trials,
                                const std::function<std::vector<double>(const std::string&)>& embed,
                                const DcfConfig& dcf) {
  if (trials.empty()) throw std::invalid_argument("empty trial list");
  TrialEvaluation out;
  for (const auto& t : trials) {
    for (const std::string* id : {&t.enroll, &t.test})
      if (!out.embeddings.find(*id)) out.embeddings.add(*id, embed(*id));
  }
  out.scores = score_trials(trials, out.embeddings);
  out.report = evaluate_scores(trials, out.scores, dcf);
  return out;
}

std::vector<double> mean_log_mel_embedding(const MelSpectrogram& raw_log_mel) {
  const std::size_t n = raw_log_mel.num_frames(), d = raw_log_mel.num_bins();
  if (n == 0) throw std::invalid_argument("mean_log_mel_embedding: empty spectrogram");
  std::vector<double> out(d, 0.0);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j) out[j] += raw_log_mel.frames.at(t, j);
  for (double& v : out) v /= static_cast<double>(n);
  return out;
}

}  // namespace dmha
