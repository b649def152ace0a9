#include "dmha/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dmha {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw std::invalid_argument("config: bad value '" + value + "' for key '" + key + "'");
}

}  // namespace

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value);
  return out;
}

std::size_t to_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(to_u64(key, value));
}

double to_double(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (value.empty() || end != value.c_str() + value.size()) bad_value(key, value);
  return v;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (chunk_frames < 16) fail("chunk_frames must be at least 16");
  if (batch_size < 2) fail("batch_size must be at least 2 (batch norm)");
  if (!(lr >= 0.0)) fail("lr must be non-negative");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (max_epochs < 1) fail("epochs must be at least 1");
  if (anneal_patience < 1) fail("anneal_patience must be at least 1");
  if (!(anneal_factor > 0.0 && anneal_factor < 1.0)) fail("anneal_factor must lie in (0, 1)");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    fail("validation_fraction must lie in [0, 1)");
}

void RunConfig::validate() const {
  features.validate();
  if (features.n_mels != model.encoder.n_mels)
    throw std::invalid_argument("config: feature and encoder n_mels disagree");
  model.validate();
  train.validate();
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

void apply(RunConfig& c, const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    if (key == "sample_rate") c.features.sample_rate = static_cast<int>(to_size(key, value));
    else if (key == "win_length") c.features.win_length = to_size(key, value);
    else if (key == "hop") c.features.hop = to_size(key, value);
    else if (key == "n_fft") c.features.n_fft = to_size(key, value);
    else if (key == "n_mels") c.features.n_mels = c.model.encoder.n_mels = to_size(key, value);
    else if (key == "fmin") c.features.fmin = to_double(key, value);
    else if (key == "fmax") c.features.fmax = to_double(key, value);
    else if (key == "channels") {
      std::array<std::size_t, kEncoderBlocks> ch{};
      std::istringstream in(value);
      std::string item;
      std::size_t n = 0;
      while (std::getline(in, item, ',')) {
        if (n == kEncoderBlocks) bad_value(key, value);
        ch[n++] = to_size(key, trim(item));
      }
      if (n != kEncoderBlocks) bad_value(key, value);
      c.model.encoder.channels = ch;
    } else if (key == "pooling") c.model.pooling = parse_pooling_kind(value);
    else if (key == "heads") c.model.heads = to_size(key, value);
    else if (key == "hidden") c.model.hidden = to_size(key, value);
    else if (key == "num_speakers") c.model.num_speakers = to_size(key, value);
    else if (key == "am_scale") c.model.am_scale = to_double(key, value);
    else if (key == "am_margin") c.model.am_margin = to_double(key, value);
    else if (key == "bn_momentum") c.model.bn_momentum = to_double(key, value);
    else if (key == "bn_eps") c.model.bn_eps = to_double(key, value);
    else if (key == "chunk_frames") c.train.chunk_frames = to_size(key, value);
    else if (key == "batch_size") c.train.batch_size = to_size(key, value);
    else if (key == "lr") c.train.lr = to_double(key, value);
    else if (key == "weight_decay") c.train.weight_decay = to_double(key, value);
    else if (key == "epochs") c.train.max_epochs = to_size(key, value);
    else if (key == "anneal_patience") c.train.anneal_patience = to_size(key, value);
    else if (key == "anneal_factor") c.train.anneal_factor = to_double(key, value);
    else if (key == "validation_fraction") c.train.validation_fraction = to_double(key, value);
    else if (key == "seed") c.train.seed = to_u64(key, value);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

KeyValues to_key_values(const RunConfig& c) {
  const auto& ch = c.model.encoder.channels;
  return {
      {"sample_rate", std::to_string(c.features.sample_rate)},
      {"win_length", std::to_string(c.features.win_length)},
      {"hop", std::to_string(c.features.hop)},
      {"n_fft", std::to_string(c.features.n_fft)},
      {"n_mels", std::to_string(c.features.n_mels)},
      {"fmin", format_double(c.features.fmin)},
      {"fmax", format_double(c.features.fmax)},
      {"channels", std::to_string(ch[0]) + "," + std::to_string(ch[1]) + "," +
                       std::to_string(ch[2]) + "," + std::to_string(ch[3])},
      {"pooling", std::string(to_string(c.model.pooling))},
      {"heads", std::to_string(c.model.heads)},
      {"hidden", std::to_string(c.model.hidden)},
      {"num_speakers", std::to_string(c.model.num_speakers)},
      {"am_scale", format_double(c.model.am_scale)},
      {"am_margin", format_double(c.model.am_margin)},
      {"bn_momentum", format_double(c.model.bn_momentum)},
      {"bn_eps", format_double(c.model.bn_eps)},
      {"chunk_frames", std::to_string(c.train.chunk_frames)},
      {"batch_size", std::to_string(c.train.batch_size)},
      {"lr", format_double(c.train.lr)},
      {"weight_decay", format_double(c.train.weight_decay)},
      {"epochs", std::to_string(c.train.max_epochs)},
      {"anneal_patience", std::to_string(c.train.anneal_patience)},
      {"anneal_factor", format_double(c.train.anneal_factor)},
      {"validation_fraction", format_double(c.train.validation_fraction)},
      {"seed", std::to_string(c.train.seed)},
  };
}

}  // namespace dmha
