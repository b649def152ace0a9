#include "dmha/head.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "dmha/rng.hpp"

namespace dmha {

void HeadConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("head config: " + what); };
  if (in_dim == 0 || hidden == 0) fail("dimensions must be positive");
  if (num_speakers < 2) fail("need at least 2 speakers");
  if (!(s > 0.0)) fail("scale s must be positive");
  if (!(m >= 0.0 && m < 1.0)) fail("margin m must lie in [0, 1)");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) fail("bn_momentum must lie in [0, 1]");
  if (!(bn_eps > 0.0)) fail("bn_eps must be positive");
}

std::vector<NamedParam> HeadParams::named_parameters() const {
  return {
      {"head.fc1.weight", fc1.weight}, {"head.fc1.bias", fc1.bias},
      {"head.bn1.gamma", bn1.gamma},   {"head.bn1.beta", bn1.beta},
      {"head.fc2.weight", fc2.weight}, {"head.fc2.bias", fc2.bias},
      {"head.bn2.gamma", bn2.gamma},   {"head.bn2.beta", bn2.beta},
      {"head.fc3.weight", fc3.weight}, {"head.fc3.bias", fc3.bias},
      {"head.cosine.weight", class_weights},
  };
}

std::vector<NamedBuffer> HeadParams::named_buffers() {
  return {
      {"head.bn1.running_mean", &bn1.stats.running_mean},
      {"head.bn1.running_var", &bn1.stats.running_var},
      {"head.bn2.running_mean", &bn2.stats.running_mean},
      {"head.bn2.running_var", &bn2.stats.running_var},
  };
}

namespace {

Linear init_linear(const std::string& name, std::size_t in, std::size_t out, double gain,
                   std::uint64_t seed) {
  Rng rng = make_stream(seed, "init/" + name + ".weight");
  const double stddev = std::sqrt(gain / static_cast<double>(in));
  return {ad::parameter(normal_tensor({in, out}, stddev, rng)), ad::parameter(Tensor({out}, 0.0))};
}

BatchNormLayer init_batchnorm(std::size_t features) {
  return {ad::parameter(Tensor({features}, 1.0)), ad::parameter(Tensor({features}, 0.0)),
          {Tensor({features}, 0.0), Tensor({features}, 1.0)}};
}

}  // namespace

HeadParams init_head(const HeadConfig& config, std::uint64_t seed) {
  config.validate();
  HeadParams p;
  p.config = config;
  p.fc1 = init_linear("head.fc1", config.in_dim, config.hidden, 2.0, seed);
  p.fc2 = init_linear("head.fc2", config.hidden, config.hidden, 2.0, seed);
  p.fc3 = init_linear("head.fc3", config.hidden, config.hidden, 1.0, seed);
  p.bn1 = init_batchnorm(config.hidden);
  p.bn2 = init_batchnorm(config.hidden);
  // Columns are normalized in the forward pass, so the init scale only sets
  // how far one Adam step turns a class direction.
  Rng rng = make_stream(seed, "init/head.cosine.weight");
  p.class_weights = ad::parameter(normal_tensor({config.hidden, config.num_speakers}, 0.01, rng));
  return p;
}

HeadOutput head_forward(const ad::Var& c, HeadParams& params, ad::BatchNormMode mode) {
  const HeadConfig& cfg = params.config;
  if (c.shape().size() != 2 || c.shape()[1] != cfg.in_dim) {
    throw std::invalid_argument("head: expected [B, " + std::to_string(cfg.in_dim) +
                                "] input, got " + shape_str(c.shape()));
  }
  auto linear = [](const ad::Var& x, const Linear& l) {
    return ad::add_row_bias(ad::matmul(x, l.weight), l.bias);
  };
  auto bn = [&](const ad::Var& x, BatchNormLayer& l) {
    return ad::batchnorm(x, l.gamma, l.beta, l.stats, mode, cfg.bn_momentum, cfg.bn_eps);
  };
  ad::Var x = ad::relu(bn(linear(c, params.fc1), params.bn1));
  ad::Var embedding = ad::relu(bn(linear(x, params.fc2), params.bn2));
  ad::Var projected = linear(embedding, params.fc3);
  ad::Var cos = ad::matmul(ad::l2_normalize_rows(projected), ad::l2_normalize_cols(params.class_weights));
  return {std::move(embedding), std::move(cos)};
}

ad::Var am_softmax_loss(const ad::Var& cos_logits, std::span<const std::size_t> labels, double s,
                        double m) {
  const Shape& shape = cos_logits.shape();
  if (shape.size() != 2 || shape[0] == 0 || shape[1] == 0) {
    throw std::invalid_argument("am_softmax_loss: expected non-empty [B, C] logits, got " +
                                shape_str(shape));
  }
  const std::size_t B = shape[0], C = shape[1];
  if (labels.size() != B) {
    throw std::invalid_argument("am_softmax_loss: " + std::to_string(labels.size()) +
                                " labels for a batch of " + std::to_string(B));
  }
  for (std::size_t y : labels) {
    if (y >= C) {
      throw std::invalid_argument("am_softmax_loss: label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(C) + ")");
    }
  }
  const Tensor& cos = cos_logits.value();
  // probs[b, j] = softmax_j(s * cos_bj - s * m * [j == y_b])
  Tensor probs({B, C});
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < C; ++j) {
      const double z = s * (cos.at(b, j) - (j == labels[b] ? m : 0.0));
      probs.at(b, j) = z;
      mx = std::max(mx, z);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < C; ++j) denom += std::exp(probs.at(b, j) - mx);
    const double lse = mx + std::log(denom);
    total += lse - probs.at(b, labels[b]);
    for (std::size_t j = 0; j < C; ++j) probs.at(b, j) = std::exp(probs.at(b, j) - lse);
  }
  std::vector<std::size_t> y(labels.begin(), labels.end());
  return ad::custom_op(Tensor::scalar(total / static_cast<double>(B)), {cos_logits.node()},
                       "am_softmax_loss",
                       [B, C, s, y = std::move(y), probs = std::move(probs)](ad::Node& self) {
                         Tensor& g = self.parents[0]->grad_buffer();
                         const double k = self.grad[0] * s / static_cast<double>(B);
                         for (std::size_t b = 0; b < B; ++b)
                           for (std::size_t j = 0; j < C; ++j)
                             g.at(b, j) += k * (probs.at(b, j) - (j == y[b] ? 1.0 : 0.0));
                       });
}

}  // namespace dmha
