#include "dmha/gradcheck.hpp"

#include <functional>

#include "dmha/autodiff.hpp"
#include "dmha/encoder.hpp"
#include "dmha/head.hpp"
#include "dmha/model.hpp"
#include "dmha/pooling.hpp"
#include "dmha/rng.hpp"

namespace dmha {
namespace {

using namespace ad;

constexpr double kStep = 1e-5;

// sum(out * R) for a fixed random R.
Var project(const Var& out, Rng& rng) {
  return sum(mul(out, constant(normal_tensor(out.shape(), 1.0, rng))));
}

struct Check {
  const char* name;
  std::function<GradCheckStats(Rng&)> run;
};

// Zero-initialized biases put ReLU inputs exactly on the kink wherever a
// receptive field sees only zeros; checks run at generic points instead.
void randomize_biases(const std::vector<NamedParam>& params, Rng& rng) {
  for (const auto& p : params) {
    const std::string& n = p.name;
    if (n.size() >= 5 && (n.ends_with(".bias") || n.ends_with(".beta"))) {
      Var v = p.var;
      for (double& x : v.mutable_value().values()) x = 0.1 * normal(rng);
    }
  }
}

GradCheckStats check_leaves(const std::function<Var()>& loss, std::vector<Var> leaves,
                            std::size_t max_coords = 0) {
  return grad_check_smooth(loss, leaves, kStep, max_coords);
}

GradCheckStats worse(const GradCheckStats& a, const GradCheckStats& b) {
  return {std::max(a.max_rel_err, b.max_rel_err), a.checked + b.checked, a.skipped + b.skipped};
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed, double tolerance) {
  const std::vector<Check> checks = {
      {"matmul",
       [](Rng& rng) {
         Var a = parameter(normal_tensor({3, 4}, 1.0, rng));
         Var b = parameter(normal_tensor({4, 5}, 1.0, rng));
         Rng pr = rng;
         return check_leaves([&] { Rng r = pr; return project(matmul(a, b), r); }, {a, b});
       }},
      {"conv2d",
       [](Rng& rng) {
         Var x = parameter(normal_tensor({2, 6, 5}, 1.0, rng));
         Var w = parameter(normal_tensor({3, 2, 3, 3}, 0.5, rng));
         Var bias = parameter(normal_tensor({3}, 0.5, rng));
         Rng pr = rng;
         return check_leaves([&] { Rng r = pr; return project(conv2d_same(x, w, bias), r); },
                             {x, w, bias});
       }},
      {"maxpool2x2",
       [](Rng& rng) {
         // Continuous random input has no ties.
         Var x = parameter(normal_tensor({2, 7, 6}, 1.0, rng));
         Rng pr = rng;
         return check_leaves([&] { Rng r = pr; return project(maxpool2x2(x), r); }, {x});
       }},
      {"relu",
       [](Rng& rng) {
         Var x = parameter(normal_tensor({4, 6}, 1.0, rng));
         Rng pr = rng;
         return check_leaves([&] { Rng r = pr; return project(relu(x), r); }, {x});
       }},
      {"batchnorm",
       [](Rng& rng) {
         Var x = parameter(normal_tensor({4, 5}, 1.0, rng));
         Var gamma = parameter(normal_tensor({5}, 1.0, rng));
         Var beta = parameter(normal_tensor({5}, 1.0, rng));
         BatchNormStats stats{Tensor({5}, 0.0), Tensor({5}, 1.0)};
         Rng pr = rng;
         const GradCheckStats train = check_leaves(
             [&] { Rng r = pr; return project(batchnorm(x, gamma, beta, stats, BatchNormMode::kTrain), r); },
             {x, gamma, beta});
         const GradCheckStats eval = check_leaves(
             [&] { Rng r = pr; return project(batchnorm(x, gamma, beta, stats, BatchNormMode::kEval), r); },
             {x, gamma, beta});
         return worse(train, eval);
       }},
      {"softmax",
       [](Rng& rng) {
         Var z = parameter(normal_tensor({4, 5}, 2.0, rng));
         Rng pr = rng;
         return worse(
             check_leaves([&] { Rng r = pr; return project(softmax(z, 0), r); }, {z}),
             check_leaves([&] { Rng r = pr; return project(softmax(z, 1), r); }, {z}));
       }},
      {"l2_normalize",
       [](Rng& rng) {
         Var x = parameter(normal_tensor({3, 4}, 1.0, rng));
         Rng pr = rng;
         return worse(
             check_leaves([&] { Rng r = pr; return project(l2_normalize_rows(x), r); }, {x}),
             check_leaves([&] { Rng r = pr; return project(l2_normalize_cols(x), r); }, {x}));
       }},
      {"self_attention",
       [](Rng& rng) {
         Var h = parameter(normal_tensor({7, 8}, 1.0, rng));
         Var u = parameter(normal_tensor({8}, 1.0, rng));
         Rng pr = rng;
         return check_leaves(
             [&] { Rng r = pr; return project(self_attention_pool(h, u).context, r); }, {h, u});
       }},
      {"mha",
       [](Rng& rng) {
         Var h = parameter(normal_tensor({7, 8}, 1.0, rng));
         Var u = parameter(normal_tensor({8}, 1.0, rng));
         Rng pr = rng;
         return check_leaves([&] { Rng r = pr; return project(mha_pool(h, u, 4).context, r); },
                             {h, u});
       }},
      {"double_mha",
       [](Rng& rng) {
         Var h = parameter(normal_tensor({7, 8}, 1.0, rng));
         Var u = parameter(normal_tensor({8}, 1.0, rng));
         Var up = parameter(normal_tensor({2}, 1.0, rng));
         Rng pr = rng;
         return check_leaves(
             [&] { Rng r = pr; return project(double_mha_pool(h, u, up, 4).context, r); },
             {h, u, up});
       }},
      {"am_softmax",
       [](Rng& rng) {
         // Cosines near zero, as at initialization; with s = 30 and cosines
         // spread over (-1, 1) most gradient entries underflow below the
         // finite-difference noise floor.
         Tensor c({4, 5});
         for (double& v : c.values()) v = uniform(rng, -0.1, 0.1);
         Var cos = parameter(c);
         const std::vector<std::size_t> labels{0, 3, 1, 4};
         return check_leaves([&] { return am_softmax_loss(cos, labels, 30.0, 0.4); }, {cos});
       }},
      {"encoder",
       [](Rng& rng) {
         EncoderConfig ec;
         ec.channels = {4, 8, 16, 32};
         ec.n_mels = 16;
         const EncoderParams enc = init_encoder(ec, rng());
         randomize_biases(enc.named_parameters(), rng);
         const Var frames = constant(normal_tensor({32, 16}, 1.0, rng));
         std::vector<Var> leaves;
         for (const auto& p : enc.named_parameters()) leaves.push_back(p.var);
         Rng pr = rng;
         return check_leaves([&] { Rng r = pr; return project(encode(frames, enc), r); }, leaves, 24);
       }},
      {"full_model",
       [](Rng& rng) {
         ModelConfig mc;
         mc.encoder.channels = {2, 3, 4, 4};
         mc.encoder.n_mels = 16;
         mc.pooling = PoolingKind::kDoubleMha;
         mc.heads = 2;
         mc.hidden = 6;
         mc.num_speakers = 3;
         SpeakerModel model(mc, rng());
         randomize_biases(model.named_parameters(), rng);
         const std::vector<Tensor> inputs{normal_tensor({32, 16}, 1.0, rng),
                                          normal_tensor({37, 16}, 1.0, rng),
                                          normal_tensor({45, 16}, 1.0, rng)};
         const std::vector<std::size_t> labels{2, 0, 1};
         // Biases that feed batch norm have an identically zero gradient;
         // their difference quotients are pure rounding noise.
         std::vector<Var> leaves;
         for (const auto& p : model.named_parameters())
           if (p.name != "head.fc1.bias" && p.name != "head.fc2.bias") leaves.push_back(p.var);
         return check_leaves(
             [&] {
               const auto out = model.forward(inputs, BatchNormMode::kTrain);
               return am_softmax_loss(out.cos_logits, labels, mc.am_scale, mc.am_margin);
             },
             leaves, 24);
       }},
  };

  std::vector<GradCheckResult> results;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    Rng rng = make_stream(seed, std::string("gradcheck/") + checks[i].name);
    const GradCheckStats st = checks[i].run(rng);
    // Kinks may exclude a few probes, never the bulk of them.
    const bool ok = st.max_rel_err <= tolerance && st.checked > 0 && st.skipped * 4 <= st.checked;
    results.push_back({checks[i].name, st.max_rel_err, st.checked, st.skipped, ok});
  }
  return results;
}

}  // namespace dmha
