#include <doctest.h>

#include <memory>

#include "fd_check.hpp"
#include "mldg/data.hpp"
#include "mldg/error.hpp"
#include "mldg/linalg.hpp"
#include "mldg/model.hpp"
#include "mldg/rng.hpp"

using namespace mldg;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 8;
  c.seq_len = 4;
  c.head_hidden = 6;
  return c;
}

Example make_example(const EncoderConfig& c, Rng& rng, int label, const std::string& id) {
  Tensor x({static_cast<std::size_t>(c.seq_len), static_cast<std::size_t>(c.d_model)});
  for (double& v : x.data()) v = rng.uniform(-2.0, 2.0);
  return {id, label, 1, std::make_shared<FeatureSource>(std::move(x))};
}

void randomize_trainable(ParamStore& p, Rng& rng, double sd) {
  for (const auto& name : p.trainable_names()) {
    for (double& v : p.mutable_value(name).data()) v = rng.normal(0.0, sd);
  }
}

}  // namespace

TEST_CASE("rank-4 model on two layers has eight adapters of the right shape") {
  ModelOptions opt;
  opt.rank = 4;
  const Model m = build_model(EncoderConfig{}, opt, 1);
  const auto adapters = m.encoder.adapters(m.params);
  REQUIRE(adapters.size() == 8);
  for (const auto& a : adapters) {
    CHECK(a.A.shape() == Shape{16, 4});
    CHECK(a.B.shape() == Shape{4, 16});
    CHECK(a.scale == 2.0);
  }
}

TEST_CASE("lora mode trains exactly the adapters and the head") {
  ModelOptions opt;
  opt.rank = 2;
  const Model m = build_model(EncoderConfig{}, opt, 1);
  for (const auto& e : m.params.entries()) {
    const bool adapter = e.name.find(".lora_") != std::string::npos;
    const bool head = e.name.rfind("head.", 0) == 0;
    CHECK_MESSAGE(e.trainable == (adapter || head), e.name);
  }
}

TEST_CASE("head-only mode trains exactly the head tensors") {
  ModelOptions opt;
  opt.freeze_base = true;
  const Model m = build_model(EncoderConfig{}, opt, 1);
  CHECK(m.encoder.mode() == TrainMode::head_only);
  CHECK(m.params.trainable_names() ==
        std::vector<std::string>{"head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"});
  CHECK(m.params.trainable_count() == m.encoder.head_param_count());
}

TEST_CASE("full mode trains every tensor") {
  ModelOptions opt;
  opt.freeze_base = false;
  const Model m = build_model(EncoderConfig{}, opt, 1);
  CHECK(m.encoder.mode() == TrainMode::full);
  CHECK(m.params.trainable_count() == m.params.total_count());
}

TEST_CASE("same seed builds identical stores") {
  ModelOptions opt;
  opt.rank = 8;
  CHECK(build_model(EncoderConfig{}, opt, 42).params == build_model(EncoderConfig{}, opt, 42).params);
  CHECK_FALSE(build_model(EncoderConfig{}, opt, 42).params == build_model(EncoderConfig{}, opt, 43).params);
}

TEST_CASE("rank outside 1..d_model is a config error") {
  ModelOptions opt;
  opt.rank = 17;
  try {
    build_model(EncoderConfig{}, opt, 1);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
  opt.rank = 0;
  CHECK_THROWS_AS(build_model(EncoderConfig{}, opt, 1), Error);
  opt.rank = 16;
  CHECK_NOTHROW(build_model(EncoderConfig{}, opt, 1));
}

TEST_CASE("encoder config validation") {
  EncoderConfig c;
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c.n_heads = 2;
  c.d_ff = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("count_trainable reproduces the large-backbone columns") {
  CHECK(count_trainable(24, 1024, 1024, 16, 4, 447000) == 3592728);
  CHECK(count_trainable(24, 1024, 1024, 2, 4, 447000) == 840216);
  CHECK(count_trainable(24, 1024, 1024, 4, 4, 447000) == 1233432);
  CHECK(count_trainable(24, 1024, 1024, 8, 4, 447000) == 2019864);
}

TEST_CASE("count_trainable matches enumeration of the built store") {
  const EncoderConfig c;
  for (int r : {1, 2, 4, 8, 16}) {
    ModelOptions opt;
    opt.rank = r;
    const Model m = build_model(c, opt, 3);
    const auto expected = count_trainable(static_cast<std::uint64_t>(c.n_layers), 16, 16,
                                          static_cast<std::uint64_t>(r), 4, m.encoder.head_param_count());
    CHECK(m.params.trainable_count() == expected);
  }
}

TEST_CASE("adapter_delta") {
  LoraAdapter a;
  a.rank = 1;
  a.scale = 2.0;
  a.A = Tensor::matrix(3, 1, {0, 0, 0});
  a.B = Tensor::matrix(1, 3, {1, 2, 3});
  CHECK(adapter_delta(a) == Tensor({3, 3}, 0.0));

  a.A = Tensor::matrix(3, 1, {1, 0, 0});
  a.B = Tensor::matrix(1, 3, {1, 0, 0});
  CHECK(adapter_delta(a) == Tensor::matrix(3, 3, {2, 0, 0, 0, 0, 0, 0, 0, 0}));

  Rng rng(8);
  a.rank = 4;
  a.A = Tensor({16, 4});
  a.B = Tensor({4, 16});
  for (double& v : a.A.data()) v = rng.normal();
  for (double& v : a.B.data()) v = rng.normal();
  const auto s = svd(adapter_delta(a)).S;
  REQUIRE(s.size() == 16);
  CHECK(s[4] / s[0] < 1e-10);
  CHECK(s[3] / s[0] > 1e-3);
}

TEST_CASE("fresh adapters leave the frozen-base function unchanged") {
  const EncoderConfig c = small_config();
  ModelOptions lora;
  lora.rank = 4;
  ModelOptions head_only;
  const Model a = build_model(c, lora, 11);
  const Model b = build_model(c, head_only, 11);
  Rng rng(1);
  for (int i = 0; i < 5; ++i) {
    const Example ex = make_example(c, rng, 0, "x");
    CHECK(a.encoder.logits(a.params, ex.features()) == b.encoder.logits(b.params, ex.features()));
  }
}

TEST_CASE("per-example outputs do not depend on batch order") {
  const EncoderConfig c = small_config();
  ModelOptions opt;
  opt.rank = 2;
  Model m = build_model(c, opt, 5);
  Rng rng(2);
  randomize_trainable(m.params, rng, 0.3);
  std::vector<Example> ex;
  for (int i = 0; i < 4; ++i) ex.push_back(make_example(c, rng, i % 2, "e" + std::to_string(i)));
  std::vector<const Example*> fwd = {&ex[0], &ex[1], &ex[2], &ex[3]};
  std::vector<const Example*> rev = {&ex[3], &ex[2], &ex[1], &ex[0]};
  Graph g1(GradMode::disabled), g2(GradMode::disabled);
  CHECK(m.encoder.batch_loss(g1, m.params, fwd).value().item() ==
        doctest::Approx(m.encoder.batch_loss(g2, m.params, rev).value().item()).epsilon(1e-14));
  const double s0 = m.encoder.score(m.params, ex[0].features());
  CHECK(m.encoder.score(m.params, ex[0].features()) == s0);
}

TEST_CASE("score is the bonafide minus spoof log-probability") {
  const EncoderConfig c = small_config();
  const Model m = build_model(c, ModelOptions{}, 5);
  Rng rng(3);
  const Example ex = make_example(c, rng, 0, "x");
  const Tensor lp = m.encoder.logits(m.params, ex.features());
  CHECK(m.encoder.score(m.params, ex.features()) == lp[0] - lp[1]);
  CHECK(std::exp(lp[0]) + std::exp(lp[1]) == doctest::Approx(1.0));
}

TEST_CASE("wrong feature shape and empty batch are errors") {
  const EncoderConfig c = small_config();
  const Model m = build_model(c, ModelOptions{}, 5);
  CHECK_THROWS_AS(m.encoder.score(m.params, Tensor({3, 16}, 0.0)), Error);
  Graph g;
  CHECK_THROWS_AS(m.encoder.batch_loss(g, m.params, std::span<const Example* const>{}), Error);
}

TEST_CASE("toy model gradients match finite differences for every trainable tensor") {
  const EncoderConfig c = small_config();
  for (int r : {2, 4, 8, 16}) {
    ModelOptions opt;
    opt.rank = r;
    Model m = build_model(c, opt, static_cast<std::uint64_t>(r));
    Rng rng(100 + static_cast<std::uint64_t>(r));
    randomize_trainable(m.params, rng, 0.3);
    std::vector<Example> ex = {make_example(c, rng, kBonafide, "a"), make_example(c, rng, kSpoof, "b")};
    std::vector<const Example*> batch = {&ex[0], &ex[1]};
    const auto results = testing::finite_difference_check(m.params, [&](Graph& g, const ParamStore& p) {
      return m.encoder.batch_loss(g, p, batch);
    });
    CHECK(results.size() == m.params.trainable_names().size());
    for (const auto& res : results) {
      INFO("rank ", r, " ", res.name);
      CHECK(res.rel_error < 1e-6);
    }
  }
}

TEST_CASE("full-mode gradients include base tensors") {
  EncoderConfig c = small_config();
  c.n_layers = 1;
  ModelOptions opt;
  opt.freeze_base = false;
  Model m = build_model(c, opt, 9);
  Rng rng(9);
  std::vector<Example> ex = {make_example(c, rng, kSpoof, "a")};
  std::vector<const Example*> batch = {&ex[0]};
  const auto results = testing::finite_difference_check(
      m.params, [&](Graph& g, const ParamStore& p) { return m.encoder.batch_loss(g, p, batch); });
  CHECK(results.size() == m.params.size());
  for (const auto& res : results) {
    INFO(res.name);
    // Softmax over keys ignores a shift shared by every key, so the key bias
    // has an identically zero gradient; only rounding noise is left to compare.
    if (res.name.ends_with("attn.k.bias")) {
      CHECK(res.analytic_norm < 1e-12);
    } else {
      CHECK(res.rel_error < 1e-6);
    }
  }
}
