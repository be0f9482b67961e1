#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "mldg/error.hpp"
#include "mldg/meta.hpp"

using namespace mldg;

namespace {

// Per-domain loss 0.5 * (theta - c_k)^2 on a single scalar parameter.
class QuadraticObjective final : public MetaObjective {
 public:
  explicit QuadraticObjective(std::vector<double> centers) : centers_(std::move(centers)) {}
  std::size_t num_domains() const override { return centers_.size(); }
  void sample(Rng&) override {}
  Var domain_loss(Graph& g, const ParamStore& p, std::size_t k) override {
    Var d = add_scalar(g.param(p, "theta"), -centers_[k]);
    return scale(mul(d, d), 0.5);
  }

 private:
  std::vector<double> centers_;
};

// Per-domain constant losses.
class ConstantObjective final : public MetaObjective {
 public:
  explicit ConstantObjective(std::vector<double> losses) : losses_(std::move(losses)) {}
  std::size_t num_domains() const override { return losses_.size(); }
  void sample(Rng&) override {}
  Var domain_loss(Graph& g, const ParamStore& p, std::size_t k) override {
    return add_scalar(scale(g.param(p, "theta"), 0.0), losses_[k]);
  }

 private:
  std::vector<double> losses_;
};

// Records the parameters it is asked to update without changing them.
class SpyOptimizer final : public Optimizer {
 public:
  void step(ParamStore& params, const Gradients& grads, double) override {
    seen = params.clone();
    applied = grads;
  }
  ParamStore seen;
  Gradients applied;
};

ParamStore theta_store(double v) {
  ParamStore s;
  s.add("theta", Tensor::scalar(v), true);
  return s;
}

CorpusSpec tiny_spec() {
  CorpusSpec spec = default_corpus_spec();
  spec.seq_len = 6;
  for (auto& d : spec.train) {
    d.n_spoof = 4;
    d.n_bonafide = 2;
  }
  for (auto& d : spec.held_out) {
    d.n_spoof = 4;
    d.n_bonafide = 4;
  }
  return spec;
}

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.n_layers = 1;
  c.seq_len = 6;
  c.d_ff = 8;
  c.head_hidden = 8;
  return c;
}

}  // namespace

TEST_CASE("meta_split partitions the domains") {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const MetaSplit s = meta_split(6, 1, rng);
    CHECK(s.meta_train.size() == 5);
    CHECK(s.meta_test.size() == 1);
    std::set<std::size_t> all(s.meta_train.begin(), s.meta_train.end());
    all.insert(s.meta_test.begin(), s.meta_test.end());
    CHECK(all == std::set<std::size_t>{0, 1, 2, 3, 4, 5});
  }
  const MetaSplit s3 = meta_split(6, 3, rng);
  CHECK(s3.meta_test.size() == 3);
  CHECK(s3.meta_train.size() == 3);
}

TEST_CASE("meta_split rejects invalid sizes") {
  Rng rng(1);
  CHECK_THROWS_AS(meta_split(2, 2, rng), Error);
  CHECK_THROWS_AS(meta_split(3, 0, rng), Error);
  CHECK_THROWS_AS(meta_split(1, 1, rng), Error);
}

TEST_CASE("meta_split with K=2 is uniform") {
  Rng rng(2023);
  int first = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) first += meta_split(2, 1, rng).meta_test[0] == 0 ? 1 : 0;
  const double freq = static_cast<double>(first) / n;
  CHECK(std::abs(freq - 0.5) < 0.05);
  // Chi-square with one degree of freedom, 99.9% critical value 10.83.
  const double e = n / 2.0;
  const double chi2 = (first - e) * (first - e) / e + ((n - first) - e) * ((n - first) - e) / e;
  CHECK(chi2 < 10.83);
}

TEST_CASE("meta_split over K=4, n_meta_test=2 hits all six splits evenly") {
  Rng rng(7);
  std::map<std::vector<std::size_t>, int> counts;
  const int n = 12000;
  for (int i = 0; i < n; ++i) counts[meta_split(4, 2, rng).meta_test]++;
  REQUIRE(counts.size() == 6);
  double chi2 = 0.0;
  for (const auto& [k, c] : counts) chi2 += (c - n / 6.0) * (c - n / 6.0) / (n / 6.0);
  CHECK(chi2 < 20.5);  // 5 degrees of freedom, 99.9%
}

TEST_CASE("meta_split is reproducible") {
  Rng a(5), b(5);
  for (int i = 0; i < 20; ++i) CHECK(meta_split(6, 1, a) == meta_split(6, 1, b));
}

TEST_CASE("meta-train loss is the mean over domains") {
  ConstantObjective obj({0.2, 0.6});
  ParamStore p = theta_store(0.0);
  Graph g;
  MetaSplit split{{0, 1}, {}};
  CHECK(meta_train_loss(g, p, obj, split).value().item() == doctest::Approx(0.4).epsilon(1e-15));
}

TEST_CASE("quadratic pair gives the closed-form first-order update") {
  QuadraticObjective obj({0.0, 2.0});
  ParamStore p = theta_store(1.0);
  MetaConfig cfg;
  cfg.inner_lr = 0.5;
  cfg.meta_test_weight = 0.5;
  cfg.n_pairs = 1;
  Sgd outer;
  Rng rng(0);
  const MetaSplit split{{0}, {1}};
  const auto d = mldg_iteration(p, obj, cfg, outer, 0.1, std::span(&split, 1), rng);
  CHECK(std::abs(p.value("theta").item() - 0.975) < 1e-10);
  CHECK(d.applied_gradient.at("theta").item() == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(d.pairs[0].meta_train_loss == doctest::Approx(0.5));
  CHECK(d.pairs[0].meta_test_loss == doctest::Approx(0.5 * 1.5 * 1.5));
}

TEST_CASE("beta zero keeps only the meta-train gradient") {
  QuadraticObjective obj({0.0, 2.0});
  ParamStore p = theta_store(1.0);
  MetaConfig cfg;
  cfg.inner_lr = 0.5;
  cfg.meta_test_weight = 0.0;
  cfg.n_pairs = 1;
  SpyOptimizer outer;
  Rng rng(0);
  const MetaSplit split{{0}, {1}};
  mldg_iteration(p, obj, cfg, outer, 0.1, std::span(&split, 1), rng);
  CHECK(outer.applied.at("theta").item() == 1.0);
}

TEST_CASE("alpha zero evaluates the meta-test gradient at theta") {
  QuadraticObjective obj({0.0, 2.0});
  ParamStore p = theta_store(1.0);
  MetaConfig cfg;
  cfg.inner_lr = 0.0;
  cfg.meta_test_weight = 0.5;
  cfg.n_pairs = 1;
  SpyOptimizer outer;
  Rng rng(0);
  const MetaSplit split{{0}, {1}};
  mldg_iteration(p, obj, cfg, outer, 0.1, std::span(&split, 1), rng);
  // g_F(1) = 1, g_G(1) = -1.
  CHECK(outer.applied.at("theta").item() == doctest::Approx(1.0 + 0.5 * -1.0));
}

TEST_CASE("pairs are averaged, not summed") {
  QuadraticObjective obj({0.0, 2.0});
  MetaConfig cfg;
  cfg.inner_lr = 0.5;
  cfg.n_pairs = 3;
  SpyOptimizer outer;
  ParamStore p = theta_store(1.0);
  Rng rng(0);
  const std::vector<MetaSplit> splits = {{{0}, {1}}, {{0}, {1}}, {{1}, {0}}};
  mldg_iteration(p, obj, cfg, outer, 0.1, splits, rng);
  // Pair {1}->{0}: g_F = -1, theta' = 1.5, g_G = 1.5, total -0.25.
  CHECK(outer.applied.at("theta").item() == doctest::Approx((0.25 + 0.25 - 0.25) / 3.0));
}

TEST_CASE("recompute flag uses the meta-train gradient at the updated clone") {
  QuadraticObjective obj({0.0, 2.0});
  MetaConfig cfg;
  cfg.inner_lr = 0.5;
  cfg.n_pairs = 1;
  cfg.recompute_meta_train_grad = true;
  SpyOptimizer outer;
  ParamStore p = theta_store(1.0);
  Rng rng(0);
  const MetaSplit split{{0}, {1}};
  mldg_iteration(p, obj, cfg, outer, 0.1, std::span(&split, 1), rng);
  CHECK(outer.applied.at("theta").item() == doctest::Approx(0.5 + 0.5 * -1.5));
}

TEST_CASE("theta is untouched until the outer step") {
  QuadraticObjective obj({0.0, 2.0, 5.0});
  MetaConfig cfg;
  cfg.inner_lr = 0.3;
  cfg.n_pairs = 5;
  cfg.inner_steps = 3;
  SpyOptimizer outer;
  ParamStore p = theta_store(1.0);
  const ParamStore before = p.clone();
  Rng rng(3);
  mldg_iteration(p, obj, cfg, outer, 0.1, rng);
  CHECK(outer.seen == before);
  CHECK(p == before);
}

TEST_CASE("mldg rejects fewer than two domains and non-finite losses") {
  MetaConfig cfg;
  Sgd outer;
  Rng rng(0);
  ParamStore p = theta_store(1.0);
  QuadraticObjective one({0.0});
  CHECK_THROWS_AS(mldg_iteration(p, one, cfg, outer, 0.1, rng), Error);

  QuadraticObjective bad({0.0, std::nan("")});
  cfg.n_pairs = 1;
  const MetaSplit split{{0}, {1}};
  try {
    mldg_iteration(p, bad, cfg, outer, 0.1, std::span(&split, 1), rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
  }
  CHECK(p.value("theta").item() == 1.0);
}

TEST_CASE("inner adamw option runs and is stateless by default") {
  QuadraticObjective obj({0.0, 2.0});
  MetaConfig cfg;
  cfg.inner_rule = InnerRule::adamw;
  cfg.inner_lr = 0.1;
  cfg.n_pairs = 1;
  const MetaSplit split{{0}, {1}};
  SpyOptimizer o1, o2;
  ParamStore p = theta_store(1.0);
  Rng rng(0);
  mldg_iteration(p, obj, cfg, o1, 0.1, std::span(&split, 1), rng);
  mldg_iteration(p, obj, cfg, o2, 0.1, std::span(&split, 1), rng);
  // Fresh AdamW: first step is a decay plus a move of lr * sign(g).
  CHECK(o1.applied.at("theta").item() == doctest::Approx(1.0 + 0.5 * (0.999 - 0.1 - 2.0)).epsilon(1e-6));
  CHECK(o1.applied.at("theta") == o2.applied.at("theta"));

  cfg.inner_persistent_state = true;
  CHECK_THROWS_AS(mldg_iteration(p, obj, cfg, o1, 0.1, std::span(&split, 1), rng), Error);
  AdamW state;
  mldg_iteration(p, obj, cfg, o1, 0.1, std::span(&split, 1), rng, &state);
  CHECK(state.step_count() == 1);
}

TEST_CASE("domain batches: 3 per domain, 18 per meta-batch, no repeats") {
  const Corpus c = generate_corpus(tiny_spec(), 1);
  const Encoder enc(tiny_encoder(), ModelOptions{});
  DomainBatchObjective obj(enc, c.train, 3);
  Rng rng(4);
  obj.sample(rng);
  std::size_t total = 0;
  for (std::size_t k = 0; k < obj.num_domains(); ++k) {
    const auto b = obj.batch(k);
    CHECK(b.size() == 3);
    std::set<const Example*> uniq(b.begin(), b.end());
    CHECK(uniq.size() == 3);
    for (const Example* e : b) CHECK(e->domain_id == c.train.domains[k].domain_id);
    total += b.size();
  }
  CHECK(total == 18);
  TrainConfig tc;
  CHECK(iterations_per_epoch(tc, c.train) == (c.train.size() + 17) / 18);
  CHECK_THROWS_AS(DomainBatchObjective(enc, c.train, 7), Error);
}

TEST_CASE("identical batches give the single-batch loss") {
  const Corpus c = generate_corpus(tiny_spec(), 1);
  ModelOptions opt;
  opt.rank = 2;
  const Model m = build_model(tiny_encoder(), opt, 3);
  DomainBatchObjective obj(m.encoder, c.train, 3);
  const auto& ex = c.train.domains[0].examples;
  const std::vector<const Example*> batch = {&ex[0], &ex[1], &ex[4]};
  for (std::size_t k = 0; k < obj.num_domains(); ++k) obj.set_batch(k, batch);
  Graph g1, g2;
  MetaSplit split{{0, 1, 2, 3, 4}, {5}};
  const double f = meta_train_loss(g1, m.params, obj, split).value().item();
  const double single = m.encoder.batch_loss(g2, m.params, batch).value().item();
  CHECK(f == doctest::Approx(single).epsilon(1e-14));
}

TEST_CASE("meta-train loss matches a per-example oracle") {
  const Corpus c = generate_corpus(tiny_spec(), 2);
  ModelOptions opt;
  opt.rank = 4;
  Model m = build_model(tiny_encoder(), opt, 4);
  Rng prng(9);
  for (const auto& n : m.params.trainable_names()) {
    for (double& v : m.params.mutable_value(n).data()) v += prng.normal(0.0, 0.1);
  }
  DomainBatchObjective obj(m.encoder, c.train, 3);
  Rng rng(10);
  obj.sample(rng);
  MetaSplit split{{0, 2, 3, 5}, {1, 4}};
  Graph g;
  const double f = meta_train_loss(g, m.params, obj, split).value().item();
  double oracle = 0.0;
  for (std::size_t k : split.meta_train) {
    double dom = 0.0;
    for (const Example* e : obj.batch(k)) dom -= m.encoder.logits(m.params, e->features())[e->label];
    oracle += dom / 3.0;
  }
  oracle /= 4.0;
  CHECK(std::abs(f - oracle) < 1e-12);
}

TEST_CASE("empty domain batch is an error") {
  const Corpus c = generate_corpus(tiny_spec(), 1);
  const Model m = build_model(tiny_encoder(), ModelOptions{}, 3);
  DomainBatchObjective obj(m.encoder, c.train, 3);
  Graph g;
  CHECK_THROWS_AS(obj.domain_loss(g, m.params, 0), Error);
}

TEST_CASE("degenerate mldg equals one erm step on the concatenated batch") {
  const Corpus c = generate_corpus(tiny_spec(), 3);
  ModelOptions opt;
  opt.rank = 2;
  Model m = build_model(tiny_encoder(), opt, 5);
  Rng prng(1);
  for (const auto& n : m.params.trainable_names()) {
    for (double& v : m.params.mutable_value(n).data()) v += prng.normal(0.0, 0.1);
  }
  DomainBatchObjective obj(m.encoder, c.train, 3);
  Rng rng(2);
  obj.sample(rng);
  std::vector<const Example*> pooled;
  for (std::size_t k = 0; k < obj.num_domains(); ++k) {
    for (const Example* e : obj.batch(k)) pooled.push_back(e);
  }

  // Batches are drawn inside mldg_iteration; replay them through a fixed objective.
  class Fixed final : public MetaObjective {
   public:
    explicit Fixed(DomainBatchObjective& inner) : inner_(inner) {}
    std::size_t num_domains() const override { return inner_.num_domains(); }
    void sample(Rng&) override {}
    Var domain_loss(Graph& g, const ParamStore& p, std::size_t k) override { return inner_.domain_loss(g, p, k); }

   private:
    DomainBatchObjective& inner_;
  } fixed(obj);

  MetaConfig cfg;
  cfg.inner_lr = 0.0;
  cfg.meta_test_weight = 0.0;
  cfg.n_pairs = 1;
  const MetaSplit split{{0, 1, 2, 3, 4, 5}, {0}};
  SpyOptimizer meta_opt, erm_opt;
  ParamStore pm = m.params.clone();
  mldg_iteration(pm, fixed, cfg, meta_opt, 0.1, std::span(&split, 1), rng);
  ParamStore pe = m.params.clone();
  const auto erm = erm_iteration(pe, m.encoder, pooled, erm_opt, 0.1);
  REQUIRE(meta_opt.applied.size() == erm.gradient.size());
  for (const auto& [name, g] : erm.gradient) {
    const Tensor& h = meta_opt.applied.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(h[i] == doctest::Approx(g[i]).epsilon(1e-12).scale(1e-12));
  }
}

TEST_CASE("inner and outer updates never move frozen tensors") {
  const Corpus c = generate_corpus(tiny_spec(), 3);
  ModelOptions opt;
  opt.rank = 2;
  Model m = build_model(tiny_encoder(), opt, 5);
  const ParamStore before = m.params.clone();
  DomainBatchObjective obj(m.encoder, c.train, 3);
  MetaConfig cfg;
  cfg.inner_lr = 0.5;
  AdamW outer;
  Rng rng(1);
  mldg_iteration(m.params, obj, cfg, outer, 0.01, rng);
  bool moved_trainable = false;
  for (const auto& e : m.params.entries()) {
    if (!e.trainable) {
      CHECK_MESSAGE(e.value == before.value(e.name), e.name);
    } else if (!(e.value == before.value(e.name))) {
      moved_trainable = true;
    }
  }
  CHECK(moved_trainable);
}

TEST_CASE("erm step on a zero-loss batch only applies weight decay") {
  const Corpus c = generate_corpus(tiny_spec(), 1);
  Model m = build_model(tiny_encoder(), ModelOptions{}, 2);
  m.params.mutable_value("head.fc2.bias") = Tensor({2}, std::vector<double>{0.0, -2000.0});
  std::vector<const Example*> bona;
  for (const Example* e : c.train.all()) {
    if (e->label == kBonafide) bona.push_back(e);
  }
  const ParamStore before = m.params.clone();
  AdamW opt({0.9, 0.999, 1e-8, 0.01});
  const auto d = erm_iteration(m.params, m.encoder, bona, opt, 0.1);
  CHECK(d.loss == 0.0);
  for (const auto& e : m.params.entries()) {
    const Tensor& b = before.value(e.name);
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (e.trainable) {
        CHECK(e.value[i] == doctest::Approx(b[i] * (1.0 - 0.1 * 0.01)).epsilon(1e-15));
      } else {
        CHECK(e.value[i] == b[i]);
      }
    }
  }
}

TEST_CASE("erm step matches the hand-computed first adamw update") {
  const Corpus c = generate_corpus(tiny_spec(), 1);
  Model m = build_model(tiny_encoder(), ModelOptions{}, 2);
  const auto all = c.train.all();
  const std::vector<const Example*> batch(all.begin(), all.begin() + 16);
  const ParamStore before = m.params.clone();
  AdamW opt({0.9, 0.999, 1e-8, 0.01});
  const auto d = erm_iteration(m.params, m.encoder, batch, opt, 0.01);
  for (const auto& [name, g] : d.gradient) {
    const Tensor& b = before.value(name);
    const Tensor& a = m.params.value(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double expected = b[i] * (1 - 0.01 * 0.01) - 0.01 * g[i] / (std::abs(g[i]) + 1e-8);
      CHECK(a[i] == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("early stopping arithmetic") {
  EarlyStopping s(10);
  const double seq[] = {10, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9};
  int stopped_at = 0;
  for (int i = 0; i < 12; ++i) {
    s.update(seq[i]);
    if (s.should_stop()) {
      stopped_at = i + 1;
      break;
    }
  }
  CHECK(stopped_at == 12);
  CHECK(s.best_epoch() == 2);
  CHECK(s.best() == 9);

  EarlyStopping mono(3);
  for (int i = 0; i < 100; ++i) {
    CHECK(mono.update(100.0 - i));
    CHECK_FALSE(mono.should_stop());
  }
  CHECK_THROWS_AS(EarlyStopping(0), Error);
}

TEST_CASE("train keeps the best epoch and stops on patience") {
  const Corpus c = generate_corpus(tiny_spec(), 1);
  ModelOptions opt;
  opt.rank = 2;
  const Model m = build_model(tiny_encoder(), opt, 2);
  TrainConfig tc;
  tc.method = Method::erm;
  tc.max_epochs = 40;
  tc.schedule = {1e-3, 1e-2, 12};
  const std::vector<double> seq = {10, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 1, 1};
  int calls = 0;
  ParamStore at_best;
  auto validator = [&](const Encoder&, const ParamStore& p) {
    if (calls == 1) at_best = p.clone();
    return seq[static_cast<std::size_t>(calls++)];
  };
  const TrainResult r = train(m, c.train, tc, 1, validator);
  CHECK(r.log.size() == 12);
  CHECK(r.stopped_early);
  CHECK(r.best_epoch == 2);
  CHECK(r.best_val_eer == 9);
  CHECK(r.best_params == at_best);
  CHECK(r.best_optimizer.has_value());
  CHECK(r.best_optimizer->step_count() == 2 * iterations_per_epoch(tc, c.train));
  CHECK(r.log[0].lr == doctest::Approx(1e-3));
  CHECK(r.log[1].lr == doctest::Approx(1e-3 + 9e-3 / 12.0));
}

TEST_CASE("improving validation never stops early") {
  const Corpus c = generate_corpus(tiny_spec(), 1);
  const Model m = build_model(tiny_encoder(), ModelOptions{}, 2);
  TrainConfig tc;
  tc.method = Method::mldg;
  tc.max_epochs = 6;
  tc.patience = 2;
  double v = 1.0;
  const TrainResult r = train(m, c.train, tc, 1, [&](const Encoder&, const ParamStore&) { return v -= 0.1; });
  CHECK(r.log.size() == 6);
  CHECK_FALSE(r.stopped_early);
  CHECK(r.best_epoch == 6);
}

TEST_CASE("train rejects a single-class validation set") {
  const Corpus c = generate_corpus(tiny_spec(), 1);
  const Model m = build_model(tiny_encoder(), ModelOptions{}, 2);
  DomainSet spoof_only;
  for (const auto& d : c.dev.domains) {
    for (const auto& e : d.examples) {
      if (e.label == kSpoof) spoof_only.domain(d.domain_id).examples.push_back(e);
    }
  }
  try {
    train(m, c.train, spoof_only, TrainConfig{}, 1);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::data);
  }
}

TEST_CASE("training is deterministic for both methods") {
  const Corpus c = generate_corpus(tiny_spec(), 1);
  ModelOptions opt;
  opt.rank = 2;
  const Model m = build_model(tiny_encoder(), opt, 2);
  for (Method method : {Method::erm, Method::mldg}) {
    TrainConfig tc;
    tc.method = method;
    tc.max_epochs = 3;
    tc.schedule = {1e-3, 1e-2, 2};
    const TrainResult a = train(m, c.train, c.dev, tc, 7);
    const TrainResult b = train(m, c.train, c.dev, tc, 7);
    CHECK(a.best_params == b.best_params);
    CHECK(a.best_val_eer == b.best_val_eer);
    for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].train_loss == b.log[i].train_loss);
    const TrainResult other = train(m, c.train, c.dev, tc, 8);
    CHECK_FALSE(other.best_params == a.best_params);
  }
}
