#include "mldg/meta.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>

#include "mldg/error.hpp"

namespace mldg {

const char* to_string(Method method) { return method == Method::erm ? "erm" : "mldg"; }

Method method_from_string(const std::string& s) {
  if (s == "erm") return Method::erm;
  if (s == "mldg") return Method::mldg;
  fail(ErrorKind::config, "unknown method '" + s + "' (expected erm or mldg)");
}

void MetaConfig::validate(std::size_t num_domains) const {
  if (num_domains < 2) {
    fail(ErrorKind::config, "mldg: need at least 2 domains, got " + std::to_string(num_domains));
  }
  if (n_meta_test < 1 || static_cast<std::size_t>(n_meta_test) >= num_domains) {
    fail(ErrorKind::config, "mldg: n_meta_test must satisfy 1 <= n_meta_test < K (n_meta_test " +
                                std::to_string(n_meta_test) + ", K " + std::to_string(num_domains) + ")");
  }
  if (per_domain_batch < 1) fail(ErrorKind::config, "mldg: per_domain_batch must be >= 1");
  if (n_pairs < 1) fail(ErrorKind::config, "mldg: n_pairs must be >= 1");
  if (inner_steps < 1) fail(ErrorKind::config, "mldg: inner_steps must be >= 1");
  if (meta_test_weight < 0.0) fail(ErrorKind::config, "mldg: meta_test_weight must be >= 0");
  if (inner_lr < 0.0) fail(ErrorKind::config, "mldg: inner_lr must be >= 0");
}

MetaSplit meta_split(std::size_t num_domains, std::size_t n_meta_test, Rng& rng) {
  if (n_meta_test < 1 || n_meta_test >= num_domains) {
    fail(ErrorKind::config, "meta_split: need 1 <= n_meta_test < K (n_meta_test " + std::to_string(n_meta_test) +
                                ", K " + std::to_string(num_domains) + ")");
  }
  std::vector<std::size_t> idx(num_domains);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first n_meta_test slots become the meta-test set.
  for (std::size_t i = 0; i < n_meta_test; ++i) {
    const std::size_t j = i + rng.index(num_domains - i);
    std::swap(idx[i], idx[j]);
  }
  MetaSplit split;
  split.meta_test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_meta_test));
  split.meta_train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_meta_test), idx.end());
  std::sort(split.meta_test.begin(), split.meta_test.end());
  std::sort(split.meta_train.begin(), split.meta_train.end());
  return split;
}

Var mean_domain_loss(Graph& graph, const ParamStore& params, MetaObjective& objective,
                     std::span<const std::size_t> domains) {
  if (domains.empty()) fail(ErrorKind::config, "mean_domain_loss: empty domain set");
  std::vector<Var> losses;
  losses.reserve(domains.size());
  for (std::size_t k : domains) {
    if (k >= objective.num_domains()) {
      fail(ErrorKind::config, "mean_domain_loss: domain index " + std::to_string(k) + " out of range");
    }
    losses.push_back(objective.domain_loss(graph, params, k));
  }
  return mean_of(losses);
}

Var meta_train_loss(Graph& graph, const ParamStore& params, MetaObjective& objective,
                    const MetaSplit& split) {
  return mean_domain_loss(graph, params, objective, split.meta_train);
}

DomainBatchObjective::DomainBatchObjective(const Encoder& encoder, const DomainSet& domains,
                                           std::size_t per_domain_batch)
    : encoder_(encoder), domains_(domains), per_domain_batch_(per_domain_batch),
      batches_(domains.num_domains()) {
  for (const auto& d : domains_.domains) {
    if (d.examples.size() < per_domain_batch_) {
      fail(ErrorKind::data, "domain " + std::to_string(d.domain_id) + " has " + std::to_string(d.examples.size()) +
                                " examples, fewer than per_domain_batch " + std::to_string(per_domain_batch_));
    }
  }
}

void DomainBatchObjective::sample(Rng& rng) {
  for (std::size_t k = 0; k < domains_.num_domains(); ++k) {
    const auto& ex = domains_.domains[k].examples;
    std::vector<std::size_t> idx(ex.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto& batch = batches_[k];
    batch.clear();
    for (std::size_t i = 0; i < per_domain_batch_; ++i) {
      const std::size_t j = i + rng.index(idx.size() - i);
      std::swap(idx[i], idx[j]);
      batch.push_back(&ex[idx[i]]);
    }
  }
}

void DomainBatchObjective::set_batch(std::size_t domain, std::vector<const Example*> batch) {
  batches_.at(domain) = std::move(batch);
}

Var DomainBatchObjective::domain_loss(Graph& graph, const ParamStore& params, std::size_t domain) {
  const auto& batch = batches_.at(domain);
  if (batch.empty()) {
    fail(ErrorKind::data, "meta loss: empty mini-batch for domain index " + std::to_string(domain));
  }
  return encoder_.batch_loss(graph, params, batch);
}

namespace {

// Trainable parameters that do not reach the loss still get a zero entry so
// every update sees the full trainable set.
Gradients gradient_of(Graph& graph, Var loss, const ParamStore& params) {
  Gradients grads = graph.backward(loss);
  for (const auto& e : params.entries()) {
    if (e.trainable && !grads.contains(e.name)) grads.emplace(e.name, Tensor::zeros_like(e.value));
  }
  return grads;
}

double checked_value(Var loss, const char* what, std::size_t pair) {
  const double v = loss.value().item();
  if (!std::isfinite(v)) {
    fail(ErrorKind::numeric, std::string("mldg: non-finite ") + what + " at pair " + std::to_string(pair));
  }
  return v;
}

}  // namespace

MldgDiagnostics mldg_iteration(ParamStore& params, MetaObjective& objective, const MetaConfig& config,
                               Optimizer& outer, double outer_lr, Rng& rng, AdamW* inner_state) {
  config.validate(objective.num_domains());
  std::vector<MetaSplit> splits;
  for (int p = 0; p < config.n_pairs; ++p) {
    splits.push_back(meta_split(objective.num_domains(), static_cast<std::size_t>(config.n_meta_test), rng));
  }
  return mldg_iteration(params, objective, config, outer, outer_lr, splits, rng, inner_state);
}

MldgDiagnostics mldg_iteration(ParamStore& params, MetaObjective& objective, const MetaConfig& config,
                               Optimizer& outer, double outer_lr, std::span<const MetaSplit> splits,
                               Rng& rng, AdamW* inner_state) {
  config.validate(objective.num_domains());
  if (splits.size() != static_cast<std::size_t>(config.n_pairs)) {
    fail(ErrorKind::config, "mldg: " + std::to_string(splits.size()) + " splits for n_pairs " +
                                std::to_string(config.n_pairs));
  }
  const bool persistent = config.inner_rule == InnerRule::adamw && config.inner_persistent_state;
  if (persistent && inner_state == nullptr) {
    fail(ErrorKind::config, "mldg: persistent inner state requested without a state holder");
  }

  MldgDiagnostics diag;
  Gradients buffer;
  for (std::size_t p = 0; p < splits.size(); ++p) {
    const MetaSplit& split = splits[p];
    objective.sample(rng);
    ParamStore clone = params.clone();

    PairDiagnostics pd;
    pd.split = split;
    Gradients grad_f;
    {
      Graph graph;
      Var f = meta_train_loss(graph, clone, objective, split);
      pd.meta_train_loss = checked_value(f, "meta-train loss", p);
      grad_f = gradient_of(graph, f, clone);
    }

    Sgd sgd;
    std::optional<AdamW> fresh;
    Optimizer* inner = &sgd;
    if (config.inner_rule == InnerRule::adamw) {
      if (persistent) {
        inner = inner_state;
      } else {
        fresh.emplace(inner_state ? inner_state->options() : AdamWOptions{});
        inner = &*fresh;
      }
    }
    Gradients step_grad = grad_f;
    for (int s = 0; s < config.inner_steps; ++s) {
      if (s > 0) {
        Graph graph;
        Var f = meta_train_loss(graph, clone, objective, split);
        checked_value(f, "meta-train loss", p);
        step_grad = gradient_of(graph, f, clone);
      }
      inner->step(clone, step_grad, config.inner_lr);
    }
    if (config.recompute_meta_train_grad) {
      Graph graph;
      Var f = meta_train_loss(graph, clone, objective, split);
      checked_value(f, "meta-train loss", p);
      grad_f = gradient_of(graph, f, clone);
    }

    Gradients grad_g;
    {
      Graph graph;
      Var g = mean_domain_loss(graph, clone, objective, split.meta_test);
      pd.meta_test_loss = checked_value(g, "meta-test loss", p);
      grad_g = gradient_of(graph, g, clone);
    }
    accumulate(buffer, grad_f, 1.0);
    accumulate(buffer, grad_g, config.meta_test_weight);
    diag.pairs.push_back(std::move(pd));
  }
  scale(buffer, 1.0 / static_cast<double>(splits.size()));
  if (!all_finite(buffer)) fail(ErrorKind::numeric, "mldg: non-finite combined gradient");
  outer.step(params, buffer, outer_lr);
  diag.applied_gradient = std::move(buffer);
  return diag;
}

ErmDiagnostics erm_iteration(ParamStore& params, const Encoder& encoder,
                             std::span<const Example* const> batch, Optimizer& optimizer, double lr) {
  ErmDiagnostics diag;
  Graph graph;
  Var loss = encoder.batch_loss(graph, params, batch);
  diag.loss = loss.value().item();
  if (!std::isfinite(diag.loss)) fail(ErrorKind::numeric, "erm: non-finite loss");
  diag.gradient = gradient_of(graph, loss, params);
  optimizer.step(params, diag.gradient, lr);
  return diag;
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience) {
  if (patience < 1) fail(ErrorKind::config, "early stopping: patience must be >= 1");
}

bool EarlyStopping::update(double metric) {
  ++epochs_;
  if (best_epoch_ == 0 || metric < best_) {
    best_ = metric;
    best_epoch_ = epochs_;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

ScoreSet score_examples(const Encoder& encoder, const ParamStore& params, const DomainSet& set) {
  ScoreSet out;
  out.reserve(set.size());
  for (const auto& d : set.domains) {
    for (const auto& e : d.examples) {
      out.push_back({e.example_id, encoder.score(params, e.features()), e.label});
    }
  }
  return out;
}

double validation_eer(const Encoder& encoder, const ParamStore& params, const DomainSet& set) {
  return eer(score_examples(encoder, params, set)).eer;
}

std::size_t iterations_per_epoch(const TrainConfig& config, const DomainSet& train_set) {
  const std::size_t batch = config.method == Method::erm
                                ? static_cast<std::size_t>(config.erm_batch)
                                : train_set.num_domains() * static_cast<std::size_t>(config.meta.per_domain_batch);
  if (batch == 0) fail(ErrorKind::config, "train: zero batch size");
  return (train_set.size() + batch - 1) / batch;
}

TrainResult train(const Model& initial, const DomainSet& train_set, const TrainConfig& config,
                  std::uint64_t seed, const Validator& validate, const EpochCallback& on_epoch) {
  if (config.max_epochs < 1) fail(ErrorKind::config, "train: max_epochs must be >= 1");
  if (config.erm_batch < 1) fail(ErrorKind::config, "train: erm_batch must be >= 1");
  if (train_set.size() == 0) fail(ErrorKind::data, "train: empty training set");
  if (config.method == Method::mldg) config.meta.validate(train_set.num_domains());

  const Encoder& encoder = initial.encoder;
  const Rng root(seed);
  Rng split_rng = root.fork("meta_split");
  Rng batch_rng = root.fork("batch_order");

  ParamStore params = initial.params.clone();
  std::unique_ptr<Optimizer> outer;
  AdamW* adamw = nullptr;
  if (config.outer_rule == OuterRule::adamw) {
    auto opt = std::make_unique<AdamW>(config.adamw);
    adamw = opt.get();
    outer = std::move(opt);
  } else {
    outer = std::make_unique<Sgd>();
  }
  std::optional<AdamW> inner_state;
  if (config.meta.inner_rule == InnerRule::adamw) inner_state.emplace(config.adamw);

  std::optional<DomainBatchObjective> objective;
  if (config.method == Method::mldg) {
    objective.emplace(encoder, train_set, static_cast<std::size_t>(config.meta.per_domain_batch));
  }
  const std::vector<const Example*> pool = train_set.all();
  const std::size_t iters = iterations_per_epoch(config, train_set);

  TrainResult result;
  EarlyStopping stopper(config.patience);
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = config.schedule.lr_at(static_cast<double>(epoch));
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    if (config.method == Method::erm) {
      std::vector<const Example*> order = pool;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[batch_rng.index(i)]);
      const auto b = static_cast<std::size_t>(config.erm_batch);
      for (std::size_t it = 0; it < iters; ++it) {
        const std::size_t begin = it * b;
        const std::size_t end = std::min(order.size(), begin + b);
        auto d = erm_iteration(params, encoder, std::span(order).subspan(begin, end - begin), *outer, lr);
        loss_sum += d.loss;
        ++loss_count;
      }
    } else {
      for (std::size_t it = 0; it < iters; ++it) {
        std::vector<MetaSplit> splits;
        for (int p = 0; p < config.meta.n_pairs; ++p) {
          splits.push_back(meta_split(train_set.num_domains(), static_cast<std::size_t>(config.meta.n_meta_test),
                                      split_rng));
        }
        auto d = mldg_iteration(params, *objective, config.meta, *outer, lr, splits, batch_rng,
                                inner_state ? &*inner_state : nullptr);
        for (const auto& pd : d.pairs) {
          loss_sum += pd.meta_train_loss;
          ++loss_count;
        }
      }
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(loss_count, 1));
    rec.lr = lr;
    rec.val_eer = validate(encoder, params);
    if (!std::isfinite(rec.val_eer)) fail(ErrorKind::numeric, "train: non-finite validation metric");
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (stopper.update(rec.val_eer)) {
      result.best_params = params.clone();
      result.best_optimizer = adamw ? std::optional<AdamW>(*adamw) : std::nullopt;
      result.best_epoch = rec.epoch;
      result.best_val_eer = rec.val_eer;
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.should_stop()) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

TrainResult train(const Model& initial, const DomainSet& train_set, const DomainSet& val_set,
                  const TrainConfig& config, std::uint64_t seed, const EpochCallback& on_epoch) {
  if (!val_set.has_both_classes()) {
    fail(ErrorKind::data, "train: validation set must contain both bonafide and spoof examples");
  }
  return train(initial, train_set, config, seed,
               [&val_set](const Encoder& enc, const ParamStore& p) { return validation_eer(enc, p, val_set); },
               on_epoch);
}

}  // namespace mldg
