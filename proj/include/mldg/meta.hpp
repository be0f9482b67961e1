#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mldg/autodiff.hpp"
#include "mldg/data.hpp"
#include "mldg/metrics.hpp"
#include "mldg/model.hpp"
#include "mldg/optim.hpp"
#include "mldg/rng.hpp"

namespace mldg {

enum class Method { erm, mldg };
const char* to_string(Method method);
Method method_from_string(const std::string& s);

// Rule used for the simulated meta-train step on the clone.
enum class InnerRule { sgd, adamw };
// Rule applied to the combined gradient on the real parameters.
enum class OuterRule { adamw, sgd };

struct MetaConfig {
  double inner_lr = 0.001;          // alpha
  double meta_test_weight = 0.5;    // beta
  int n_meta_test = 1;
  int per_domain_batch = 3;
  int n_pairs = 5;
  int inner_steps = 1;
  InnerRule inner_rule = InnerRule::sgd;
  // Only for InnerRule::adamw: carry inner moments across iterations
  // instead of starting fresh on every clone.
  bool inner_persistent_state = false;
  // Use the meta-train gradient at the updated clone rather than at the
  // clone point in the outer update.
  bool recompute_meta_train_grad = false;

  void validate(std::size_t num_domains) const;
  bool operator==(const MetaConfig&) const = default;
};

// Domain indices are positions in the objective's domain list.
struct MetaSplit {
  std::vector<std::size_t> meta_train;
  std::vector<std::size_t> meta_test;

  bool operator==(const MetaSplit&) const = default;
};

// Uniformly random partition of {0..num_domains-1} with |meta_test| = n_meta_test.
MetaSplit meta_split(std::size_t num_domains, std::size_t n_meta_test, Rng& rng);

// Per-domain losses the meta-learner optimizes. The model-backed
// implementation draws mini-batches; tests plug in closed-form objectives.
class MetaObjective {
 public:
  virtual ~MetaObjective() = default;
  virtual std::size_t num_domains() const = 0;
  // Draws fresh mini-batches for every domain.
  virtual void sample(Rng& rng) = 0;
  // Loss of one domain's current mini-batch at params.
  virtual Var domain_loss(Graph& graph, const ParamStore& params, std::size_t domain) = 0;
};

// Mean over the listed domains of their mini-batch losses.
Var mean_domain_loss(Graph& graph, const ParamStore& params, MetaObjective& objective,
                     std::span<const std::size_t> domains);

// F: mean loss over the meta-train domains of a split.
Var meta_train_loss(Graph& graph, const ParamStore& params, MetaObjective& objective,
                    const MetaSplit& split);

// Mini-batches of per_domain_batch examples drawn uniformly without
// replacement from each domain of a DomainSet.
class DomainBatchObjective final : public MetaObjective {
 public:
  DomainBatchObjective(const Encoder& encoder, const DomainSet& domains, std::size_t per_domain_batch);

  std::size_t num_domains() const override { return domains_.num_domains(); }
  void sample(Rng& rng) override;
  Var domain_loss(Graph& graph, const ParamStore& params, std::size_t domain) override;

  void set_batch(std::size_t domain, std::vector<const Example*> batch);
  std::span<const Example* const> batch(std::size_t domain) const { return batches_[domain]; }

 private:
  const Encoder& encoder_;
  const DomainSet& domains_;
  std::size_t per_domain_batch_;
  std::vector<std::vector<const Example*>> batches_;
};

struct PairDiagnostics {
  MetaSplit split;
  double meta_train_loss = 0.0;  // F at the clone point
  double meta_test_loss = 0.0;   // G at the updated clone
};

struct MldgDiagnostics {
  std::vector<PairDiagnostics> pairs;
  Gradients applied_gradient;  // averaged over pairs, before the outer rule
};

// One first-order MLDG iteration. For each pair: clone, gradient of F at
// the clone, inner step(s) on the clone, gradient of G at the updated
// clone, accumulate g_F + beta * g_G. The buffer is averaged over pairs and
// handed to the outer optimizer once. params is untouched until then.
// inner_state carries inner AdamW moments when inner_persistent_state is set.
MldgDiagnostics mldg_iteration(ParamStore& params, MetaObjective& objective, const MetaConfig& config,
                               Optimizer& outer, double outer_lr, Rng& rng,
                               AdamW* inner_state = nullptr);

// Same, with the splits of every pair given explicitly (one per pair).
MldgDiagnostics mldg_iteration(ParamStore& params, MetaObjective& objective, const MetaConfig& config,
                               Optimizer& outer, double outer_lr, std::span<const MetaSplit> splits,
                               Rng& rng, AdamW* inner_state = nullptr);

struct ErmDiagnostics {
  double loss = 0.0;
  Gradients gradient;
};

// One pooled-batch NLL step.
ErmDiagnostics erm_iteration(ParamStore& params, const Encoder& encoder,
                             std::span<const Example* const> batch, Optimizer& optimizer, double lr);

// Patience-based stopping on a metric where lower is better. Ties keep the
// earliest epoch.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);

  // Records the metric of the next epoch; true when it is a new best.
  bool update(double metric);
  bool should_stop() const { return since_best_ >= patience_; }
  int best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
  double best() const { return best_; }
  int epochs() const { return epochs_; }

 private:
  int patience_;
  int epochs_ = 0;
  int best_epoch_ = 0;
  int since_best_ = 0;
  double best_ = 0.0;
};

struct TrainConfig {
  Method method = Method::mldg;
  MetaConfig meta;
  AdamWOptions adamw;
  CyclicSchedule schedule;
  OuterRule outer_rule = OuterRule::adamw;
  int erm_batch = 16;
  int max_epochs = 50;
  int patience = 10;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_eer = 0.0;
  double lr = 0.0;
  double wall_time = 0.0;  // seconds since training started
};

struct TrainResult {
  ParamStore best_params;
  std::optional<AdamW> best_optimizer;
  int best_epoch = 0;
  double best_val_eer = 0.0;
  std::vector<EpochRecord> log;
  bool stopped_early = false;
};

using Validator = std::function<double(const Encoder&, const ParamStore&)>;
using EpochCallback = std::function<void(const EpochRecord&)>;

ScoreSet score_examples(const Encoder& encoder, const ParamStore& params, const DomainSet& set);
double validation_eer(const Encoder& encoder, const ParamStore& params, const DomainSet& set);

// Iterations per epoch: ceil(|train| / batch) with batch = erm_batch for
// ERM and K * per_domain_batch for MLDG.
std::size_t iterations_per_epoch(const TrainConfig& config, const DomainSet& train_set);

// Runs epochs until max_epochs or patience expires; keeps the parameters
// of the epoch with the lowest validation metric.
TrainResult train(const Model& initial, const DomainSet& train_set, const TrainConfig& config,
                  std::uint64_t seed, const Validator& validate, const EpochCallback& on_epoch = {});
// Validation metric = EER on val_set, which must contain both classes.
TrainResult train(const Model& initial, const DomainSet& train_set, const DomainSet& val_set,
                  const TrainConfig& config, std::uint64_t seed, const EpochCallback& on_epoch = {});

}  // namespace mldg
