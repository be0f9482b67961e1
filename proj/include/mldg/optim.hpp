#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "mldg/param_store.hpp"

namespace mldg {

// Interface shared by the outer-loop update rules.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  // Applies grads to the trainable entries of params. grads must name
  // exactly the trainable set; frozen or unknown names are rejected.
  virtual void step(ParamStore& params, const Gradients& grads, double lr) = 0;
};

// Plain gradient descent: theta -= lr * g.
class Sgd final : public Optimizer {
 public:
  void step(ParamStore& params, const Gradients& grads, double lr) override;
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  bool operator==(const AdamWOptions&) const = default;
};

// Adam with decoupled weight decay:
//   theta *= 1 - lr * wd
//   theta -= lr * m_hat / (sqrt(v_hat) + eps)
class AdamW final : public Optimizer {
 public:
  struct Moments {
    Tensor m;
    Tensor v;
    bool operator==(const Moments&) const = default;
  };

  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  void step(ParamStore& params, const Gradients& grads, double lr) override;

  const AdamWOptions& options() const { return options_; }
  std::uint64_t step_count() const { return step_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  // Restores serialized state.
  void restore(std::uint64_t step, std::map<std::string, Moments> moments);
  void reset() {
    step_ = 0;
    moments_.clear();
  }

  bool operator==(const AdamW& other) const {
    return options_ == other.options_ && step_ == other.step_ && moments_ == other.moments_;
  }

 private:
  AdamWOptions options_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

// Triangular cyclic learning rate. Anchored at lr_min at epoch 0, peaks at
// lr_max after step_size epochs, period 2 * step_size.
struct CyclicSchedule {
  double lr_min = 1e-7;
  double lr_max = 1e-5;
  double step_size = 12.0;

  double lr_at(double epoch) const;
  bool operator==(const CyclicSchedule&) const = default;
};

// Throws unless grads names exactly the trainable entries of params with
// matching shapes.
void check_gradients(const ParamStore& params, const Gradients& grads);

}  // namespace mldg
