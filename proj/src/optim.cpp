#include "mldg/optim.hpp"

#include <algorithm>
#include <cmath>

#include "mldg/error.hpp"

namespace mldg {

void check_gradients(const ParamStore& params, const Gradients& grads) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) fail(ErrorKind::state, "optimizer: gradient for unknown parameter '" + name + "'");
    const auto& e = params.entry(name);
    if (!e.trainable) fail(ErrorKind::state, "optimizer: gradient for frozen parameter '" + name + "'");
    if (g.shape() != e.value.shape()) {
      fail(ErrorKind::shape, "optimizer: gradient " + g.shape_string() + " for '" + name +
                                 "' of shape " + e.value.shape_string());
    }
  }
  for (const auto& e : params.entries()) {
    if (e.trainable && !grads.contains(e.name)) {
      fail(ErrorKind::state, "optimizer: missing gradient for '" + e.name + "'");
    }
  }
}

void Sgd::step(ParamStore& params, const Gradients& grads, double lr) {
  check_gradients(params, grads);
  for (const auto& [name, g] : grads) axpy(-lr, g, params.mutable_value(name));
}

void AdamW::step(ParamStore& params, const Gradients& grads, double lr) {
  check_gradients(params, grads);
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(options_.beta1, t);
  const double bc2 = 1.0 - std::pow(options_.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& theta = params.mutable_value(name);
    auto it = moments_.find(name);
    if (it == moments_.end()) {
      it = moments_.emplace(name, Moments{Tensor::zeros_like(theta), Tensor::zeros_like(theta)}).first;
    }
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    const double decay = 1.0 - lr * options_.weight_decay;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] = theta[i] * decay - lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

void AdamW::restore(std::uint64_t step, std::map<std::string, Moments> moments) {
  step_ = step;
  moments_ = std::move(moments);
}

double CyclicSchedule::lr_at(double epoch) const {
  if (epoch < 0.0) fail(ErrorKind::config, "lr_at: negative epoch");
  const double cycle = std::floor(1.0 + epoch / (2.0 * step_size));
  const double x = std::abs(epoch / step_size - 2.0 * cycle + 1.0);
  return lr_min + (lr_max - lr_min) * std::max(0.0, 1.0 - x);
}

}  // namespace mldg
