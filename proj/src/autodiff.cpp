#include "mldg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mldg/error.hpp"

namespace mldg {

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

void Graph::check_live(std::string_view op) const {
  if (consumed_) {
    fail(ErrorKind::state, std::string(op) + ": graph already consumed by backward()");
  }
}

Var Graph::constant(Tensor value) {
  check_live("constant");
  nodes_.push_back({"constant", std::move(value), {}, {}, false, nullptr, {}});
  return {this, nodes_.size() - 1};
}

Var Graph::param(const ParamStore& store, std::string_view name) {
  check_live("param");
  std::string key(name);
  if (auto it = bound_params_.find(key); it != bound_params_.end()) return {this, it->second};
  const auto& e = store.entry(name);
  const bool leaf = e.trainable && mode_ == GradMode::enabled;
  nodes_.push_back({"param", e.value, {}, {}, leaf, nullptr, key});
  bound_params_.emplace(std::move(key), nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

Var Graph::emit(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
                BackwardFn backward) {
  return emit(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
              std::move(backward));
}

Var Graph::emit(std::string_view op, Tensor value, std::span<const Var> inputs,
                BackwardFn backward) {
  check_live(op);
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  for (const Var& v : inputs) {
    if (&v.graph() != this) fail(ErrorKind::state, node.op + ": input from another graph");
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Tensor& Graph::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

Gradients Graph::backward(Var loss) {
  check_live("backward");
  if (&loss.graph() != this) fail(ErrorKind::state, "backward: loss from another graph");
  if (loss.value().size() != 1) {
    fail(ErrorKind::shape, "backward: loss must be scalar, got " + loss.value().shape_string());
  }
  consumed_ = true;
  Gradients out;
  if (!nodes_[loss.id()].requires_grad) return out;

  grad_slot(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
  }
  for (auto& [name, id] : bound_params_) {
    Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    out.emplace(name, n.grad.empty() ? Tensor::zeros_like(n.value) : std::move(n.grad));
  }
  // Release activations; the graph cannot be reused.
  for (Node& n : nodes_) {
    n.backward = nullptr;
  }
  return out;
}

namespace {

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::shape, std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                               b.shape_string());
  }
}

Tensor map(const Tensor& a, auto fn) {
  Tensor out = Tensor::zeros_like(a);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i]);
  return out;
}

// dst (shape of a) += elementwise fn(i)
void accumulate_if(Graph& g, std::size_t id, auto fn) {
  if (!g.requires_grad(id)) return;
  Tensor& slot = g.grad_slot(id);
  for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += fn(i);
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    fail(ErrorKind::shape, "matmul: shape mismatch " + av.shape_string() + " x " + bv.shape_string());
  }
  return a.graph().emit("matmul", matmul(av, bv), {a, b}, [](Graph& g, std::size_t self) {
    const std::size_t ia = g.input(self, 0), ib = g.input(self, 1);
    const Tensor& dy = g.grad(self);
    if (g.requires_grad(ia)) {
      Tensor ga = matmul(dy, transpose(g.value(ib)));
      accumulate_if(g, ia, [&](std::size_t i) { return ga[i]; });
    }
    if (g.requires_grad(ib)) {
      Tensor gb = matmul(transpose(g.value(ia)), dy);
      accumulate_if(g, ib, [&](std::size_t i) { return gb[i]; });
    }
  });
}

Var transpose(Var a) {
  return a.graph().emit("transpose", transpose(a.value()), {a}, [](Graph& g, std::size_t self) {
    const std::size_t ia = g.input(self, 0);
    Tensor gt = transpose(g.grad(self));
    accumulate_if(g, ia, [&](std::size_t i) { return gt[i]; });
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  axpy(1.0, b.value(), out);
  return a.graph().emit("add", std::move(out), {a, b}, [](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    accumulate_if(g, g.input(self, 0), [&](std::size_t i) { return dy[i]; });
    accumulate_if(g, g.input(self, 1), [&](std::size_t i) { return dy[i]; });
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  axpy(-1.0, b.value(), out);
  return a.graph().emit("sub", std::move(out), {a, b}, [](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    accumulate_if(g, g.input(self, 0), [&](std::size_t i) { return dy[i]; });
    accumulate_if(g, g.input(self, 1), [&](std::size_t i) { return -dy[i]; });
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.graph().emit("mul", std::move(out), {a, b}, [](Graph& g, std::size_t self) {
    const std::size_t ia = g.input(self, 0), ib = g.input(self, 1);
    const Tensor& dy = g.grad(self);
    const Tensor& av = g.value(ia);
    const Tensor& bv = g.value(ib);
    accumulate_if(g, ia, [&](std::size_t i) { return dy[i] * bv[i]; });
    accumulate_if(g, ib, [&](std::size_t i) { return dy[i] * av[i]; });
  });
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  scale_inplace(out, c);
  return a.graph().emit("scale", std::move(out), {a}, [c](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    accumulate_if(g, g.input(self, 0), [&](std::size_t i) { return c * dy[i]; });
  });
}

Var add_scalar(Var a, double c) {
  Tensor out = map(a.value(), [c](double x) { return x + c; });
  return a.graph().emit("add_scalar", std::move(out), {a}, [](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    accumulate_if(g, g.input(self, 0), [&](std::size_t i) { return dy[i]; });
  });
}

Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    fail(ErrorKind::shape, "add_row: cannot broadcast " + rv.shape_string() + " over " +
                               av.shape_string());
  }
  Tensor out = av;
  const std::size_t n = av.rows(), m = av.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += rv[j];
  return a.graph().emit("add_row", std::move(out), {a, row}, [](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    accumulate_if(g, g.input(self, 0), [&](std::size_t i) { return dy[i]; });
    const std::size_t ir = g.input(self, 1);
    if (g.requires_grad(ir)) {
      Tensor& slot = g.grad_slot(ir);
      const std::size_t m = slot.size(), n = dy.size() / m;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) slot[j] += dy[i * m + j];
    }
  });
}

Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  Tensor out = map(a.value(), [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
  return a.graph().emit("gelu", std::move(out), {a}, [](Graph& g, std::size_t self) {
    const std::size_t ia = g.input(self, 0);
    const Tensor& x = g.value(ia);
    const Tensor& dy = g.grad(self);
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    accumulate_if(g, ia, [&](std::size_t i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      return dy[i] * (cdf + x[i] * pdf);
    });
  });
}

Var tanh(Var a) {
  Tensor out = map(a.value(), [](double x) { return std::tanh(x); });
  return a.graph().emit("tanh", std::move(out), {a}, [](Graph& g, std::size_t self) {
    const Tensor& y = g.value(self);
    const Tensor& dy = g.grad(self);
    accumulate_if(g, g.input(self, 0), [&](std::size_t i) { return dy[i] * (1.0 - y[i] * y[i]); });
  });
}

Var softmax_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), m = av.cols();
  Tensor out = av;
  for (std::size_t i = 0; i < n; ++i) {
    double* row = &out.data()[i * m];
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < m; ++j) row[j] /= s;
  }
  return a.graph().emit("softmax_rows", std::move(out), {a}, [n, m](Graph& g, std::size_t self) {
    const std::size_t ia = g.input(self, 0);
    if (!g.requires_grad(ia)) return;
    const Tensor& y = g.value(self);
    const Tensor& dy = g.grad(self);
    Tensor& slot = g.grad_slot(ia);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += dy[i * m + j] * y[i * m + j];
      for (std::size_t j = 0; j < m; ++j) slot[i * m + j] += y[i * m + j] * (dy[i * m + j] - dot);
    }
  });
}

Var log_softmax_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), m = av.cols();
  Tensor out = av;
  for (std::size_t i = 0; i < n; ++i) {
    double* row = &out.data()[i * m];
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < m; ++j) row[j] -= lse;
  }
  return a.graph().emit("log_softmax_rows", std::move(out), {a}, [n, m](Graph& g, std::size_t self) {
    const std::size_t ia = g.input(self, 0);
    if (!g.requires_grad(ia)) return;
    const Tensor& y = g.value(self);
    const Tensor& dy = g.grad(self);
    Tensor& slot = g.grad_slot(ia);
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < m; ++j) total += dy[i * m + j];
      for (std::size_t j = 0; j < m; ++j)
        slot[i * m + j] += dy[i * m + j] - std::exp(y[i * m + j]) * total;
    }
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), m = xv.cols();
  if (gamma.value().size() != m || beta.value().size() != m) {
    fail(ErrorKind::shape, "layer_norm_rows: input " + xv.shape_string() + " with gamma " +
                               gamma.value().shape_string() + ", beta " +
                               beta.value().shape_string());
  }
  // Normalized activations and per-row inverse std, kept for the backward pass.
  Tensor xhat({n, m});
  std::vector<double> inv_std(n);
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += xv[i * m + j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = xv[i * m + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat[i * m + j] = (xv[i * m + j] - mu) * inv_std[i];
      out[i * m + j] = xhat[i * m + j] * gamma.value()[j] + beta.value()[j];
    }
  }
  return x.graph().emit(
      "layer_norm_rows", std::move(out), {x, gamma, beta},
      [n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
        const std::size_t ix = g.input(self, 0), ig = g.input(self, 1), ib = g.input(self, 2);
        const Tensor& dy = g.grad(self);
        const Tensor& gv = g.value(ig);
        if (g.requires_grad(ig)) {
          Tensor& slot = g.grad_slot(ig);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) slot[j] += dy[i * m + j] * xhat[i * m + j];
        }
        if (g.requires_grad(ib)) {
          Tensor& slot = g.grad_slot(ib);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) slot[j] += dy[i * m + j];
        }
        if (g.requires_grad(ix)) {
          Tensor& slot = g.grad_slot(ix);
          std::vector<double> dxhat(m);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              dxhat[j] = dy[i * m + j] * gv[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat[i * m + j];
            }
            mean_d /= static_cast<double>(m);
            mean_dx /= static_cast<double>(m);
            for (std::size_t j = 0; j < m; ++j) {
              slot[i * m + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * m + j] * mean_dx);
            }
          }
        }
      });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), m = av.cols();
  if (count == 0 || begin + count > m) {
    fail(ErrorKind::shape, "slice_cols: columns [" + std::to_string(begin) + ", " +
                               std::to_string(begin + count) + ") of " + av.shape_string());
  }
  Tensor out({n, count});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = av[i * m + begin + j];
  return a.graph().emit("slice_cols", std::move(out), {a},
                        [n, m, begin, count](Graph& g, std::size_t self) {
                          const std::size_t ia = g.input(self, 0);
                          if (!g.requires_grad(ia)) return;
                          const Tensor& dy = g.grad(self);
                          Tensor& slot = g.grad_slot(ia);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < count; ++j)
                              slot[i * m + begin + j] += dy[i * count + j];
                        });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::shape, "concat_cols: no inputs");
  const std::size_t n = parts[0].value().rows();
  std::size_t m = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != n) {
      fail(ErrorKind::shape, "concat_cols: row mismatch " + parts[0].value().shape_string() +
                                 " vs " + p.value().shape_string());
    }
    m += p.value().cols();
  }
  Tensor out({n, m});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    const std::size_t c = pv.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * m + offset + j] = pv[i * c + j];
    offset += c;
  }
  return parts[0].graph().emit("concat_cols", std::move(out), parts,
                               [n, m](Graph& g, std::size_t self) {
                                 const Tensor& dy = g.grad(self);
                                 std::size_t offset = 0;
                                 for (std::size_t k = 0; k < g.input_count(self); ++k) {
                                   const std::size_t ik = g.input(self, k);
                                   const std::size_t c = g.value(ik).cols();
                                   if (g.requires_grad(ik)) {
                                     Tensor& slot = g.grad_slot(ik);
                                     for (std::size_t i = 0; i < n; ++i)
                                       for (std::size_t j = 0; j < c; ++j)
                                         slot[i * c + j] += dy[i * m + offset + j];
                                   }
                                   offset += c;
                                 }
                               });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::shape, "concat_rows: no inputs");
  const std::size_t m = parts[0].value().cols();
  std::size_t n = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != m) {
      fail(ErrorKind::shape, "concat_rows: column mismatch " + parts[0].value().shape_string() +
                                 " vs " + p.value().shape_string());
    }
    n += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(n * m);
  for (const Var& p : parts) {
    auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
  }
  return parts[0].graph().emit("concat_rows", Tensor({n, m}, std::move(data)), parts,
                               [](Graph& g, std::size_t self) {
                                 const Tensor& dy = g.grad(self);
                                 std::size_t offset = 0;
                                 for (std::size_t k = 0; k < g.input_count(self); ++k) {
                                   const std::size_t ik = g.input(self, k);
                                   const std::size_t len = g.value(ik).size();
                                   accumulate_if(g, ik, [&](std::size_t i) { return dy[offset + i]; });
                                   offset += len;
                                 }
                               });
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), m = av.cols();
  Tensor out({1, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += av[i * m + j];
  scale_inplace(out, 1.0 / static_cast<double>(n));
  return a.graph().emit("mean_rows", std::move(out), {a}, [n, m](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    const double inv = 1.0 / static_cast<double>(n);
    accumulate_if(g, g.input(self, 0), [&](std::size_t i) { return dy[i % m] * inv; });
  });
}

Var pick(Var a, std::size_t r, std::size_t c) {
  const Tensor& av = a.value();
  if (r >= av.rows() || c >= av.cols()) {
    fail(ErrorKind::shape, "pick: index (" + std::to_string(r) + ", " + std::to_string(c) +
                               ") outside " + av.shape_string());
  }
  const std::size_t flat = r * av.cols() + c;
  return a.graph().emit("pick", Tensor::scalar(av[flat]), {a}, [flat](Graph& g, std::size_t self) {
    const std::size_t ia = g.input(self, 0);
    if (g.requires_grad(ia)) g.grad_slot(ia)[flat] += g.grad(self)[0];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph().emit("sum", Tensor::scalar(s), {a}, [](Graph& g, std::size_t self) {
    const double dy = g.grad(self)[0];
    accumulate_if(g, g.input(self, 0), [&](std::size_t) { return dy; });
  });
}

Var mean_of(std::span<const Var> scalars) {
  if (scalars.empty()) fail(ErrorKind::shape, "mean_of: no inputs");
  double s = 0.0;
  for (const Var& v : scalars) {
    if (v.value().size() != 1) {
      fail(ErrorKind::shape, "mean_of: non-scalar input " + v.value().shape_string());
    }
    s += v.value()[0];
  }
  const double inv = 1.0 / static_cast<double>(scalars.size());
  return scalars[0].graph().emit("mean_of", Tensor::scalar(s * inv), scalars,
                                 [inv](Graph& g, std::size_t self) {
                                   const double dy = g.grad(self)[0] * inv;
                                   for (std::size_t k = 0; k < g.input_count(self); ++k) {
                                     const std::size_t ik = g.input(self, k);
                                     if (g.requires_grad(ik)) g.grad_slot(ik)[0] += dy;
                                   }
                                 });
}

}  // namespace mldg
