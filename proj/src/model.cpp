#include "mldg/model.hpp"

#include <cmath>

#include "mldg/data.hpp"
#include "mldg/error.hpp"
#include "mldg/rng.hpp"

namespace mldg {

void EncoderConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || seq_len < 1 || head_hidden < 1) {
    fail(ErrorKind::config, "encoder config: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) {
    fail(ErrorKind::config, "encoder config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
}

const char* to_string(AdaptTarget target) {
  switch (target) {
    case AdaptTarget::query: return "query";
    case AdaptTarget::key: return "key";
    case AdaptTarget::value: return "value";
    case AdaptTarget::out_proj: return "out_proj";
  }
  return "?";
}

const char* to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::lora: return "lora";
    case TrainMode::full: return "full";
    case TrainMode::head_only: return "head_only";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "lora") return TrainMode::lora;
  if (s == "full") return TrainMode::full;
  if (s == "head_only") return TrainMode::head_only;
  fail(ErrorKind::config, "unknown train mode '" + s + "'");
}

Tensor adapter_delta(const LoraAdapter& adapter) {
  Tensor delta = matmul(adapter.A, adapter.B);
  scale_inplace(delta, adapter.scale);
  return delta;
}

std::uint64_t count_trainable(std::uint64_t layers, std::uint64_t d, std::uint64_t m,
                              std::uint64_t rank, std::uint64_t n_targets,
                              std::uint64_t head_params) {
  return layers * n_targets * rank * (d + m) + head_params;
}

std::string projection_prefix(int layer, AdaptTarget target) {
  static constexpr const char* short_names[] = {"q", "k", "v", "out"};
  return "encoder.layers." + std::to_string(layer) + ".attn." +
         short_names[static_cast<int>(target)];
}

namespace {

std::string layer_prefix(int layer) { return "encoder.layers." + std::to_string(layer); }

Tensor gaussian(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  return gaussian(rng, {fan_in, fan_out}, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
}

}  // namespace

Encoder::Encoder(EncoderConfig config, ModelOptions options)
    : config_(config), options_(options) {
  config_.validate();
  if (options_.rank) {
    if (*options_.rank < 1) fail(ErrorKind::config, "LoRA rank must be >= 1");
    if (*options_.rank > config_.d_model) {
      fail(ErrorKind::config, "LoRA rank " + std::to_string(*options_.rank) +
                                  " exceeds d_model " + std::to_string(config_.d_model));
    }
  }
}

TrainMode Encoder::mode() const {
  if (options_.rank) return TrainMode::lora;
  return options_.freeze_base ? TrainMode::head_only : TrainMode::full;
}

ParamStore Encoder::init_params(std::uint64_t seed) const {
  const Rng root(seed);
  Rng base = root.fork("init.base");
  Rng lora = root.fork("init.lora");
  Rng head = root.fork("init.head");
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto ff = static_cast<std::size_t>(config_.d_ff);
  const auto hh = static_cast<std::size_t>(config_.head_hidden);
  const bool base_trainable = mode() == TrainMode::full;

  ParamStore store;
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    store.add(p + ".ln1.gamma", Tensor({d}, 1.0), base_trainable);
    store.add(p + ".ln1.beta", Tensor({d}, 0.0), base_trainable);
    for (AdaptTarget t : kAdaptTargets) {
      const std::string q = projection_prefix(l, t);
      store.add(q + ".weight", xavier(base, d, d), base_trainable);
      store.add(q + ".bias", gaussian(base, {d}, 0.02), base_trainable);
    }
    store.add(p + ".ln2.gamma", Tensor({d}, 1.0), base_trainable);
    store.add(p + ".ln2.beta", Tensor({d}, 0.0), base_trainable);
    store.add(p + ".ffn.fc1.weight", xavier(base, d, ff), base_trainable);
    store.add(p + ".ffn.fc1.bias", gaussian(base, {ff}, 0.02), base_trainable);
    store.add(p + ".ffn.fc2.weight", xavier(base, ff, d), base_trainable);
    store.add(p + ".ffn.fc2.bias", gaussian(base, {d}, 0.02), base_trainable);
  }
  store.add("encoder.ln_final.gamma", Tensor({d}, 1.0), base_trainable);
  store.add("encoder.ln_final.beta", Tensor({d}, 0.0), base_trainable);

  if (options_.rank) {
    const auto r = static_cast<std::size_t>(*options_.rank);
    for (int l = 0; l < config_.n_layers; ++l) {
      for (AdaptTarget t : kAdaptTargets) {
        const std::string q = projection_prefix(l, t);
        store.add(q + ".lora_A", gaussian(lora, {d, r}, options_.lora_init_std), true);
        store.add(q + ".lora_B", Tensor({r, d}, 0.0), true);
      }
    }
  }

  store.add("head.fc1.weight", xavier(head, d, hh), true);
  store.add("head.fc1.bias", Tensor({hh}, 0.0), true);
  store.add("head.fc2.weight", xavier(head, hh, 2), true);
  store.add("head.fc2.bias", Tensor({2}, 0.0), true);
  return store;
}

Var Encoder::linear(Graph& graph, const ParamStore& params, Var x,
                    const std::string& prefix) const {
  return add_row(matmul(x, graph.param(params, prefix + ".weight")),
                 graph.param(params, prefix + ".bias"));
}

Var Encoder::projection(Graph& graph, const ParamStore& params, Var x, int layer,
                        AdaptTarget target) const {
  const std::string prefix = projection_prefix(layer, target);
  Var y = linear(graph, params, x, prefix);
  if (!options_.rank) return y;
  Var low = matmul(matmul(x, graph.param(params, prefix + ".lora_A")),
                   graph.param(params, prefix + ".lora_B"));
  return add(y, scale(low, options_.lora_scale));
}

Var Encoder::encode(Graph& graph, const ParamStore& params, const Tensor& features) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  if (features.shape().size() != 2 || features.cols() != d ||
      features.rows() != static_cast<std::size_t>(config_.seq_len)) {
    fail(ErrorKind::shape, "encoder: expected features [" + std::to_string(config_.seq_len) +
                               "x" + std::to_string(d) + "], got " + features.shape_string());
  }
  const std::size_t heads = static_cast<std::size_t>(config_.n_heads);
  const std::size_t dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Var h = graph.constant(features);
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    Var n1 = layer_norm_rows(h, graph.param(params, p + ".ln1.gamma"),
                             graph.param(params, p + ".ln1.beta"));
    Var q = projection(graph, params, n1, l, AdaptTarget::query);
    Var k = projection(graph, params, n1, l, AdaptTarget::key);
    Var v = projection(graph, params, n1, l, AdaptTarget::value);
    std::vector<Var> head_out;
    head_out.reserve(heads);
    for (std::size_t hi = 0; hi < heads; ++hi) {
      Var qh = slice_cols(q, hi * dh, dh);
      Var kh = slice_cols(k, hi * dh, dh);
      Var vh = slice_cols(v, hi * dh, dh);
      Var att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dh));
      head_out.push_back(matmul(att, vh));
    }
    Var mixed = heads == 1 ? head_out[0] : concat_cols(head_out);
    h = add(h, projection(graph, params, mixed, l, AdaptTarget::out_proj));

    Var n2 = layer_norm_rows(h, graph.param(params, p + ".ln2.gamma"),
                             graph.param(params, p + ".ln2.beta"));
    Var ff = linear(graph, params, gelu(linear(graph, params, n2, p + ".ffn.fc1")), p + ".ffn.fc2");
    h = add(h, ff);
  }
  return layer_norm_rows(h, graph.param(params, "encoder.ln_final.gamma"),
                         graph.param(params, "encoder.ln_final.beta"));
}

Var Encoder::log_probs(Graph& graph, const ParamStore& params, const Tensor& features) const {
  Var pooled = mean_rows(encode(graph, params, features));
  Var hidden = gelu(linear(graph, params, pooled, "head.fc1"));
  return log_softmax_rows(linear(graph, params, hidden, "head.fc2"));
}

Var Encoder::batch_loss(Graph& graph, const ParamStore& params,
                        std::span<const Example* const> batch) const {
  if (batch.empty()) fail(ErrorKind::data, "batch_loss: empty batch");
  std::vector<Var> losses;
  losses.reserve(batch.size());
  for (const Example* ex : batch) {
    if (ex->label != kBonafide && ex->label != kSpoof) {
      fail(ErrorKind::data, "batch_loss: example '" + ex->example_id + "' has label " +
                                std::to_string(ex->label));
    }
    Var lp = log_probs(graph, params, ex->features());
    losses.push_back(scale(pick(lp, 0, static_cast<std::size_t>(ex->label)), -1.0));
  }
  return mean_of(losses);
}

Tensor Encoder::logits(const ParamStore& params, const Tensor& features) const {
  Graph graph(GradMode::disabled);
  return log_probs(graph, params, features).value();
}

double Encoder::score(const ParamStore& params, const Tensor& features) const {
  const Tensor lp = logits(params, features);
  return lp[kBonafide] - lp[kSpoof];
}

std::vector<LoraAdapter> Encoder::adapters(const ParamStore& params) const {
  std::vector<LoraAdapter> out;
  if (!options_.rank) return out;
  for (int l = 0; l < config_.n_layers; ++l) {
    for (AdaptTarget t : kAdaptTargets) {
      const std::string q = projection_prefix(l, t);
      out.push_back({params.value(q + ".lora_A"), params.value(q + ".lora_B"), *options_.rank,
                     options_.lora_scale, t, l});
    }
  }
  return out;
}

std::size_t Encoder::head_param_count() const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto hh = static_cast<std::size_t>(config_.head_hidden);
  return d * hh + hh + hh * 2 + 2;
}

Model build_model(const EncoderConfig& config, const ModelOptions& options, std::uint64_t seed) {
  Encoder encoder(config, options);
  ParamStore params = encoder.init_params(seed);
  return {std::move(encoder), std::move(params)};
}

}  // namespace mldg
