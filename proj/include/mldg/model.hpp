#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mldg/autodiff.hpp"
#include "mldg/param_store.hpp"
#include "mldg/tensor.hpp"

namespace mldg {

struct Example;

struct EncoderConfig {
  int n_layers = 2;
  int d_model = 16;
  int n_heads = 2;
  int d_ff = 32;
  int seq_len = 32;
  int head_hidden = 16;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

// The four attention projections that receive adapters.
enum class AdaptTarget { query, key, value, out_proj };
inline constexpr std::array<AdaptTarget, 4> kAdaptTargets = {
    AdaptTarget::query, AdaptTarget::key, AdaptTarget::value, AdaptTarget::out_proj};
const char* to_string(AdaptTarget target);

// What is trainable:
//   lora      frozen encoder, adapters + head train
//   full      no adapters, every weight trains
//   head_only no adapters, frozen encoder, head trains
enum class TrainMode { lora, full, head_only };
const char* to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& s);

struct ModelOptions {
  std::optional<int> rank;    // set -> LoRA mode
  bool freeze_base = true;    // only consulted without a rank
  double lora_scale = 2.0;    // multiplies A*B directly
  double lora_init_std = 0.02;
};

struct LoraAdapter {
  Tensor A;  // d x r
  Tensor B;  // r x m
  int rank = 0;
  double scale = 2.0;
  AdaptTarget target = AdaptTarget::query;
  int layer_index = 0;
};

// scale * A * B.
Tensor adapter_delta(const LoraAdapter& adapter);

// Scalar count of trainable weights with adapters on n_targets projections
// per layer plus a back-end of head_params weights.
std::uint64_t count_trainable(std::uint64_t layers, std::uint64_t d, std::uint64_t m,
                              std::uint64_t rank, std::uint64_t n_targets,
                              std::uint64_t head_params);

std::string projection_prefix(int layer, AdaptTarget target);

// Pre-norm transformer encoder over (seq_len x d_model) feature frames,
// mean-pooled into a two-layer classifier with log-softmax output.
// Class 0 is bonafide, class 1 is spoof. The encoder is stateless; all
// weights live in a ParamStore passed to each call, which lets the same
// architecture run on clones.
class Encoder {
 public:
  Encoder(EncoderConfig config, ModelOptions options);

  const EncoderConfig& config() const { return config_; }
  const ModelOptions& options() const { return options_; }
  TrainMode mode() const;
  std::optional<int> rank() const { return options_.rank; }

  // Fresh parameters. Base, adapter and head weights draw from separate
  // sub-streams, so the base is identical for every rank and mode.
  ParamStore init_params(std::uint64_t seed) const;

  // (1 x 2) log-probabilities for one example.
  Var log_probs(Graph& graph, const ParamStore& params, const Tensor& features) const;
  // Mean NLL over a batch.
  Var batch_loss(Graph& graph, const ParamStore& params,
                 std::span<const Example* const> batch) const;
  // log p(bonafide) - log p(spoof); higher means more bonafide.
  double score(const ParamStore& params, const Tensor& features) const;
  Tensor logits(const ParamStore& params, const Tensor& features) const;

  std::vector<LoraAdapter> adapters(const ParamStore& params) const;
  std::size_t head_param_count() const;

 private:
  Var projection(Graph& graph, const ParamStore& params, Var x, int layer,
                 AdaptTarget target) const;
  Var linear(Graph& graph, const ParamStore& params, Var x, const std::string& prefix) const;
  Var encode(Graph& graph, const ParamStore& params, const Tensor& features) const;

  EncoderConfig config_;
  ModelOptions options_;
};

struct Model {
  Encoder encoder;
  ParamStore params;
};

Model build_model(const EncoderConfig& config, const ModelOptions& options, std::uint64_t seed);

}  // namespace mldg
