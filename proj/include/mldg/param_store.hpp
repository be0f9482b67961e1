#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mldg/tensor.hpp"

namespace mldg {

// Gradient buffers keyed by parameter name. std::map gives a fixed
// iteration order, which pins accumulation order across runs.
using Gradients = std::map<std::string, Tensor>;

// dst += alpha * src for every entry of src; missing entries are created.
void accumulate(Gradients& dst, const Gradients& src, double alpha = 1.0);
void scale(Gradients& grads, double alpha);
bool all_finite(const Gradients& grads);

// Named tensors split into frozen and trainable entries. Iteration order is
// insertion order. Copies are deep.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = false;

    bool operator==(const Entry&) const = default;
  };

  void add(std::string name, Tensor value, bool trainable);

  bool contains(std::string_view name) const;
  const Entry& entry(std::string_view name) const;
  const Tensor& value(std::string_view name) const { return entry(name).value; }
  Tensor& mutable_value(std::string_view name);
  bool trainable(std::string_view name) const { return entry(name).trainable; }
  void set_trainable(std::string_view name, bool trainable);

  std::span<const Entry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::vector<std::string> trainable_names() const;
  // Total scalar count over trainable entries.
  std::size_t trainable_count() const;
  std::size_t total_count() const;

  // Explicit deep copy, used for the meta-learning clone.
  ParamStore clone() const { return *this; }

  bool operator==(const ParamStore& other) const { return entries_ == other.entries_; }

 private:
  std::size_t index_of(std::string_view name) const;

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mldg
