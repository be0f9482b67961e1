#include "mldg/param_store.hpp"

#include "mldg/error.hpp"

namespace mldg {

void accumulate(Gradients& dst, const Gradients& src, double alpha) {
  for (const auto& [name, g] : src) {
    auto it = dst.find(name);
    if (it == dst.end()) it = dst.emplace(name, Tensor::zeros_like(g)).first;
    axpy(alpha, g, it->second);
  }
}

void scale(Gradients& grads, double alpha) {
  for (auto& [name, g] : grads) scale_inplace(g, alpha);
}

bool all_finite(const Gradients& grads) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) return false;
  }
  return true;
}

void ParamStore::add(std::string name, Tensor value, bool trainable) {
  if (index_.contains(name)) fail(ErrorKind::config, "param store: duplicate name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value), trainable});
}

bool ParamStore::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

std::size_t ParamStore::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) fail(ErrorKind::config, "param store: no parameter '" + std::string(name) + "'");
  return it->second;
}

const ParamStore::Entry& ParamStore::entry(std::string_view name) const {
  return entries_[index_of(name)];
}

Tensor& ParamStore::mutable_value(std::string_view name) { return entries_[index_of(name)].value; }

void ParamStore::set_trainable(std::string_view name, bool trainable) {
  entries_[index_of(name)].trainable = trainable;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (e.trainable) out.push_back(e.name);
  }
  return out;
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.value.size();
  }
  return n;
}

std::size_t ParamStore::total_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

}  // namespace mldg
