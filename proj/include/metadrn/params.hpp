#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metadrn/tensor.hpp"

namespace metadrn {

// Named, ordered collection of tensors. Iteration order is insertion order,
// which makes reductions and serialization deterministic.
template <typename T>
class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  void add(std::string name, Tensor<T> t) {
    check_arg(!index_.count(name), "ParamSet: duplicate name '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(std::move(name), std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    check_arg(it != index_.end(), "ParamSet: no parameter named '" + name + "'");
    return items_[it->second].second;
  }

  void set(const std::string& name, Tensor<T> t) {
    auto it = index_.find(name);
    check_arg(it != index_.end(), "ParamSet: no parameter named '" + name + "'");
    items_[it->second].second = std::move(t);
  }

  size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const Entry& entry(size_t i) const { return items_[i]; }

  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  bool congruent(const ParamSet& other) const {
    if (items_.size() != other.items_.size()) return false;
    for (size_t i = 0; i < items_.size(); ++i) {
      if (items_[i].first != other.items_[i].first) return false;
      if (items_[i].second.shape() != other.items_[i].second.shape()) return false;
    }
    return true;
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(items_.size());
    for (const auto& [name, t] : items_) out.push_back(t);
    return out;
  }

  // Fresh leaves sharing storage, marked differentiable. Leaves the source
  // set untouched.
  ParamSet leaf_view() const {
    ParamSet out;
    for (const auto& [name, t] : items_) out.add(name, t.detach().set_requires_grad(true));
    return out;
  }

  ParamSet detached() const {
    ParamSet out;
    for (const auto& [name, t] : items_) out.add(name, t.detach());
    return out;
  }

  template <typename F>
  ParamSet map(F&& fn) const {
    ParamSet out;
    for (const auto& [name, t] : items_) out.add(name, fn(name, t));
    return out;
  }

  template <typename F>
  ParamSet zip(const ParamSet& other, F&& fn) const {
    check_arg(congruent(other), "ParamSet::zip: sets are not congruent");
    ParamSet out;
    for (size_t i = 0; i < items_.size(); ++i)
      out.add(items_[i].first, fn(items_[i].first, items_[i].second, other.items_[i].second));
    return out;
  }

 private:
  std::vector<Entry> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Gradient of a scalar loss with respect to every tensor in `wrt`, keyed the
// same way. Unreached parameters get zeros.
template <typename T>
ParamSet<T> backward(const Tensor<T>& loss, const ParamSet<T>& wrt, bool create_graph = false) {
  auto grads = backward(loss, wrt.tensors(), create_graph);
  ParamSet<T> out;
  for (size_t i = 0; i < wrt.size(); ++i) out.add(wrt.entry(i).first, grads[i]);
  return out;
}

}  // namespace metadrn
