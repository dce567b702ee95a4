#ifndef VITAE_PARAMS_HPP_
#define VITAE_PARAMS_HPP_

#include <string>
#include <unordered_map>
#include <vector>

#include "vitae/tensor.hpp"

namespace vitae {

// Ordered map name -> tensor. Insertion order is the canonical iteration and
// serialization order. Trainable entries are optimizer targets; buffer
// entries (BN running stats) are checkpointed but never updated by the
// optimizer.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> t, bool trainable = true) {
    if (index_.count(name))
      throw UsageError("ParamStore: duplicate parameter name " + name);
    t.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(t), trainable});
    return entries_.back().tensor;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw UsageError("ParamStore: unknown parameter " + name);
    return entries_[it->second].tensor;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw UsageError("ParamStore: unknown parameter " + name);
    return entries_[it->second].tensor;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  int64_t total_elements(bool trainable_only = true) const {
    int64_t n = 0;
    for (const auto& e : entries_)
      if (!trainable_only || e.trainable) n += e.tensor.numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace vitae

#endif
