#pragma once

#include <set>
#include <string>
#include <vector>

#include "sfda/errors.hpp"
#include "sfda/tensor.hpp"

namespace sfda {

namespace group {
inline constexpr const char* kBackbone = "backbone";
inline constexpr const char* kTransformer = "transformer";
inline constexpr const char* kBottleneck = "bottleneck";
inline constexpr const char* kClassifier = "classifier";
}  // namespace group

/// Named parameter collection partitioned into groups. Entries keep their
/// registration order, which fixes the checkpoint byte layout. Buffers
/// (batch-norm running statistics) live next to the weights but never
/// receive gradients.
template <class S>
class ModelParams {
 public:
  struct Entry {
    std::string group;
    std::string name;
    Tensor<S> tensor;
    bool buffer = false;
  };

  void add(const std::string& group, const std::string& name, Tensor<S> t,
           bool buffer = false) {
    if (find(group, name) != nullptr) {
      throw ContractError("params: duplicate entry " + group + "/" + name);
    }
    t.set_requires_grad(!buffer);
    entries_.push_back(Entry{group, name, std::move(t), buffer});
  }

  Tensor<S>& at(const std::string& group, const std::string& name) {
    Entry* e = find(group, name);
    if (!e) throw ContractError("params: no entry " + group + "/" + name);
    return e->tensor;
  }

  const Tensor<S>& at(const std::string& group, const std::string& name) const {
    return const_cast<ModelParams*>(this)->at(group, name);
  }

  bool has(const std::string& group, const std::string& name) const {
    return const_cast<ModelParams*>(this)->find(group, name) != nullptr;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::set<std::string>& frozen() { return frozen_; }
  const std::set<std::string>& frozen() const { return frozen_; }

  bool is_frozen(const std::string& group) const {
    return frozen_.count(group) > 0;
  }

  /// Marks a group frozen and stops its tensors from collecting gradients.
  void freeze(const std::string& group) {
    frozen_.insert(group);
    for (auto& e : entries_) {
      if (e.group == group) e.tensor.set_requires_grad(false);
    }
  }

  bool trainable(const Entry& e) const {
    return !e.buffer && !is_frozen(e.group);
  }

  std::set<std::string> groups() const {
    std::set<std::string> g;
    for (const auto& e : entries_) g.insert(e.group);
    return g;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Deep copy; frozen set is carried over.
  ModelParams clone() const {
    ModelParams p;
    for (const auto& e : entries_) {
      Entry c{e.group, e.name, e.tensor.clone(), e.buffer};
      p.entries_.push_back(std::move(c));
    }
    p.frozen_ = frozen_;
    for (auto& e : p.entries_) {
      e.tensor.set_requires_grad(!e.buffer && !p.is_frozen(e.group));
    }
    return p;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> p;
    for (const auto& e : entries_) {
      p.add(e.group, e.name, e.tensor.template cast<U>(), e.buffer);
    }
    for (const auto& g : frozen_) p.freeze(g);
    return p;
  }

 private:
  Entry* find(const std::string& group, const std::string& name) {
    for (auto& e : entries_) {
      if (e.group == group && e.name == name) return &e;
    }
    return nullptr;
  }

  std::vector<Entry> entries_;
  std::set<std::string> frozen_;
};

/// Elementwise EMA of the feature-extractor groups:
/// teacher <- momentum * teacher + (1 - momentum) * student.
/// The classifier group is skipped (it is frozen and shared during
/// adaptation); batch-norm running buffers are averaged like weights.
template <class S>
void ema_update(ModelParams<S>& teacher, const ModelParams<S>& student,
                double momentum) {
  if (teacher.entries().size() != student.entries().size()) {
    throw ContractError("ema_update: parameter sets differ in size");
  }
  const S m = static_cast<S>(momentum);
  for (std::size_t i = 0; i < teacher.entries().size(); ++i) {
    auto& te = teacher.entries()[i];
    const auto& se = student.entries()[i];
    if (te.group != se.group || te.name != se.name ||
        te.tensor.shape() != se.tensor.shape()) {
      throw ContractError("ema_update: mismatch at " + te.group + "/" +
                          te.name);
    }
    if (te.group == group::kClassifier) continue;
    S* t = te.tensor.data();
    const S* s = se.tensor.data();
    const std::size_t n = te.tensor.numel();
    for (std::size_t j = 0; j < n; ++j) {
      t[j] = m * t[j] + (S(1) - m) * s[j];
    }
  }
}

}  // namespace sfda
