#pragma once

#include <map>
#include <string>
#include <vector>

#include "sfda/errors.hpp"
#include "sfda/params.hpp"

namespace sfda {

/// SGD with momentum and L2 weight decay, one learning rate per parameter
/// group. Update per tensor:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr[group] * v
/// Gradients are zeroed after the step.
template <class S>
class SgdMomentum {
 public:
  double momentum = 0.9;
  double weight_decay = 1e-3;
  std::map<std::string, double> lr_per_group;

  void step(ModelParams<S>& params) {
    for (const auto& g : params.groups()) {
      if (!params.is_frozen(g) && lr_per_group.find(g) == lr_per_group.end()) {
        throw ContractError("sgd_step: no learning rate for group " + g);
      }
    }
    for (auto& e : params.entries()) {
      if (!params.trainable(e)) continue;
      if (!e.tensor.grad_allocated()) {
        throw ContractError("sgd_step: missing gradient on " + e.group + "/" +
                            e.name);
      }
      const std::string key = e.group + "/" + e.name;
      auto& v = velocity_[key];
      if (v.size() != e.tensor.numel()) v.assign(e.tensor.numel(), S(0));
      const S mom = static_cast<S>(momentum);
      const S wd = static_cast<S>(weight_decay);
      const S lr = static_cast<S>(lr_per_group.at(e.group));
      S* p = e.tensor.data();
      const auto& grad = e.tensor.grad();
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = mom * v[i] + grad[i] + wd * p[i];
        p[i] -= lr * v[i];
      }
    }
    params.zero_grads();
  }

  const std::vector<S>* velocity(const std::string& group,
                                 const std::string& name) const {
    auto it = velocity_.find(group + "/" + name);
    return it == velocity_.end() ? nullptr : &it->second;
  }

 private:
  std::map<std::string, std::vector<S>> velocity_;
};

/// Convenience named like the operation it performs.
template <class S>
void sgd_step(ModelParams<S>& params, SgdMomentum<S>& state) {
  state.step(params);
}

}  // namespace sfda
