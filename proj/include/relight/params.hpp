#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "relight/autograd.hpp"
#include "relight/random.hpp"

namespace relight {

/// Named, ordered collection of trainable tensors.
template <class T>
class ParamStore {
 public:
  ag::Var<T> add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.push_back(ag::leaf(std::move(value), true));
    return vars_.back();
  }

  /// Fan-in scaled uniform: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  ag::Var<T> add_uniform(const std::string& name, Shape shape, int fan_in, Rng& rng) {
    return add_uniform_bound(name, std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
  }

  ag::Var<T> add_uniform_bound(const std::string& name, Shape shape, double bound, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(uniform(rng, -bound, bound));
    return add(name, std::move(t));
  }

  ag::Var<T> add_constant(const std::string& name, Shape shape, T value) { return add(name, Tensor<T>(std::move(shape), value)); }

  const ag::Var<T>& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return vars_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<ag::Var<T>>& vars() const { return vars_; }
  std::size_t size() const { return vars_.size(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& v : vars_) v->zero_grad();
  }

  bool all_finite() const {
    for (const auto& v : vars_)
      if (!v->value.all_finite()) return false;
    return true;
  }

  /// Deep copy with the same names and values, converted to U.
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < vars_.size(); ++i) out.add(names_[i], vars_[i]->value.template cast<U>());
    return out;
  }

  ParamStore clone() const { return cast<T>(); }

 private:
  std::vector<std::string> names_;
  std::vector<ag::Var<T>> vars_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer state, one moment pair per parameter.
template <class T>
struct AdamState {
  AdamConfig config;
  long long step = 0;
  std::vector<Tensor<T>> m, v;

  void init(const ParamStore<T>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params.vars()) {
      m.emplace_back(p->value.shape);
      v.emplace_back(p->value.shape);
    }
    step = 0;
  }

  /// Applies one update with the gradients currently stored in params.
  void update(ParamStore<T>& params, double lr) {
    if (m.size() != params.size()) init(params);
    ++step;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
    const auto& vars = params.vars();
    for (std::size_t k = 0; k < vars.size(); ++k) {
      auto& p = *vars[k];
      if (p.grad.size() != p.value.size()) continue;
      auto& mk = m[k];
      auto& vk = v[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        mk[i] = static_cast<T>(config.beta1 * mk[i] + (1.0 - config.beta1) * g);
        vk[i] = static_cast<T>(config.beta2 * vk[i] + (1.0 - config.beta2) * g * g);
        const double mh = mk[i] / bc1, vh = vk[i] / bc2;
        p.value[i] = static_cast<T>(p.value[i] - lr * mh / (std::sqrt(vh) + config.eps));
      }
    }
  }
};

}  // namespace relight
