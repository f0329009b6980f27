#pragma once

#include "srdit/autograd.hpp"

#include <deque>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace srdit {

/// Ordered, name-addressable parameter storage with stable addresses.
template <typename T>
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(const ParamSet&) = delete;
  ParamSet& operator=(const ParamSet&) = delete;

  Parameter<T>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool trainable = true) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    Parameter<T>& p = params_.emplace_back();
    p.name = name;
    p.value.setZero(rows, cols);
    p.trainable = trainable;
    index_.emplace(name, params_.size() - 1);
    return p;
  }

  [[nodiscard]] Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  [[nodiscard]] const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<T>& at(const std::string& name) {
    auto* p = find(name);
    if (p == nullptr) throw std::out_of_range("no parameter named '" + name + "'");
    return *p;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  [[nodiscard]] std::size_t size() const { return params_.size(); }
  [[nodiscard]] std::size_t numel(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (!trainable_only || p.trainable) n += static_cast<std::size_t>(p.value.size());
    }
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace init {

template <typename T>
void normal(Parameter<T>& p, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(dist(rng));
}

template <typename T>
void xavier_uniform(Parameter<T>& p, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(dist(rng));
}

}  // namespace init
}  // namespace srdit
