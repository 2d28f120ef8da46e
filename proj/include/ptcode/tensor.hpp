#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ptcode {

template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Row-major so that embedding rows are contiguous and the on-disk layout is a
// straight copy.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ParamId {
  std::size_t index = 0;
  friend bool operator==(ParamId, ParamId) = default;
};

template <class S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;
  bool trainable = true;

  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

// Every trainable tensor of a model, addressable by name or by ParamId.
// Vectors are stored as n x 1 matrices.
template <class S>
class ParameterStore {
 public:
  using Scalar = S;

  ParamId add(std::string name, std::size_t rows, std::size_t cols, bool trainable = true) {
    if (by_name_.contains(name)) throw std::invalid_argument("duplicate parameter: " + name);
    ParamId id{params_.size()};
    Parameter<S> p;
    p.name = name;
    p.value = Mat<S>::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    p.grad = Mat<S>::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    p.trainable = trainable;
    params_.push_back(std::move(p));
    by_name_.emplace(std::move(name), id.index);
    return id;
  }

  bool contains(const std::string& name) const { return by_name_.contains(name); }

  ParamId id(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("unknown parameter: " + name);
    return ParamId{it->second};
  }

  Parameter<S>& operator[](ParamId id) { return params_.at(id.index); }
  const Parameter<S>& operator[](ParamId id) const { return params_.at(id.index); }
  Parameter<S>& operator[](const std::string& name) { return params_[id(name).index]; }
  const Parameter<S>& operator[](const std::string& name) const { return params_[id(name).index]; }

  std::span<Parameter<S>> all() { return params_; }
  std::span<const Parameter<S>> all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  std::size_t coordinate_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  template <class T>
  ParameterStore<T> cast() const {
    ParameterStore<T> out;
    for (const auto& p : params_) {
      auto id = out.add(p.name, static_cast<std::size_t>(p.value.rows()),
                        static_cast<std::size_t>(p.value.cols()), p.trainable);
      out[id].value = p.value.template cast<T>();
    }
    return out;
  }

 private:
  std::vector<Parameter<S>> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

}  // namespace ptcode
