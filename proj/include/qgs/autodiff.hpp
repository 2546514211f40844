#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "qgs/tensor.hpp"

namespace qgs {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

// Named parameter storage. Addresses of parameters are stable for the lifetime
// of the set, so model components may keep raw pointers into it.
template <class T>
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(const ParamSet&) = delete;
  ParamSet& operator=(const ParamSet&) = delete;
  ParamSet(ParamSet&&) noexcept = default;
  ParamSet& operator=(ParamSet&&) noexcept = default;

  // Returns the parameter called `name`, creating it from `init` if absent.
  // An existing parameter must have the requested shape.
  Parameter<T>& ensure(const std::string& name, const Shape& shape,
                       const std::function<Tensor<T>()>& init) {
    if (auto* p = find(name)) {
      if (p->value.shape() != shape) {
        throw ShapeError("parameter '" + name + "' has shape " + to_string(p->value.shape()) +
                         ", expected " + to_string(shape));
      }
      return *p;
    }
    Tensor<T> value = init();
    if (value.shape() != shape) {
      throw ShapeError("initializer for '" + name + "' produced " + to_string(value.shape()) +
                       ", expected " + to_string(shape));
    }
    return add(name, std::move(value));
  }

  Parameter<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Tensor<T>(value.shape());
    p->value = std::move(value);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Parameter<T>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw Error("unknown parameter '" + name + "'");
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T{});
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& p : params_) {
      auto& q = out.add(p->name, p->value.template cast<U>());
      q.trainable = p->trainable;
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
class Tape;

// Handle to a value recorded on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t size() const { return value().size(); }
  bool needs_grad() const { return tape_->needs_grad(id_); }
  bool valid() const { return tape_ != nullptr; }

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Define-by-run reverse-mode tape. A fresh tape is built for every forward
// pass; backward() walks the recorded nodes in strict reverse order and then
// accumulates leaf gradients into their Parameters.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) {
    Node& n = nodes_.emplace_back();
    n.own = std::move(value);
    return {this, nodes_.size() - 1};
  }

  // Leaf bound to a parameter. The value is borrowed, not copied; the
  // parameter must not be modified while the tape is alive.
  Var<T> param(Parameter<T>& p) {
    Node& n = nodes_.emplace_back();
    n.ref = &p.value;
    n.needs_grad = grad_enabled_ && p.trainable;
    n.param = n.needs_grad ? &p : nullptr;
    return {this, nodes_.size() - 1};
  }

  // Records the output of an op. The backward closure is kept only when some
  // input requires a gradient. Non-finite outputs are rejected.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                Backward backward) {
    return record(op, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  Var<T> record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs,
                Backward backward) {
    if (const std::size_t bad = value.first_non_finite(); bad < value.size()) {
      const std::size_t cols = value.cols() ? value.cols() : 1;
      throw NumericError(std::string("non-finite value produced by ") + op + " at row " +
                         std::to_string(bad / cols) + ", column " + std::to_string(bad % cols));
    }
    bool needs = false;
    if (grad_enabled_) {
      for (const auto& in : inputs) needs = needs || needs_grad(in.id());
    }
    Node& n = nodes_.emplace_back();
    n.own = std::move(value);
    n.needs_grad = needs;
    if (needs) n.backward = std::move(backward);
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.own;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient buffer of node `id`, allocated as zeros on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.shape() != value(id).shape()) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  // stop_gradient outputs in call order. With a sink set they are appended to
  // it; with a source set they are replaced by the stored values, so finite
  // differences can hold stopped values fixed.
  void record_stopped(std::vector<Tensor<T>>* sink) { stopped_sink_ = sink; }
  void replay_stopped(const std::vector<Tensor<T>>* source) {
    stopped_source_ = source;
    stopped_next_ = 0;
  }
  Tensor<T> stopped_value(const Tensor<T>& value) {
    if (stopped_sink_) stopped_sink_->push_back(value);
    if (!stopped_source_) return value;
    if (stopped_next_ >= stopped_source_->size() || (*stopped_source_)[stopped_next_].shape() != value.shape()) {
      throw Error("stop_gradient replay does not match the recorded pass");
    }
    return (*stopped_source_)[stopped_next_++];
  }

  void backward(Var<T> loss) {
    if (loss.tape() != this) throw Error("backward: variable belongs to another tape");
    if (loss.size() != 1) {
      throw ShapeError("backward requires a scalar loss, got " + to_string(loss.shape()));
    }
    if (!needs_grad(loss.id())) return;
    grad(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && has_grad(i)) n.backward(*this, i);
    }
    for (auto& n : nodes_) {
      if (n.param && !n.grad.empty()) {
        auto& g = n.param->grad;
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    bool needs_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::vector<Tensor<T>>* stopped_sink_ = nullptr;
  const std::vector<Tensor<T>>* stopped_source_ = nullptr;
  std::size_t stopped_next_ = 0;
};

}  // namespace qgs
