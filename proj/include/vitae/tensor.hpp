#ifndef VITAE_TENSOR_HPP_
#define VITAE_TENSOR_HPP_

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vitae/error.hpp"

namespace vitae {

template <typename T>
struct TensorData {
  std::vector<int64_t> shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool from_op = false;  // produced by a recorded graph op
};

// Dense row-major tensor. Value-semantic handle over a shared buffer; ops
// always allocate fresh outputs, they never alias inputs.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) {
    d_ = std::make_shared<TensorData<T>>();
    d_->shape = std::move(shape);
    d_->values.assign(size_t(count(d_->shape)), T(0));
  }

  static Tensor full(std::vector<int64_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.d_->values.begin(), t.d_->values.end(), v);
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::vector<T> values) {
    if (count(shape) != int64_t(values.size()))
      throw DimError("Tensor::from: value count does not match shape");
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return bool(d_); }
  const std::vector<int64_t>& shape() const { return d_->shape; }
  int ndim() const { return int(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[size_t(i)]; }
  int64_t numel() const { return int64_t(d_->values.size()); }

  T* data() { return d_->values.data(); }
  const T* data() const { return d_->values.data(); }
  std::vector<T>& values() { return d_->values; }
  const std::vector<T>& values() const { return d_->values; }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  // Grad buffer, allocated (zeroed) on first use.
  std::vector<T>& grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
    return d_->grad;
  }
  const std::vector<T>& grad() const { return d_->grad; }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
  }

  T value() const {
    if (numel() != 1) throw UsageError("Tensor::value: tensor is not scalar");
    return d_->values[0];
  }

  T& at(std::initializer_list<int64_t> idx) {
    return d_->values[size_t(offset(idx))];
  }
  T at(std::initializer_list<int64_t> idx) const {
    return d_->values[size_t(offset(idx))];
  }

  int64_t offset(std::initializer_list<int64_t> idx) const {
    if (int(idx.size()) != ndim())
      throw DimError("Tensor::offset: index rank mismatch");
    int64_t off = 0;
    int i = 0;
    for (int64_t v : idx) {
      off = off * d_->shape[size_t(i)] + v;
      ++i;
    }
    return off;
  }

  // Deep copy of shape+values (grad not copied).
  Tensor clone() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    t.d_->requires_grad = d_->requires_grad;
    return t;
  }

  const std::shared_ptr<TensorData<T>>& impl() const { return d_; }

  static int64_t count(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t s : shape) n *= s;
    return n;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < d_->shape.size(); ++i)
      os << (i ? "," : "") << d_->shape[i];
    os << "]";
    return os.str();
  }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

// Reverse-mode tape. Nodes are appended in execution order; backward replays
// them once in reverse. Gradients of intermediate (op-produced) tensors are
// reset at the start of every backward pass, so leaf gradients accumulate
// across repeated calls until explicitly zeroed.
template <typename T>
class Graph {
 public:
  using BackFn = std::function<void()>;

  void record(const std::shared_ptr<TensorData<T>>& out, BackFn fn) {
    nodes_.push_back(Node{out, std::move(fn)});
  }

  bool recording() const { return recording_; }
  void set_recording(bool b) { recording_ = b; }
  size_t num_nodes() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  void backward(const Tensor<T>& root) {
    if (!root.defined() || root.numel() != 1)
      throw UsageError("backward: root must be a scalar tensor");
    for (auto& n : nodes_) n.out->grad.assign(n.out->values.size(), T(0));
    auto& r = *root.impl();
    if (r.grad.empty()) r.grad.assign(r.values.size(), T(0));
    r.grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
  }

  // RAII guard that pauses recording (inference / oracle evaluation).
  struct NoGrad {
    explicit NoGrad(Graph& g) : g_(g), prev_(g.recording_) {
      g_.recording_ = false;
    }
    ~NoGrad() { g_.recording_ = prev_; }
    Graph& g_;
    bool prev_;
  };

 private:
  struct Node {
    std::shared_ptr<TensorData<T>> out;
    BackFn back;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
};

template <typename T>
struct DtypeTraits;
template <>
struct DtypeTraits<float> {
  static constexpr uint32_t code = 0;
  static constexpr const char* name = "float32";
};
template <>
struct DtypeTraits<double> {
  static constexpr uint32_t code = 1;
  static constexpr const char* name = "float64";
};

}  // namespace vitae

#endif
