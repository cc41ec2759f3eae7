#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace chanpred {

using ArrayXd = Eigen::ArrayXd;
using Index = Eigen::Index;
using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Shape = std::vector<Index>;

Index shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Graph;

/// Dense real-valued tensor: a shape plus a row-major f64 buffer, shared by
/// handle. Values must stay finite; constructors and every op reject NaN/Inf.
/// A tensor flagged requires_grad is a graph leaf (a trainable parameter)
/// and receives a gradient buffer when a recorded graph runs backward.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, ArrayXd values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor parameter(Shape shape, ArrayXd values);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  Index size() const { return data_->values.size(); }
  Index dim(int axis) const { return data_->shape[static_cast<std::size_t>(axis)]; }
  int rank() const { return static_cast<int>(data_->shape.size()); }

  const ArrayXd& values() const { return data_->values; }
  /// In-place mutation is only safe on leaves between recordings.
  ArrayXd& values() { return data_->values; }
  double item() const;

  bool requires_grad() const { return data_->requires_grad; }
  bool has_grad() const { return data_ && data_->grad.size() == data_->values.size(); }
  const ArrayXd& grad() const { return data_->grad; }
  void clear_grad() { data_->grad.resize(0); }
  /// Zero-initialized gradient buffer, allocated on first touch. Internal to
  /// backward passes; tests may use it to seed custom roots.
  ArrayXd& grad_buffer();

  /// Row-major matrix view of a rank-2 tensor.
  Eigen::Map<const MatrixRM> mat() const;

  /// Payload identity (two handles share storage iff ids are equal).
  const void* id() const { return data_.get(); }

 private:
  struct Payload {
    Shape shape;
    ArrayXd values;
    ArrayXd grad;  // empty until backward touches it
    bool requires_grad = false;
  };
  std::shared_ptr<Payload> data_;
};

/// Record-by-run tape. Activate with Graph::Scope; ops whose inputs require
/// grad append themselves while a scope is active on the current thread.
/// backward() replays the recording once in reverse; running it twice on the
/// same recording throws. Distinct graphs are fully independent.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  class Scope {
   public:
    explicit Scope(Graph& graph);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Graph* previous_;
  };

  static Graph* active();

  /// Seeds d(root)/d(root) = 1 and accumulates gradients into every
  /// recorded tensor that influenced the scalar root. Leaf gradients are
  /// fresh per call (previous buffers are cleared first).
  void backward(Tensor root);

  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  using PullFn = std::function<void(const Tensor& out, std::span<Tensor> inputs)>;
  void record(const char* op, std::vector<Tensor> inputs, Tensor output, PullFn pull);

 private:
  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    PullFn pull;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Forward ops. Each validates shapes, checks the result for NaN/Inf and
// records itself on the active graph when gradients are being tracked.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, Index start, Index length);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Broadcast a vector over the batch axis: a is [batch, n], v is [n].
Tensor add_rowvec(const Tensor& a, const Tensor& v);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

struct GradientCheckReport {
  double max_rel_error = 0.0;
  Index worst_index = -1;
};

/// Compares an analytic gradient against central finite differences of the
/// objective: max_i |g_i - fd_i| / (|fd_i| + 1e-12). The objective must be
/// deterministic (two evaluations at theta must agree bit for bit) and the
/// step must lie in [1e-7, 1e-4].
GradientCheckReport finite_difference_check(
    const std::function<double(const ArrayXd&)>& objective,
    const std::function<ArrayXd(const ArrayXd&)>& gradient,
    const ArrayXd& theta, double step);

}  // namespace chanpred
