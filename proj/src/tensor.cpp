#include "chanpred/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace chanpred {

namespace {

thread_local Graph* g_active_graph = nullptr;

void check_finite(const ArrayXd& values, const char* op) {
  if (!values.isFinite().all()) {
    throw std::runtime_error(std::string(op) + ": non-finite value encountered");
  }
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(op, "shape mismatch " + shape_to_string(a.shape()) + " vs " +
                        shape_to_string(b.shape()));
  }
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_active_graph == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Outer/inner strides around one axis of a row-major layout.
struct AxisView {
  Index outer = 1;   // product of dims before the axis
  Index len = 1;     // dim at the axis
  Index inner = 1;   // product of dims after the axis
};

AxisView axis_view(const Shape& shape, int axis) {
  AxisView v;
  v.len = shape[static_cast<std::size_t>(axis)];
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
    v.inner *= shape[i];
  }
  return v;
}

}  // namespace

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, ArrayXd values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    shape_error("Tensor", "shape " + shape_to_string(shape) + " does not match buffer of " +
                              std::to_string(values.size()) + " values");
  }
  check_finite(values, "Tensor");
  data_ = std::make_shared<Payload>();
  data_->shape = std::move(shape);
  data_->values = std::move(values);
  data_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const Index n = shape_size(shape);
  return Tensor(std::move(shape), ArrayXd::Zero(n), requires_grad);
}

Tensor Tensor::full(Shape shape, double value) {
  const Index n = shape_size(shape);
  return Tensor(std::move(shape), ArrayXd::Constant(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, ArrayXd::Constant(1, value)); }

Tensor Tensor::parameter(Shape shape, ArrayXd values) {
  return Tensor(std::move(shape), std::move(values), /*requires_grad=*/true);
}

double Tensor::item() const {
  if (size() != 1) {
    shape_error("Tensor::item", "tensor of shape " + shape_to_string(shape()) + " is not scalar");
  }
  return data_->values(0);
}

ArrayXd& Tensor::grad_buffer() {
  if (data_->grad.size() != data_->values.size()) {
    data_->grad = ArrayXd::Zero(data_->values.size());
  }
  return data_->grad;
}

Eigen::Map<const MatrixRM> Tensor::mat() const {
  if (rank() != 2) {
    shape_error("Tensor::mat", "rank-2 tensor required, got " + shape_to_string(shape()));
  }
  return Eigen::Map<const MatrixRM>(data_->values.data(), dim(0), dim(1));
}

Graph::Scope::Scope(Graph& graph) : previous_(g_active_graph) { g_active_graph = &graph; }

Graph::Scope::~Scope() { g_active_graph = previous_; }

Graph* Graph::active() { return g_active_graph; }

void Graph::record(const char* op, std::vector<Tensor> inputs, Tensor output, PullFn pull) {
  nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(pull)});
}

void Graph::backward(Tensor root) {
  if (consumed_) {
    throw std::runtime_error(
        "Graph::backward: recording already consumed; record a fresh forward pass first");
  }
  if (!root.defined() || root.size() != 1) {
    throw std::invalid_argument("Graph::backward: root must be a scalar tensor");
  }
  consumed_ = true;
  for (Node& node : nodes_) {
    node.output.clear_grad();
    for (Tensor& input : node.inputs) input.clear_grad();
  }
  root.grad_buffer()(0) = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // did not influence the root
    it->pull(it->output, std::span<Tensor>(it->inputs));
  }
}

namespace {

Tensor make_op_output(const char* op, Shape shape, ArrayXd values, bool track) {
  check_finite(values, op);
  return Tensor(std::move(shape), std::move(values), track);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    shape_error("matmul", "rank-2 tensors required, got " + shape_to_string(a.shape()) + " and " +
                              shape_to_string(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    shape_error("matmul", "inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                              shape_to_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  ArrayXd out(m * n);
  Eigen::Map<MatrixRM>(out.data(), m, n).noalias() = a.mat() * b.mat();
  const bool track = tracking({&a, &b});
  Tensor result = make_op_output("matmul", Shape{m, n}, std::move(out), track);
  if (track) {
    Graph::active()->record("matmul", {a, b}, result,
                            [m, k, n](const Tensor& out, std::span<Tensor> in) {
                              Eigen::Map<const MatrixRM> dy(out.grad().data(), m, n);
                              if (in[0].requires_grad()) {
                                Eigen::Map<const MatrixRM> bm(in[1].values().data(), k, n);
                                Eigen::Map<MatrixRM> da(in[0].grad_buffer().data(), m, k);
                                da.noalias() += dy * bm.transpose();
                              }
                              if (in[1].requires_grad()) {
                                Eigen::Map<const MatrixRM> am(in[0].values().data(), m, k);
                                Eigen::Map<MatrixRM> db(in[1].grad_buffer().data(), k, n);
                                db.noalias() += am.transpose() * dy;
                              }
                            });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const bool track = tracking({&a, &b});
  Tensor result = make_op_output("add", a.shape(), a.values() + b.values(), track);
  if (track) {
    Graph::active()->record("add", {a, b}, result, [](const Tensor& out, std::span<Tensor> in) {
      if (in[0].requires_grad()) in[0].grad_buffer() += out.grad();
      if (in[1].requires_grad()) in[1].grad_buffer() += out.grad();
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const bool track = tracking({&a, &b});
  Tensor result = make_op_output("sub", a.shape(), a.values() - b.values(), track);
  if (track) {
    Graph::active()->record("sub", {a, b}, result, [](const Tensor& out, std::span<Tensor> in) {
      if (in[0].requires_grad()) in[0].grad_buffer() += out.grad();
      if (in[1].requires_grad()) in[1].grad_buffer() -= out.grad();
    });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const bool track = tracking({&a, &b});
  Tensor result = make_op_output("mul", a.shape(), a.values() * b.values(), track);
  if (track) {
    Graph::active()->record("mul", {a, b}, result, [](const Tensor& out, std::span<Tensor> in) {
      if (in[0].requires_grad()) in[0].grad_buffer() += out.grad() * in[1].values();
      if (in[1].requires_grad()) in[1].grad_buffer() += out.grad() * in[0].values();
    });
  }
  return result;
}

Tensor add_scalar(const Tensor& a, double s) {
  if (!std::isfinite(s)) throw std::runtime_error("add_scalar: non-finite value encountered");
  const bool track = tracking({&a});
  Tensor result = make_op_output("add_scalar", a.shape(), a.values() + s, track);
  if (track) {
    Graph::active()->record("add_scalar", {a}, result,
                            [](const Tensor& out, std::span<Tensor> in) {
                              if (in[0].requires_grad()) in[0].grad_buffer() += out.grad();
                            });
  }
  return result;
}

Tensor mul_scalar(const Tensor& a, double s) {
  if (!std::isfinite(s)) throw std::runtime_error("mul_scalar: non-finite value encountered");
  const bool track = tracking({&a});
  Tensor result = make_op_output("mul_scalar", a.shape(), a.values() * s, track);
  if (track) {
    Graph::active()->record("mul_scalar", {a}, result,
                            [s](const Tensor& out, std::span<Tensor> in) {
                              if (in[0].requires_grad()) in[0].grad_buffer() += s * out.grad();
                            });
  }
  return result;
}

Tensor tanh(const Tensor& a) {
  const bool track = tracking({&a});
  Tensor result = make_op_output("tanh", a.shape(), a.values().tanh(), track);
  if (track) {
    Graph::active()->record("tanh", {a}, result, [](const Tensor& out, std::span<Tensor> in) {
      if (in[0].requires_grad()) {
        in[0].grad_buffer() += out.grad() * (1.0 - out.values().square());
      }
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& a) {
  const bool track = tracking({&a});
  Tensor result =
      make_op_output("sigmoid", a.shape(), 1.0 / (1.0 + (-a.values()).exp()), track);
  if (track) {
    Graph::active()->record("sigmoid", {a}, result, [](const Tensor& out, std::span<Tensor> in) {
      if (in[0].requires_grad()) {
        in[0].grad_buffer() += out.grad() * out.values() * (1.0 - out.values());
      }
    });
  }
  return result;
}

Tensor square(const Tensor& a) {
  const bool track = tracking({&a});
  Tensor result = make_op_output("square", a.shape(), a.values().square(), track);
  if (track) {
    Graph::active()->record("square", {a}, result, [](const Tensor& out, std::span<Tensor> in) {
      if (in[0].requires_grad()) in[0].grad_buffer() += 2.0 * out.grad() * in[0].values();
    });
  }
  return result;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) shape_error("concat", "at least one tensor required");
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) {
    shape_error("concat", "axis " + std::to_string(axis) + " out of range for rank " +
                              std::to_string(rank));
  }
  Shape out_shape = parts[0].shape();
  Index axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) shape_error("concat", "all parts must share rank");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && p.dim(d) != out_shape[static_cast<std::size_t>(d)]) {
        shape_error("concat", "part shape " + shape_to_string(p.shape()) +
                                  " incompatible with " + shape_to_string(out_shape));
      }
    }
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  ArrayXd out(shape_size(out_shape));
  const AxisView ov = axis_view(out_shape, axis);
  Index axis_offset = 0;
  for (const Tensor& p : parts) {
    const AxisView pv = axis_view(p.shape(), axis);
    for (Index o = 0; o < ov.outer; ++o) {
      const Index dst = (o * ov.len + axis_offset) * ov.inner;
      const Index src = o * pv.len * pv.inner;
      out.segment(dst, pv.len * pv.inner) = p.values().segment(src, pv.len * pv.inner);
    }
    axis_offset += pv.len;
  }

  bool track = false;
  if (Graph::active() != nullptr) {
    for (const Tensor& p : parts) track = track || p.requires_grad();
  }
  Tensor result = make_op_output("concat", out_shape, std::move(out), track);
  if (track) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    Graph::active()->record(
        "concat", std::move(inputs), result, [axis, ov](const Tensor& out, std::span<Tensor> in) {
          Index axis_offset = 0;
          for (Tensor& p : in) {
            const AxisView pv = axis_view(p.shape(), axis);
            if (p.requires_grad()) {
              for (Index o = 0; o < ov.outer; ++o) {
                const Index src = (o * ov.len + axis_offset) * ov.inner;
                const Index dst = o * pv.len * pv.inner;
                p.grad_buffer().segment(dst, pv.len * pv.inner) +=
                    out.grad().segment(src, pv.len * pv.inner);
              }
            }
            axis_offset += pv.len;
          }
        });
  }
  return result;
}

Tensor slice(const Tensor& a, int axis, Index start, Index length) {
  if (axis < 0 || axis >= a.rank()) {
    shape_error("slice", "axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(a.rank()));
  }
  if (start < 0 || length < 1 || start + length > a.dim(axis)) {
    shape_error("slice", "range [" + std::to_string(start) + ", " +
                             std::to_string(start + length) + ") out of bounds for axis of " +
                             std::to_string(a.dim(axis)));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  const AxisView av = axis_view(a.shape(), axis);
  ArrayXd out(shape_size(out_shape));
  for (Index o = 0; o < av.outer; ++o) {
    out.segment(o * length * av.inner, length * av.inner) =
        a.values().segment((o * av.len + start) * av.inner, length * av.inner);
  }
  const bool track = tracking({&a});
  Tensor result = make_op_output("slice", std::move(out_shape), std::move(out), track);
  if (track) {
    Graph::active()->record("slice", {a}, result,
                            [axis, start, length, av](const Tensor& out, std::span<Tensor> in) {
                              if (!in[0].requires_grad()) return;
                              for (Index o = 0; o < av.outer; ++o) {
                                in[0].grad_buffer().segment((o * av.len + start) * av.inner,
                                                            length * av.inner) +=
                                    out.grad().segment(o * length * av.inner, length * av.inner);
                              }
                            });
  }
  return result;
}

Tensor sum(const Tensor& a) {
  const bool track = tracking({&a});
  Tensor result = make_op_output("sum", Shape{}, ArrayXd::Constant(1, a.values().sum()), track);
  if (track) {
    Graph::active()->record("sum", {a}, result, [](const Tensor& out, std::span<Tensor> in) {
      if (in[0].requires_grad()) in[0].grad_buffer() += out.grad()(0);
    });
  }
  return result;
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  const bool track = tracking({&a});
  Tensor result = make_op_output("mean", Shape{}, ArrayXd::Constant(1, a.values().mean()), track);
  if (track) {
    Graph::active()->record("mean", {a}, result, [n](const Tensor& out, std::span<Tensor> in) {
      if (in[0].requires_grad()) in[0].grad_buffer() += out.grad()(0) / n;
    });
  }
  return result;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (a.rank() != 2 || v.rank() != 1 || v.dim(0) != a.dim(1)) {
    shape_error("add_rowvec", "expected [batch, n] and [n], got " + shape_to_string(a.shape()) +
                                  " and " + shape_to_string(v.shape()));
  }
  const Index rows = a.dim(0), cols = a.dim(1);
  ArrayXd out(rows * cols);
  Eigen::Map<MatrixRM>(out.data(), rows, cols) =
      a.mat().rowwise() + Eigen::Map<const Eigen::RowVectorXd>(v.values().data(), cols);
  const bool track = tracking({&a, &v});
  Tensor result = make_op_output("add_rowvec", a.shape(), std::move(out), track);
  if (track) {
    Graph::active()->record("add_rowvec", {a, v}, result,
                            [rows, cols](const Tensor& out, std::span<Tensor> in) {
                              Eigen::Map<const MatrixRM> dy(out.grad().data(), rows, cols);
                              if (in[0].requires_grad()) in[0].grad_buffer() += out.grad();
                              if (in[1].requires_grad()) {
                                Eigen::Map<Eigen::RowVectorXd> dv(in[1].grad_buffer().data(),
                                                                  cols);
                                dv += dy.colwise().sum();
                              }
                            });
  }
  return result;
}

GradientCheckReport finite_difference_check(
    const std::function<double(const ArrayXd&)>& objective,
    const std::function<ArrayXd(const ArrayXd&)>& gradient, const ArrayXd& theta, double step) {
  if (!(step >= 1e-7 && step <= 1e-4)) {
    throw std::invalid_argument("finite_difference_check: step must lie in [1e-7, 1e-4]");
  }
  const double f0 = objective(theta);
  const double f1 = objective(theta);
  if (std::memcmp(&f0, &f1, sizeof(double)) != 0) {
    throw std::runtime_error("finite_difference_check: objective is not deterministic");
  }
  ArrayXd analytic = gradient(theta);
  if (analytic.size() != theta.size()) {
    throw std::invalid_argument("finite_difference_check: gradient length mismatch");
  }
  GradientCheckReport report;
  ArrayXd probe = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    probe(i) = theta(i) + step;
    const double fp = objective(probe);
    probe(i) = theta(i) - step;
    const double fm = objective(probe);
    probe(i) = theta(i);
    const double fd = (fp - fm) / (2.0 * step);
    const double rel = std::abs(analytic(i) - fd) / (std::abs(fd) + 1e-12);
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace chanpred
