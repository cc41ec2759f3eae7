#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <functional>
#include <vector>

#include "chanpred/rng.hpp"
#include "chanpred/tensor.hpp"

using namespace chanpred;

namespace {

ArrayXd random_values(Index n, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  Rng rng(seed);
  ArrayXd values(n);
  for (Index i = 0; i < n; ++i) values(i) = rng.uniform(lo, hi);
  return values;
}

// Runs finite_difference_check on a scalar-valued composition of tensor ops.
// The parameter vector is split into tensors per `shapes`; `apply` combines
// them into one output tensor which is reduced to a scalar by sum().
double op_gradient_error(const std::vector<Shape>& shapes,
                         const std::function<Tensor(const std::vector<Tensor>&)>& apply,
                         std::uint64_t seed) {
  Index total = 0;
  for (const Shape& s : shapes) total += shape_size(s);
  const ArrayXd theta0 = random_values(total, seed);

  const auto split = [&shapes](const ArrayXd& theta, bool as_params) {
    std::vector<Tensor> parts;
    Index offset = 0;
    for (const Shape& s : shapes) {
      const Index len = shape_size(s);
      ArrayXd values = theta.segment(offset, len);
      parts.push_back(as_params ? Tensor::parameter(s, std::move(values))
                                : Tensor(s, std::move(values)));
      offset += len;
    }
    return parts;
  };

  const auto objective = [&](const ArrayXd& theta) {
    const std::vector<Tensor> parts = split(theta, false);
    Tensor out = apply(parts);
    return out.size() == 1 ? out.item() : sum(out).item();
  };
  const auto gradient = [&](const ArrayXd& theta) {
    std::vector<Tensor> parts = split(theta, true);
    Graph graph;
    Tensor root;
    {
      Graph::Scope scope(graph);
      Tensor out = apply(parts);
      root = out.size() == 1 ? out : sum(out);
    }
    graph.backward(root);
    ArrayXd grads(theta.size());
    Index offset = 0;
    for (const Tensor& p : parts) {
      grads.segment(offset, p.size()) =
          p.has_grad() ? p.grad() : ArrayXd::Zero(p.size()).eval();
      offset += p.size();
    }
    return grads;
  };

  return finite_difference_check(objective, gradient, theta0, 1e-5).max_rel_error;
}

}  // namespace

TEST_CASE("matmul against the identity returns the input") {
  const Tensor a(Shape{2, 2}, (ArrayXd(4) << 1, 2, 3, 4).finished());
  const Tensor eye(Shape{2, 2}, (ArrayXd(4) << 1, 0, 0, 1).finished());
  const Tensor out = matmul(a, eye);
  CHECK(out.shape() == Shape{2, 2});
  for (Index i = 0; i < 4; ++i) CHECK(out.values()(i) == a.values()(i));
}

TEST_CASE("tanh of a zero tensor is a zero tensor") {
  const Tensor out = tanh(Tensor::zeros(Shape{3, 2}));
  CHECK((out.values() == 0.0).all());
}

TEST_CASE("sum of squares evaluates 3^2 + 4^2 = 25") {
  const Tensor v(Shape{2}, (ArrayXd(2) << 3, 4).finished());
  CHECK(sum(square(v)).item() == doctest::Approx(25.0).epsilon(1e-15));
}

TEST_CASE("backward of sum gives all-ones gradient") {
  Tensor theta = Tensor::parameter(Shape{3}, (ArrayXd(3) << 0.3, -1.2, 2.0).finished());
  Graph graph;
  Tensor root;
  {
    Graph::Scope scope(graph);
    root = sum(theta);
  }
  graph.backward(root);
  REQUIRE(theta.has_grad());
  for (Index i = 0; i < 3; ++i) CHECK(theta.grad()(i) == 1.0);
}

TEST_CASE("backward of sum of squares gives 2*theta") {
  Tensor theta = Tensor::parameter(Shape{2}, (ArrayXd(2) << 1, 2).finished());
  Graph graph;
  Tensor root;
  {
    Graph::Scope scope(graph);
    root = sum(square(theta));
  }
  graph.backward(root);
  CHECK(theta.grad()(0) == 2.0);
  CHECK(theta.grad()(1) == 4.0);
}

TEST_CASE("backward of mean gives 1/n everywhere") {
  Tensor theta = Tensor::parameter(Shape{4}, random_values(4, 11));
  Graph graph;
  Tensor root;
  {
    Graph::Scope scope(graph);
    root = mean(theta);
  }
  graph.backward(root);
  for (Index i = 0; i < 4; ++i) CHECK(theta.grad()(i) == 0.25);
}

TEST_CASE("finite differences on a quadratic are tight") {
  const auto objective = [](const ArrayXd& theta) { return 0.5 * theta.square().sum(); };
  const auto gradient = [](const ArrayXd& theta) { return ArrayXd(theta); };
  const ArrayXd theta0 = random_values(16, 23);
  const auto report = finite_difference_check(objective, gradient, theta0, 1e-5);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("finite differences on a constant report zero error") {
  const auto objective = [](const ArrayXd&) { return 3.5; };
  const auto gradient = [](const ArrayXd& theta) { return ArrayXd(ArrayXd::Zero(theta.size())); };
  const auto report = finite_difference_check(objective, gradient, random_values(4, 5), 1e-5);
  CHECK(report.max_rel_error == 0.0);
}

TEST_CASE("finite difference step outside [1e-7, 1e-4] is rejected") {
  const auto objective = [](const ArrayXd& theta) { return theta.sum(); };
  const auto gradient = [](const ArrayXd& theta) {
    return ArrayXd(ArrayXd::Ones(theta.size()));
  };
  const ArrayXd theta0 = random_values(3, 7);
  CHECK_THROWS_AS(finite_difference_check(objective, gradient, theta0, 1e-3),
                  std::invalid_argument);
  CHECK_THROWS_AS(finite_difference_check(objective, gradient, theta0, 1e-8),
                  std::invalid_argument);
}

TEST_CASE("a non-deterministic objective is detected") {
  int calls = 0;
  const auto objective = [&calls](const ArrayXd& theta) {
    return theta.sum() + 1e-6 * static_cast<double>(calls++);
  };
  const auto gradient = [](const ArrayXd& theta) {
    return ArrayXd(ArrayXd::Ones(theta.size()));
  };
  CHECK_THROWS_AS(finite_difference_check(objective, gradient, random_values(2, 9), 1e-5),
                  std::runtime_error);
}

TEST_CASE("every op's gradient matches central finite differences") {
  const double tol = 1e-4;
  SUBCASE("matmul") {
    CHECK(op_gradient_error({Shape{3, 2}, Shape{2, 4}},
                            [](const std::vector<Tensor>& in) {
                              return matmul(in[0], in[1]);
                            },
                            101) < tol);
  }
  SUBCASE("add") {
    CHECK(op_gradient_error({Shape{3, 2}, Shape{3, 2}},
                            [](const std::vector<Tensor>& in) { return add(in[0], in[1]); },
                            102) < tol);
  }
  SUBCASE("sub") {
    CHECK(op_gradient_error({Shape{5}, Shape{5}},
                            [](const std::vector<Tensor>& in) { return sub(in[0], in[1]); },
                            103) < tol);
  }
  SUBCASE("mul") {
    CHECK(op_gradient_error({Shape{4, 3}, Shape{4, 3}},
                            [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); },
                            104) < tol);
  }
  SUBCASE("add_scalar") {
    CHECK(op_gradient_error({Shape{6}},
                            [](const std::vector<Tensor>& in) {
                              return add_scalar(in[0], 0.7);
                            },
                            105) < tol);
  }
  SUBCASE("mul_scalar") {
    CHECK(op_gradient_error({Shape{6}},
                            [](const std::vector<Tensor>& in) {
                              return mul_scalar(in[0], -1.3);
                            },
                            106) < tol);
  }
  SUBCASE("tanh") {
    CHECK(op_gradient_error({Shape{7}},
                            [](const std::vector<Tensor>& in) { return tanh(in[0]); }, 107) <
          tol);
  }
  SUBCASE("sigmoid") {
    CHECK(op_gradient_error({Shape{7}},
                            [](const std::vector<Tensor>& in) { return sigmoid(in[0]); },
                            108) < tol);
  }
  SUBCASE("square") {
    CHECK(op_gradient_error({Shape{7}},
                            [](const std::vector<Tensor>& in) { return square(in[0]); },
                            109) < tol);
  }
  SUBCASE("concat along both axes") {
    CHECK(op_gradient_error({Shape{2, 3}, Shape{2, 3}, Shape{1, 3}},
                            [](const std::vector<Tensor>& in) {
                              const Tensor top = concat(std::vector<Tensor>{in[0], in[1]}, 1);
                              return concat(std::vector<Tensor>{square(in[2]), in[2]}, 0) +
                                     slice(top, 1, 1, 3) + slice(top, 1, 3, 3);
                            },
                            110) < tol);
  }
  SUBCASE("slice") {
    CHECK(op_gradient_error({Shape{3, 5}},
                            [](const std::vector<Tensor>& in) {
                              return slice(in[0], 1, 1, 2);
                            },
                            111) < tol);
  }
  SUBCASE("sum") {
    CHECK(op_gradient_error({Shape{4, 2}},
                            [](const std::vector<Tensor>& in) { return sum(square(in[0])); },
                            112) < tol);
  }
  SUBCASE("mean") {
    CHECK(op_gradient_error({Shape{4, 2}},
                            [](const std::vector<Tensor>& in) { return mean(square(in[0])); },
                            113) < tol);
  }
  SUBCASE("add_rowvec") {
    CHECK(op_gradient_error({Shape{3, 4}, Shape{4}},
                            [](const std::vector<Tensor>& in) {
                              return square(add_rowvec(in[0], in[1]));
                            },
                            114) < tol);
  }
  SUBCASE("composite recurrent-style chain") {
    CHECK(op_gradient_error({Shape{2, 3}, Shape{3, 3}, Shape{3}},
                            [](const std::vector<Tensor>& in) {
                              Tensor h = tanh(add_rowvec(matmul(in[0], in[1]), in[2]));
                              h = sigmoid(add_rowvec(matmul(mul(h, h), in[1]), in[2]));
                              return mean(square(h));
                            },
                            115) < tol);
  }
}

TEST_CASE("backward is linear in the root") {
  const ArrayXd theta0 = random_values(6, 200);
  const double a = 1.7, b = -0.6;

  const auto grad_of = [&theta0](const std::function<Tensor(const Tensor&)>& f) {
    Tensor theta = Tensor::parameter(Shape{6}, theta0);
    Graph graph;
    Tensor root;
    {
      Graph::Scope scope(graph);
      root = f(theta);
    }
    graph.backward(root);
    return ArrayXd(theta.grad());
  };

  const ArrayXd gf = grad_of([](const Tensor& t) { return sum(square(t)); });
  const ArrayXd gg = grad_of([](const Tensor& t) { return sum(tanh(t)); });
  const ArrayXd gc = grad_of([a, b](const Tensor& t) {
    return mul_scalar(sum(square(t)), a) + mul_scalar(sum(tanh(t)), b);
  });
  CHECK(((gc - (a * gf + b * gg)).abs() < 1e-10).all());
}

TEST_CASE("recording then discarding a graph leaves parameters bit-identical") {
  const ArrayXd theta0 = random_values(8, 301);
  Tensor theta = Tensor::parameter(Shape{8}, theta0);
  {
    Graph graph;
    Graph::Scope scope(graph);
    const Tensor out = sum(square(tanh(theta)));
    CHECK(graph.node_count() == 3);
  }
  CHECK(std::memcmp(theta.values().data(), theta0.data(), sizeof(double) * 8) == 0);
  CHECK_FALSE(theta.has_grad());
}

TEST_CASE("a second backward on the same recording throws") {
  Tensor theta = Tensor::parameter(Shape{2}, random_values(2, 302));
  Graph graph;
  Tensor root;
  {
    Graph::Scope scope(graph);
    root = sum(theta);
  }
  graph.backward(root);
  CHECK(graph.consumed());
  CHECK_THROWS_AS(graph.backward(root), std::runtime_error);
}

TEST_CASE("backward requires a scalar root") {
  Tensor theta = Tensor::parameter(Shape{3}, random_values(3, 303));
  Graph graph;
  Tensor root;
  {
    Graph::Scope scope(graph);
    root = square(theta);
  }
  CHECK_THROWS_AS(graph.backward(root), std::invalid_argument);
}

TEST_CASE("gradients are fresh per recording") {
  Tensor theta = Tensor::parameter(Shape{2}, (ArrayXd(2) << 3, -1).finished());
  {
    Graph graph;
    Tensor root;
    {
      Graph::Scope scope(graph);
      root = sum(theta);
    }
    graph.backward(root);
    CHECK(theta.grad()(0) == 1.0);
  }
  {
    Graph graph;
    Tensor root;
    {
      Graph::Scope scope(graph);
      root = sum(square(theta));
    }
    graph.backward(root);
    CHECK(theta.grad()(0) == 6.0);   // 2 * 3, not 1 + 2 * 3
    CHECK(theta.grad()(1) == -2.0);  // 2 * -1
  }
}

TEST_CASE("shape mismatches are rejected with invalid_argument") {
  const Tensor a(Shape{2}, random_values(2, 400));
  const Tensor b(Shape{3}, random_values(3, 401));
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(slice(a, 0, 1, 5), std::invalid_argument);
  CHECK_THROWS_AS(slice(a, 2, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(add_rowvec(a, b), std::invalid_argument);
}

TEST_CASE("non-finite values are a hard error") {
  ArrayXd bad(2);
  bad << 1.0, std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(Tensor(Shape{2}, bad), std::runtime_error);
  ArrayXd nan_values(1);
  nan_values << std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(Tensor(Shape{1}, nan_values), std::runtime_error);

  const Tensor big(Shape{1}, ArrayXd::Constant(1, 1e308));
  CHECK_THROWS_AS(mul(big, big), std::runtime_error);
  CHECK_THROWS_AS(add_scalar(big, std::numeric_limits<double>::infinity()),
                  std::runtime_error);
}

TEST_CASE("ops do not record when no graph scope is active") {
  Tensor theta = Tensor::parameter(Shape{4}, random_values(4, 500));
  const Tensor out = sum(square(theta));
  CHECK(out.size() == 1);
  CHECK_FALSE(out.requires_grad());
}

TEST_CASE("ops with untracked inputs add no graph nodes") {
  const Tensor plain(Shape{4}, random_values(4, 501));
  Graph graph;
  {
    Graph::Scope scope(graph);
    const Tensor out = sum(square(plain));
    CHECK(out.size() == 1);
  }
  CHECK(graph.node_count() == 0);
}

TEST_CASE("tensor shape and buffer length must agree") {
  CHECK_THROWS_AS(Tensor(Shape{3}, ArrayXd::Zero(4)), std::invalid_argument);
  CHECK(Tensor::zeros(Shape{2, 3}).size() == 6);
  CHECK(Tensor::full(Shape{2}, 1.5).values()(1) == 1.5);
  CHECK(Tensor::scalar(2.0).item() == 2.0);
}
