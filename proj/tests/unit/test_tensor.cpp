#include <doctest.h>

#include "cre/errors.hpp"
#include "cre/ops.hpp"
#include "helpers.hpp"

using namespace cre;
using cre::test::random_tensor;

TEST_CASE("tensor construction checks the element count") {
  CHECK_THROWS_AS(TensorD({2, 3}, std::vector<double>(5)), DimensionError);
  const TensorD t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rank() == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t.numel() == 6);
  CHECK(TensorD::scalar(2.5).item() == 2.5);
  CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("copies share storage and clone does not") {
  TensorD a({2}, {1, 2});
  TensorD shared = a;
  TensorD deep = a.clone();
  a.mutable_data()[0] = 9;
  CHECK(shared.data()[0] == 9);
  CHECK(deep.data()[0] == 1);
}

TEST_CASE("gradient of sum is all ones") {
  Tape<double> tape;
  auto x = random_tensor({3, 4}, 1);
  auto loss = sum(tape, x);
  tape.backward(loss);
  REQUIRE(x.has_grad());
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("gradient of sum of squares is twice the input") {
  Tape<double> tape;
  TensorD x({3}, {1.0, 2.0, 3.0}, true);
  auto loss = sum(tape, multiply(tape, x, x));
  CHECK(loss.item() == doctest::Approx(14.0));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
  CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("an input used twice accumulates both contributions") {
  Tape<double> tape;
  TensorD x({2}, {0.5, -1.0}, true);
  auto loss = sum(tape, add(tape, x, scale(tape, x, 3.0)));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward replays entries in exact reverse order") {
  Tape<double> tape;
  auto x = TensorD::scalar(1.0, true);
  auto y = TensorD::scalar(2.0, true);
  auto z = TensorD::scalar(3.0, true);
  std::vector<int> order;
  tape.record("first", {x.node_ptr()}, y.node_ptr(), [&] { order.push_back(1); });
  tape.record("second", {y.node_ptr()}, z.node_ptr(), [&] { order.push_back(2); });
  tape.record("third", {z.node_ptr()}, z.node_ptr(), [&] { order.push_back(3); });
  CHECK(tape.size() == 3);
  CHECK(tape.op_name(1) == "second");
  tape.backward(z);
  CHECK(order == std::vector<int>{3, 2, 1});
}

TEST_CASE("a tape can be replayed only once") {
  Tape<double> tape;
  auto x = random_tensor({2}, 2);
  auto loss = sum(tape, x);
  tape.backward(loss);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(loss), ReuseError);
}

TEST_CASE("backward requires a scalar loss") {
  Tape<double> tape;
  auto x = random_tensor({2, 2}, 3);
  auto y = scale(tape, x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("a non-recording tape records nothing and leaves gradients alone") {
  Tape<double> tape(false);
  auto x = random_tensor({2, 3}, 4);
  auto w = random_tensor({3, 2}, 5);
  auto out = sum(tape, matmul(tape, x, w));
  CHECK(tape.size() == 0);
  CHECK_FALSE(x.has_grad());
  CHECK(std::isfinite(out.item()));
}

TEST_CASE("ops on inputs without gradients are not recorded") {
  Tape<double> tape;
  auto a = random_tensor({2, 2}, 6, false);
  auto b = random_tensor({2, 2}, 7, false);
  (void)add(tape, a, b);
  CHECK(tape.size() == 0);
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Tape<double> tape;
    auto x = random_tensor({4, 5}, 8);
    auto w = random_tensor({5, 3}, 9);
    auto loss = sum(tape, gelu(tape, matmul(tape, x, w)));
    tape.backward(loss);
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  CHECK(run() == run());
}

TEST_CASE("an injected fault doubles the gradient through the named op") {
  auto grad_with = [](const std::string& fault) {
    debug::inject_gradient_fault(fault);
    Tape<double> tape;
    TensorD x({2}, {1.0, -2.0}, true);
    auto loss = sum(tape, scale(tape, x, 3.0));
    tape.backward(loss);
    debug::inject_gradient_fault("");
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const auto clean = grad_with("");
  const auto faulty = grad_with("scale");
  CHECK(clean[0] == doctest::Approx(3.0));
  CHECK(faulty[0] == doctest::Approx(6.0));
  CHECK(faulty[1] == doctest::Approx(6.0));
  CHECK(debug::injected_gradient_fault().empty());
}

TEST_CASE("cast converts precision and keeps the shape") {
  TensorD d({2}, {0.1, 0.2}, true);
  auto f = d.cast<float>();
  CHECK(f.shape() == d.shape());
  CHECK(f.requires_grad());
  CHECK(f.data()[1] == 0.2f);
}
