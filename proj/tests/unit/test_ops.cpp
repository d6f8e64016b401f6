#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"

#include "asen/error.hpp"
#include "asen/grad_check.hpp"
#include "asen/ops.hpp"
#include "support.hpp"

using namespace asen;
using asen::test::random_tensor;

namespace {

Tensor eval(const std::function<Var(Tape&)>& fn) {
  Tape tape;
  return fn(tape).value();
}

// Loss = sum(out * probe) for a fixed random probe, so every output entry gets its own weight.
GradCheckReport check_op(std::vector<Parameter>& leaves,
                         const std::function<Var(Tape&, std::vector<Var>&)>& op,
                         std::uint64_t seed) {
  std::vector<Parameter*> ptrs;
  for (auto& p : leaves) ptrs.push_back(&p);
  std::optional<Tensor> probe;
  auto loss = [&](Tape& tape) {
    std::vector<Var> in;
    for (auto* p : ptrs) in.push_back(tape.parameter(*p));
    Var out = op(tape, in);
    if (!probe) {
      Rng rng(seed);
      probe = random_tensor(out.shape(), rng);
    }
    return ops::sum_all(ops::mul(out, tape.constant(*probe)));
  };
  return grad_check(loss, ptrs, 1e-4);
}

Parameter leaf(const std::string& name, Tensor value) {
  Parameter p;
  p.name = name;
  p.value = std::move(value);
  return p;
}

}  // namespace

TEST_CASE("conv_1x1 examples") {
  Rng rng(1);
  Tensor input = random_tensor(Shape{3, 2, 2}, rng);
  Tensor eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  CHECK(eval([&](Tape& t) { return ops::conv_1x1(t.constant(input), t.constant(eye)); }) == input);

  Tensor zeros(Shape{2, 3, 3});
  Tensor biased = eval([&](Tape& t) {
    return ops::conv_1x1(t.constant(zeros), t.constant(Tensor(Shape{2, 2})),
                         t.constant(Tensor::vector({1, -1})));
  });
  for (std::size_t j = 0; j < 9; ++j) {
    CHECK(biased[j] == 1.0);
    CHECK(biased[9 + j] == -1.0);
  }

  Tensor out = eval([&](Tape& t) {
    return ops::conv_1x1(t.constant(Tensor(Shape{2, 1, 1}, {3, 4})),
                         t.constant(Tensor(Shape{2, 2}, {1, 2, 0, 1})));
  });
  CHECK(out.values() == std::vector<Real>{11, 4});
}

TEST_CASE("conv_1x1 shape mismatch names both shapes") {
  Tape tape;
  Var in = tape.constant(Tensor(Shape{3, 2, 2}));
  Var k = tape.constant(Tensor(Shape{2, 4}));
  try {
    ops::conv_1x1(in, k);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(3x2x2)") != std::string::npos);
    CHECK(msg.find("(2x4)") != std::string::npos);
  }
}

TEST_CASE("fully_connected examples") {
  Tensor x = Tensor::vector({0.3, -0.7, 2.0});
  Tensor eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  CHECK(eval([&](Tape& t) { return ops::fully_connected(t.constant(x), t.constant(eye)); }) == x);

  Tensor w(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::vector({0.5, -0.5});
  Tensor col = eval([&](Tape& t) {
    return ops::fully_connected(t.constant(ops::one_hot(3, 1)), t.constant(w), t.constant(b));
  });
  CHECK(col.values() == std::vector<Real>{2.5, 4.5});
  Tensor lookup = eval([&](Tape& t) { return ops::select_column(t.constant(w), 1); });
  CHECK(lookup.values() == std::vector<Real>{2, 5});

  Tensor hand = eval([&](Tape& t) {
    return ops::fully_connected(t.constant(Tensor::vector({1, 1})),
                                t.constant(Tensor(Shape{1, 2}, {2, 3})),
                                t.constant(Tensor::vector({0.5})));
  });
  CHECK(hand.values() == std::vector<Real>{5.5});

  Tape tape;
  CHECK_THROWS_AS(ops::fully_connected(tape.constant(Tensor::vector({1, 2})), tape.constant(w)),
                  DimensionError);
  CHECK_THROWS_AS(ops::select_column(tape.constant(w), 3), VocabularyError);
}

TEST_CASE("activation examples") {
  auto at = [](Real x, ops::Activation kind) {
    return eval([&](Tape& t) { return ops::activation(t.constant(Tensor::scalar(x)), kind); })
        .item();
  };
  CHECK(at(0, ops::Activation::tanh) == 0.0);
  CHECK(at(0, ops::Activation::relu) == 0.0);
  CHECK(at(0, ops::Activation::sigmoid) == 0.5);
  CHECK(at(-3.2, ops::Activation::relu) == 0.0);
  CHECK(at(std::log(3.0), ops::Activation::sigmoid) == doctest::Approx(0.75).epsilon(1e-15));

  Tape tape;
  Var x = tape.variable(Tensor::scalar(-3.2));
  tape.backward(ops::relu(x));
  CHECK(tape.grad(x).item() == 0.0);
}

TEST_CASE("softmax_flat examples") {
  Tensor uniform = eval([](Tape& t) { return ops::softmax_flat(t.constant(Tensor(Shape{1, 3, 2}, 0.7))); });
  CHECK(uniform.shape() == Shape{3, 2});
  for (Real w : uniform.data()) CHECK(w == doctest::Approx(1.0 / 6).epsilon(1e-15));

  Tensor hand = eval([](Tape& t) {
    return ops::softmax_flat(t.constant(Tensor(Shape{1, 2, 2}, {std::numbers::ln2, 0, 0, 0})));
  });
  const std::vector<Real> expect{0.4, 0.2, 0.2, 0.2};
  CHECK(test::max_abs_diff(hand.data(), expect) < 1e-15);

  Tape tape;
  CHECK_THROWS_AS(ops::softmax_flat(tape.constant(Tensor(Shape{2, 2, 2}))), DimensionError);
  CHECK_THROWS_AS(ops::softmax_flat(tape.constant(Tensor(Shape{1, 0, 2}))), DimensionError);
}

TEST_CASE("softmax sums to one and ignores shifts") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 1 + rng.index(8), w = 1 + rng.index(8);
    Tensor s = random_tensor(Shape{1, h, w}, rng, -30, 30);
    const Real shift = rng.uniform(-100, 100);
    Tensor shifted = s;
    for (auto& x : shifted.data()) x += shift;
    Tensor a = eval([&](Tape& t) { return ops::softmax_flat(t.constant(s)); });
    Tensor b = eval([&](Tape& t) { return ops::softmax_flat(t.constant(shifted)); });
    Real total = 0;
    for (Real x : a.data()) {
      CHECK(x >= 0.0);
      total += x;
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
    CHECK(test::max_abs_diff(a.data(), b.data()) < 1e-12);
  }
}

TEST_CASE("weighted_spatial_sum examples") {
  Rng rng(3);
  Tensor f = random_tensor(Shape{4, 2, 3}, rng);
  Tensor onehot(Shape{2, 3});
  onehot[4] = 1.0;
  Tensor sel = eval([&](Tape& t) { return ops::weighted_spatial_sum(t.constant(f), t.constant(onehot)); });
  for (std::size_t k = 0; k < 4; ++k) CHECK(sel[k] == f.at(k, 1, 1));

  Tensor hand = eval([](Tape& t) {
    return ops::weighted_spatial_sum(t.constant(Tensor(Shape{1, 1, 2}, {2, 6})),
                                     t.constant(Tensor(Shape{1, 2}, {0.25, 0.75})));
  });
  CHECK(hand.item() == 5.0);

  Tape tape;
  CHECK_THROWS_AS(ops::weighted_spatial_sum(tape.constant(f), tape.constant(Tensor(Shape{3, 2}))),
                  DimensionError);
}

TEST_CASE("uniform weights equal mean pooling bitwise") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 1 + rng.index(8), h = 1 + rng.index(8), w = 1 + rng.index(8);
    Tensor f = random_tensor(Shape{c, h, w}, rng, -5, 5);
    Tensor uniform(Shape{h, w}, 1.0 / static_cast<Real>(h * w));
    Tensor a = eval([&](Tape& t) { return ops::weighted_spatial_sum(t.constant(f), t.constant(uniform)); });
    Tensor b = eval([&](Tape& t) { return ops::mean_pool_spatial(t.constant(f)); });
    CHECK(a == b);
  }
}

TEST_CASE("mean_pool_spatial examples") {
  Tensor single = Tensor(Shape{3, 1, 1}, {1.5, -2, 4});
  CHECK(eval([&](Tape& t) { return ops::mean_pool_spatial(t.constant(single)); }).values() ==
        single.values());
  CHECK(eval([](Tape& t) {
          return ops::mean_pool_spatial(t.constant(Tensor(Shape{1, 2, 2}, {1, 2, 3, 6})));
        }).item() == 3.0);
}

TEST_CASE("elementwise_combine examples") {
  Tensor a = Tensor::vector({2, -1});
  CHECK(eval([&](Tape& t) { return ops::mul(t.constant(a), t.constant(Tensor(Shape{2}, 1.0))); }) == a);
  CHECK(eval([](Tape& t) {
          return ops::concat(t.constant(Tensor::vector({1, 2})), t.constant(Tensor::vector({3})));
        }).values() == std::vector<Real>{1, 2, 3});
  CHECK(eval([&](Tape& t) { return ops::mul(t.constant(a), t.constant(Tensor::vector({0.5, 3}))); })
            .values() == std::vector<Real>{1, -3});

  Tensor m = eval([](Tape& t) {
    return ops::concat(t.constant(Tensor(Shape{1, 2}, {1, 2})), t.constant(Tensor(Shape{2, 2}, {3, 4, 5, 6})));
  });
  CHECK(m.shape() == Shape{3, 2});
  CHECK(m.values() == std::vector<Real>{1, 2, 3, 4, 5, 6});

  Tape tape;
  CHECK_THROWS_AS(ops::mul(tape.constant(a), tape.constant(Tensor::vector({1, 2, 3}))), DimensionError);
  CHECK_THROWS_AS(ops::concat(tape.constant(Tensor(Shape{1, 2})), tape.constant(Tensor(Shape{1, 3}))),
                  DimensionError);
}

TEST_CASE("cosine_similarity examples") {
  auto cos = [](Tensor u, Tensor v) {
    return eval([&](Tape& t) { return ops::cosine_similarity(t.constant(u), t.constant(v)); }).item();
  };
  CHECK(cos(Tensor::vector({0.3, -2, 5}), Tensor::vector({0.3, -2, 5})) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cos(Tensor::vector({1, 0}), Tensor::vector({0, 3})) == 0.0);
  CHECK(std::abs(cos(Tensor::vector({1, 0}), Tensor::vector({1, 1})) - 0.70710678) < 1e-8);
  CHECK_THROWS_AS(cos(Tensor::vector({0, 0}), Tensor::vector({1, 1})), DegenerateVectorError);
  CHECK_THROWS_AS(cos(Tensor::vector({1, 1}), Tensor::vector({1e-13, 0})), DegenerateVectorError);
}

TEST_CASE("cosine similarity is scale invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 2 + rng.index(30);
    Tensor u = random_tensor(Shape{d}, rng), v = random_tensor(Shape{d}, rng);
    const Real k = std::exp(rng.uniform(-10, 10));
    Tensor ku = u;
    for (auto& x : ku.data()) x *= k;
    const Real a = eval([&](Tape& t) { return ops::cosine_similarity(t.constant(u), t.constant(v)); }).item();
    const Real b = eval([&](Tape& t) { return ops::cosine_similarity(t.constant(ku), t.constant(v)); }).item();
    CHECK(std::abs(a - b) < 1e-9);
    CHECK(std::abs(a) <= 1.0);
  }
}

TEST_CASE("backward examples") {
  Parameter p = leaf("p", Tensor(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  Tape tape;
  tape.backward(ops::sum_all(tape.parameter(p)));
  auto grads = tape.parameter_gradients();
  REQUIRE(grads.size() == 1);
  for (Real g : grads[0].second->data()) CHECK(g == 1.0);

  Parameter q = leaf("q", Tensor::vector({1, 2}));
  Tape t2;
  Var pq = t2.parameter(q);
  (void)pq;
  Var loss = ops::sum_all(t2.constant(Tensor::vector({3, 4})));
  t2.backward(loss);
  CHECK(t2.grad(pq) == Tensor(Shape{2}));
}

TEST_CASE("gradients accumulate across fan-out") {
  Parameter p = leaf("p", Tensor::vector({1.5, -2}));
  Tape tape;
  Var x = tape.parameter(p);
  Var loss = ops::sum_all(ops::add(ops::mul(x, x), x));
  tape.backward(loss);
  CHECK(tape.grad(x).values() == std::vector<Real>{4, -3});

  ParameterSet set;
  Parameter& owned = set.add("w", Tensor::vector({1.5, -2}));
  for (int step = 0; step < 2; ++step) {
    Tape t;
    backward(t, ops::sum_all(t.parameter(owned)), set);
  }
  CHECK(owned.grad.values() == std::vector<Real>{2, 2});
}

TEST_CASE("backward contract errors") {
  Tape tape;
  Var v = tape.variable(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(tape.backward(v), ContractError);

  Tape other;
  Var foreign = other.variable(Tensor::scalar(1));
  CHECK_THROWS_AS(tape.backward(foreign), ContractError);

  Var stale = tape.variable(Tensor::scalar(2));
  tape.clear();
  CHECK_THROWS_AS(tape.backward(stale), ContractError);
  CHECK_THROWS_AS(ops::add(tape.variable(Tensor::scalar(1)), stale), ContractError);
}

TEST_CASE("non-finite results fail fast") {
  Tape tape;
  Var big = tape.variable(Tensor::scalar(1e308));
  CHECK_THROWS_AS(ops::affine(big, 10.0, 0.0), NumericalError);
  tape.set_check_finite(false);
  CHECK(std::isinf(ops::affine(big, 10.0, 0.0).item()));
}

TEST_CASE("parameter names are unique") {
  ParameterSet set;
  set.add("a", Tensor::scalar(1));
  CHECK_THROWS_AS(set.add("a", Tensor::scalar(2)), ContractError);
  CHECK(set.find("b") == nullptr);
  CHECK(set.at("a").value.item() == 1.0);
}

TEST_CASE("grad_check examples") {
  Rng rng(2);
  Parameter w = leaf("w", random_tensor(Shape{3, 4}, rng));
  Parameter b = leaf("b", random_tensor(Shape{3}, rng));
  const Tensor x = random_tensor(Shape{4}, rng);
  const Tensor probe = random_tensor(Shape{3}, rng);
  std::vector<Parameter*> ps{&w, &b};
  LossFn affine = [&](Tape& t) {
    Var y = ops::fully_connected(t.constant(x), t.parameter(w), t.parameter(b));
    return ops::sum_all(ops::mul(y, t.constant(probe)));
  };
  GradCheckReport clean = grad_check(affine, ps, 1e-9);
  CHECK(clean.passed());
  CHECK(clean.max_rel_error <= 1e-9);
  CHECK(clean.coordinates == 15);

  std::vector<Tensor> corrupted = analytic_gradients(affine, ps);
  corrupted[0][5] += 0.1;
  GradCheckReport bad = compare_gradients(affine, ps, corrupted, 1e-4);
  REQUIRE(bad.failures.size() == 1);
  CHECK(bad.failures[0].param == "w");
  CHECK(bad.failures[0].coordinate == 5);
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(1.0, 3.0) == 0.5);
}

TEST_CASE("operation gradients match finite differences on random shapes") {
  Rng rng(42);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t c = 1 + rng.index(8), h = 1 + rng.index(8), w = 1 + rng.index(8);
    const std::size_t co = 1 + rng.index(8);
    CAPTURE(c);
    CAPTURE(h);
    CAPTURE(w);
    const std::uint64_t seed = rng.next();

    std::vector<Parameter> conv{leaf("in", random_tensor(Shape{c, h, w}, rng)),
                                leaf("k", random_tensor(Shape{co, c}, rng)),
                                leaf("b", random_tensor(Shape{co}, rng))};
    CHECK(check_op(conv, [](Tape&, std::vector<Var>& v) { return ops::conv_1x1(v[0], v[1], v[2]); }, seed)
              .max_rel_error <= 1e-4);

    std::vector<Parameter> fc{leaf("x", random_tensor(Shape{c}, rng)),
                              leaf("w", random_tensor(Shape{co, c}, rng)),
                              leaf("b", random_tensor(Shape{co}, rng))};
    CHECK(check_op(fc, [](Tape&, std::vector<Var>& v) { return ops::fully_connected(v[0], v[1], v[2]); }, seed)
              .max_rel_error <= 1e-4);

    for (auto kind : {ops::Activation::tanh, ops::Activation::relu, ops::Activation::sigmoid}) {
      std::vector<Parameter> act{leaf("x", random_tensor(Shape{c, h, w}, rng, -3, 3))};
      CHECK(check_op(act, [kind](Tape&, std::vector<Var>& v) { return ops::activation(v[0], kind); }, seed)
                .max_rel_error <= 1e-4);
    }

    std::vector<Parameter> sm{leaf("s", random_tensor(Shape{1, h, w}, rng, -3, 3))};
    CHECK(check_op(sm, [](Tape&, std::vector<Var>& v) { return ops::softmax_flat(v[0]); }, seed)
              .max_rel_error <= 1e-4);

    std::vector<Parameter> ws{leaf("f", random_tensor(Shape{c, h, w}, rng)),
                              leaf("a", random_tensor(Shape{h, w}, rng, 0, 1))};
    CHECK(check_op(ws, [](Tape&, std::vector<Var>& v) { return ops::weighted_spatial_sum(v[0], v[1]); }, seed)
              .max_rel_error <= 1e-4);

    std::vector<Parameter> mp{leaf("f", random_tensor(Shape{c, h, w}, rng))};
    CHECK(check_op(mp, [](Tape&, std::vector<Var>& v) { return ops::mean_pool_spatial(v[0]); }, seed)
              .max_rel_error <= 1e-4);

    std::vector<Parameter> bc{leaf("v", random_tensor(Shape{c}, rng))};
    CHECK(check_op(bc, [h, w](Tape&, std::vector<Var>& v) { return ops::spatial_broadcast(v[0], h, w); }, seed)
              .max_rel_error <= 1e-4);

    std::vector<Parameter> cm{leaf("a", random_tensor(Shape{c, h, w}, rng)),
                              leaf("b", random_tensor(Shape{c, h, w}, rng))};
    CHECK(check_op(cm, [](Tape&, std::vector<Var>& v) { return ops::mul(v[0], v[1]); }, seed)
              .max_rel_error <= 1e-4);

    std::vector<Parameter> cc{leaf("a", random_tensor(Shape{c, h}, rng)),
                              leaf("b", random_tensor(Shape{co, h}, rng))};
    CHECK(check_op(cc, [](Tape&, std::vector<Var>& v) { return ops::concat(v[0], v[1]); }, seed)
              .max_rel_error <= 1e-4);

    std::vector<Parameter> cs{leaf("u", random_tensor(Shape{c + 1}, rng)),
                              leaf("v", random_tensor(Shape{c + 1}, rng))};
    CHECK(check_op(cs, [](Tape&, std::vector<Var>& v) { return ops::cosine_similarity(v[0], v[1]); }, seed)
              .max_rel_error <= 1e-4);

    std::vector<Parameter> sel{leaf("w", random_tensor(Shape{co, c}, rng))};
    const std::size_t col = rng.index(c), row = rng.index(co);
    CHECK(check_op(sel, [col](Tape&, std::vector<Var>& v) { return ops::select_column(v[0], col); }, seed)
              .max_rel_error <= 1e-4);
    CHECK(check_op(sel, [row](Tape&, std::vector<Var>& v) { return ops::select_row(v[0], row); }, seed)
              .max_rel_error <= 1e-4);
  }
}

TEST_CASE("operations are deterministic") {
  Rng rng(9);
  Tensor f = random_tensor(Shape{8, 8, 8}, rng);
  Tensor k = random_tensor(Shape{5, 8}, rng);
  auto run = [&] {
    Tape t;
    Var p = ops::tanh(ops::conv_1x1(t.constant(f), t.constant(k)));
    Var s = ops::softmax_flat(ops::conv_1x1(p, t.constant(Tensor(Shape{1, 5}, 0.3))));
    return ops::weighted_spatial_sum(t.constant(f), s).value();
  };
  CHECK(run() == run());
}
