#include "doctest.h"

#include <cmath>

#include "cotmae/nn/grad_check.hpp"
#include "cotmae/nn/ops.hpp"

using namespace cotmae;
using namespace cotmae::nn;

namespace {

using TD = Tensor<double>;

TD random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  TD t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

Parameter<double> random_param(const std::string& name, Shape shape, Rng& rng) {
  return Parameter<double>(name, random_tensor(std::move(shape), rng));
}

/// u^T x v for fixed random u, v: a scalar that weighs every entry of x.
Var<double> scalarize(const Var<double>& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto& t = x.tape();
  const auto rows = x.value().rows(), cols = x.value().cols();
  auto u = t.constant(random_tensor({1, rows}, rng));
  auto v = t.constant(random_tensor({cols, 1}, rng));
  auto flat = x;
  if (x.value().rank() != 2) {
    TD copy = x.value();
    copy.reshape({rows, cols});
    flat = t.record(std::move(copy), {x}, [x](Tape<double>& tp, std::size_t self) {
      auto& g = tp.grad(x.id());
      const auto& gs = tp.grad(self);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs[i];
    });
  }
  return matmul(matmul(u, flat), v);
}

double max_rel(const LossFn& f, std::vector<Parameter<double>*> params) {
  GradCheckOptions opts;
  opts.eps = 1e-5;
  return grad_check(f, params, opts).max_rel_error;
}

}  // namespace

TEST_CASE("matmul values") {
  Tape<double> t;
  auto a = t.constant(TD({2, 2}, {1, 2, 3, 4}));
  auto b = t.constant(TD({2, 1}, {1, 1}));
  CHECK(matmul(a, b).value().storage() == std::vector<double>{3, 7});
  auto eye = t.constant(TD({2, 2}, {1, 0, 0, 1}));
  CHECK(matmul(a, eye).value() == a.value());
  CHECK(matmul(a, a, true).value().storage() == std::vector<double>{5, 11, 11, 25});
  CHECK_THROWS(matmul(a, t.constant(TD({3, 1}))));
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(1);
  auto a = random_param("a", {4, 5}, rng);
  auto b = random_param("b", {5, 3}, rng);
  auto c = random_param("c", {3, 5}, rng);
  CHECK(max_rel([&](Tape<double>& t) { return scalarize(matmul(t.param(a), t.param(b))); }, {&a, &b}) < 1e-5);
  CHECK(max_rel([&](Tape<double>& t) { return scalarize(matmul(t.param(a), t.param(c), true)); }, {&a, &c}) < 1e-5);
}

TEST_CASE("layer_norm") {
  Tape<double> t;
  auto g = t.constant(TD({2}, {1, 1}));
  auto b = t.constant(TD({2}, {0, 0}));
  auto y = layer_norm(t.constant(TD({1, 2}, {1, 3})), g, b);
  CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-9));
  auto g3 = t.constant(TD({3}, 1.0));
  auto b3 = t.constant(TD({3}, 0.0));
  auto z = layer_norm(t.constant(TD({1, 3}, 5.0)), g3, b3);
  for (auto v : z.value().values()) CHECK(v == 0.0);

  Rng rng(2);
  auto x = random_param("x", {3, 6}, rng);
  auto gp = random_param("g", {6}, rng);
  auto bp = random_param("b", {6}, rng);
  CHECK(max_rel([&](Tape<double>& tp) { return scalarize(layer_norm(tp.param(x), tp.param(gp), tp.param(bp))); },
                {&x, &gp, &bp}) < 1e-5);
}

TEST_CASE("gelu and softmax") {
  Tape<double> t;
  CHECK(gelu(t.constant(TD({1}, {0.0}))).value()[0] == 0.0);
  auto s = softmax(t.constant(TD({1, 2}, {0, 0})));
  CHECK(s.value()[0] == doctest::Approx(0.5));
  CHECK(s.value()[1] == doctest::Approx(0.5));

  Rng rng(3);
  const auto x = random_tensor({3, 7}, rng, 3.0);
  TD shifted = x;
  for (auto& v : shifted.values()) v += 123.25;
  auto s1 = softmax(t.constant(x));
  auto s2 = softmax(t.constant(shifted));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(s1.value()[i] - s2.value()[i]) < 1e-6);

  auto p = random_param("p", {2, 5}, rng);
  CHECK(max_rel([&](Tape<double>& tp) { return scalarize(gelu(tp.param(p))); }, {&p}) < 1e-5);
  CHECK(max_rel([&](Tape<double>& tp) { return scalarize(softmax(tp.param(p))); }, {&p}) < 1e-5);
}

TEST_CASE("masked cross-entropy") {
  Tape<double> t;
  const std::vector<int> one{7};
  CHECK(masked_cross_entropy(t.constant(TD({1, 100}, 0.0)), one).value().item() ==
        doctest::Approx(4.605170185988092).epsilon(1e-12));

  TD sat({1, 10}, 0.0);
  sat[3] = 20.0;
  const std::vector<int> three{3};
  CHECK(masked_cross_entropy(t.constant(sat), three).value().item() < 1e-7);

  const std::vector<int> none{kIgnoreLabel, kIgnoreLabel};
  CHECK_THROWS_WITH(masked_cross_entropy(t.constant(TD({2, 4})), none), doctest::Contains("no masked positions"));

  Rng rng(4);
  auto logits = random_param("logits", {4, 6}, rng);
  const std::vector<int> labels{2, kIgnoreLabel, 5, kIgnoreLabel};
  Tape<double> tp;
  tp.backward(masked_cross_entropy(tp.param(logits), labels));
  for (std::size_t c = 0; c < 6; ++c) {
    CHECK(logits.grad.at(1, c) == 0.0);
    CHECK(logits.grad.at(3, c) == 0.0);
  }
  CHECK(max_rel([&](Tape<double>& x) { return masked_cross_entropy(x.param(logits), labels); }, {&logits}) < 1e-5);
}

TEST_CASE("candidate cross-entropy") {
  Tape<double> t;
  const std::vector<std::vector<std::size_t>> cands{{0, 1, 2, 3}};
  CHECK(candidate_cross_entropy(t.constant(TD({1, 4}, 1.5)), cands).value().item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  TD sat({1, 4}, 0.0);
  sat[2] = 20.0;
  const std::vector<std::vector<std::size_t>> pos2{{2, 0, 1, 3}};
  CHECK(candidate_cross_entropy(t.constant(sat), pos2).value().item() < 1e-8);
  const std::vector<std::vector<std::size_t>> single{{0}};
  CHECK_THROWS(candidate_cross_entropy(t.constant(TD({1, 4})), single));

  Rng rng(5);
  auto s = random_param("s", {3, 5}, rng);
  const std::vector<std::vector<std::size_t>> rows{{0, 1, 2}, {4, 0}, {2, 3, 4, 1}};
  CHECK(max_rel([&](Tape<double>& x) { return candidate_cross_entropy(x.param(s), rows); }, {&s}) < 1e-5);
}

TEST_CASE("embedding, gather and replace rows") {
  Rng rng(6);
  auto table = random_param("table", {7, 4}, rng);
  auto src = random_param("src", {2, 4}, rng);
  const std::vector<std::int32_t> ids{3, 1, 3, 6};
  const std::vector<std::size_t> rows{2, 0};
  CHECK(max_rel([&](Tape<double>& t) { return scalarize(embedding(t.param(table), ids)); }, {&table}) < 1e-5);
  CHECK(max_rel([&](Tape<double>& t) { return scalarize(gather_rows(t.param(table), rows)); }, {&table}) < 1e-5);
  CHECK(max_rel([&](Tape<double>& t) {
          return scalarize(replace_rows(embedding(t.param(table), ids), rows, t.param(src)));
        }, {&table, &src}) < 1e-5);

  Tape<double> t;
  auto x = embedding(t.param(table), ids);
  auto r = replace_rows(x, rows, t.param(src));
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(r.value().at(2, c) == src.value.at(0, c));
    CHECK(r.value().at(1, c) == x.value().at(1, c));
  }
  const std::vector<std::size_t> dup{1, 1};
  CHECK_THROWS(replace_rows(x, dup, t.param(src)));
  const std::vector<std::int32_t> bad{9};
  CHECK_THROWS(embedding(t.param(table), bad));
}

TEST_CASE("self-attention ignores padded keys") {
  Rng rng(7);
  const std::size_t batch = 2, seq = 4, d = 6;
  auto q = random_param("q", {batch * seq, d}, rng);
  auto k = random_param("k", {batch * seq, d}, rng);
  auto v = random_param("v", {batch * seq, d}, rng);
  const std::vector<std::uint8_t> valid{1, 1, 1, 0, 1, 1, 0, 0};
  auto f = [&](Tape<double>& t) {
    return scalarize(self_attention(t.param(q), t.param(k), t.param(v), batch, seq, 2, valid));
  };
  CHECK(max_rel(f, {&q, &k, &v}) < 1e-5);

  Tape<double> t;
  auto out1 = self_attention(t.param(q), t.param(k), t.param(v), batch, seq, 2, valid);
  auto v2 = v;
  for (std::size_t c = 0; c < d; ++c) v2.value.at(3, c) += 100.0;
  auto out2 = self_attention(t.param(q), t.param(k), t.param(v2), batch, seq, 2, valid);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < d; ++c) CHECK(out1.value().at(r, c) == doctest::Approx(out2.value().at(r, c)));
  }
}

TEST_CASE("add, bias, scale, batched matmul gradients") {
  Rng rng(8);
  auto a = random_param("a", {3, 4}, rng);
  auto b = random_param("b", {3, 4}, rng);
  auto bias = random_param("bias", {4}, rng);
  auto x = random_param("x", {2, 3, 4}, rng);
  auto y = random_param("y", {2, 4, 5}, rng);
  CHECK(max_rel([&](Tape<double>& t) { return scalarize(add(t.param(a), t.param(b))); }, {&a, &b}) < 1e-5);
  CHECK(max_rel([&](Tape<double>& t) { return scalarize(add_bias(t.param(a), t.param(bias))); }, {&a, &bias}) < 1e-5);
  CHECK(max_rel([&](Tape<double>& t) { return scalarize(scale(t.param(a), 0.37)); }, {&a}) < 1e-5);
  CHECK(max_rel([&](Tape<double>& t) { return scalarize(batched_matmul(t.param(x), t.param(y))); }, {&x, &y}) < 1e-5);
}

TEST_CASE("dropout") {
  Rng rng(9);
  Tape<double> t;
  auto x = t.constant(TD({100, 100}, 1.0));
  CHECK(dropout(x, 0.0, rng).id() == x.id());
  auto y = dropout(x, 0.25, rng);
  double sum = 0.0;
  std::size_t zeros = 0;
  for (auto v : y.value().values()) {
    sum += v;
    if (v == 0.0) {
      ++zeros;
    } else {
      CHECK(v == doctest::Approx(1.0 / 0.75));
    }
  }
  CHECK(sum / 10000.0 == doctest::Approx(1.0).epsilon(0.05));
  CHECK(zeros > 2000);
  CHECK(zeros < 3000);
}

TEST_CASE("grad_check oracles") {
  Rng rng(10);
  auto w = random_param("w", {3, 3}, rng);
  const auto c = random_tensor({3, 1}, rng);
  auto linear_fn = [&](Tape<double>& t) {
    auto ones = t.constant(TD({1, 3}, 1.0));
    return matmul(matmul(ones, t.param(w)), t.constant(c));
  };
  CHECK(grad_check(linear_fn, {&w}).max_rel_error < 1e-9);

  auto zero_fn = [&](Tape<double>& t) { return scale(scalarize(t.param(w)), 0.0); };
  CHECK(grad_check(zero_fn, {&w}).max_rel_error == 0.0);

  auto bad = [&](Tape<double>& t) {
    auto v = scalarize(t.param(w));
    return t.record(TD({1}, {std::nan("")}), {v}, [](Tape<double>&, std::size_t) {});
  };
  CHECK_THROWS(grad_check(bad, {&w}));
}

TEST_CASE("parameter gradients accumulate across backward calls") {
  Rng rng(11);
  auto w = random_param("w", {2, 2}, rng);
  for (int i = 0; i < 2; ++i) {
    Tape<double> t;
    t.backward(scalarize(t.param(w)));
  }
  Parameter<double> w1 = w;
  w1.zero_grad();
  Tape<double> t;
  t.backward(scalarize(t.param(w1)));
  for (std::size_t i = 0; i < 4; ++i) CHECK(w.grad[i] == doctest::Approx(2.0 * w1.grad[i]));
}
