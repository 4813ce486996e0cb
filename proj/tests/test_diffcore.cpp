#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "fmq/checkpoint.hpp"
#include "fmq/net.hpp"
#include "fmq/optim.hpp"
#include "helpers.hpp"

using namespace fmq;
using fmq::testing::close;

namespace {

MlpNet actor_style_net(uint64_t seed, bool layer_norm = false) {
  MlpConfig cfg;
  cfg.slots = {SlotSpec::vec(4), SlotSpec::vec(2), SlotSpec::time(8), SlotSpec::time(8)};
  cfg.hidden = {16, 16};
  cfg.out = 2;
  cfg.layer_norm = layer_norm;
  Rng rng(seed);
  return MlpNet(cfg, rng, "net.");
}

std::vector<DenseArray> random_slots(const MlpNet& net, Rng& rng, int rows) {
  std::vector<DenseArray> out;
  for (const auto& s : net.config().slots) {
    if (s.kind == SlotSpec::Kind::kTime) {
      DenseArray t = DenseArray::matrix(rows, 1);
      for (auto& v : t.data) v = static_cast<float>(rng.uniform());
      out.push_back(std::move(t));
    } else {
      DenseArray a = DenseArray::matrix(rows, s.width);
      rng.fill_normal(a);
      out.push_back(std::move(a));
    }
  }
  return out;
}

fmq::testing::DSlots to_dslots(const std::vector<DenseArray>& slots, int row) {
  fmq::testing::DSlots d;
  for (const auto& s : slots) {
    std::vector<double> v;
    for (int c = 0; c < s.cols(); ++c) v.push_back(s.at(row, c));
    d.values.push_back(std::move(v));
  }
  return d;
}

// Scalar loss used by the finite-difference oracle: mean over rows of the
// squared distance to a fixed target.
double loss_double(const MlpNet& net, const std::vector<DenseArray>& slots,
                   const DenseArray& target) {
  double acc = 0.0;
  const int rows = slots[0].rows();
  for (int r = 0; r < rows; ++r) {
    auto y = fmq::testing::eval_double(net, to_dslots(slots, r));
    for (size_t j = 0; j < y.size(); ++j) {
      const double d = y[j] - target.at(r, static_cast<int>(j));
      acc += d * d;
    }
  }
  return acc / rows;
}

}  // namespace

TEST_CASE("forward: zero-weight net maps anything to the bias") {
  MlpNet net = actor_style_net(1);
  for (Param* p : net.params()) std::fill(p->value.data.begin(), p->value.data.end(), 0.0f);
  Rng rng(7);
  auto slots = random_slots(net, rng, 3);
  DenseArray y = net.forward(slots);
  for (float v : y.data) CHECK(v == 0.0f);
}

TEST_CASE("forward: single linear layer affine arithmetic") {
  MlpConfig cfg;
  cfg.slots = {SlotSpec::vec(1)};
  cfg.hidden = {};
  cfg.out = 1;
  Rng rng(1);
  MlpNet net(cfg, rng, "lin.");
  net.params()[0]->value.data[0] = 2.0f;
  net.params()[1]->value.data[0] = 1.0f;
  DenseArray x = DenseArray::matrix(1, 1);
  x.data[0] = 3.0f;
  DenseArray y = net.forward(std::vector<DenseArray>{x});
  CHECK(y.data[0] == doctest::Approx(7.0f));
}

TEST_CASE("forward: deterministic given parameters and inputs") {
  MlpNet net = actor_style_net(3);
  Rng rng(9);
  auto slots = random_slots(net, rng, 5);
  DenseArray a = net.forward(slots);
  DenseArray b = net.forward(slots);
  CHECK(a.data == b.data);
}

TEST_CASE("tape forward matches plain forward bitwise") {
  for (bool ln : {false, true}) {
    MlpNet net = actor_style_net(11, ln);
    Rng rng(13);
    auto slots = random_slots(net, rng, 4);
    DenseArray plain = net.forward(slots);
    Tape tape;
    std::vector<Tensor> ts;
    for (const auto& s : slots) ts.push_back(tape.constant(s));
    Tensor y = net.forward_tape(tape, ts);
    CHECK(tape.value(y).data == plain.data);
  }
}

TEST_CASE("grad: linear net quadratic loss gives the outer-product gradient") {
  MlpConfig cfg;
  cfg.slots = {SlotSpec::vec(3)};
  cfg.hidden = {};
  cfg.out = 2;
  Rng rng(5);
  MlpNet net(cfg, rng, "lin.");
  DenseArray x = DenseArray::matrix(1, 3);
  for (int j = 0; j < 3; ++j) x.data[j] = static_cast<float>(j + 1);

  DenseArray y = net.forward(std::vector<DenseArray>{x});
  grad(net, [&](Tape& tape) {
    Tensor xt = tape.constant(x);
    Tensor out = net.forward_tape(tape, std::vector<Tensor>{xt});
    return tape.scale(tape.sum_sq_mean(out), 0.5f);
  });
  // d(0.5*||y||^2)/dW = x^T y
  const Param& w = *net.params()[0];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(close(w.grad.data[static_cast<size_t>(i) * 2 + j], x.data[i] * y.data[j], 1e-5, 1e-6));
}

TEST_CASE("grad: constant loss has zero gradients") {
  MlpNet net = actor_style_net(17);
  grad(net, [&](Tape& tape) { return tape.sum_sq_mean(tape.constant(DenseArray({1, 2}, 3.0f))); });
  for (const Param* p : net.params())
    for (float g : p->grad.data) CHECK(g == 0.0f);
}

TEST_CASE("grad: matches central finite differences on random coordinates") {
  for (bool ln : {false, true}) {
    CAPTURE(ln);
    MlpNet net = actor_style_net(23, ln);
    Rng rng(29);
    const int rows = 3;
    auto slots = random_slots(net, rng, rows);
    DenseArray target = DenseArray::matrix(rows, 2);
    rng.fill_normal(target);

    grad(net, [&](Tape& tape) {
      std::vector<Tensor> ts;
      for (const auto& s : slots) ts.push_back(tape.constant(s));
      Tensor out = net.forward_tape(tape, ts);
      return tape.sum_sq_mean(tape.sub(out, tape.constant(target)));
    });

    auto params = net.params();
    const double eps = 1e-3;
    int checked = 0;
    for (int trial = 0; trial < 64; ++trial) {
      Param* p = params[rng.below(params.size())];
      const size_t ci = rng.below(p->value.data.size());
      const float saved = p->value.data[ci];
      p->value.data[ci] = saved + static_cast<float>(eps);
      const double lp = loss_double(net, slots, target);
      p->value.data[ci] = saved - static_cast<float>(eps);
      const double lm = loss_double(net, slots, target);
      p->value.data[ci] = saved;
      const double fd = (lp - lm) / (2.0 * eps);
      const double ad = p->grad.data[ci];
      CAPTURE(p->name);
      CAPTURE(ci);
      CHECK(close(ad, fd, 1e-3, 1e-6));
      ++checked;
    }
    CHECK(checked == 64);
  }
}

TEST_CASE("jvp: linear net maps tangent through the weight matrix") {
  MlpConfig cfg;
  cfg.slots = {SlotSpec::vec(3)};
  cfg.hidden = {};
  cfg.out = 2;
  Rng rng(31);
  MlpNet net(cfg, rng, "lin.");
  DenseArray x = DenseArray::matrix(1, 3);
  DenseArray v = DenseArray::matrix(1, 3);
  rng.fill_normal(x);
  rng.fill_normal(v);
  auto out = net.forward_jvp(std::vector<DenseArray>{x}, std::vector<DenseArray>{v});
  const Param& w = *net.params()[0];
  for (int j = 0; j < 2; ++j) {
    double want = 0.0;
    for (int i = 0; i < 3; ++i) want += static_cast<double>(v.data[i]) * w.value.data[static_cast<size_t>(i) * 2 + j];
    CHECK(close(out.tangent.data[j], want, 1e-6, 1e-7));
  }
}

TEST_CASE("jvp: zero tangent gives zero output tangent") {
  MlpNet net = actor_style_net(37);
  Rng rng(41);
  auto slots = random_slots(net, rng, 2);
  std::vector<DenseArray> tangents(slots.size());
  tangents[1] = DenseArray(slots[1].shape, 0.0f);
  auto out = net.forward_jvp(slots, tangents);
  for (float v : out.tangent.data) CHECK(v == 0.0f);
}

TEST_CASE("jvp: matches central finite differences along random tangents") {
  MlpNet net = actor_style_net(43);
  Rng rng(47);
  const int rows = 2;
  auto slots = random_slots(net, rng, rows);

  for (int trial = 0; trial < 16; ++trial) {
    // Random tangents on vector slots; unit scalar tangents on time axes.
    std::vector<DenseArray> tangents;
    for (size_t si = 0; si < slots.size(); ++si) {
      DenseArray t(slots[si].shape, 0.0f);
      if (net.config().slots[si].kind == SlotSpec::Kind::kTime)
        std::fill(t.data.begin(), t.data.end(), 1.0f);
      else
        rng.fill_normal(t);
      tangents.push_back(std::move(t));
    }
    auto out = net.forward_jvp(slots, tangents);

    const double eps = 1e-3;
    for (int r = 0; r < rows; ++r) {
      auto base = to_dslots(slots, r);
      auto plus = base;
      auto minus = base;
      for (size_t si = 0; si < slots.size(); ++si)
        for (size_t c = 0; c < base.values[si].size(); ++c) {
          const double dv = tangents[si].at(r, static_cast<int>(c));
          plus.values[si][c] += eps * dv;
          minus.values[si][c] -= eps * dv;
        }
      auto yp = fmq::testing::eval_double(net, plus);
      auto ym = fmq::testing::eval_double(net, minus);
      for (size_t j = 0; j < yp.size(); ++j) {
        const double fd = (yp[j] - ym[j]) / (2.0 * eps);
        CHECK(close(out.tangent.at(r, static_cast<int>(j)), fd, 1e-3, 1e-5));
      }
    }
  }
}

TEST_CASE("tape dual tangent equals plain jvp bitwise") {
  MlpNet net = actor_style_net(53);
  Rng rng(59);
  auto slots = random_slots(net, rng, 3);
  std::vector<DenseArray> tangents(slots.size());
  tangents[2] = DenseArray(slots[2].shape, 1.0f);  // d/dt on the first time axis

  auto plain = net.forward_jvp(slots, tangents);

  Tape tape;
  std::vector<Dual> duals;
  for (size_t i = 0; i < slots.size(); ++i) {
    Dual d;
    d.primal = tape.constant(slots[i]);
    if (tangents[i].size() != 0) d.tangent = tape.constant(tangents[i]);
    duals.push_back(d);
  }
  Dual out = net.forward_tape_dual(tape, duals);
  CHECK(tape.value(out.primal).data == plain.value.data);
  CHECK(tape.value(out.tangent).data == plain.tangent.data);
}

TEST_CASE("reverse mode through a recorded tangent matches finite differences") {
  // The training losses differentiate expressions that contain directional
  // derivatives; this pins the reverse-over-forward path.
  MlpNet net = actor_style_net(61);
  Rng rng(67);
  const int rows = 2;
  auto slots = random_slots(net, rng, rows);

  auto tangent_loss_double = [&]() {
    double acc = 0.0;
    const double eps = 5e-5;  // inner FD only replaces the jvp, net is in f64
    for (int r = 0; r < rows; ++r) {
      auto plus = to_dslots(slots, r);
      auto minus = to_dslots(slots, r);
      plus.values[3][0] += eps;
      minus.values[3][0] -= eps;
      auto yp = fmq::testing::eval_double(net, plus);
      auto ym = fmq::testing::eval_double(net, minus);
      for (size_t j = 0; j < yp.size(); ++j) {
        const double d = (yp[j] - ym[j]) / (2.0 * eps);
        acc += d * d;
      }
    }
    return acc / rows;
  };

  grad(net, [&](Tape& tape) {
    std::vector<Dual> duals;
    for (size_t i = 0; i < slots.size(); ++i) {
      Dual d;
      d.primal = tape.constant(slots[i]);
      if (i == 3) d.tangent = tape.constant(DenseArray(slots[i].shape, 1.0f));
      duals.push_back(d);
    }
    Dual out = net.forward_tape_dual(tape, duals);
    return tape.sum_sq_mean(out.tangent);
  });

  auto params = net.params();
  const double eps = 1e-3;
  for (int trial = 0; trial < 24; ++trial) {
    Param* p = params[rng.below(params.size())];
    const size_t ci = rng.below(p->value.data.size());
    const float saved = p->value.data[ci];
    p->value.data[ci] = saved + static_cast<float>(eps);
    const double lp = tangent_loss_double();
    p->value.data[ci] = saved - static_cast<float>(eps);
    const double lm = tangent_loss_double();
    p->value.data[ci] = saved;
    const double fd = (lp - lm) / (2.0 * eps);
    CHECK(close(p->grad.data[ci], fd, 2e-3, 1e-5));
  }
}

TEST_CASE("input gradients flow to input leaves") {
  MlpNet net = actor_style_net(71);
  Rng rng(73);
  auto slots = random_slots(net, rng, 2);

  Tape tape;
  std::vector<Tensor> ts;
  for (size_t i = 0; i < slots.size(); ++i)
    ts.push_back(i == 1 ? tape.input(slots[i]) : tape.constant(slots[i]));
  Tensor loss = tape.sum_sq_mean(net.forward_tape(tape, ts));
  tape.backward(loss);
  const DenseArray& gx = tape.grad(ts[1]);
  REQUIRE(gx.size() == slots[1].size());

  const double eps = 1e-3;
  for (int c = 0; c < slots[1].cols(); ++c) {
    for (int r = 0; r < 2; ++r) {
      auto plus = to_dslots(slots, r);
      auto minus = to_dslots(slots, r);
      plus.values[1][static_cast<size_t>(c)] += eps;
      minus.values[1][static_cast<size_t>(c)] -= eps;
      auto yp = fmq::testing::eval_double(net, plus);
      auto ym = fmq::testing::eval_double(net, minus);
      double fd = 0.0;
      for (size_t j = 0; j < yp.size(); ++j) fd += (yp[j] * yp[j] - ym[j] * ym[j]) / (2.0 * eps);
      fd /= 2.0;  // loss averages over the two rows
      CHECK(close(gx.at(r, c), fd, 1e-3, 1e-5));
    }
  }
}

TEST_CASE("adam: zero gradient from a fresh state leaves parameters unchanged") {
  MlpNet net = actor_style_net(79);
  std::vector<float> before;
  for (const Param* p : net.params())
    before.insert(before.end(), p->value.data.begin(), p->value.data.end());
  net.zero_grad();
  Adam opt(net.params(), {});
  opt.step();
  std::vector<float> after;
  for (const Param* p : net.params())
    after.insert(after.end(), p->value.data.begin(), p->value.data.end());
  CHECK(before == after);
  CHECK(opt.steps() == 1);
}

TEST_CASE("adam: first step moves each coordinate by about lr against the gradient sign") {
  Param p("p", DenseArray({4}, 0.0f));
  p.grad.data = {0.5f, -2.0f, 1e-3f, 3.0f};
  AdamConfig cfg;
  cfg.lr = 0.01f;
  Adam opt({&p}, cfg);
  opt.step();
  for (int i = 0; i < 4; ++i) {
    const float g = (i == 0 ? 0.5f : i == 1 ? -2.0f : i == 2 ? 1e-3f : 3.0f);
    CHECK(close(p.value.data[i], -0.01 * (g > 0 ? 1.0 : -1.0), 1e-3));
  }
}

TEST_CASE("adam: repeated constant gradient descends monotonically") {
  Param p("p", DenseArray({1}, 1.0f));
  AdamConfig cfg;
  cfg.lr = 0.05f;
  Adam opt({&p}, cfg);
  float prev = p.value.data[0];
  for (int i = 0; i < 50; ++i) {
    p.grad.data[0] = 2.0f;  // constant positive gradient
    opt.step();
    CHECK(p.value.data[0] < prev);
    prev = p.value.data[0];
  }
}

TEST_CASE("adam: non-finite gradient raises a numeric error") {
  Param p("p", DenseArray({1}, 0.0f));
  p.grad.data[0] = std::numeric_limits<float>::quiet_NaN();
  Adam opt({&p}, {});
  CHECK_THROWS_AS(opt.step(), NumericError);
}

TEST_CASE("ema: tau=1 copies, small tau interpolates, iteration converges") {
  Param target("t", DenseArray({2}, 0.0f));
  Param online("o", DenseArray({2}, 1.0f));
  std::vector<Param*> ts{&target};
  std::vector<const Param*> os{&online};

  ema_update(ts, os, 0.005f);
  CHECK(target.value.data[0] == doctest::Approx(0.005f));

  ema_update(ts, os, 1.0f);
  CHECK(target.value.data[0] == 1.0f);

  target.value.data[0] = 0.0f;
  for (int i = 0; i < 2000; ++i) ema_update(ts, os, 0.01f);
  CHECK(close(target.value.data[0], 1.0, 1e-5, 1e-5));

  CHECK_THROWS_AS(ema_update(ts, os, 0.0f), DomainError);
}

TEST_CASE("checkpoint container round trips bit-exactly") {
  Rng rng(83);
  DenseArray a = DenseArray::matrix(7, 5);
  rng.fill_normal(a);
  DenseArray b({3}, 0.0f);
  b.data = {1.5f, -2.25f, 1e-30f};
  nlohmann::json meta;
  meta["note"] = "round-trip";
  meta["n"] = 7;

  const std::string path =
      (std::filesystem::temp_directory_path() / "fmq_test_ckpt.bin").string();
  save_container(path, kCheckpointMagic, {{"w", &a}, {"b", &b}}, meta);
  Container c = load_container(path, kCheckpointMagic);
  CHECK(c.tensors.at("w").shape == a.shape);
  CHECK(c.tensors.at("w").data == a.data);
  CHECK(c.tensors.at("b").data == b.data);
  CHECK(c.meta.at("note") == "round-trip");
  CHECK_THROWS_AS(load_container(path, kDatasetMagic), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("seeded initialization and updates are bitwise reproducible") {
  auto run = [](uint64_t seed) {
    MlpNet net = actor_style_net(seed);
    Rng rng(seed + 1);
    Adam opt(net.params(), {});
    for (int step = 0; step < 5; ++step) {
      auto slots = random_slots(net, rng, 4);
      DenseArray target = DenseArray::matrix(4, 2);
      rng.fill_normal(target);
      grad(net, [&](Tape& tape) {
        std::vector<Tensor> ts;
        for (const auto& s : slots) ts.push_back(tape.constant(s));
        return tape.sum_sq_mean(tape.sub(net.forward_tape(tape, ts), tape.constant(target)));
      });
      opt.step();
    }
    return net.value_hash();
  };
  CHECK(run(123) == run(123));
  CHECK(run(123) != run(124));
}
