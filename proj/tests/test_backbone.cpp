#include "grasp/backbone.hpp"
#include "grasp/checkpoint.hpp"
#include "grasp/errors.hpp"
#include "grasp/optimizer.hpp"

#include "support.hpp"

#include <doctest.h>

#include <fstream>

using namespace grasp;
using test::random_tensor;

namespace {

BackboneConfig config(int in, int out, int depth = 4, int width = 4, BackboneVariant v = BackboneVariant::plain) {
  BackboneConfig c;
  c.in_channels = in;
  c.out_classes = out;
  c.depth = depth;
  c.base_width = width;
  c.variant = v;
  return c;
}

Tensor<float> random_input(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(normal(rng));
  return t;
}

bool same(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && (a.array() == b.array()).all();
}

}  // namespace

TEST_CASE("forward keeps spatial shape and emits out_classes channels") {
  const auto net = Backbone<float>::create(config(2, 2, 4, 4), 1);
  NoGradGuard guard;
  CHECK(net.forward(Var<float>(random_input({2, 2, 16, 16, 16}, 1))).shape() == Shape{2, 2, 16, 16, 16});
  const auto net3 = Backbone<float>::create(config(3, 2, 4, 4), 1);
  CHECK(net3.forward(Var<float>(random_input({1, 3, 32, 24, 16}, 2))).shape() == Shape{1, 2, 32, 24, 16});
  for (auto variant : {BackboneVariant::plain, BackboneVariant::residual})
    for (int depth : {2, 3}) {
      const auto n = Backbone<float>::create(config(1, 6, depth, 4, variant), 3);
      CHECK(n.forward(Var<float>(random_input({1, 1, 8, 12, 4}, 3))).shape() == Shape{1, 6, 8, 12, 4});
    }
}

TEST_CASE("indivisible extent names the offending axis") {
  const auto net = Backbone<float>::create(config(2, 2, 4, 4), 1);
  try {
    net.check_input({1, 2, 32, 33, 32});
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("axis W") != std::string::npos);
  }
  CHECK_THROWS_AS(net.check_input({1, 2, 33, 33, 33}), ShapeError);
  CHECK_THROWS_AS(net.check_input({1, 3, 32, 32, 32}), ShapeError);
}

TEST_CASE("encode returns the two deepest maps with doubling widths") {
  const auto net = Backbone<float>::create(config(2, 2, 4, 16), 4);
  NoGradGuard guard;
  const auto feats = net.encode(Var<float>(random_input({1, 2, 32, 32, 32}, 4)));
  REQUIRE(feats.size() == 2);
  CHECK(feats[0].shape() == Shape{1, 128, 4, 4, 4});
  CHECK(feats[1].shape() == Shape{1, 64, 8, 8, 8});
}

TEST_CASE("decoding the encoder features reproduces forward bitwise") {
  for (auto variant : {BackboneVariant::plain, BackboneVariant::residual}) {
    const auto net = Backbone<float>::create(config(2, 2, 3, 4, variant), 5);
    NoGradGuard guard;
    const Var<float> x(random_input({2, 2, 16, 8, 8}, 5));
    CHECK(same(net.decode(net.encode_all(x)).value(), net.forward(x).value()));
    CHECK(same(net.forward(x).value(), net.forward(x).value()));
  }
}

TEST_CASE("dual decoder heads are independent and share the encoder") {
  BackboneConfig c = config(2, 2, 3, 4);
  c.aux_out_classes = 6;
  auto net = Backbone<float>::create(c, 6);
  NoGradGuard guard;
  const Var<float> x(random_input({1, 2, 16, 16, 16}, 6));
  const auto [path0, ana0] = net.forward_dual(x);
  CHECK(path0.shape() == Shape{1, 2, 16, 16, 16});
  CHECK(ana0.shape() == Shape{1, 6, 16, 16, 16});

  for (auto& p : net.params().items())
    if (p.group == "decoder") p.var.mutable_value().array().setZero();
  const auto [path1, ana1] = net.forward_dual(x);
  CHECK_FALSE(same(path1.value(), path0.value()));
  CHECK(same(ana1.value(), ana0.value()));

  auto fresh = Backbone<float>::create(c, 6);
  const auto [p2, a2] = fresh.forward_dual(x);
  fresh.params()["encoder.1.conv1.weight"].mutable_value().array() += 0.05f;
  const auto [p3, a3] = fresh.forward_dual(x);
  CHECK_FALSE(same(p2.value(), p3.value()));
  CHECK_FALSE(same(a2.value(), a3.value()));

  CHECK_THROWS_AS(Backbone<float>::create(config(2, 2, 3, 4), 1).forward_dual(x), ConfigError);
}

TEST_CASE("init_finetune copies the CT path and re-initialises PET kernels and head") {
  auto anatomy = Backbone<float>::create(config(1, 6, 3, 4), 7);
  const auto target = config(2, 2, 3, 4);
  const auto net = init_finetune(anatomy, target, 8);
  CHECK(net.params().count() == Backbone<float>::create(target, 99).params().count());

  const auto& src = anatomy.params()["encoder.0.conv1.weight"].value();
  const auto& dst = net.params()["encoder.0.conv1.weight"].value();
  const Index kk = 27;
  for (Index o = 0; o < dst.dim(0); ++o) {
    CHECK((dst.array().segment(o * 2 * kk, kk) == src.array().segment(o * kk, kk)).all());
    for (Index s = 0; s < src.dim(0); ++s)
      CHECK_FALSE((dst.array().segment(o * 2 * kk + kk, kk) == src.array().segment(s * kk, kk)).all());
  }
  for (const auto& p : net.params().items()) {
    if (p.name == "encoder.0.conv1.weight" || p.name.rfind("decoder.out.", 0) == 0) continue;
    CHECK(same(p.var.value(), anatomy.params()[p.name].value()));
  }
  CHECK(net.params()["decoder.out.weight"].shape() == Shape{2, 4, 1, 1, 1});

  CHECK_THROWS_AS(init_finetune(anatomy, config(3, 2, 3, 4), 1), IncompatibilityError);
  CHECK_THROWS_AS(init_finetune(anatomy, config(2, 2, 3, 8), 1), IncompatibilityError);
  CHECK_THROWS_AS(init_finetune(net, target, 1), IncompatibilityError);
}

TEST_CASE("init_finetune preserves the anatomy function with zero PET input and kernels") {
  auto anatomy = Backbone<float>::create(config(1, 6, 3, 4), 9);
  auto target = config(2, 6, 3, 4);
  auto net = init_finetune(anatomy, target, 10);
  auto& w = net.params()["encoder.0.conv1.weight"].mutable_value();
  for (Index o = 0; o < w.dim(0); ++o) w.array().segment(o * 54 + 27, 27).setZero();
  net.params()["decoder.out.weight"].mutable_value() = anatomy.params()["decoder.out.weight"].value();
  net.params()["decoder.out.bias"].mutable_value() = anatomy.params()["decoder.out.bias"].value();

  NoGradGuard guard;
  const auto ct = random_input({1, 1, 16, 16, 8}, 11);
  Tensor<float> both(Shape{1, 2, 16, 16, 8});
  both.array().head(ct.size()) = ct.array();
  const auto a = anatomy.forward(Var<float>(ct)).value();
  const auto b = net.forward(Var<float>(both)).value();
  CHECK((a.array() - b.array()).abs().maxCoeff() < 1e-4f);
}

TEST_CASE("frozen parameters survive 100 optimiser steps and unfreeze restores training") {
  auto net = Backbone<float>::create(config(2, 2, 2, 4), 12);
  auto head = Backbone<float>::create(config(2, 2, 2, 4), 13);
  freeze(net);
  CHECK(net.params().all_frozen());
  const auto before = net.params().digest();
  AdamW<float> opt(AdamWConfig{1e-2, 0.9, 0.999, 1e-8, 1e-2});
  opt.add(net.params());
  opt.add(head.params());
  const Var<float> x(random_input({1, 2, 8, 8, 8}, 14));
  for (int step = 0; step < 100; ++step) {
    auto loss = sum(mul(add(net.forward(x), head.forward(x)), add(net.forward(x), head.forward(x))));
    backward(loss);
    for (const auto& p : net.params().items()) CHECK(p.var.grad().size() == 0);
    opt.step();
    head.params().zero_grad();
  }
  CHECK(net.params().digest() == before);

  unfreeze(net);
  backward(sum(net.forward(x)));
  opt.step();
  CHECK(net.params().digest() != before);
}

TEST_CASE("tiny network parameter gradients match finite differences") {
  Rng rng(15);
  for (auto variant : {BackboneVariant::plain, BackboneVariant::residual}) {
    auto net = Backbone<double>::create(config(2, 2, 2, 4, variant), 16);
    const Var<double> x(random_tensor({1, 2, 8, 8, 8}, rng));
    const auto r = random_tensor({1, 2, 8, 8, 8}, rng);
    std::vector<std::pair<std::string, Var<double>>> leaves;
    for (auto& p : net.params().items()) leaves.emplace_back(p.name, p.var);
    const auto g = test::check_gradients([&] { return sum(mul(net.forward(x), Var<double>(r))); }, leaves, rng, 4);
    INFO("worst " << g.worst << " " << g.max_rel);
    CHECK(g.max_rel < test::kFdTolerance);
  }
}

TEST_CASE("checkpoint round trip reproduces forward outputs bitwise") {
  test::TempDir dir("bb");
  BackboneConfig c = config(3, 2, 3, 4, BackboneVariant::residual);
  const auto net = Backbone<float>::create(c, 17);
  Checkpoint ckpt;
  ckpt.meta["note"] = "round trip";
  ckpt.sets["path"] = net.params();
  save_checkpoint(ckpt, dir.path() / "n.gckpt");
  const auto back = load_checkpoint(dir.path() / "n.gckpt");
  CHECK(back.meta.at("note") == "round trip");
  auto fresh = Backbone<float>::create(c, 18);
  copy_values(back.at("path"), fresh.params());
  CHECK(fresh.params().digest() == net.params().digest());
  NoGradGuard guard;
  const Var<float> x(random_input({1, 3, 8, 8, 8}, 19));
  CHECK(same(fresh.forward(x).value(), net.forward(x).value()));
}

TEST_CASE("corrupted or missing checkpoints are rejected") {
  test::TempDir dir("bb");
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "none.gckpt"), DependencyError);
  Checkpoint ckpt;
  ckpt.sets["path"] = Backbone<float>::create(config(2, 2, 2, 4), 1).params();
  const auto p = dir.path() / "c.gckpt";
  save_checkpoint(ckpt, p);
  const auto size = std::filesystem::file_size(p);
  {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(size - 3));
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint(p), FormatError);
  std::filesystem::resize_file(p, size - 8);
  CHECK_THROWS_AS(load_checkpoint(p), TruncationError);
}

TEST_CASE("configuration invariants") {
  CHECK_THROWS_AS(Backbone<float>::create(config(2, 2, 1, 4), 0), ConfigError);
  CHECK_THROWS_AS(Backbone<float>::create(config(2, 2, 3, 2), 0), ConfigError);
  CHECK_THROWS_AS(parse_variant("dense"), ConfigError);
}
