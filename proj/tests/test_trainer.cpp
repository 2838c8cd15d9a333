#include "grasp/errors.hpp"
#include "grasp/optimizer.hpp"
#include "grasp/trainer.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using namespace grasp;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.phantom.grid = {24, 24, 24};
  c.phantom.organ_radius_voxels = {2.5, 4.0};
  c.phantom.tumor_radius_voxels = {1, 2};
  c.phantom.healthy_fraction = 0.0;
  c.phantom.tumors_per_case = {1, 3};
  c.data.n_train = 4;
  c.data.n_val = 2;
  c.backbone.base_width = 4;
  c.backbone.depth = 2;
  c.fusion.heads = 2;
  c.train.epochs = 3;
  c.train.fusion_activation_epoch = 1;
  c.train.lr = 1e-3;
  c.train.batch_size = 2;
  c.train.patch_size = {8, 8, 8};
  c.train.patches_per_case = 1;
  c.anatomy.epochs = 1;
  c.anatomy.patch_size = {8, 8, 8};
  c.anatomy.patches_per_case = 1;
  c.anatomy.min_organ_dice = 0.0;
  return c;
}

// Dataset and frozen anatomy checkpoints shared by every case in this file.
struct Fixture {
  test::TempDir dir{"trainer"};
  ExperimentConfig cfg = tiny_config();
  Dataset data;

  Fixture() {
    generate_dataset(cfg.phantom, cfg.data.n_train, cfg.data.n_val, dir.path() / "data");
    data = load_dataset(cfg, dir.path() / "data");
    for (auto v : {BackboneVariant::plain, BackboneVariant::residual}) {
      ExperimentConfig c = cfg;
      c.anatomy.variant = v;
      pretrain_anatomy(c, data, dir.path());
    }
  }

  ExperimentConfig with(Strategy s) const {
    ExperimentConfig c = cfg;
    c.train.strategy = s;
    if (auto v = required_anatomy(c)) c.train.anatomy_checkpoint = dir.path() / anatomy_checkpoint_name(*v);
    return c;
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(GRASP_CLI) + " --log-level off " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config overrides and validation") {
  Json tree = to_json(ExperimentConfig{});
  apply_override(tree, "train.lr=0.5");
  apply_override(tree, "train.strategy=grasp_mirror");
  apply_override(tree, "train.patch_size=[16,16,16]");
  const auto c = from_json(tree);
  CHECK(c.train.lr == 0.5);
  CHECK(c.train.strategy == Strategy::grasp_mirror);
  CHECK(c.train.patch_size == Extent{16, 16, 16});
  CHECK(from_json(to_json(c)).train.lr == 0.5);

  Json unknown = to_json(ExperimentConfig{});
  apply_override(unknown, "train.learning_rate=0.1");
  CHECK_THROWS_AS(from_json(unknown), ConfigError);
  Json typed = to_json(ExperimentConfig{});
  apply_override(typed, "train.epochs=\"many\"");
  CHECK_THROWS_AS(from_json(typed), ConfigError);
  CHECK_THROWS_AS(parse_strategy("oracle"), ConfigError);

  ExperimentConfig bad;
  bad.train.loss.alpha = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ExperimentConfig{};
  bad.train.loss.alpha = 0.95;
  CHECK_NOTHROW(bad.validate());
}

TEST_CASE("cosine schedule starts at the base rate and anneals to zero") {
  for (int epochs : {2, 7, 60}) {
    CHECK(cosine_lr(1e-3, 0, epochs) == 1e-3);
    CHECK(cosine_lr(1e-3, epochs - 1, epochs) < 1e-6 * 1e-3);
    for (int e = 1; e < epochs; ++e) CHECK(cosine_lr(1e-3, e, epochs) < cosine_lr(1e-3, e - 1, epochs));
  }
  CHECK(cosine_lr(1e-3, 30, 61) == doctest::Approx(0.5e-3));
}

TEST_CASE("AdamW steps match a scalar recurrence") {
  ParameterSet<double> set;
  Tensor<double> w0(Shape{3});
  w0.array() << 0.5, -1.0, 2.0;
  set.add("w", "g", w0);
  Tensor<double> idle(Shape{1});
  idle[0] = 4.0;
  set.add("idle", "g", idle);
  const AdamWConfig cfg{1e-2, 0.9, 0.999, 1e-8, 1e-2};
  AdamW<double> opt(cfg);
  opt.add(set);

  std::array<double, 3> w{0.5, -1.0, 2.0}, m{}, v{};
  for (int t = 1; t <= 5; ++t) {
    set.zero_grad();
    auto& p = set["w"];
    backward(sum(mul(p, p)));
    opt.step();
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = 2.0 * w[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      w[i] *= 1.0 - cfg.lr * cfg.weight_decay;
      w[i] -= cfg.lr * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + cfg.eps);
      CHECK(set["w"].value()[static_cast<Index>(i)] == doctest::Approx(w[i]).epsilon(1e-12));
    }
  }
  CHECK(set["idle"].value()[0] == 4.0);
}

TEST_CASE("windowed logits cover the volume and average overlapping tiles") {
  BackboneConfig bc;
  bc.in_channels = 2;
  bc.out_classes = 3;
  bc.depth = 2;
  bc.base_width = 4;
  const auto net = Backbone<float>::create(bc, 3);
  Rng rng(4);
  Tensor<float> x(Shape{1, 2, 12, 8, 6});
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(normal(rng));
  NoGradGuard guard;
  const auto full = net.forward(Var<float>(x)).value();
  CHECK((window_logits(net, x, {0, 0, 0}).array() == full.array()).all());
  CHECK((window_logits(net, x, {12, 8, 6}).array() == full.array()).all());
  CHECK((window_logits(net, x, {32, 32, 32}).array() == full.array()).all());

  // Window 8 along H: tiles at 0, 4 overlap on [4, 8); the 12-voxel axis ends at 4 + 8.
  const auto tiled = window_logits(net, x, {8, 8, 6});
  Eigen::ArrayXd expect = Eigen::ArrayXd::Zero(full.size()), hits = Eigen::ArrayXd::Zero(full.size());
  for (Index start : {0, 4}) {
    Tensor<float> tile(Shape{1, 2, 8, 8, 6});
    for (Index c = 0; c < 2; ++c)
      for (Index i = 0; i < 8; ++i)
        tile.array().segment((c * 8 + i) * 48, 48) = x.array().segment((c * 12 + start + i) * 48, 48);
    const auto out = net.forward(Var<float>(tile)).value();
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 8; ++i) {
        expect.segment((c * 12 + start + i) * 48, 48) += out.array().segment((c * 8 + i) * 48, 48).cast<double>();
        hits.segment((c * 12 + start + i) * 48, 48) += 1.0;
      }
  }
  CHECK((hits > 0).all());
  CHECK(((tiled.array().cast<double>() - expect / hits).abs() < 1e-6).all());
}

TEST_CASE("evaluate scores predictions against matching ids only") {
  const auto& f = fixture();
  std::vector<std::string> ids;
  std::vector<LabelVolume> perfect;
  for (const auto& s : f.data.val) {
    ids.push_back(s.id);
    perfect.push_back(s.path);
  }
  for (const auto& r : evaluate(ids, perfect, f.data.val)) {
    CHECK(r.dsc == 1.0);
    CHECK(r.cc_dsc == 1.0);
    CHECK(r.fpv == 0.0);
    CHECK(r.fnv == 0.0);
  }
  std::vector<LabelVolume> background;
  for (const auto& s : f.data.val) background.emplace_back(s.path.extent(), 2);
  const auto missed = evaluate(ids, background, f.data.val);
  for (std::size_t i = 0; i < missed.size(); ++i) {
    const auto& s = f.data.val[i];
    REQUIRE(s.path.count_nonzero() > 0);
    CHECK(missed[i].dsc == 0.0);
    CHECK(missed[i].fnv == doctest::Approx(static_cast<double>(s.path.count_nonzero()) * voxel_volume_ml(s.spacing)));
  }
  auto healthy = f.data.val;
  healthy[0].path = LabelVolume(healthy[0].path.extent(), 2);
  CHECK(evaluate(ids, background, healthy)[0].dsc == 1.0);

  auto swapped = ids;
  std::swap(swapped[0], swapped[1]);
  CHECK_THROWS_AS(evaluate(swapped, perfect, f.data.val), InputError);
  perfect.pop_back();
  CHECK_THROWS_AS(evaluate(ids, perfect, f.data.val), InputError);
}

TEST_CASE("anatomy pretraining enforces the organ Dice gate") {
  auto& f = fixture();
  ExperimentConfig c = f.cfg;
  c.anatomy.min_organ_dice = 1.0;
  test::TempDir out("gate");
  CHECK_THROWS_AS(pretrain_anatomy(c, f.data, out.path()), UndertrainedAnatomyError);
  CHECK_FALSE(fs::exists(out.path() / anatomy_checkpoint_name(BackboneVariant::plain)));
}

TEST_CASE("fusion strategies need a matching anatomy checkpoint") {
  auto& f = fixture();
  ExperimentConfig c = f.cfg;
  c.train.strategy = Strategy::grasp_mirror;
  CHECK_THROWS_AS(build_model(c, f.data.num_organs, 0), DependencyError);
  c.train.anatomy_checkpoint = f.dir.path() / "absent.gckpt";
  CHECK_THROWS_AS(build_model(c, f.data.num_organs, 0), DependencyError);
  c.train.strategy = Strategy::grasp_mixture;
  c.train.anatomy_checkpoint = f.dir.path() / anatomy_checkpoint_name(BackboneVariant::plain);
  CHECK_THROWS_AS(build_model(c, f.data.num_organs, 0), ConfigError);
  CHECK(*required_anatomy(c) == BackboneVariant::residual);
  CHECK_FALSE(required_anatomy(f.with(Strategy::ana_in_3c)).has_value());
}

TEST_CASE("fusion training is an identity before activation and leaves the anatomy network untouched") {
  auto& f = fixture();
  test::TempDir out("mirror");
  const auto art = train(f.with(Strategy::grasp_mirror), f.data, 7, out.path());
  REQUIRE(art.epochs.size() == 3);
  const auto& before = art.epochs[0];
  CHECK_FALSE(before.fusion_active);
  CHECK(before.fusion_identity);
  CHECK(before.fusion_grad_max == 0.0);
  REQUIRE(before.similarity.size() == 2);
  for (double s : before.similarity) CHECK(s == 1.0);
  CHECK(art.epochs[1].fusion_active);
  CHECK(art.epochs[2].fusion_grad_max > 0.0);
  CHECK(art.anatomy_digest_before == art.anatomy_digest_after);
  for (const char* name : {"checkpoint.gckpt", "metrics.csv", "epochs.csv", "config.json", "run.json"})
    CHECK(fs::exists(out.path() / name));
  CHECK(read_epochs_csv(out.path() / "epochs.csv").size() == 3);
  CHECK(art.metrics.size() == f.data.val.size());

  // Inference uses the pathology branch alone.
  Checkpoint ckpt = load_checkpoint(art.checkpoint);
  const auto reference = infer(ckpt, f.data.val);
  for (auto ns : {"ana", "fusion"})
    for (auto& p : ckpt.sets.at(ns).items()) p.var.mutable_value().array() = 123.0f;
  const auto altered = infer(ckpt, f.data.val);
  for (std::size_t i = 0; i < reference.size(); ++i) CHECK(reference[i].labels() == altered[i].labels());
  ckpt.sets.erase("ana");
  ckpt.sets.erase("fusion");
  const auto stripped = infer(ckpt, f.data.val);
  for (std::size_t i = 0; i < reference.size(); ++i) CHECK(reference[i].labels() == stripped[i].labels());
}

TEST_CASE("three-channel checkpoints reject samples without pseudo-labels") {
  auto& f = fixture();
  test::TempDir out("ana_in");
  ExperimentConfig c = f.with(Strategy::ana_in_3c);
  c.train.epochs = 1;
  const auto art = train(c, f.data, 0, out.path());
  auto samples = f.data.val;
  CHECK(infer(load_checkpoint(art.checkpoint), samples).size() == samples.size());
  samples[0].ana.reset();
  CHECK_THROWS_AS(infer(load_checkpoint(art.checkpoint), samples), InputError);
}

TEST_CASE("finetune starts from the anatomy network") {
  auto& f = fixture();
  const auto c = f.with(Strategy::finetune);
  const Model m = build_model(c, f.data.num_organs, 3);
  const Checkpoint ana = load_checkpoint(c.train.anatomy_checkpoint);
  for (const auto& p : m.path.params().items()) {
    if (p.name == "encoder.0.conv1.weight" || p.name.rfind("decoder.out.", 0) == 0) continue;
    CHECK((p.var.value().array() == ana.at("ana")[p.name].value().array()).all());
  }
  CHECK_FALSE(m.fusion.has_value());
  CHECK_FALSE(m.path.params().all_frozen());
}

TEST_CASE("multitask and multiclass strategies train to finite losses") {
  auto& f = fixture();
  for (auto s : {Strategy::multitask, Strategy::multiclass}) {
    test::TempDir out("aux");
    ExperimentConfig c = f.with(s);
    c.train.epochs = 1;
    c.train.loss.alpha = 0.95;
    const auto art = train(c, f.data, 1, out.path());
    CHECK(std::isfinite(art.epochs[0].loss));
    CHECK(art.metrics.size() == f.data.val.size());
  }
}

TEST_CASE("training is reproducible for a fixed seed") {
  auto& f = fixture();
  test::TempDir a("rep_a"), b("rep_b");
  ExperimentConfig c = f.with(Strategy::grasp_mixture);
  c.train.epochs = 2;
  train(c, f.data, 5, a.path());
  train(c, f.data, 5, b.path());
  const auto ca = load_checkpoint(a.path() / "checkpoint.gckpt"), cb = load_checkpoint(b.path() / "checkpoint.gckpt");
  CHECK(ca.at("path").digest() == cb.at("path").digest());
  CHECK(ca.at("fusion").digest() == cb.at("fusion").digest());
}

TEST_CASE("report needs at least two configurations") {
  auto& f = fixture();
  test::TempDir out("report");
  ExperimentConfig c = f.with(Strategy::baseline_2c);
  c.train.epochs = 1;
  train(c, f.data, 0, out.path() / "baseline" / "seed0");
  CHECK_THROWS_AS(report({{"baseline", {out.path() / "baseline" / "seed0"}}}, out.path() / "r"), InputError);
  const auto summary = report({{"baseline", {out.path() / "baseline" / "seed0"}}, {"copy", {out.path() / "baseline" / "seed0"}}},
                              out.path() / "r");
  CHECK(summary.ranks.final_rank == std::vector<int>{1, 1});
  CHECK(fs::exists(out.path() / "r" / "rank.csv"));
}

TEST_CASE("command-line exit codes") {
  auto& f = fixture();
  const std::string data = (f.dir.path() / "data").string();
  CHECK(run_cli("show-config") == 0);
  CHECK(run_cli("show-config --train.lr=0.01") == 0);
  CHECK(run_cli("show-config --train.bogus=1") == 2);
  CHECK(run_cli("show-config stray") == 2);
  CHECK(run_cli("--no-such-flag") == 2);
  CHECK(run_cli("infer --checkpoint " + (f.dir.path() / "none.gckpt").string() + " --data " + data) == 4);
  CHECK(run_cli("train --train.strategy=grasp_mirror --data " + data) == 4);
  CHECK(run_cli("eval --predictions " + (f.dir.path() / "nothing").string() + " --data " + data) == 4);
}
