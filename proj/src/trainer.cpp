#include "grasp/trainer.hpp"

#include "grasp/errors.hpp"
#include "grasp/losses.hpp"
#include "grasp/optimizer.hpp"
#include "grasp/random.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

namespace grasp {

namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kProbeSeed = 0x5eed9b;

std::string digest_hex(const ParameterSet<float>& p) { return hex64(p.digest()); }

// Cases of an epoch: a seeded shuffle, truncated to `take` (0 = all).
std::vector<std::size_t> epoch_cases(std::size_t n, int take, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch), 0xca5e));
  shuffle(idx.begin(), idx.end(), rng);
  if (take > 0 && static_cast<std::size_t>(take) < n) idx.resize(static_cast<std::size_t>(take));
  return idx;
}

std::vector<Patch> epoch_patches(const std::vector<Sample>& cases, const std::vector<std::size_t>& order,
                                 const Extent& size, int per_case, bool label_channel, std::uint64_t seed, int epoch) {
  std::vector<Patch> patches;
  for (std::size_t c : order) {
    auto ps = sample_patches(cases[c], size, per_case, PosNegRatio{2, 1},
                             mix_seed(seed, static_cast<std::uint64_t>(epoch), c + 1), label_channel);
    for (auto& p : ps) patches.push_back(std::move(p));
  }
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch), 0xba7c));
  shuffle(patches.begin(), patches.end(), rng);
  return patches;
}

// Organ-segmentation patches: two in three centred on a random organ voxel, the rest uniform.
std::vector<Patch> organ_patches(const std::vector<Sample>& cases, const std::vector<std::size_t>& order,
                                 const Extent& size, int per_case, std::uint64_t seed, int epoch) {
  std::vector<Patch> patches;
  for (std::size_t c : order) {
    const Sample& s = cases[c];
    const Extent e = s.ct.extent();
    std::vector<Index> organ_voxels;
    for (std::size_t v = 0; v < s.ana->labels().size(); ++v)
      if (s.ana->labels()[v]) organ_voxels.push_back(static_cast<Index>(v));
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch), c + 1));
    for (int k = 0; k < per_case; ++k) {
      Extent origin{};
      const bool centred = !organ_voxels.empty() && uniform_index(rng, 3) < 2;
      const Index v = centred ? organ_voxels[uniform_index(rng, organ_voxels.size())] : 0;
      const Extent centre{v / (e[1] * e[2]), (v / e[2]) % e[1], v % e[2]};
      for (std::size_t a = 0; a < 3; ++a) {
        const Index span = std::max<Index>(e[a] - size[a], 0);
        origin[a] = centred ? std::clamp<Index>(centre[a] - size[a] / 2, 0, span)
                            : static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(span + 1)));
      }
      patches.push_back(extract_patch(s, origin, size, false));
    }
  }
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch), 0xba7c));
  shuffle(patches.begin(), patches.end(), rng);
  return patches;
}

Tensor<float> stack_inputs(const std::vector<const Patch*>& batch, int channels) {
  const Extent e = batch.front()->inputs.extent();
  const Index n = e[0] * e[1] * e[2];
  Tensor<float> x(Shape{static_cast<Index>(batch.size()), channels, e[0], e[1], e[2]});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b]->inputs.channels() < channels) throw InputError("patch has fewer channels than the network expects");
    x.array().segment(static_cast<Index>(b) * channels * n, channels * n) =
        batch[b]->inputs.data().array().head(channels * n);
  }
  return x;
}

LabelVolume multiclass_target(const LabelVolume& organs, const LabelVolume& lesion) {
  const int classes = organs.num_classes() + 1;
  LabelVolume out(organs.extent(), classes, organs.labels());
  for (std::size_t i = 0; i < out.labels().size(); ++i)
    if (lesion.labels()[i]) out.labels()[i] = static_cast<std::uint16_t>(classes - 1);
  return out;
}

const LabelVolume& organ_labels(const Patch& p) {
  if (!p.target_ana) throw InputError("patch lacks organ labels");
  return *p.target_ana;
}

void write_epochs_csv(const std::vector<EpochLog>& logs, int levels, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw WriteError("cannot write " + path.string());
  out << "epoch,lr,loss,fusion_active";
  for (int l = 0; l < levels; ++l) out << ",similarity_" << l;
  out << ",fusion_identity,fusion_grad_max,seconds\n";
  out.precision(17);
  for (const auto& e : logs) {
    out << e.epoch << ',' << e.lr << ',' << e.loss << ',' << (e.fusion_active ? 1 : 0);
    for (double s : e.similarity) out << ',' << s;
    out << ',' << (e.fusion_identity ? 1 : 0) << ',' << e.fusion_grad_max << ',' << e.seconds << '\n';
  }
}

double max_abs_grad(const ParameterSet<float>& ps) {
  double m = 0.0;
  for (const auto& p : ps.items())
    if (p.var.grad().size() > 0) m = std::max(m, static_cast<double>(p.var.grad().array().abs().maxCoeff()));
  return m;
}

Backbone<float> load_anatomy(const fs::path& path, BackboneVariant expected) {
  if (path.empty()) throw DependencyError("strategy needs an anatomy checkpoint (train.anatomy_checkpoint)");
  const Checkpoint ckpt = load_checkpoint(path);
  if (!ckpt.meta.contains("backbone") || !ckpt.has("ana"))
    throw DependencyError(path.string() + " is not an anatomy checkpoint");
  const BackboneConfig bc = backbone_from_json(ckpt.meta.at("backbone"));
  if (bc.variant != expected)
    throw ConfigError("anatomy checkpoint " + path.string() + " holds a " + to_string(bc.variant) +
                      " network, strategy needs " + to_string(expected));
  auto net = Backbone<float>::create(bc, 0);
  copy_values(ckpt.at("ana"), net.params());
  freeze(net);
  return net;
}

}  // namespace

Dataset load_dataset(const ExperimentConfig& cfg, const fs::path& dir) {
  const Manifest m = read_manifest(dir / "manifest.tsv");
  Dataset d;
  d.digest = m.digest;
  for (const auto& r : m.records) {
    Sample s = load_sample(r, dir);
    s.ct = normalize_intensities(s.ct, Modality::ct, cfg.normalization);
    s.pet = normalize_intensities(s.pet, Modality::pet, cfg.normalization);
    if (cfg.train.pseudo_label_source == PseudoLabelSource::degraded && cfg.train.degrade_rate > 0.0)
      s.ana = degrade_pseudolabels(*s.ana, cfg.train.degrade_rate, mix_seed(cfg.seed, fnv1a(s.id)));
    (r.split == "train" ? d.train : d.val).push_back(std::move(s));
  }
  if (d.train.empty() || d.val.empty()) throw InputError("dataset needs both train and val cases");
  d.num_organs = d.train.front().ana->num_classes() - 1;
  return d;
}

Volume sample_inputs(const Sample& s, int channels) {
  if (channels == 3 && !s.ana) throw InputError(s.id + ": three-channel model needs pseudo-labels");
  if (channels < 2 || channels > 3) throw InputError("unsupported input channel count " + std::to_string(channels));
  const Extent e = s.ct.extent();
  const Index n = e[0] * e[1] * e[2];
  Tensor<float> t(Shape{channels, e[0], e[1], e[2]});
  t.array().segment(0, n) = s.ct.data().array();
  t.array().segment(n, n) = s.pet.data().array();
  if (channels == 3) t.array().segment(2 * n, n) = encode_label_channel(*s.ana).data().array();
  return Volume(std::move(t), s.spacing);
}

BackboneConfig pathology_backbone(const ExperimentConfig& cfg, int num_organs) {
  BackboneConfig b = cfg.backbone;
  const Strategy s = cfg.train.strategy;
  b.in_channels = input_channels(s);
  b.out_classes = s == Strategy::multiclass ? num_organs + 2 : 2;
  b.aux_out_classes = s == Strategy::multitask ? num_organs + 1 : 0;
  if (s == Strategy::grasp_mirror || s == Strategy::grasp_mixture) b.variant = BackboneVariant::plain;
  return b;
}

FusionSetup fusion_setup(const ExperimentConfig& cfg) {
  switch (cfg.train.strategy) {
    case Strategy::grasp_mirror: return FusionSetup::mirror;
    case Strategy::grasp_mixture: return FusionSetup::mixture;
    default: return cfg.fusion.setup;
  }
}

std::optional<BackboneVariant> required_anatomy(const ExperimentConfig& cfg) {
  if (!needs_anatomy(cfg.train.strategy)) return std::nullopt;
  const BackboneVariant own = pathology_backbone(cfg, 1).variant;
  if (cfg.train.strategy == Strategy::finetune) return own;
  return fusion_setup(cfg) == FusionSetup::mirror ? own : BackboneVariant::residual;
}

Model build_model(const ExperimentConfig& cfg, int num_organs, std::uint64_t seed) {
  Model m;
  m.strategy = cfg.train.strategy;
  const BackboneConfig bc = pathology_backbone(cfg, num_organs);
  if (m.strategy == Strategy::finetune) {
    const auto anatomy = load_anatomy(cfg.train.anatomy_checkpoint, bc.variant);
    m.path = init_finetune(anatomy, bc, mix_seed(seed, 1));
    return m;
  }
  m.path = Backbone<float>::create(bc, mix_seed(seed, 1));
  if (uses_fusion(m.strategy)) {
    m.anatomy = load_anatomy(cfg.train.anatomy_checkpoint, *required_anatomy(cfg));
    FusionConfig fc = cfg.fusion;
    fc.setup = fusion_setup(cfg);
    std::vector<int> pc, ac;
    for (int l = 0; l < fc.fusion_depth; ++l) {
      pc.push_back(bc.width(bc.depth - 1 - l));
      ac.push_back(m.anatomy->config().width(m.anatomy->config().depth - 1 - l));
    }
    m.fusion = Fusion<float>::create(fc, pc, ac, mix_seed(seed, 2));
  }
  return m;
}

std::vector<std::pair<Var<float>, Var<float>>> Model::fusion_pairs(const Var<float>& x) const {
  std::vector<std::pair<Var<float>, Var<float>>> out;
  if (!fusion) return out;
  const auto feats = path.encode_all(x);
  std::vector<Var<float>> ana;
  {
    NoGradGuard guard;
    ana = anatomy->encode_all(select_channel(x, 0).detach());
  }
  for (int l = 0; l < fusion->levels(); ++l) {
    const auto& z = feats[feats.size() - 1 - static_cast<std::size_t>(l)];
    out.emplace_back(z, fusion->fuse(l, z, ana[ana.size() - 1 - static_cast<std::size_t>(l)]));
  }
  return out;
}

Var<float> Model::forward(const Var<float>& x) const {
  if (!fusion) return path.forward(x);
  auto feats = path.encode_all(x);
  std::vector<Var<float>> ana;
  {
    NoGradGuard guard;
    ana = anatomy->encode_all(select_channel(x, 0).detach());
  }
  for (int l = 0; l < fusion->levels(); ++l) {
    auto& z = feats[feats.size() - 1 - static_cast<std::size_t>(l)];
    z = fusion->fuse(l, z, ana[ana.size() - 1 - static_cast<std::size_t>(l)]);
  }
  return path.decode(feats);
}

std::pair<Var<float>, Var<float>> Model::forward_dual(const Var<float>& x) const { return path.forward_dual(x); }

Tensor<float> window_logits(const Backbone<float>& net, const Tensor<float>& input, const Extent& window) {
  const Extent e{input.dim(2), input.dim(3), input.dim(4)};
  const Index channels = input.dim(1);
  Extent w = e;
  std::array<std::vector<Index>, 3> starts;
  for (std::size_t a = 0; a < 3; ++a) {
    if (window[a] > 0 && window[a] < e[a]) w[a] = window[a];
    const Index stride = std::max<Index>(w[a] / 2, 1);
    for (Index o = 0; o + w[a] < e[a]; o += stride) starts[a].push_back(o);
    starts[a].push_back(e[a] - w[a]);
  }
  if (w == e) return net.forward(Var<float>(input)).value();

  NoGradGuard guard;
  const Index n = e[0] * e[1] * e[2], wn = w[0] * w[1] * w[2];
  Tensor<float> sum, tile(Shape{1, channels, w[0], w[1], w[2]});
  Eigen::ArrayXf hits = Eigen::ArrayXf::Zero(n);
  for (Index oi : starts[0])
    for (Index oj : starts[1])
      for (Index ok : starts[2]) {
        for (Index c = 0; c < channels; ++c)
          for (Index i = 0; i < w[0]; ++i)
            for (Index j = 0; j < w[1]; ++j)
              tile.array().segment(c * wn + (i * w[1] + j) * w[2], w[2]) =
                  input.array().segment(c * n + ((oi + i) * e[1] + oj + j) * e[2] + ok, w[2]);
        const auto logits = net.forward(Var<float>(tile)).value();
        const Index classes = logits.dim(1);
        if (sum.empty()) sum = Tensor<float>(Shape{1, classes, e[0], e[1], e[2]});
        for (Index i = 0; i < w[0]; ++i)
          for (Index j = 0; j < w[1]; ++j) {
            const Index at = ((oi + i) * e[1] + oj + j) * e[2] + ok, from = (i * w[1] + j) * w[2];
            hits.segment(at, w[2]) += 1.0f;
            for (Index c = 0; c < classes; ++c)
              sum.array().segment(c * n + at, w[2]) += logits.array().segment(c * wn + from, w[2]);
          }
      }
  for (Index c = 0; c < sum.dim(1); ++c) sum.array().segment(c * n, n) /= hits;
  return sum;
}

LabelVolume predict(const Backbone<float>& net, Strategy strategy, const Volume& inputs, const Extent& window) {
  if (inputs.channels() != net.config().in_channels)
    throw InputError("model expects " + std::to_string(net.config().in_channels) + " input channels, sample has " +
                     std::to_string(inputs.channels()));
  NoGradGuard guard;
  const Extent e = inputs.extent();
  const auto logits = window_logits(net, inputs.data().reshaped(Shape{1, inputs.channels(), e[0], e[1], e[2]}), window);
  const Index classes = logits.dim(1), n = e[0] * e[1] * e[2];
  const Index lesion_class = strategy == Strategy::multiclass ? classes - 1 : 1;
  LabelVolume out(e, 2);
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index c = 1; c < classes; ++c)
      if (logits[c * n + i] > logits[best * n + i]) best = c;
    out.labels()[static_cast<std::size_t>(i)] = best == lesion_class ? 1 : 0;
  }
  return out;
}

std::vector<LabelVolume> infer(const Checkpoint& ckpt, const std::vector<Sample>& samples) {
  if (!ckpt.meta.contains("strategy") || !ckpt.meta.contains("backbone"))
    throw InputError("checkpoint lacks pathology metadata");
  const Strategy strategy = parse_strategy(ckpt.meta.at("strategy").get<std::string>());
  auto net = Backbone<float>::create(backbone_from_json(ckpt.meta.at("backbone")), 0);
  copy_values(ckpt.at("path"), net.params());
  Extent window{0, 0, 0};
  if (ckpt.meta.contains("window")) window = ckpt.meta.at("window").get<Extent>();
  std::vector<LabelVolume> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const int channels = net.config().in_channels;
    if (channels == 3 && !s.ana) throw InputError(s.id + ": three-channel checkpoint needs pseudo-labels");
    out.push_back(predict(net, strategy, sample_inputs(s, channels), window));
  }
  return out;
}

std::vector<MetricsRecord> evaluate(const std::vector<std::string>& ids, const std::vector<LabelVolume>& predictions,
                                    const std::vector<Sample>& ground_truth) {
  if (ids.size() != predictions.size() || ids.size() != ground_truth.size())
    throw InputError("evaluate: prediction and ground-truth counts differ");
  std::vector<MetricsRecord> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != ground_truth[i].id) throw InputError("evaluate: id mismatch " + ids[i] + " vs " + ground_truth[i].id);
    out.push_back(evaluate_case(ids[i], predictions[i], ground_truth[i].path, ground_truth[i].spacing));
  }
  return out;
}

RunArtifact train(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed, const fs::path& out_dir) {
  cfg.validate();
  const TrainConfig& tc = cfg.train;
  Model model = build_model(cfg, data.num_organs, seed);
  const bool label_channel = uses_label_channel(tc.strategy);
  const int channels = input_channels(tc.strategy);
  const int activation = tc.activation_epoch();

  RunArtifact art;
  art.dir = out_dir;
  art.seed = seed;
  if (model.anatomy) art.anatomy_digest_before = digest_hex(model.anatomy->params());

  AdamW<float> opt(AdamWConfig{tc.lr, 0.9, 0.999, 1e-8, tc.weight_decay});
  opt.add(model.path.params());

  // Fixed probe batch for the similarity trace.
  std::vector<Patch> probe;
  std::vector<const Patch*> probe_ptrs;
  if (model.fusion) {
    probe = sample_patches(data.val.front(), tc.patch_size, tc.probe_patches, PosNegRatio{2, 1}, kProbeSeed, label_channel);
    for (const auto& p : probe) probe_ptrs.push_back(&p);
  }

  LossState loss_state;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (model.fusion && epoch == activation) {
      model.fusion->set_active(true);
      opt.add(model.fusion->params());
    }
    const double lr = cosine_lr(tc.lr, epoch, tc.epochs);
    opt.set_lr(lr);

    const auto order = epoch_cases(data.train.size(), tc.cases_per_epoch, seed, epoch);
    const auto patches =
        epoch_patches(data.train, order, tc.patch_size, tc.patches_per_case, label_channel, seed, epoch);

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    log.fusion_active = model.fusion && model.fusion->active();
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < patches.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      std::vector<const Patch*> batch;
      for (std::size_t i = start; i < std::min(patches.size(), start + static_cast<std::size_t>(tc.batch_size)); ++i)
        batch.push_back(&patches[i]);
      const Var<float> x(stack_inputs(batch, channels));

      std::vector<const LabelVolume*> lesion;
      for (const auto* p : batch) lesion.push_back(&p->target_path);

      Var<float> loss;
      if (tc.strategy == Strategy::multitask) {
        std::vector<const LabelVolume*> organs;
        for (const auto* p : batch) organs.push_back(&organ_labels(*p));
        const auto [path_logits, ana_logits] = model.forward_dual(x);
        const auto lp = dice_ce(path_logits, LabelBatch::stack(lesion), uniform_weights(2));
        const auto la = dice_ce(ana_logits, LabelBatch::stack(organs), uniform_weights(data.num_organs + 1));
        if (!std::isfinite(lp.value()[0]) || !std::isfinite(la.value()[0]))
          throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch), epoch);
        loss = multitask_loss(lp, la, loss_state, tc.loss.alpha, tc.loss.ema_decay);
      } else if (tc.strategy == Strategy::multiclass) {
        std::vector<LabelVolume> targets;
        for (const auto* p : batch) targets.push_back(multiclass_target(organ_labels(*p), p->target_path));
        std::vector<const LabelVolume*> ptrs;
        for (const auto& t : targets) ptrs.push_back(&t);
        loss = weighted_loss(model.forward(x), LabelBatch::stack(ptrs), tc.loss);
      } else {
        loss = weighted_loss(model.forward(x), LabelBatch::stack(lesion), tc.loss);
      }
      const double value = loss.value()[0];
      if (!std::isfinite(value)) throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch), epoch);

      backward(loss);
      if (model.fusion) log.fusion_grad_max = std::max(log.fusion_grad_max, max_abs_grad(model.fusion->params()));
      opt.step();
      model.path.params().zero_grad();
      if (model.fusion) model.fusion->params().zero_grad();
      loss_sum += value;
      ++steps;
    }
    log.loss = steps ? loss_sum / steps : 0.0;

    if (model.fusion) {
      NoGradGuard guard;
      const Var<float> x(stack_inputs(probe_ptrs, channels));
      log.fusion_identity = true;
      for (const auto& [z, fused] : model.fusion_pairs(x)) {
        log.similarity.push_back(cosine_similarity(z.value(), fused.value()));
        log.fusion_identity = log.fusion_identity && z.value() == fused.value();
      }
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("{} seed {} epoch {}/{} loss {:.4f} lr {:.2e} ({:.1f}s)", to_string(tc.strategy), seed, epoch + 1,
                 tc.epochs, log.loss, lr, log.seconds);
    art.epochs.push_back(std::move(log));
  }

  if (model.anatomy) art.anatomy_digest_after = digest_hex(model.anatomy->params());

  fs::create_directories(out_dir);
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "pathology"},
               {"strategy", to_string(tc.strategy)},
               {"seed", seed},
               {"backbone", to_json(model.path.config())},
               {"fusion_active", model.fusion && model.fusion->active()},
               {"window", tc.patch_size},
               {"dataset_digest", data.digest}};
  ckpt.sets["path"] = model.path.params();
  if (model.anatomy) {
    ckpt.meta["anatomy_backbone"] = to_json(model.anatomy->config());
    ckpt.sets["ana"] = model.anatomy->params();
  }
  if (model.fusion) {
    ckpt.meta["fusion"] = to_json(model.fusion->config());
    ckpt.sets["fusion"] = model.fusion->params();
  }
  art.checkpoint = out_dir / "checkpoint.gckpt";
  save_checkpoint(ckpt, art.checkpoint);

  std::vector<std::string> ids;
  std::vector<LabelVolume> preds;
  for (const auto& s : data.val) {
    ids.push_back(s.id);
    preds.push_back(predict(model.path, tc.strategy, sample_inputs(s, channels), tc.patch_size));
  }
  art.metrics = evaluate(ids, preds, data.val);
  write_metrics_csv(art.metrics, out_dir / "metrics.csv");
  write_epochs_csv(art.epochs, model.fusion ? model.fusion->levels() : 0, out_dir / "epochs.csv");

  {
    std::ofstream out(out_dir / "config.json");
    out << to_json(cfg).dump(2) << '\n';
  }
  const auto summary = summarize(art.metrics);
  Json run = {{"strategy", to_string(tc.strategy)},
              {"seed", seed},
              {"epochs", tc.epochs},
              {"fusion_activation_epoch", model.fusion ? activation : -1},
              {"fusion_optimizer_policy", "fusion parameters join the optimizer at the activation epoch"},
              {"anatomy_digest_before", art.anatomy_digest_before},
              {"anatomy_digest_after", art.anatomy_digest_after},
              {"dataset_digest", data.digest},
              {"mean", {{"dsc", summary.mean[0]}, {"cc_dsc", summary.mean[1]}, {"fpv", summary.mean[2]}, {"fnv", summary.mean[3]}}}};
  std::ofstream out(out_dir / "run.json");
  out << run.dump(2) << '\n';
  return art;
}

fs::path anatomy_checkpoint_name(BackboneVariant v) { return "anatomy_" + to_string(v) + ".gckpt"; }

double mean_organ_dice(const Backbone<float>& anatomy, const std::vector<Sample>& samples, const Extent& window) {
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& s : samples) {
    const Extent e = s.ct.extent();
    const auto logits = window_logits(anatomy, s.ct.data().reshaped(Shape{1, 1, e[0], e[1], e[2]}), window);
    const Index classes = logits.dim(1), n = e[0] * e[1] * e[2];
    std::vector<Index> inter(static_cast<std::size_t>(classes)), pred(inter), gt(inter);
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      for (Index c = 1; c < classes; ++c)
        if (logits[c * n + i] > logits[best * n + i]) best = c;
      const auto y = s.ana->labels()[static_cast<std::size_t>(i)];
      ++pred[static_cast<std::size_t>(best)];
      ++gt[y];
      if (best == y) ++inter[y];
    }
    double sum = 0.0;
    int count = 0;
    for (Index c = 1; c < classes; ++c) {
      const auto k = static_cast<std::size_t>(c);
      if (gt[k] + pred[k] == 0) continue;
      sum += 2.0 * static_cast<double>(inter[k]) / static_cast<double>(gt[k] + pred[k]);
      ++count;
    }
    total += count ? sum / count : 1.0;
  }
  return total / static_cast<double>(samples.size());
}

Backbone<float> pretrain_anatomy(const ExperimentConfig& cfg, const Dataset& data, const fs::path& out_dir) {
  cfg.validate();
  const AnatomyConfig& ac = cfg.anatomy;
  BackboneConfig bc = cfg.backbone;
  bc.in_channels = 1;
  bc.out_classes = data.num_organs + 1;
  bc.aux_out_classes = 0;
  bc.variant = ac.variant;
  auto net = Backbone<float>::create(bc, mix_seed(cfg.seed, 0xa7a));
  AdamW<float> opt(AdamWConfig{ac.lr, 0.9, 0.999, 1e-8, cfg.train.weight_decay});
  opt.add(net.params());
  const auto weights = uniform_weights(bc.out_classes);

  for (int epoch = 0; epoch < ac.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    opt.set_lr(cosine_lr(ac.lr, epoch, ac.epochs));
    const auto order = epoch_cases(data.train.size(), ac.cases_per_epoch, cfg.seed ^ 0xa7a, epoch);
    const auto patches = organ_patches(data.train, order, ac.patch_size, ac.patches_per_case, cfg.seed ^ 0xa7a, epoch);
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < patches.size(); start += static_cast<std::size_t>(ac.batch_size)) {
      std::vector<const Patch*> batch;
      std::vector<const LabelVolume*> organs;
      for (std::size_t i = start; i < std::min(patches.size(), start + static_cast<std::size_t>(ac.batch_size)); ++i) {
        batch.push_back(&patches[i]);
        organs.push_back(&organ_labels(patches[i]));
      }
      const Var<float> x(stack_inputs(batch, 1));
      auto loss = dice_ce(net.forward(x), LabelBatch::stack(organs), weights);
      if (!std::isfinite(loss.value()[0]))
        throw DivergenceError("non-finite anatomy loss at epoch " + std::to_string(epoch), epoch);
      backward(loss);
      opt.step();
      net.params().zero_grad();
      loss_sum += loss.value()[0];
      ++steps;
    }
    spdlog::info("anatomy ({}) epoch {}/{} loss {:.4f} ({:.1f}s)", to_string(bc.variant), epoch + 1, ac.epochs,
                 steps ? loss_sum / steps : 0.0,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  const double dice = mean_organ_dice(net, data.val, ac.patch_size);
  spdlog::info("anatomy ({}) validation organ Dice {:.4f}", to_string(bc.variant), dice);
  if (dice < ac.min_organ_dice)
    throw UndertrainedAnatomyError("anatomy model reached organ Dice " + std::to_string(dice) + ", below the gate " +
                                   std::to_string(ac.min_organ_dice));
  freeze(net);
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "anatomy"}, {"backbone", to_json(bc)}, {"organ_dice", dice}, {"dataset_digest", data.digest}};
  ckpt.sets["ana"] = net.params();
  save_checkpoint(ckpt, out_dir / anatomy_checkpoint_name(bc.variant));
  return net;
}

}  // namespace grasp
