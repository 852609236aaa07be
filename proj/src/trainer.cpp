// SPDX-License-Identifier: Apache-2.0

#include "crst/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "crst/evalkit.hpp"
#include "crst/postproc.hpp"
#include "crst/pseudolabel.hpp"
#include "crst/reliability.hpp"
#include "json.hpp"

namespace crst {

namespace {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoints assume little-endian");

// Seed-derivation tags.
enum : std::uint64_t {
  kTagInit = 0x1001,
  kTagBatch = 0x1002,
  kTagDropout = 0x1003,
  kTagNoise = 0x1004,
  kTagMix = 0x1005,
  kTagShift = 0x1006,
  kTagAug = 0x1007,
};

enum Group : std::uint64_t { kStrong = 0, kWeak = 1, kUnlabeled = 2, kMixed = 3 };

constexpr char kMagic[8] = {'C', 'R', 'S', 'T', 'C', 'K', 'P', 'T'};

RealMatrix shift_rows(const RealMatrix& m, long delay) {
  const auto T = static_cast<long>(m.rows());
  RealMatrix out(m.rows(), m.cols());
  if (T == 0) {
    return out;
  }
  for (long t = 0; t < T; ++t) {
    const long src = ((t - delay) % T + T) % T;
    std::copy(m.row(static_cast<std::size_t>(src)).begin(),
              m.row(static_cast<std::size_t>(src)).end(), out.row(static_cast<std::size_t>(t)).begin());
  }
  return out;
}

RealMatrix blend(const RealMatrix& a, const RealMatrix& b, double lambda) {
  if (!a.same_shape(b)) {
    throw InvalidInput("cannot mix grids of different shapes");
  }
  RealMatrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.values()[i] = lambda * a.values()[i] + (1.0 - lambda) * b.values()[i];
  }
  return out;
}

struct StudentPass {
  std::vector<ForwardCache> caches;
  std::vector<PosteriorGrid> outs;
};

StudentPass train_forward(const Model& model, const ModelParams& params,
                          const std::vector<FeatureGrid>& xs, std::uint64_t seed,
                          std::size_t step, std::size_t model_idx, Group group) {
  StudentPass p;
  p.caches.resize(xs.size());
  p.outs.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    p.outs.push_back(model.forward_train(
        params, xs[i], derive_seed(seed, kTagDropout, step, model_idx, group, i), p.caches[i]));
  }
  return p;
}

std::vector<PosteriorGrid> eval_forward(const Model& model, const ModelParams& params,
                                        const std::vector<FeatureGrid>& xs) {
  std::vector<PosteriorGrid> out;
  out.reserve(xs.size());
  for (const auto& x : xs) {
    out.push_back(model.forward(params, x));
  }
  return out;
}

void backprop(const Model& model, const ModelParams& params, const StudentPass& pass,
              const std::vector<RealMatrix>& grads, std::vector<double>& g) {
  for (std::size_t i = 0; i < pass.outs.size(); ++i) {
    if (i < grads.size()) {
      model.backward(params, pass.caches[i], grads[i], g);
    }
  }
}

std::vector<PseudoLabelGrid> pseudo_labels(const std::vector<PosteriorGrid>& teacher_out) {
  std::vector<PseudoLabelGrid> out;
  out.reserve(teacher_out.size());
  for (const auto& p : teacher_out) {
    out.push_back(pseudo_label_grid(p));
  }
  return out;
}

// Inputs of one step gathered from the batch indices.
struct StepInputs {
  std::vector<FeatureGrid> xs, xw, xu;
  std::vector<StrongTarget> ys;
  std::vector<StrongLabelGrid> ys_grid;
  std::vector<WeakTarget> yw;
  std::vector<WeakLabel> yw_label;
};

StepInputs gather(const TrainData& data, const Batch& b) {
  StepInputs in;
  for (std::size_t i : b.strong) {
    in.xs.push_back(data.strong_x(i));
    in.ys.push_back(data.strong_target(i));
    in.ys_grid.push_back(data.strong_pooled(i));
  }
  for (std::size_t i : b.weak) {
    in.xw.push_back(data.weak_x(i));
    in.yw.push_back(data.weak_target(i));
    in.yw_label.push_back(data.weak_label(i));
  }
  for (std::size_t i : b.unlabeled) {
    in.xu.push_back(data.unlabeled_x(i));
  }
  return in;
}

// A perturbed copy of one group of clips together with the information needed
// to carry frame targets into (and out of) the perturbed view.
struct GroupView {
  std::vector<FeatureGrid> x;
  std::vector<long> out_shift;
  std::vector<std::size_t> partner;
  double lambda = 1.0;
};

GroupView make_view(const std::vector<FeatureGrid>& xs, const TrainConfig& cfg,
                    std::size_t pool, std::size_t step, Group group, double lambda) {
  GroupView v;
  v.lambda = lambda;
  const std::size_t n = xs.size();
  switch (cfg.perturbation) {
    case Perturbation::Noise:
      for (std::size_t i = 0; i < n; ++i) {
        v.x.push_back(add_noise_snr(xs[i], cfg.snr_db,
                                    derive_seed(cfg.seed, kTagNoise, step, group, i)));
      }
      break;
    case Perturbation::FrameShift:
      for (std::size_t i = 0; i < n; ++i) {
        const long d = sample_shift_delay(derive_seed(cfg.seed, kTagShift, step, group, i),
                                          cfg.shift_sigma, xs[i].frames(), pool);
        v.out_shift.push_back(d / static_cast<long>(pool));
        v.x.push_back(frame_shift(xs[i], d));
      }
      break;
    case Perturbation::Mixup: {
      v.partner.resize(n);
      std::iota(v.partner.begin(), v.partner.end(), 0);
      Rng rng(derive_seed(cfg.seed, kTagMix, step, group));
      rng.shuffle(v.partner.begin(), v.partner.end());
      for (std::size_t i = 0; i < n; ++i) {
        v.x.push_back(mixup(xs[i], xs[v.partner[i]], lambda));
      }
      break;
    }
  }
  return v;
}

// Frame targets expressed in the original view -> targets for the perturbed view.
std::vector<RealMatrix> to_view(const GroupView& v, Perturbation kind,
                                const std::vector<RealMatrix>& grids) {
  std::vector<RealMatrix> out;
  out.reserve(grids.size());
  for (std::size_t i = 0; i < grids.size(); ++i) {
    switch (kind) {
      case Perturbation::Noise:
        out.push_back(grids[i]);
        break;
      case Perturbation::FrameShift:
        out.push_back(shift_rows(grids[i], v.out_shift[i]));
        break;
      case Perturbation::Mixup:
        out.push_back(blend(grids[i], grids[v.partner[i]], v.lambda));
        break;
    }
  }
  return out;
}

std::vector<WeakTarget> weak_to_view(const GroupView& v, Perturbation kind,
                                     const std::vector<WeakTarget>& ys) {
  if (kind != Perturbation::Mixup) {
    return ys;
  }
  std::vector<WeakTarget> out(ys.size());
  for (std::size_t i = 0; i < ys.size(); ++i) {
    out[i].resize(ys[i].size());
    for (std::size_t c = 0; c < ys[i].size(); ++c) {
      out[i][c] = v.lambda * ys[i][c] + (1.0 - v.lambda) * ys[v.partner[i]][c];
    }
  }
  return out;
}

// Teacher posteriors in the original view from the teacher of the perturbed model.
std::vector<PosteriorGrid> view_teacher(const Model& model, const ModelParams& teacher,
                                        const std::vector<FeatureGrid>& original,
                                        const GroupView& v, Perturbation kind) {
  if (kind == Perturbation::Mixup) {
    return eval_forward(model, teacher, original);
  }
  auto out = eval_forward(model, teacher, v.x);
  if (kind == Perturbation::FrameShift) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = shift_rows(out[i], -v.out_shift[i]);
    }
  }
  return out;
}

struct Reliability {
  double gamma_s = 0.0;
  double gamma_w = 0.0;
};

Reliability reliability(const std::vector<PseudoLabelGrid>& ps, const std::vector<StrongLabelGrid>& ys,
                        const std::vector<PseudoLabelGrid>& pw, const std::vector<WeakLabel>& yw,
                        double omega) {
  std::vector<std::vector<double>> pooled;
  pooled.reserve(pw.size());
  for (const auto& p : pw) {
    pooled.push_back(clip_pool(p));
  }
  return {reliability_strong(ps, ys, omega), reliability_weak(pooled, yw, omega)};
}

void finish_student(const Model& model, ModelState& ms, std::vector<double>& g,
                    const std::vector<const StudentPass*>& passes, const TrainConfig& cfg,
                    const std::vector<std::uint8_t>& mask, double loss_total) {
  if (!std::isfinite(loss_total)) {
    throw NumericError("training diverged: non-finite loss at step " +
                       std::to_string(ms.opt.step));
  }
  adam_step(ms.student, g, ms.opt, cfg.lr, &mask);
  std::vector<const ForwardCache*> caches;
  for (const StudentPass* p : passes) {
    for (const auto& c : p->caches) {
      caches.push_back(&c);
    }
  }
  model.update_running_stats(ms.student, caches);
  ms.teacher = ema_update(ms.teacher, ms.student, cfg.ema_decay);
}

std::size_t total_steps(const TrainConfig& cfg, const Dataset& ds) {
  return std::max<std::size_t>(1, cfg.epochs * steps_per_epoch(cfg, ds));
}

json model_config_json(const ModelConfig& m) { return json::parse(m.to_json()); }

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

}  // namespace

// ---------------------------------------------------------------------------
// Names and config
// ---------------------------------------------------------------------------

std::string to_string(Variant v) {
  switch (v) {
    case Variant::SupervisedStrong: return "supervised-strong";
    case Variant::SupervisedSW: return "supervised-sw";
    case Variant::MT: return "mt";
    case Variant::ICT: return "ict";
    case Variant::SRST: return "srst";
    case Variant::SRSTAug: return "srst-aug";
    case Variant::CRST: return "crst";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::SupervisedStrong, Variant::SupervisedSW, Variant::MT, Variant::ICT,
                    Variant::SRST, Variant::SRSTAug, Variant::CRST}) {
    if (to_string(v) == name) {
      return v;
    }
  }
  throw ConfigError("unknown variant '" + name +
                    "' (expected supervised-strong, supervised-sw, mt, ict, srst, srst-aug, crst)");
}

std::string to_string(Perturbation p) {
  switch (p) {
    case Perturbation::Noise: return "noise";
    case Perturbation::Mixup: return "mixup";
    case Perturbation::FrameShift: return "frameshift";
  }
  return "?";
}

Perturbation parse_perturbation(const std::string& name) {
  for (Perturbation p : {Perturbation::Noise, Perturbation::Mixup, Perturbation::FrameShift}) {
    if (to_string(p) == name) {
      return p;
    }
  }
  throw ConfigError("unknown perturbation '" + name + "' (expected noise, mixup, frameshift)");
}

std::string to_string(EvalNetwork n) {
  return n == EvalNetwork::Teacher ? "teacher" : "student";
}

EvalNetwork parse_eval_network(const std::string& name) {
  if (name == "student") return EvalNetwork::Student;
  if (name == "teacher") return EvalNetwork::Teacher;
  throw ConfigError("unknown network '" + name + "' (expected student, teacher)");
}

void TrainConfig::validate() const {
  model.validate();
  if (batch.strong + batch.weak + batch.unlabeled == 0) {
    throw ConfigError("batch composition must contain at least one clip");
  }
  if (!(lr > 0.0) || !(lr_cap > 0.0)) {
    throw ConfigError("learning rate and its cap must be positive");
  }
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) {
    throw ConfigError("ema_decay must lie in [0,1)");
  }
  if (!(omega_peak >= 0.0) || !(delta_peak >= 0.0)) {
    throw ConfigError("ramp peaks must be non-negative");
  }
  if (!(shift_sigma >= 0.0)) {
    throw ConfigError("shift_sigma must be non-negative");
  }
}

BatchComposition TrainConfig::effective_batch() const {
  BatchComposition b = batch;
  if (variant == Variant::SupervisedStrong) {
    b.weak = 0;
    b.unlabeled = 0;
  } else if (variant == Variant::SupervisedSW) {
    b.unlabeled = 0;
  }
  return b;
}

void TrainConfig::check_dataset(const Dataset& ds) const {
  const BatchComposition b = effective_batch();
  if (b.strong > 0 && ds.strong.empty()) {
    throw ConfigError("variant " + to_string(variant) + " needs strongly labeled clips");
  }
  if (b.weak > 0 && ds.weak.empty() && variant == Variant::SupervisedSW) {
    throw ConfigError("variant supervised-sw needs weakly labeled clips");
  }
  const bool semi = variant == Variant::MT || variant == Variant::ICT ||
                    variant == Variant::SRST || variant == Variant::SRSTAug ||
                    variant == Variant::CRST;
  if (semi && ds.unlabeled.empty()) {
    throw ConfigError("variant " + to_string(variant) + " needs an unlabeled split");
  }
  if (ds.n_classes != model.n_classes) {
    throw ConfigError("dataset class count does not match the model");
  }
  for (const auto* split : {&ds.strong, &ds.validation}) {
    for (const auto& c : *split) {
      if (c.features.channels() != model.n_mel_in) {
        throw ConfigError("dataset channel count does not match the model input");
      }
    }
  }
}

std::string TrainConfig::to_json() const {
  return json{{"variant", to_string(variant)},
              {"model", model_config_json(model)},
              {"epochs", epochs},
              {"steps_per_epoch", steps_per_epoch},
              {"batch", {batch.strong, batch.unlabeled, batch.weak}},
              {"lr", lr},
              {"lr_cap", lr_cap},
              {"ema_decay", ema_decay},
              {"omega_peak", omega_peak},
              {"delta_peak", delta_peak},
              {"perturbation", to_string(perturbation)},
              {"snr_db", snr_db},
              {"shift_sigma", shift_sigma},
              {"evaluate", to_string(evaluate)},
              {"seed", seed}}
      .dump();
}

std::uint64_t TrainConfig::hash() const {
  Fnv1a h;
  h.update(to_json());
  return h.digest();
}

// ---------------------------------------------------------------------------
// Batches and data
// ---------------------------------------------------------------------------

Batch make_batch(const SubsetSizes& sizes, const BatchComposition& comp, std::uint64_t seed,
                 std::size_t step) {
  auto draw = [&](std::size_t n, std::size_t k, std::uint64_t tag) {
    std::vector<std::size_t> out;
    if (n == 0 || k == 0) {
      return out;
    }
    std::uint64_t cached_pass = ~std::uint64_t{0};
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < k; ++i) {
      const std::uint64_t j = static_cast<std::uint64_t>(step) * k + i;
      const std::uint64_t pass = j / n;
      if (pass != cached_pass) {
        std::iota(perm.begin(), perm.end(), 0);
        Rng rng(derive_seed(seed, tag, pass));
        rng.shuffle(perm.begin(), perm.end());
        cached_pass = pass;
      }
      out.push_back(perm[j % n]);
    }
    return out;
  };
  return {draw(sizes.strong, comp.strong, kStrong), draw(sizes.weak, comp.weak, kWeak),
          draw(sizes.unlabeled, comp.unlabeled, kUnlabeled)};
}

const ModelParams& inference_params(const TrainState& st, EvalNetwork which) {
  const ModelState& m = st.models.at(0);
  return which == EvalNetwork::Teacher ? m.teacher : m.student;
}

std::size_t steps_per_epoch(const TrainConfig& cfg, const Dataset& ds) {
  if (cfg.steps_per_epoch > 0) {
    return cfg.steps_per_epoch;
  }
  const BatchComposition b = cfg.effective_batch();
  auto ceil_div = [](std::size_t a, std::size_t k) { return (a + k - 1) / k; };
  if (b.strong > 0 && !ds.strong.empty()) return ceil_div(ds.strong.size(), b.strong);
  if (b.weak > 0 && !ds.weak.empty()) return ceil_div(ds.weak.size(), b.weak);
  if (b.unlabeled > 0 && !ds.unlabeled.empty()) return ceil_div(ds.unlabeled.size(), b.unlabeled);
  return 1;
}

double output_fps(const ModelConfig& model, double input_fps) {
  return input_fps / static_cast<double>(model.time_pool());
}

TrainData::TrainData(const Dataset& ds, const TrainConfig& cfg)
    : ds_(&ds), cfg_(&cfg), doubled_(cfg.variant == Variant::SRSTAug) {
  const std::size_t pool = cfg.model.time_pool();
  for (const auto& c : ds.strong) {
    StrongTarget t = pool_strong_labels(c.labels, pool);
    StrongLabelGrid g{BinaryMatrix(t.rows(), t.cols())};
    for (std::size_t i = 0; i < t.size(); ++i) {
      g.data.values()[i] = t.values()[i] > 0.5 ? 1 : 0;
    }
    pooled_.push_back(std::move(g));
    targets_.push_back(std::move(t));
  }
  for (const auto& c : ds.weak) {
    weak_targets_.push_back(to_weak_target(c.label));
  }
}

SubsetSizes TrainData::sizes() const {
  const std::size_t f = doubled_ ? 2 : 1;
  return {f * ds_->strong.size(), f * ds_->weak.size(), f * ds_->unlabeled.size()};
}

FeatureGrid TrainData::augmented(const FeatureGrid& x, int split, std::size_t i) const {
  return add_noise_snr(x, cfg_->snr_db,
                       derive_seed(cfg_->seed, kTagAug, static_cast<std::uint64_t>(split), i));
}

FeatureGrid TrainData::strong_x(std::size_t i) const {
  const std::size_t n = ds_->strong.size();
  const auto& x = ds_->strong.at(base(i, n)).features;
  return i < n ? x : augmented(x, kStrong, base(i, n));
}

FeatureGrid TrainData::weak_x(std::size_t i) const {
  const std::size_t n = ds_->weak.size();
  const auto& x = ds_->weak.at(base(i, n)).features;
  return i < n ? x : augmented(x, kWeak, base(i, n));
}

FeatureGrid TrainData::unlabeled_x(std::size_t i) const {
  const std::size_t n = ds_->unlabeled.size();
  const auto& x = ds_->unlabeled.at(base(i, n)).features;
  return i < n ? x : augmented(x, kUnlabeled, base(i, n));
}

const StrongLabelGrid& TrainData::strong_pooled(std::size_t i) const {
  return pooled_.at(base(i, pooled_.size()));
}

const StrongTarget& TrainData::strong_target(std::size_t i) const {
  return targets_.at(base(i, targets_.size()));
}

const WeakTarget& TrainData::weak_target(std::size_t i) const {
  return weak_targets_.at(base(i, weak_targets_.size()));
}

const WeakLabel& TrainData::weak_label(std::size_t i) const {
  return ds_->weak.at(base(i, ds_->weak.size())).label;
}

TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  const Model model(cfg.model);
  TrainState st;
  st.variant = cfg.variant;
  st.model = cfg.model;
  st.config_hash = cfg.hash();
  const std::size_t n_models = cfg.variant == Variant::CRST ? 2 : 1;
  for (std::size_t m = 0; m < n_models; ++m) {
    ModelState ms;
    ms.student = model.init_params(derive_seed(cfg.seed, kTagInit, m));
    ms.teacher = ms.student;
    ms.opt = make_opt_state(ms.student.size(), cfg.lr_cap);
    st.models.push_back(std::move(ms));
  }
  return st;
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

StepRecord train_step(TrainState& st, const TrainData& data, const TrainConfig& cfg,
                      const Batch& batch) {
  if (st.variant != cfg.variant) {
    throw ConfigError("train state and config disagree on the variant");
  }
  const Model model(st.model);
  const auto mask = trainable_mask(model.layout());
  const std::size_t T = total_steps(cfg, data.dataset());
  const std::size_t t = st.step;

  StepRecord rec;
  rec.step = t;
  rec.omega = ramp_weight(t, {T, cfg.omega_peak});
  rec.delta = ramp_weight(t, {T, cfg.delta_peak});

  const StepInputs in = gather(data, batch);
  const std::size_t n_params = model.param_count();

  auto labeled = [&](const StudentPass& s, const StudentPass& w, const std::vector<StrongTarget>& ys,
                     const std::vector<WeakTarget>& yw) {
    return LabeledOutputs{s.outs, ys, w.outs, yw};
  };

  switch (cfg.variant) {
    case Variant::SupervisedStrong:
    case Variant::SupervisedSW: {
      ModelState& ms = st.models[0];
      const StudentPass ps = train_forward(model, ms.student, in.xs, cfg.seed, t, 0, kStrong);
      const StudentPass pw = train_forward(model, ms.student, in.xw, cfg.seed, t, 0, kWeak);
      LossGrads lg;
      const LossBreakdown loss = loss_supervised(labeled(ps, pw, in.ys, in.yw), &lg);
      std::vector<double> g(n_params, 0.0);
      backprop(model, ms.student, ps, lg.strong, g);
      backprop(model, ms.student, pw, lg.weak, g);
      finish_student(model, ms, g, {&ps, &pw}, cfg, mask, loss.total);
      rec.losses.push_back(loss);
      break;
    }
    case Variant::MT: {
      ModelState& ms = st.models[0];
      const StudentPass ps = train_forward(model, ms.student, in.xs, cfg.seed, t, 0, kStrong);
      const StudentPass pw = train_forward(model, ms.student, in.xw, cfg.seed, t, 0, kWeak);
      const StudentPass pu = train_forward(model, ms.student, in.xu, cfg.seed, t, 0, kUnlabeled);
      TrainConfig noisy = cfg;
      noisy.perturbation = Perturbation::Noise;
      const auto ts = eval_forward(model, ms.teacher,
                                   make_view(in.xs, noisy, 1, t, kStrong, 1.0).x);
      const auto tw = eval_forward(model, ms.teacher, make_view(in.xw, noisy, 1, t, kWeak, 1.0).x);
      const auto tu = eval_forward(model, ms.teacher,
                                   make_view(in.xu, noisy, 1, t, kUnlabeled, 1.0).x);
      LossGrads lg;
      const LossBreakdown loss =
          loss_mt(labeled(ps, pw, in.ys, in.yw), pu.outs, ts, tw, tu, rec.delta, &lg);
      std::vector<double> g(n_params, 0.0);
      backprop(model, ms.student, ps, lg.strong, g);
      backprop(model, ms.student, pw, lg.weak, g);
      backprop(model, ms.student, pu, lg.unlabeled, g);
      finish_student(model, ms, g, {&ps, &pw, &pu}, cfg, mask, loss.total);
      rec.losses.push_back(loss);
      break;
    }
    case Variant::ICT: {
      ModelState& ms = st.models[0];
      const StudentPass ps = train_forward(model, ms.student, in.xs, cfg.seed, t, 0, kStrong);
      const StudentPass pw = train_forward(model, ms.student, in.xw, cfg.seed, t, 0, kWeak);
      std::vector<FeatureGrid> all = in.xs;
      all.insert(all.end(), in.xw.begin(), in.xw.end());
      all.insert(all.end(), in.xu.begin(), in.xu.end());
      Rng rng(derive_seed(cfg.seed, kTagMix, t, kMixed));
      const double lambda = rng.uniform();
      std::vector<std::size_t> partner(all.size());
      std::iota(partner.begin(), partner.end(), 0);
      rng.shuffle(partner.begin(), partner.end());
      std::vector<FeatureGrid> mixed;
      for (std::size_t i = 0; i < all.size(); ++i) {
        mixed.push_back(mixup(all[i], all[partner[i]], lambda));
      }
      const StudentPass pm = train_forward(model, ms.student, mixed, cfg.seed, t, 0, kMixed);
      const auto teach = eval_forward(model, ms.teacher, all);
      std::vector<PosteriorGrid> tb;
      for (std::size_t i = 0; i < all.size(); ++i) {
        tb.push_back(teach[partner[i]]);
      }
      LossGrads lg;
      const LossBreakdown loss =
          loss_ict(labeled(ps, pw, in.ys, in.yw), pm.outs, teach, tb, lambda, rec.delta, &lg);
      std::vector<double> g(n_params, 0.0);
      backprop(model, ms.student, ps, lg.strong, g);
      backprop(model, ms.student, pw, lg.weak, g);
      backprop(model, ms.student, pm, lg.mixed, g);
      finish_student(model, ms, g, {&ps, &pw, &pm}, cfg, mask, loss.total);
      rec.losses.push_back(loss);
      break;
    }
    case Variant::SRST:
    case Variant::SRSTAug: {
      ModelState& ms = st.models[0];
      const auto pseudo_s = pseudo_labels(eval_forward(model, ms.teacher, in.xs));
      const auto pseudo_w = pseudo_labels(eval_forward(model, ms.teacher, in.xw));
      const auto pseudo_u = pseudo_labels(eval_forward(model, ms.teacher, in.xu));
      const double gamma = srst_gamma(pseudo_s, in.ys, rec.omega);
      const StudentPass ps = train_forward(model, ms.student, in.xs, cfg.seed, t, 0, kStrong);
      const StudentPass pw = train_forward(model, ms.student, in.xw, cfg.seed, t, 0, kWeak);
      const StudentPass pu = train_forward(model, ms.student, in.xu, cfg.seed, t, 0, kUnlabeled);
      LossGrads lg;
      const LossBreakdown loss =
          loss_srst(labeled(ps, pw, in.ys, in.yw), pu.outs, pseudo_w, pseudo_u, gamma, &lg);
      std::vector<double> g(n_params, 0.0);
      backprop(model, ms.student, ps, lg.strong, g);
      backprop(model, ms.student, pw, lg.weak, g);
      backprop(model, ms.student, pu, lg.unlabeled, g);
      finish_student(model, ms, g, {&ps, &pw, &pu}, cfg, mask, loss.total);
      rec.losses.push_back(loss);
      break;
    }
    case Variant::CRST: {
      const std::size_t pool = st.model.time_pool();
      const Perturbation kind = cfg.perturbation;
      double lambda = 1.0;
      if (kind == Perturbation::Mixup) {
        Rng rng(derive_seed(cfg.seed, kTagMix, t, kMixed));
        lambda = rng.uniform();
      }
      const GroupView vs = make_view(in.xs, cfg, pool, t, kStrong, lambda);
      const GroupView vw = make_view(in.xw, cfg, pool, t, kWeak, lambda);
      const GroupView vu = make_view(in.xu, cfg, pool, t, kUnlabeled, lambda);

      // Teacher snapshots are read before either student moves.
      ModelState& m1 = st.models[0];
      ModelState& m2 = st.models[1];
      const auto p1s = pseudo_labels(eval_forward(model, m1.teacher, in.xs));
      const auto p1w = pseudo_labels(eval_forward(model, m1.teacher, in.xw));
      const auto p1u = pseudo_labels(eval_forward(model, m1.teacher, in.xu));
      const auto p2s = pseudo_labels(view_teacher(model, m2.teacher, in.xs, vs, kind));
      const auto p2w = pseudo_labels(view_teacher(model, m2.teacher, in.xw, vw, kind));
      const auto p2u = pseudo_labels(view_teacher(model, m2.teacher, in.xu, vu, kind));
      const Reliability r1 = reliability(p1s, in.ys_grid, p1w, in.yw_label, rec.omega);
      const Reliability r2 = reliability(p2s, in.ys_grid, p2w, in.yw_label, rec.omega);

      // Model I: original view, supervised by teacher II.
      {
        const StudentPass ps = train_forward(model, m1.student, in.xs, cfg.seed, t, 0, kStrong);
        const StudentPass pw = train_forward(model, m1.student, in.xw, cfg.seed, t, 0, kWeak);
        const StudentPass pu =
            train_forward(model, m1.student, in.xu, cfg.seed, t, 0, kUnlabeled);
        LossGrads lg;
        const LossBreakdown loss = loss_crst(labeled(ps, pw, in.ys, in.yw), pu.outs, p2w, p2u,
                                             r2.gamma_s, r2.gamma_w, &lg);
        std::vector<double> g(n_params, 0.0);
        backprop(model, m1.student, ps, lg.strong, g);
        backprop(model, m1.student, pw, lg.weak, g);
        backprop(model, m1.student, pu, lg.unlabeled, g);
        finish_student(model, m1, g, {&ps, &pw, &pu}, cfg, mask, loss.total);
        rec.losses.push_back(loss);
      }
      // Model II: perturbed view, supervised by teacher I.
      {
        const auto ys2 = to_view(vs, kind, in.ys);
        const auto yw2 = weak_to_view(vw, kind, in.yw);
        const auto q1w = to_view(vw, kind, p1w);
        const auto q1u = to_view(vu, kind, p1u);
        const StudentPass ps = train_forward(model, m2.student, vs.x, cfg.seed, t, 1, kStrong);
        const StudentPass pw = train_forward(model, m2.student, vw.x, cfg.seed, t, 1, kWeak);
        const StudentPass pu = train_forward(model, m2.student, vu.x, cfg.seed, t, 1, kUnlabeled);
        LossGrads lg;
        const LossBreakdown loss = loss_crst(labeled(ps, pw, ys2, yw2), pu.outs, q1w, q1u,
                                             r1.gamma_s, r1.gamma_w, &lg);
        std::vector<double> g(n_params, 0.0);
        backprop(model, m2.student, ps, lg.strong, g);
        backprop(model, m2.student, pw, lg.weak, g);
        backprop(model, m2.student, pu, lg.unlabeled, g);
        finish_student(model, m2, g, {&ps, &pw, &pu}, cfg, mask, loss.total);
        rec.losses.push_back(loss);
      }
      break;
    }
  }
  ++st.step;
  return rec;
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

std::vector<PosteriorGrid> predict(const Model& model, const ModelParams& params,
                                   const std::vector<const FeatureGrid*>& xs) {
  std::vector<PosteriorGrid> out;
  out.reserve(xs.size());
  for (const FeatureGrid* x : xs) {
    out.push_back(model.forward(params, *x));
  }
  return out;
}

double evaluate_macro_f(const Model& model, const ModelParams& params,
                        const std::vector<LabeledClip>& clips) {
  EventTable det;
  EventTable ref;
  for (const auto& c : clips) {
    const PosteriorGrid p = model.forward(params, c.features);
    det[c.id] = global_postproc(p, output_fps(model.config(), c.features.fps));
    ref[c.id] = c.events;
  }
  return score(match_corpus(det, ref, model.config().n_classes)).macro_f;
}

TrainResult train(const Dataset& ds, const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  cfg.check_dataset(ds);
  const TrainData data(ds, cfg);
  TrainResult res;
  res.final_state = init_state(cfg);
  res.best_state = res.final_state;
  const Model model(cfg.model);
  const std::size_t spe = steps_per_epoch(cfg, ds);
  const BatchComposition comp = cfg.effective_batch();
  const std::uint64_t batch_seed = derive_seed(cfg.seed, kTagBatch);
  TrainState& st = res.final_state;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t s = 0; s < spe; ++s) {
      const Batch batch = make_batch(data.sizes(), comp, batch_seed, st.step);
      StepRecord rec = train_step(st, data, cfg, batch);
      rec.epoch = epoch;
      if (s + 1 == spe) {
        const double f = ds.validation.empty()
                             ? 0.0
                             : evaluate_macro_f(model, inference_params(st, cfg.evaluate),
                                                ds.validation);
        rec.val_f = f;
        res.history.epoch_val_f.push_back(f);
        if (f > res.history.best_f) {
          res.history.best_f = f;
          res.history.best_epoch = epoch;
          res.best_state = st;
        }
      }
      if (on_step) {
        on_step(rec);
      }
      res.history.steps.push_back(std::move(rec));
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints and history
// ---------------------------------------------------------------------------

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const Model model(state.model);
  json names = json::array();
  json opt_steps = json::array();
  std::vector<const std::vector<double>*> vectors;
  for (std::size_t m = 0; m < state.models.size(); ++m) {
    const auto& ms = state.models[m];
    const std::string p = "model" + std::to_string(m) + ".";
    for (const auto& [name, vec] : {std::pair{"student", &ms.student}, {"teacher", &ms.teacher},
                                    {"adam_m", &ms.opt.m}, {"adam_v", &ms.opt.v}}) {
      if (vec->size() != model.param_count()) {
        throw InvalidInput("checkpoint vector does not match the model layout");
      }
      names.push_back(p + name);
      vectors.push_back(vec);
    }
    opt_steps.push_back({{"step", ms.opt.step}, {"lr_cap", ms.opt.lr_cap}});
  }
  const json header{{"format", 1},
                    {"variant", to_string(state.variant)},
                    {"model", model_config_json(state.model)},
                    {"config_hash", hex64(state.config_hash)},
                    {"step", state.step},
                    {"param_count", model.param_count()},
                    {"layout", json::parse(model.layout().to_json())},
                    {"optimizer", opt_steps},
                    {"vectors", names}};
  const std::string text = header.dump();
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw Error("cannot write checkpoint " + path.string());
  }
  f.write(kMagic, sizeof kMagic);
  write_u32(f, static_cast<std::uint32_t>(text.size()));
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto* v : vectors) {
    f.write(reinterpret_cast<const char*>(v->data()),
            static_cast<std::streamsize>(v->size() * sizeof(double)));
  }
  if (!f) {
    throw Error("failed writing checkpoint " + path.string());
  }
}

TrainState load_checkpoint(const std::filesystem::path& path, std::optional<Variant> expect) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw FormatError("cannot open checkpoint " + path.string());
  }
  char magic[8];
  std::uint32_t len = 0;
  if (!f.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  }
  if (!f.read(reinterpret_cast<char*>(&len), 4) || len > (1u << 26)) {
    throw FormatError(path.string() + ": truncated checkpoint header");
  }
  std::string text(len, '\0');
  if (!f.read(text.data(), len)) {
    throw FormatError(path.string() + ": truncated checkpoint header");
  }
  TrainState st;
  std::vector<std::string> names;
  std::size_t param_count = 0;
  try {
    const json h = json::parse(text);
    st.variant = parse_variant(h.at("variant").get<std::string>());
    st.model = ModelConfig::from_json(h.at("model").dump());
    st.step = h.at("step").get<std::size_t>();
    param_count = h.at("param_count").get<std::size_t>();
    const std::string hash = h.at("config_hash").get<std::string>();
    st.config_hash = std::stoull(hash, nullptr, 16);
    names = h.at("vectors").get<std::vector<std::string>>();
    const auto& opt = h.at("optimizer");
    st.models.resize(opt.size());
    for (std::size_t m = 0; m < opt.size(); ++m) {
      st.models[m].opt.step = opt[m].at("step").get<std::size_t>();
      st.models[m].opt.lr_cap = opt[m].at("lr_cap").get<double>();
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const std::logic_error& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  }
  if (expect.has_value() && *expect != st.variant) {
    throw ConfigError("checkpoint holds variant " + to_string(st.variant) + ", expected " +
                      to_string(*expect));
  }
  const Model model(st.model);
  if (param_count != model.param_count() || names.size() != 4 * st.models.size()) {
    throw FormatError(path.string() + ": checkpoint layout mismatch");
  }
  for (std::size_t m = 0; m < st.models.size(); ++m) {
    ModelState& ms = st.models[m];
    for (auto* v : {&ms.student, &ms.teacher, &ms.opt.m, &ms.opt.v}) {
      v->resize(param_count);
      if (!f.read(reinterpret_cast<char*>(v->data()),
                  static_cast<std::streamsize>(param_count * sizeof(double)))) {
        throw FormatError(path.string() + ": truncated parameter data");
      }
    }
  }
  if (f.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path.string() + ": trailing bytes after parameter data");
  }
  return st;
}

std::string history_line(const StepRecord& rec) {
  json models = json::array();
  for (const auto& l : rec.losses) {
    models.push_back({{"total", l.total},
                      {"strong", l.strong},
                      {"weak", l.weak},
                      {"expectation", l.expectation},
                      {"weight_u", l.weight_u},
                      {"weight_w", l.weight_w},
                      {"mse_u", l.mse_u},
                      {"mse_w", l.mse_w}});
  }
  json j{{"step", rec.step}, {"epoch", rec.epoch}, {"omega", rec.omega},
         {"delta", rec.delta}, {"models", models}};
  if (rec.val_f.has_value()) {
    j["val_macro_f"] = *rec.val_f;
  }
  return j.dump();
}

void write_history_jsonl(const TrainHistory& h, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw Error("cannot write " + path.string());
  }
  for (const auto& r : h.steps) {
    f << history_line(r) << '\n';
  }
}

}  // namespace crst
