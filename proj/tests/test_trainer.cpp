// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "crst/trainer.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace crst;

namespace {

DataConfig tiny_data() {
  DataConfig d;
  d.seed = 5;
  d.n_strong = 8;
  d.n_weak = 4;
  d.n_unlabeled = 8;
  d.n_validation = 4;
  d.scene.clip_len = 2.0;
  d.scene.fps = 24.0;
  d.scene.n_channels = 8;
  d.scene.min_duration = 0.5;
  d.scene.max_duration = 1.0;
  return d;
}

TrainConfig tiny_train(Variant v) {
  TrainConfig c;
  c.variant = v;
  c.model.n_mel_in = 8;
  c.model.conv_blocks = {{3, 2, 2}, {4, 1, 4}};
  c.model.recurrent_hidden = 3;
  c.model.dropout_rate = 0.2;
  c.epochs = 2;
  c.batch = {2, 4, 2};
  c.seed = 9;
  return c;
}

const Dataset& tiny_dataset() {
  static const Dataset ds = make_dataset(tiny_data());
  return ds;
}

std::filesystem::path tmp(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("variant and perturbation names") {
  for (auto v : {Variant::SupervisedStrong, Variant::SupervisedSW, Variant::MT, Variant::ICT,
                 Variant::SRST, Variant::SRSTAug, Variant::CRST}) {
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK_THROWS_AS(parse_variant("crst2"), ConfigError);
  for (auto p : {Perturbation::Noise, Perturbation::Mixup, Perturbation::FrameShift}) {
    CHECK(parse_perturbation(to_string(p)) == p);
  }
  CHECK(parse_eval_network("teacher") == EvalNetwork::Teacher);
  CHECK(to_string(EvalNetwork::Student) == "student");
  CHECK_THROWS_AS(parse_eval_network("both"), ConfigError);
  TrainConfig bad;
  bad.ema_decay = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("make_batch is a pure function with full passes") {
  const SubsetSizes sizes{10, 6, 25};
  const BatchComposition comp{4, 5, 3};
  const auto a = make_batch(sizes, comp, 3, 17);
  const auto b = make_batch(sizes, comp, 3, 17);
  CHECK(a.strong == b.strong);
  CHECK(a.weak == b.weak);
  CHECK(a.unlabeled == b.unlabeled);
  CHECK(a.strong.size() == 4);
  CHECK(a.weak.size() == 3);
  CHECK(a.unlabeled.size() == 5);

  // 5 unlabeled steps cover one pass of 25 exactly.
  std::map<std::size_t, int> seen;
  for (std::size_t s = 0; s < 5; ++s) {
    for (auto i : make_batch(sizes, comp, 3, s).unlabeled) ++seen[i];
  }
  CHECK(seen.size() == 25);
  for (const auto& [i, n] : seen) CHECK(n == 1);

  // When the pass length does not divide, every clip still appears once
  // before any appears a third time.
  std::map<std::size_t, int> strong_seen;
  for (std::size_t s = 0; s < 5; ++s) {
    for (auto i : make_batch(sizes, comp, 3, s).strong) {
      CHECK(i < 10);
      ++strong_seen[i];
    }
  }
  for (const auto& [i, n] : strong_seen) CHECK(n == 2);
  CHECK(make_batch(sizes, comp, 4, 0).unlabeled != a.unlabeled);
}

TEST_CASE("effective batch and dataset checks") {
  auto c = tiny_train(Variant::SupervisedStrong);
  CHECK(c.effective_batch().weak == 0);
  CHECK(c.effective_batch().unlabeled == 0);
  c.variant = Variant::SupervisedSW;
  CHECK(c.effective_batch().unlabeled == 0);
  CHECK(c.effective_batch().weak == 2);
  c.variant = Variant::CRST;
  CHECK(c.effective_batch() == c.batch);

  Dataset ds = tiny_dataset();
  ds.unlabeled.clear();
  CHECK_THROWS_AS(tiny_train(Variant::CRST).check_dataset(ds), ConfigError);
  tiny_train(Variant::SupervisedSW).check_dataset(ds);
  auto wrong = tiny_train(Variant::MT);
  wrong.model.n_classes = 4;
  CHECK_THROWS_AS(wrong.check_dataset(tiny_dataset()), ConfigError);
  CHECK(steps_per_epoch(tiny_train(Variant::MT), tiny_dataset()) == 4);
}

TEST_CASE("a CRST step updates both students and teachers") {
  const auto cfg = tiny_train(Variant::CRST);
  const TrainData data(tiny_dataset(), cfg);
  auto st = init_state(cfg);
  REQUIRE(st.models.size() == 2);
  CHECK(st.models[0].student != st.models[1].student);
  const auto before = st;
  const auto rec = train_step(st, data, cfg, make_batch(data.sizes(), cfg.batch, cfg.seed, 0));
  CHECK(st.step == 1);
  REQUIRE(rec.losses.size() == 2);
  for (std::size_t m = 0; m < 2; ++m) {
    CHECK(st.models[m].student != before.models[m].student);
    CHECK(st.models[m].teacher != before.models[m].teacher);
    CHECK(std::isfinite(rec.losses[m].total));
    CHECK(rec.losses[m].weight_u >= 0.0);
    CHECK(rec.losses[m].weight_u <= 5.0 + 1e-12);
  }
  CHECK(rec.omega > 0.0);

  auto single = init_state(tiny_train(Variant::MT));
  CHECK(single.models.size() == 1);
  CHECK(&inference_params(st, EvalNetwork::Teacher) == &st.models[0].teacher);
  CHECK(&inference_params(st, EvalNetwork::Student) == &st.models[0].student);

  // Validating the teacher changes the recorded scores but not the updates.
  auto by_teacher = tiny_train(Variant::MT);
  by_teacher.evaluate = EvalNetwork::Teacher;
  const auto a = train(tiny_dataset(), tiny_train(Variant::MT));
  const auto b = train(tiny_dataset(), by_teacher);
  CHECK(a.final_state.models[0].student == b.final_state.models[0].student);
  CHECK(by_teacher.hash() != tiny_train(Variant::MT).hash());
}

TEST_CASE("training is deterministic and selects the best epoch") {
  for (auto v : {Variant::SupervisedSW, Variant::ICT, Variant::SRSTAug, Variant::CRST}) {
    auto cfg = tiny_train(v);
    if (v == Variant::ICT) cfg.perturbation = Perturbation::Mixup;
    std::size_t calls = 0;
    const auto a = train(tiny_dataset(), cfg, [&](const StepRecord&) { ++calls; });
    const auto b = train(tiny_dataset(), cfg);
    CHECK(calls == a.history.steps.size());
    CHECK(a.history.steps.size() == 2 * steps_per_epoch(cfg, tiny_dataset()));
    CHECK(a.final_state.models[0].student == b.final_state.models[0].student);
    CHECK(a.history.epoch_val_f == b.history.epoch_val_f);
    REQUIRE(a.history.epoch_val_f.size() == 2);
    const double best = *std::max_element(a.history.epoch_val_f.begin(), a.history.epoch_val_f.end());
    CHECK(a.history.best_f >= best);
    CHECK(a.history.steps.back().val_f.has_value());
    CHECK_FALSE(a.history.steps.front().val_f.has_value());
  }
  auto shifted = tiny_train(Variant::SRST);
  shifted.perturbation = Perturbation::FrameShift;
  shifted.epochs = 1;
  const auto r = train(tiny_dataset(), shifted);
  CHECK(std::isfinite(r.history.steps.back().losses[0].total));
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto cfg = tiny_train(Variant::CRST);
  const TrainData data(tiny_dataset(), cfg);
  auto st = init_state(cfg);
  train_step(st, data, cfg, make_batch(data.sizes(), cfg.batch, cfg.seed, 0));
  const auto path = tmp("crst_test.ckpt");
  save_checkpoint(st, path);
  const auto back = load_checkpoint(path, Variant::CRST);
  CHECK(back.step == st.step);
  CHECK(back.model == st.model);
  CHECK(back.config_hash == st.config_hash);
  REQUIRE(back.models.size() == 2);
  for (std::size_t m = 0; m < 2; ++m) {
    CHECK(back.models[m].student == st.models[m].student);
    CHECK(back.models[m].teacher == st.models[m].teacher);
    CHECK(back.models[m].opt.m == st.models[m].opt.m);
    CHECK(back.models[m].opt.v == st.models[m].opt.v);
    CHECK(back.models[m].opt.step == st.models[m].opt.step);
  }
  CHECK_THROWS_AS(load_checkpoint(path, Variant::MT), ConfigError);

  const auto size = std::filesystem::file_size(path);
  std::filesystem::copy_file(path, tmp("crst_trunc.ckpt"),
                             std::filesystem::copy_options::overwrite_existing);
  std::filesystem::resize_file(tmp("crst_trunc.ckpt"), size - 8);
  CHECK_THROWS_AS(load_checkpoint(tmp("crst_trunc.ckpt")), FormatError);
  {
    std::ofstream f(tmp("crst_trunc.ckpt"), std::ios::binary | std::ios::app);
    f << "0123456789abcdef";
  }
  CHECK_THROWS_AS(load_checkpoint(tmp("crst_trunc.ckpt")), FormatError);
  {
    std::ofstream f(tmp("crst_junk.ckpt"), std::ios::binary);
    f << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(load_checkpoint(tmp("crst_junk.ckpt")), FormatError);
  CHECK_THROWS_AS(load_checkpoint(tmp("crst_missing.ckpt")), FormatError);
}

TEST_CASE("history lines are JSON") {
  StepRecord rec;
  rec.step = 3;
  rec.epoch = 1;
  rec.omega = 0.5;
  rec.losses.resize(2);
  rec.losses[1].weight_w = 1.25;
  rec.val_f = 0.4;
  const auto j = nlohmann::json::parse(history_line(rec));
  CHECK(j["step"] == 3);
  CHECK(j["models"].size() == 2);
  CHECK(j["models"][1]["weight_w"] == 1.25);
  CHECK(j["val_macro_f"] == 0.4);
  rec.val_f.reset();
  CHECK_FALSE(nlohmann::json::parse(history_line(rec)).contains("val_macro_f"));
  CHECK(output_fps(tiny_train(Variant::MT).model, 24.0) == doctest::Approx(12.0));
}
