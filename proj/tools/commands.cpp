// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "crst/pseudolabel.hpp"
#include "crst/seqdata.hpp"
#include "json.hpp"

namespace crst::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::uint64_t seed = 0;
  std::string variant;
  std::string mode = "global";
  double alpha = 0.0;
  double beta = 0.0;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string split = "validation";
  std::string intervals;
  std::string reference;
  std::string manifest;
  std::string ref_variant = "crst";
  std::vector<std::string> runs;
  std::size_t epochs = 0;
  std::size_t classes = 0;
  std::size_t index = 0;
  std::size_t model = 0;

  bool has_seed = false;
  bool has_alpha = false;
  bool has_beta = false;
  bool has_epochs = false;
  bool has_classes = false;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream f(path, std::ios::binary);
  if (!f || !(f << text)) {
    throw Error("cannot write " + path.string());
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw FormatError("cannot read " + path.string());
  }
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ExperimentConfig load_or_default(const Options& o) {
  return o.config.empty() ? config_from_ini({}) : load_config(o.config);
}

fs::path data_dir(const Options& o) {
  if (!o.data.empty()) {
    return o.data;
  }
  if (const char* env = std::getenv("CRST_DATA_ROOT"); env != nullptr && *env != '\0') {
    return env;
  }
  throw ConfigError("no dataset given: pass --data or set CRST_DATA_ROOT");
}

void write_manifest(const fs::path& out_dir, const std::string& command,
                    const std::vector<std::string>& args, const std::string& config_text,
                    std::uint64_t seed, const json& inputs) {
  const json m{{"tool", "crst"},
               {"version", kToolVersion},
               {"command", command},
               {"args", args},
               {"cwd", fs::current_path().string()},
               {"seed", seed},
               {"config", config_text},
               {"inputs", inputs},
               {"outputs", hash_outputs(out_dir)}};
  write_text(out_dir / "manifest.json", m.dump(2) + "\n");
}

const std::vector<LabeledClip>& labeled_split(const Dataset& ds, const std::string& split) {
  if (split == "validation") return ds.validation;
  if (split == "strong") return ds.strong;
  throw ConfigError("split '" + split + "' has no reference events (use validation or strong)");
}

std::vector<const FeatureGrid*> split_features(const Dataset& ds, const std::string& split,
                                               std::vector<std::string>* ids) {
  std::vector<const FeatureGrid*> xs;
  auto add = [&](const std::string& id, const FeatureGrid& x) {
    xs.push_back(&x);
    if (ids != nullptr) ids->push_back(id);
  };
  if (split == "validation" || split == "strong") {
    for (const auto& c : labeled_split(ds, split)) add(c.id, c.features);
  } else if (split == "weak") {
    for (const auto& c : ds.weak) add(c.id, c.features);
  } else if (split == "unlabeled") {
    for (const auto& c : ds.unlabeled) add(c.id, c.features);
  } else {
    throw ConfigError("unknown split '" + split + "'");
  }
  return xs;
}

std::vector<PosteriorGrid> weak_outputs(const Model& model, const ModelParams& params,
                                        const std::vector<WeakClip>& weak,
                                        std::vector<WeakLabel>& labels) {
  std::vector<const FeatureGrid*> xs;
  for (const auto& c : weak) {
    xs.push_back(&c.features);
    labels.push_back(c.label);
  }
  return predict(model, params, xs);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  ExperimentConfig cfg = load_or_default(o);
  if (o.has_seed) cfg.data.seed = o.seed;
  const Dataset ds = make_dataset(cfg.data);
  const fs::path dir = o.out;
  write_dataset(ds, dir);
  write_text(dir / "config.ini", cfg.to_ini());
  write_manifest(dir, "gen-data", args, cfg.to_ini(), cfg.data.seed,
                 json{{"dataset_hash", hex64(dataset_hash(dir))}});
  out << "wrote " << ds.strong.size() << " strong, " << ds.weak.size() << " weak, "
      << ds.unlabeled.size() << " unlabeled, " << ds.validation.size()
      << " validation clips to " << dir.string() << "\n";
  return kOk;
}

int cmd_train(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  ExperimentConfig cfg = load_or_default(o);
  if (!o.variant.empty()) cfg.train.variant = parse_variant(o.variant);
  if (o.has_seed) cfg.train.seed = o.seed;
  if (o.has_epochs) cfg.train.epochs = o.epochs;
  const fs::path data = data_dir(o);
  const Dataset ds = read_dataset(data);
  const fs::path dir = o.out;
  fs::create_directories(dir);

  std::ofstream hist(dir / "history.jsonl", std::ios::binary);
  std::ofstream curves(dir / "curves.csv", std::ios::binary);
  if (!hist || !curves) {
    throw Error("cannot write into " + dir.string());
  }
  curves << "step,series,value\n";
  const TrainResult res = train(ds, cfg.train, [&](const StepRecord& r) {
    hist << history_line(r) << '\n';
    curves << r.step << ",omega," << format_double(r.omega) << '\n';
    curves << r.step << ",delta," << format_double(r.delta) << '\n';
    for (std::size_t m = 0; m < r.losses.size(); ++m) {
      const auto& l = r.losses[m];
      curves << r.step << ",loss_m" << m << ',' << format_double(l.total) << '\n';
      curves << r.step << ",weight_u_m" << m << ',' << format_double(l.weight_u) << '\n';
      curves << r.step << ",weight_w_m" << m << ',' << format_double(l.weight_w) << '\n';
    }
    if (r.val_f) {
      curves << r.step << ",val_macro_f," << format_double(*r.val_f) << '\n';
    }
  });
  hist.close();
  curves.close();
  save_checkpoint(res.best_state, dir / "best.ckpt");
  save_checkpoint(res.final_state, dir / "final.ckpt");
  write_text(dir / "config.ini", cfg.to_ini());
  const json summary{{"variant", to_string(cfg.train.variant)},
                     {"steps", res.history.steps.size()},
                     {"best_epoch", res.history.best_epoch},
                     {"best_val_macro_f", res.history.best_f},
                     {"epoch_val_macro_f", res.history.epoch_val_f}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  write_manifest(dir, "train", args, cfg.to_ini(), cfg.train.seed,
                 json{{"data", fs::absolute(data).string()},
                      {"dataset_hash", hex64(dataset_hash(data))}});
  out << to_string(cfg.train.variant) << ": " << res.history.steps.size()
      << " steps, best validation macro F " << format_double(res.history.best_f) << " at epoch "
      << res.history.best_epoch << "\n";
  return kOk;
}

int cmd_postproc(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const ExperimentConfig cfg = load_or_default(o);
  const TrainState st = load_checkpoint(o.checkpoint);
  const Model model(st.model);
  const ModelParams& params = inference_params(st, cfg.train.evaluate);
  const fs::path data = data_dir(o);
  const Dataset ds = read_dataset(data);
  const fs::path dir = o.out;
  fs::create_directories(dir);
  const double alpha = o.has_alpha ? o.alpha : cfg.postproc.alpha;
  const double beta = o.has_beta ? o.beta : cfg.postproc.beta;
  if (o.mode == "sweep") {
    const SweepTable t = sweep_postproc(model, params, ds.weak, labeled_split(ds, o.split),
                                        cfg.postproc);
    std::ostringstream csv;
    csv << "alpha,beta,macro_f\n";
    csv << "global,global," << format_double(t.global_f) << '\n';
    for (std::size_t i = 0; i < t.alphas.size(); ++i) {
      for (std::size_t j = 0; j < t.betas.size(); ++j) {
        csv << format_double(t.alphas[i]) << ',' << format_double(t.betas[j]) << ','
            << format_double(t.macro_f(i, j)) << '\n';
      }
    }
    write_text(dir / "sweep.csv", csv.str());
    const auto best = std::max_element(t.macro_f.values().begin(), t.macro_f.values().end());
    const auto k = static_cast<std::size_t>(best - t.macro_f.values().begin());
    out << "global macro F " << format_double(t.global_f) << ", best classwise "
        << format_double(*best) << " at alpha " << format_double(t.alphas[k / t.betas.size()])
        << ", beta " << format_double(t.betas[k % t.betas.size()]) << "\n";
  } else {
    std::vector<std::string> ids;
    const auto xs = split_features(ds, o.split, &ids);
    if (xs.empty()) {
      throw ConfigError("split '" + o.split + "' is empty");
    }
    const double fps = output_fps(st.model, xs.front()->fps);
    const auto outputs = predict(model, params, xs);
    ClasswiseParams p;
    if (o.mode == "global") {
      p.thresholds.assign(st.model.n_classes, kGlobalThreshold);
      p.filter_len.assign(st.model.n_classes, filter_length_seconds(kGlobalFilterSeconds, fps));
    } else if (o.mode == "classwise") {
      std::vector<WeakLabel> labels;
      const auto wout = weak_outputs(model, params, ds.weak, labels);
      p = fit_classwise(wout, labels, st.model.n_classes, alpha, beta, fps);
      for (std::size_t c = 0; c < p.info.size(); ++c) {
        if (p.info[c].threshold_fallback || p.info[c].filter_fallback) {
          out << "class " << c << ": fallback to global "
              << (p.info[c].threshold_fallback ? "threshold" : "filter length")
              << (p.info[c].note.empty() ? "" : " (" + p.info[c].note + ")") << "\n";
        }
      }
    } else {
      throw ConfigError("unknown mode '" + o.mode + "' (expected global, classwise, sweep)");
    }
    write_text(dir / "params.json", p.to_json() + "\n");
    write_intervals_csv(detect(model, outputs, ids, fps, &p), dir / "intervals.csv");
    out << "wrote " << (dir / "intervals.csv").string() << "\n";
  }
  write_manifest(dir, "postproc", args, cfg.to_ini(), 0,
                 json{{"checkpoint", fs::absolute(o.checkpoint).string()},
                      {"data", fs::absolute(data).string()},
                      {"dataset_hash", hex64(dataset_hash(data))}});
  return kOk;
}

int cmd_eval(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const EventTable det = read_intervals_csv(o.intervals);
  EventTable ref;
  std::size_t n_classes = o.has_classes ? o.classes : 0;
  json inputs{{"intervals", fs::absolute(o.intervals).string()}};
  if (!o.reference.empty()) {
    ref = read_intervals_csv(o.reference);
    inputs["reference"] = fs::absolute(o.reference).string();
  } else {
    const fs::path data = data_dir(o);
    const Dataset ds = read_dataset(data);
    ref = reference_table(labeled_split(ds, o.split));
    if (!o.has_classes) n_classes = ds.n_classes;
    inputs["data"] = fs::absolute(data).string();
    inputs["dataset_hash"] = hex64(dataset_hash(data));
  }
  if (n_classes == 0) {
    for (const EventTable* t : {&det, static_cast<const EventTable*>(&ref)}) {
      for (const auto& [id, events] : *t) {
        for (const auto& e : events) {
          n_classes = std::max(n_classes, static_cast<std::size_t>(e.class_id) + 1);
        }
      }
    }
  }
  if (n_classes == 0) {
    throw FormatError("cannot infer the class count from empty tables; pass --classes");
  }
  const fs::path dir = o.out;
  const ScoreReport report = score(match_corpus(det, ref, n_classes));
  write_score_csv(report, dir / "score.csv");
  write_confusion_csv(confusion_corpus(det, ref, n_classes), dir / "confusion.csv");
  write_concurrency_csv(concurrency_stats(ref, n_classes), dir / "concurrency.csv");
  write_manifest(dir, "eval", args, "", 0, inputs);
  out << "macro F " << format_double(report.macro_f) << "\n";
  return kOk;
}

int cmd_compare(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  RunComparison cmp;
  json inputs = json::array();
  for (const auto& r : o.runs) {
    const auto eq = r.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--run expects variant=score.csv, got '" + r + "'");
    }
    const std::string name = r.substr(0, eq);
    const fs::path path = r.substr(eq + 1);
    const double f = read_score_csv(path).macro_f;
    auto it = std::find(cmp.variants.begin(), cmp.variants.end(), name);
    if (it == cmp.variants.end()) {
      cmp.variants.push_back(name);
      cmp.values.emplace_back();
      it = cmp.variants.end() - 1;
    }
    cmp.values[static_cast<std::size_t>(it - cmp.variants.begin())].push_back(f);
    inputs.push_back(fs::absolute(path).string());
  }
  const fs::path dir = o.out;
  write_comparison_csv(cmp, o.ref_variant, dir / "comparison.csv");
  write_manifest(dir, "compare", args, "", 0, json{{"scores", inputs}});
  out << "wrote " << (dir / "comparison.csv").string() << "\n";
  return kOk;
}

int cmd_pseudo_labels(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const TrainState st = load_checkpoint(o.checkpoint);
  if (o.model >= st.models.size()) {
    throw ConfigError("checkpoint has no model " + std::to_string(o.model));
  }
  const Model model(st.model);
  const fs::path data = data_dir(o);
  const Dataset ds = read_dataset(data);
  std::vector<std::string> ids;
  const auto xs = split_features(ds, o.split, &ids);
  if (o.index >= xs.size()) {
    throw ConfigError("clip index out of range for split '" + o.split + "'");
  }
  const PseudoLabelGrid g = pseudo_label_grid(model.forward(st.models[o.model].teacher, *xs[o.index]));
  std::ostringstream csv;
  csv << "frame";
  for (std::size_t c = 0; c < g.cols(); ++c) csv << ",class_" << c;
  csv << '\n';
  for (std::size_t t = 0; t < g.rows(); ++t) {
    csv << t;
    for (std::size_t c = 0; c < g.cols(); ++c) csv << ',' << format_double(g(t, c));
    csv << '\n';
  }
  const fs::path dir = o.out;
  write_text(dir / "pseudo_labels.csv", csv.str());
  write_manifest(dir, "pseudo-labels", args, "", 0,
                 json{{"checkpoint", fs::absolute(o.checkpoint).string()},
                      {"clip_id", ids[o.index]},
                      {"dataset_hash", hex64(dataset_hash(data))}});
  out << "wrote pseudo labels for " << ids[o.index] << "\n";
  return kOk;
}

int cmd_replay(const Options& o, std::ostream& out, std::ostream& err) {
  const fs::path mpath = o.manifest;
  json m;
  try {
    m = json::parse(read_text(mpath));
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  std::vector<std::string> args = m.at("args").get<std::vector<std::string>>();
  const auto recorded = m.at("outputs").get<std::map<std::string, std::string>>();
  const fs::path cwd = m.at("cwd").get<std::string>();
  const fs::path orig_out = mpath.parent_path();
  const fs::path target = o.out.empty() ? fs::path(orig_out.string() + ".replay")
                                        : fs::absolute(o.out);
  bool replaced = false;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--out" && i + 1 < args.size()) {
      args[i + 1] = target.string();
      replaced = true;
    } else if (args[i].rfind("--out=", 0) == 0) {
      args[i] = "--out=" + target.string();
      replaced = true;
    }
  }
  if (!replaced) {
    throw FormatError("manifest arguments carry no --out");
  }
  fs::remove_all(target);
  const fs::path here = fs::current_path();
  fs::current_path(cwd);
  std::ostringstream quiet;
  int rc = kOther;
  try {
    rc = run(args, quiet, err);
  } catch (...) {
    fs::current_path(here);
    throw;
  }
  fs::current_path(here);
  if (rc != kOk) {
    err << "replayed command failed with exit code " << rc << "\n";
    return rc;
  }
  const auto now = hash_outputs(target);
  bool same = now.size() == recorded.size();
  for (const auto& [name, h] : recorded) {
    const auto it = now.find(name);
    const bool ok = it != now.end() && it->second == h;
    same = same && ok;
    out << (ok ? "same    " : "DIFFERS ") << name << "\n";
  }
  for (const auto& [name, h] : now) {
    if (recorded.find(name) == recorded.end()) {
      out << "EXTRA   " << name << "\n";
    }
  }
  out << (same ? "replay reproduced all outputs\n" : "replay differs\n");
  return same ? kOk : kOther;
}

}  // namespace

// ---------------------------------------------------------------------------

std::map<std::string, std::string> hash_outputs(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir)) {
    return out;
  }
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json") continue;
    Fnv1a h;
    h.update(read_text(e.path()));
    out[rel] = hex64(h.digest());
  }
  return out;
}

EventTable reference_table(const std::vector<LabeledClip>& clips) {
  EventTable t;
  for (const auto& c : clips) {
    t[c.id] = c.events;
  }
  return t;
}

EventTable detect(const Model& model, const std::vector<PosteriorGrid>& outputs,
                  const std::vector<std::string>& ids, double fps,
                  const ClasswiseParams* params) {
  EventTable t;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    t[ids.at(i)] = params != nullptr ? classwise_postproc(outputs[i], *params, fps)
                                     : global_postproc(outputs[i], fps);
  }
  (void)model;
  return t;
}

SweepTable sweep_postproc(const Model& model, const ModelParams& params,
                          const std::vector<WeakClip>& weak,
                          const std::vector<LabeledClip>& eval, const PostprocSettings& s) {
  if (eval.empty()) {
    throw ConfigError("sweep needs a non-empty evaluation split");
  }
  SweepTable t;
  t.alphas = alpha_grid(s.alpha_min, s.alpha_max, s.alpha_steps);
  t.betas = beta_grid(s.beta_min, s.beta_max, s.beta_steps);
  t.macro_f = RealMatrix(t.alphas.size(), t.betas.size());
  const std::size_t C = model.config().n_classes;

  std::vector<WeakLabel> labels;
  const auto wout = weak_outputs(model, params, weak, labels);
  std::vector<const FeatureGrid*> xs;
  std::vector<std::string> ids;
  for (const auto& c : eval) {
    xs.push_back(&c.features);
    ids.push_back(c.id);
  }
  const auto eout = predict(model, params, xs);
  const double fps = output_fps(model.config(), eval.front().features.fps);
  const EventTable ref = reference_table(eval);
  t.global_f = score(match_corpus(detect(model, eout, ids, fps, nullptr), ref, C)).macro_f;

  const auto models = fit_class_models(wout, labels, C);
  for (std::size_t i = 0; i < t.alphas.size(); ++i) {
    for (std::size_t j = 0; j < t.betas.size(); ++j) {
      const ClasswiseParams p =
          classwise_params(models, wout, labels, t.alphas[i], t.betas[j], fps);
      t.macro_f(i, j) = score(match_corpus(detect(model, eout, ids, fps, &p), ref, C)).macro_f;
    }
  }
  return t;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semi-supervised sound event detection experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  Options o;

  auto seed_opt = [&](CLI::App* c) {
    c->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) {
      o.seed = v;
      o.has_seed = true;
    }, "random seed override");
  };
  auto data_opt = [&](CLI::App* c) {
    c->add_option("--data", o.data, "dataset directory (default: $CRST_DATA_ROOT)");
  };

  auto* gen = app.add_subcommand("gen-data", "synthesise a dataset");
  gen->add_option("--config", o.config, "experiment config file");
  seed_opt(gen);
  gen->add_option("--out", o.out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train one variant");
  tr->add_option("--config", o.config, "experiment config file");
  seed_opt(tr);
  tr->add_option("--variant", o.variant,
                 "supervised-strong, supervised-sw, mt, ict, srst, srst-aug or crst");
  tr->add_option_function<std::size_t>("--epochs", [&](const std::size_t& v) {
    o.epochs = v;
    o.has_epochs = true;
  }, "epoch count override");
  data_opt(tr);
  tr->add_option("--out", o.out, "run directory")->required();

  auto* pp = app.add_subcommand("postproc", "turn posteriors into intervals");
  pp->add_option("--config", o.config, "experiment config file (post-processing grids)");
  pp->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  data_opt(pp);
  pp->add_option("--mode", o.mode, "global, classwise or sweep");
  pp->add_option_function<double>("--alpha", [&](const double& v) {
    o.alpha = v;
    o.has_alpha = true;
  }, "false-negative rate for the classwise thresholds");
  pp->add_option_function<double>("--beta", [&](const double& v) {
    o.beta = v;
    o.has_beta = true;
  }, "filter length in percent of the mean detected duration");
  pp->add_option("--split", o.split, "split to process (default validation)");
  pp->add_option("--out", o.out, "output directory")->required();

  auto* ev = app.add_subcommand("eval", "score intervals against a reference");
  ev->add_option("--intervals", o.intervals, "detected intervals CSV")->required();
  ev->add_option("--reference", o.reference, "reference intervals CSV");
  data_opt(ev);
  ev->add_option("--split", o.split, "reference split when reading a dataset");
  ev->add_option_function<std::size_t>("--classes", [&](const std::size_t& v) {
    o.classes = v;
    o.has_classes = true;
  }, "class count");
  ev->add_option("--out", o.out, "output directory")->required();

  auto* cmp = app.add_subcommand("compare", "mean ± std table with Welch p-values");
  cmp->add_option("--run", o.runs, "variant=score.csv (repeatable)")->required();
  cmp->add_option("--reference-variant", o.ref_variant, "variant the p-values refer to");
  cmp->add_option("--out", o.out, "output directory")->required();

  auto* rp = app.add_subcommand("replay", "re-run a command from its manifest and compare");
  rp->add_option("--manifest", o.manifest, "manifest.json of the run")->required();
  rp->add_option("--out", o.out, "where to write the replayed outputs");

  auto* pl = app.add_subcommand("pseudo-labels", "dump a teacher's pseudo labels for one clip");
  pl->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  data_opt(pl);
  pl->add_option("--split", o.split, "split of the clip");
  pl->add_option("--index", o.index, "clip index within the split");
  pl->add_option("--model", o.model, "which model's teacher (0 or 1)");
  pl->add_option("--out", o.out, "output directory")->required();

  std::vector<const char*> argv{"crst"};
  for (const auto& a : args) {
    argv.push_back(a.c_str());
  }
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o, args, out);
    if (tr->parsed()) return cmd_train(o, args, out);
    if (pp->parsed()) return cmd_postproc(o, args, out);
    if (ev->parsed()) return cmd_eval(o, args, out);
    if (cmp->parsed()) return cmd_compare(o, args, out);
    if (rp->parsed()) return cmd_replay(o, out, err);
    if (pl->parsed()) return cmd_pseudo_labels(o, args, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const SizeError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}

}  // namespace crst::cli
