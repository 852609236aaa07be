// SPDX-License-Identifier: Apache-2.0

#include "crst/seqdata.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "json.hpp"

namespace crst {

static_assert(std::endian::native == std::endian::little,
              "feature files are written in host byte order, which must be little-endian");

namespace {

using json = nlohmann::json;

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

struct FftwPlanDeleter {
  void operator()(fftw_plan_s* p) const { fftw_destroy_plan(p); }
};

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

// Per-class spectro-temporal prototype.
struct Prototype {
  std::vector<double> envelope;  // over channels, peak 1
  double mod_depth = 0.0;
  double mod_period = 8.0;  // frames
};

Prototype make_prototype(std::uint64_t proto_seed, std::size_t cls, std::size_t channels,
                         double fps) {
  Rng rng(derive_seed(proto_seed, 0x9f07ULL, cls));
  Prototype p;
  p.envelope.assign(channels, 0.0);
  const auto f = static_cast<double>(channels);
  for (int bump = 0; bump < 2; ++bump) {
    const double centre = rng.uniform(0.1 * f, 0.9 * f);
    const double width = rng.uniform(0.06 * f, 0.16 * f);
    const double amp = bump == 0 ? 1.0 : rng.uniform(0.4, 0.8);
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const double d = (static_cast<double>(ch) - centre) / width;
      p.envelope[ch] += amp * std::exp(-0.5 * d * d);
    }
  }
  const double peak = *std::max_element(p.envelope.begin(), p.envelope.end());
  for (double& v : p.envelope) {
    v /= peak;
  }
  p.mod_depth = (cls % 2 == 1) ? rng.uniform(0.4, 0.7) : rng.uniform(0.0, 0.15);
  p.mod_period = rng.uniform(0.1, 0.3) * fps;
  return p;
}

// Linear interpolation of the envelope displaced by `shift` channels.
double shifted(const std::vector<double>& env, double pos) {
  if (pos < 0.0 || pos > static_cast<double>(env.size() - 1)) {
    return 0.0;
  }
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, env.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return (1.0 - w) * env[lo] + w * env[hi];
}

const char* split_name(int split) {
  switch (split) {
    case 0:
      return "strong";
    case 1:
      return "weak";
    case 2:
      return "unlabeled";
    default:
      return "validation";
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw InvalidInput("cannot write " + path.string());
  }
  out << text;
  if (!out) {
    throw InvalidInput("write failed: " + path.string());
  }
}

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json events_to_json(const std::vector<EventInterval>& events) {
  json arr = json::array();
  for (const auto& e : events) {
    arr.push_back({e.class_id, e.onset, e.offset});
  }
  return arr;
}

std::vector<EventInterval> events_from_json(const json& arr) {
  std::vector<EventInterval> events;
  for (const auto& e : arr) {
    events.push_back({e.at(0).get<int>(), e.at(1).get<double>(), e.at(2).get<double>()});
  }
  return events;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration checks
// ---------------------------------------------------------------------------

void PreprocConfig::validate() const {
  if (!(sample_rate > 0.0) || fft_len < 2 || hop == 0 || hop >= fft_len || n_mel < 1 ||
      !(floor_eps > 0.0) || !(clip_len > 0.0) || !(mel_fmax > mel_fmin) || mel_fmin < 0.0) {
    throw InvalidInput("invalid preprocessing config");
  }
}

std::size_t SceneConfig::frames() const {
  return static_cast<std::size_t>(std::llround(clip_len * fps));
}

void SceneConfig::validate() const {
  if (n_classes < 2 || max_polyphony < 1 || !(min_duration > 0.0) ||
      !(max_duration >= min_duration) || !(clip_len > 0.0) || !(fps > 0.0) || n_channels < 1 ||
      event_rate < 0.0 || frames() < 1) {
    throw InvalidInput("invalid scene config");
  }
}

void Dataset::validate() const {
  if (unlabeled.size() < weak.size()) {
    throw InvalidInput("dataset needs at least as many unlabeled clips as weak clips");
  }
}

// ---------------------------------------------------------------------------
// Log-Mel preprocessing
// ---------------------------------------------------------------------------

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

RealMatrix mel_filterbank(const PreprocConfig& cfg) {
  cfg.validate();
  const std::size_t bins = cfg.fft_len / 2 + 1;
  RealMatrix fb(cfg.n_mel, bins, 0.0);
  const double mlo = hz_to_mel(cfg.mel_fmin);
  const double mhi = hz_to_mel(cfg.mel_fmax);
  std::vector<double> edges(cfg.n_mel + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(i) /
                                   static_cast<double>(cfg.n_mel + 1));
  }
  for (std::size_t n = 0; n < cfg.n_mel; ++n) {
    const double lo = edges[n];
    const double centre = edges[n + 1];
    const double hi = edges[n + 2];
    const double area_norm = 2.0 / (hi - lo);
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / static_cast<double>(cfg.fft_len);
      const double rise = (f - lo) / (centre - lo);
      const double fall = (hi - f) / (hi - centre);
      fb(n, k) = std::max(0.0, std::min(rise, fall)) * area_norm;
    }
  }
  return fb;
}

FeatureGrid log_mel(std::span<const double> waveform, const PreprocConfig& cfg) {
  cfg.validate();
  if (waveform.empty()) {
    throw InvalidInput("log_mel: empty waveform");
  }
  if (!all_finite(waveform)) {
    throw InvalidInput("log_mel: non-finite waveform sample");
  }
  const auto n_samples = static_cast<std::size_t>(std::llround(cfg.clip_len * cfg.sample_rate));
  std::vector<double> signal(n_samples, 0.0);
  std::copy_n(waveform.begin(), std::min(n_samples, waveform.size()), signal.begin());

  const std::size_t n = cfg.fft_len;
  const std::size_t bins = n / 2 + 1;
  const std::size_t frames = 1 + n_samples / cfg.hop;
  const RealMatrix fb = mel_filterbank(cfg);

  std::vector<double> window(n);
  for (std::size_t i = 0; i < n; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n));
  }

  std::unique_ptr<double, FftwFree> in(static_cast<double*>(fftw_malloc(sizeof(double) * n)));
  std::unique_ptr<fftw_complex, FftwFree> out(
      static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * bins)));
  std::unique_ptr<fftw_plan_s, FftwPlanDeleter> plan(
      fftw_plan_dft_r2c_1d(static_cast<int>(n), in.get(), out.get(), FFTW_ESTIMATE));

  FeatureGrid x{RealMatrix(frames, cfg.n_mel), cfg.sample_rate / static_cast<double>(cfg.hop)};
  const double floor_sq = cfg.floor_eps * cfg.floor_eps;
  std::vector<double> mag(bins);
  const auto half = static_cast<long>(n / 2);
  for (std::size_t m = 0; m < frames; ++m) {
    const long start = static_cast<long>(m * cfg.hop) - half;
    for (std::size_t i = 0; i < n; ++i) {
      const long s = start + static_cast<long>(i);
      in.get()[i] = (s >= 0 && s < static_cast<long>(n_samples))
                        ? signal[static_cast<std::size_t>(s)] * window[i]
                        : 0.0;
    }
    fftw_execute(plan.get());
    for (std::size_t k = 0; k < bins; ++k) {
      mag[k] = std::hypot(out.get()[k][0], out.get()[k][1]);
    }
    for (std::size_t band = 0; band < cfg.n_mel; ++band) {
      double p = 0.0;
      const auto w = fb.row(band);
      for (std::size_t k = 0; k < bins; ++k) {
        p += w[k] * mag[k];
      }
      x.data(m, band) = std::log(std::max(p * p, floor_sq));
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

Scene synth_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  const std::size_t frames = cfg.frames();
  const std::size_t channels = cfg.n_channels;
  const DomainConfig& dom = cfg.domain;
  Rng rng(seed);

  Scene scene;
  scene.labels.data = BinaryMatrix(frames, cfg.n_classes, 0);
  std::vector<std::size_t> active(frames, 0);

  struct Placed {
    std::size_t cls, start, len;
    double gain;
  };
  std::vector<Placed> placed;

  const std::size_t n_events = cfg.event_rate > 0.0 ? rng.poisson(cfg.event_rate) : 0;
  for (std::size_t e = 0; e < n_events; ++e) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const std::size_t cls = rng.index(cfg.n_classes);
      const double dur = rng.uniform(cfg.min_duration, cfg.max_duration);
      const std::size_t len = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(dur * cfg.fps)), 1, frames);
      const std::size_t start = rng.index(frames - len + 1);
      // Same-class events must be separated by at least one inactive frame.
      const std::size_t guard_lo = start > 0 ? start - 1 : 0;
      const std::size_t guard_hi = std::min(frames, start + len + 1);
      bool ok = true;
      for (std::size_t t = guard_lo; t < guard_hi && ok; ++t) {
        if (scene.labels.data(t, cls) != 0) {
          ok = false;
        }
      }
      for (std::size_t t = start; t < start + len && ok; ++t) {
        if (active[t] + 1 > cfg.max_polyphony) {
          ok = false;
        }
      }
      if (!ok) {
        continue;
      }
      for (std::size_t t = start; t < start + len; ++t) {
        scene.labels.data(t, cls) = 1;
        ++active[t];
      }
      placed.push_back({cls, start, len, rng.uniform(dom.gain_min, dom.gain_max)});
      break;
    }
  }

  RealMatrix feat(frames, channels, 0.0);
  const double clip_level = dom.background_level * rng.uniform(0.8, 1.2);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const double pos =
          channels > 1 ? static_cast<double>(ch) / static_cast<double>(channels - 1) - 0.5 : 0.0;
      feat(t, ch) = clip_level * (1.0 + dom.background_tilt * pos) + dom.cell_noise * rng.normal();
    }
  }

  for (const auto& p : placed) {
    const Prototype proto = make_prototype(cfg.prototype_seed, p.cls, channels, cfg.fps);
    for (std::size_t i = 0; i < p.len; ++i) {
      const double rise = static_cast<double>(i + 1) / 2.0;
      const double fall = static_cast<double>(p.len - i) / 3.0;
      const double ramp = std::min({1.0, rise, fall});
      const double mod =
          1.0 - proto.mod_depth *
                    (0.5 + 0.5 * std::sin(2.0 * M_PI * static_cast<double>(i) / proto.mod_period));
      const double amp = p.gain * ramp * mod;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        feat(p.start + i, ch) +=
            amp * shifted(proto.envelope, static_cast<double>(ch) - dom.envelope_shift);
      }
    }
    scene.events.push_back({static_cast<int>(p.cls), static_cast<double>(p.start) / cfg.fps,
                            static_cast<double>(p.start + p.len) / cfg.fps});
  }
  for (double& v : feat.values()) {
    v = round_to_float(v);
  }
  std::sort(scene.events.begin(), scene.events.end(), [](const auto& a, const auto& b) {
    return a.onset != b.onset ? a.onset < b.onset : a.class_id < b.class_id;
  });
  scene.features = {std::move(feat), cfg.fps};
  return scene;
}

StrongLabelGrid rasterize(const std::vector<EventInterval>& events, std::size_t frames,
                          std::size_t n_classes, double fps) {
  StrongLabelGrid y{BinaryMatrix(frames, n_classes, 0)};
  for (const auto& e : events) {
    if (e.class_id < 0 || static_cast<std::size_t>(e.class_id) >= n_classes) {
      throw InvalidInput("rasterize: class id out of range");
    }
    const auto on = static_cast<long>(std::llround(e.onset * fps));
    const auto off = static_cast<long>(std::llround(e.offset * fps));
    for (long t = std::max(0L, on); t < std::min(off, static_cast<long>(frames)); ++t) {
      y.data(static_cast<std::size_t>(t), static_cast<std::size_t>(e.class_id)) = 1;
    }
  }
  return y;
}

WeakLabel weaken(const StrongLabelGrid& y) {
  WeakLabel w{std::vector<std::uint8_t>(y.data.cols(), 0)};
  for (std::size_t t = 0; t < y.data.rows(); ++t) {
    for (std::size_t c = 0; c < y.data.cols(); ++c) {
      w.data[c] = static_cast<std::uint8_t>(w.data[c] | y.data(t, c));
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Perturbations
// ---------------------------------------------------------------------------

FeatureGrid add_noise_snr(const FeatureGrid& x, double snr_db, std::uint64_t seed) {
  if (!all_finite(x.data.values())) {
    throw InvalidInput("add_noise_snr: non-finite features");
  }
  double power = 0.0;
  for (double v : x.data.values()) {
    power += v * v;
  }
  if (x.data.empty() || power == 0.0) {
    throw InvalidInput("add_noise_snr: zero signal power, SNR undefined");
  }
  power /= static_cast<double>(x.data.size());
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  Rng rng(seed);
  FeatureGrid out = x;
  for (double& v : out.data.values()) {
    v += sigma * rng.normal();
  }
  return out;
}

FeatureGrid frame_shift(const FeatureGrid& x, long delay) {
  const auto frames = static_cast<long>(x.frames());
  if (std::labs(delay) >= frames) {
    throw InvalidInput("frame_shift: |delay| must be below the frame count");
  }
  FeatureGrid out{RealMatrix(x.frames(), x.channels()), x.fps};
  for (long t = 0; t < frames; ++t) {
    const long src = ((t - delay) % frames + frames) % frames;
    std::copy_n(x.data.row(static_cast<std::size_t>(src)).begin(), x.channels(),
                out.data.row(static_cast<std::size_t>(t)).begin());
  }
  return out;
}

long sample_shift_delay(std::uint64_t seed, double sigma, std::size_t frames,
                        std::size_t multiple_of) {
  Rng rng(seed);
  const double raw = rng.normal(0.0, sigma);
  const auto m = static_cast<double>(std::max<std::size_t>(1, multiple_of));
  long d = static_cast<long>(std::llround(raw / m)) * static_cast<long>(m);
  const long limit = static_cast<long>(frames) - 1;
  // keep |d| < frames on the same multiple grid
  while (std::labs(d) > limit) {
    d -= (d > 0 ? 1 : -1) * static_cast<long>(m);
  }
  return d;
}

FeatureGrid mixup(const FeatureGrid& x1, const FeatureGrid& x2, double lambda) {
  if (!x1.data.same_shape(x2.data)) {
    throw InvalidInput("mixup: shape mismatch");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw InvalidInput("mixup: lambda outside [0,1]");
  }
  FeatureGrid out = x1;
  auto& v = out.data.values();
  const auto& b = x2.data.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = lambda * v[i] + (1.0 - lambda) * b[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset assembly and storage
// ---------------------------------------------------------------------------

Dataset make_dataset(const DataConfig& cfg) {
  cfg.scene.validate();
  Dataset ds;
  ds.n_classes = cfg.scene.n_classes;
  SceneConfig synthetic = cfg.scene;
  synthetic.domain = cfg.synthetic_domain;
  SceneConfig real = cfg.scene;
  real.domain = cfg.real_domain;

  auto clip_id = [](int split, std::size_t i) {
    std::ostringstream ss;
    ss << split_name(split) << '_';
    ss.width(5);
    ss.fill('0');
    ss << i;
    return ss.str();
  };

  for (std::size_t i = 0; i < cfg.n_strong; ++i) {
    Scene s = synth_scene(derive_seed(cfg.seed, 0, i), synthetic);
    ds.strong.push_back({clip_id(0, i), std::move(s.features), std::move(s.labels),
                         std::move(s.events)});
  }
  for (std::size_t i = 0; i < cfg.n_weak; ++i) {
    Scene s = synth_scene(derive_seed(cfg.seed, 1, i), real);
    ds.weak.push_back({clip_id(1, i), std::move(s.features), weaken(s.labels)});
  }
  for (std::size_t i = 0; i < cfg.n_unlabeled; ++i) {
    Scene s = synth_scene(derive_seed(cfg.seed, 2, i), real);
    ds.unlabeled.push_back({clip_id(2, i), std::move(s.features)});
  }
  for (std::size_t i = 0; i < cfg.n_validation; ++i) {
    Scene s = synth_scene(derive_seed(cfg.seed, 3, i), real);
    ds.validation.push_back({clip_id(3, i), std::move(s.features), std::move(s.labels),
                             std::move(s.events)});
  }
  return ds;
}

void write_feature_file(const FeatureGrid& x, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw InvalidInput("cannot write " + path.string());
  }
  const auto frames = static_cast<std::uint32_t>(x.frames());
  const auto channels = static_cast<std::uint32_t>(x.channels());
  const auto fps = static_cast<float>(x.fps);
  out.write(reinterpret_cast<const char*>(&frames), 4);
  out.write(reinterpret_cast<const char*>(&channels), 4);
  out.write(reinterpret_cast<const char*>(&fps), 4);
  std::vector<float> buf(x.data.size());
  std::transform(x.data.values().begin(), x.data.values().end(), buf.begin(),
                 [](double v) { return static_cast<float>(v); });
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) {
    throw InvalidInput("write failed: " + path.string());
  }
}

FeatureGrid read_feature_file(const std::filesystem::path& path) {
  const std::string bytes = read_bytes(path);
  if (bytes.size() < 12) {
    throw FormatError(path.string() + ": truncated header");
  }
  std::uint32_t frames = 0;
  std::uint32_t channels = 0;
  float fps = 0.0F;
  std::memcpy(&frames, bytes.data(), 4);
  std::memcpy(&channels, bytes.data() + 4, 4);
  std::memcpy(&fps, bytes.data() + 8, 4);
  const std::size_t count = static_cast<std::size_t>(frames) * channels;
  if (bytes.size() != 12 + count * sizeof(float) || frames == 0) {
    throw FormatError(path.string() + ": size does not match header");
  }
  FeatureGrid x{RealMatrix(frames, channels), static_cast<double>(fps)};
  std::vector<float> buf(count);
  std::memcpy(buf.data(), bytes.data() + 12, count * sizeof(float));
  std::transform(buf.begin(), buf.end(), x.data.values().begin(),
                 [](float v) { return static_cast<double>(v); });
  return x;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  for (int s = 0; s < 4; ++s) {
    fs::create_directories(dir / split_name(s), ec);
    if (ec) {
      throw InvalidInput("cannot create " + (dir / split_name(s)).string());
    }
  }
  std::ostringstream manifest;
  auto emit = [&](int split, const std::string& id, const FeatureGrid& x, json sidecar) {
    const fs::path base = dir / split_name(split);
    write_feature_file(x, base / (id + ".bin"));
    sidecar["clip_id"] = id;
    sidecar["split"] = split_name(split);
    sidecar["frames"] = x.frames();
    sidecar["channels"] = x.channels();
    sidecar["n_classes"] = ds.n_classes;
    write_text(base / (id + ".json"), sidecar.dump() + "\n");
    manifest << json{{"clip_id", id}, {"split", split_name(split)}}.dump() << "\n";
  };
  for (const auto& c : ds.strong) {
    emit(0, c.id, c.features, {{"events", events_to_json(c.events)}});
  }
  for (const auto& c : ds.weak) {
    emit(1, c.id, c.features, {{"weak", c.label.data}});
  }
  for (const auto& c : ds.unlabeled) {
    emit(2, c.id, c.features, json::object());
  }
  for (const auto& c : ds.validation) {
    emit(3, c.id, c.features, {{"events", events_to_json(c.events)}});
  }
  write_text(dir / "manifest.jsonl", manifest.str());
  const json meta = {{"n_classes", ds.n_classes},
                     {"counts",
                      {{"strong", ds.strong.size()},
                       {"weak", ds.weak.size()},
                       {"unlabeled", ds.unlabeled.size()},
                       {"validation", ds.validation.size()}}}};
  write_text(dir / "dataset.json", meta.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  json meta;
  try {
    meta = json::parse(read_bytes(dir / "dataset.json"));
    ds.n_classes = meta.at("n_classes").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError((dir / "dataset.json").string() + ": " + e.what());
  }
  std::istringstream lines(read_bytes(dir / "manifest.jsonl"));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    try {
      const json rec = json::parse(line);
      const auto id = rec.at("clip_id").get<std::string>();
      const auto split = rec.at("split").get<std::string>();
      const auto base = dir / split;
      FeatureGrid x = read_feature_file(base / (id + ".bin"));
      const json side = json::parse(read_bytes(base / (id + ".json")));
      if (split == "strong" || split == "validation") {
        auto events = events_from_json(side.at("events"));
        StrongLabelGrid y = rasterize(events, x.frames(), ds.n_classes, x.fps);
        LabeledClip clip{id, std::move(x), std::move(y), std::move(events)};
        (split == "strong" ? ds.strong : ds.validation).push_back(std::move(clip));
      } else if (split == "weak") {
        WeakLabel w{side.at("weak").get<std::vector<std::uint8_t>>()};
        if (w.data.size() != ds.n_classes) {
          throw FormatError("weak label length mismatch");
        }
        ds.weak.push_back({id, std::move(x), std::move(w)});
      } else if (split == "unlabeled") {
        ds.unlabeled.push_back({id, std::move(x)});
      } else {
        throw FormatError("unknown split '" + split + "'");
      }
    } catch (const json::exception& e) {
      throw FormatError("manifest.jsonl:" + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("manifest.jsonl:" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ds;
}

std::uint64_t dataset_hash(const std::filesystem::path& dir) {
  Fnv1a h;
  const std::string manifest = read_bytes(dir / "manifest.jsonl");
  h.update(read_bytes(dir / "dataset.json"));
  h.update(manifest);
  std::istringstream lines(manifest);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) {
      continue;
    }
    const json rec = json::parse(line);
    const auto base = dir / rec.at("split").get<std::string>();
    const auto id = rec.at("clip_id").get<std::string>();
    h.update(read_bytes(base / (id + ".bin")));
    h.update(read_bytes(base / (id + ".json")));
  }
  return h.digest();
}

}  // namespace crst
