// SPDX-License-Identifier: Apache-2.0

#include "crst/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

namespace crst {

namespace {

using json = nlohmann::json;

constexpr double kNormEps = 1e-5;
constexpr double kLogitClamp = 30.0;

std::string block_name(const char* kind, std::size_t b, const char* what) {
  return std::string(kind) + std::to_string(b) + "." + what;
}

std::string gru_name(std::size_t layer, bool reverse, const char* what) {
  return "gru" + std::to_string(layer) + (reverse ? ".bwd." : ".fwd.") + what;
}

const double* ptr(const ModelParams& p, const LayoutEntry& e) { return p.data() + e.offset; }

double* gptr(std::span<double> g, const LayoutEntry& e) { return g.data() + e.offset; }

std::vector<double> dropout_mask(Rng& rng, std::size_t n, double rate) {
  if (rate <= 0.0) {
    return {};
  }
  std::vector<double> mask(n);
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask) {
    m = rng.uniform() < rate ? 0.0 : keep;
  }
  return mask;
}

// 3x3 "same" convolution, stride 1. in: cin x T x F, out: cout x T x F.
void conv3x3(const double* in, std::size_t cin, std::size_t cout, std::size_t T, std::size_t F,
             const double* w, const double* b, double* out) {
  const std::size_t plane = T * F;
  for (std::size_t co = 0; co < cout; ++co) {
    double* o = out + co * plane;
    std::fill(o, o + plane, b[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* src = in + ci * plane;
      for (std::size_t dt = 0; dt < 3; ++dt) {
        for (std::size_t df = 0; df < 3; ++df) {
          const double wv = w[((co * cin + ci) * 3 + dt) * 3 + df];
          const long ot = static_cast<long>(dt) - 1;
          const long of = static_cast<long>(df) - 1;
          const std::size_t t0 = ot < 0 ? 1 : 0;
          const std::size_t t1 = ot > 0 ? T - 1 : T;
          const std::size_t f0 = of < 0 ? 1 : 0;
          const std::size_t f1 = of > 0 ? F - 1 : F;
          for (std::size_t t = t0; t < t1; ++t) {
            const double* s = src + (t + ot) * F + of;
            double* d = o + t * F;
            for (std::size_t f = f0; f < f1; ++f) {
              d[f] += wv * s[f];
            }
          }
        }
      }
    }
  }
}

void conv3x3_backward(const double* in, std::size_t cin, std::size_t cout, std::size_t T,
                      std::size_t F, const double* w, const double* dout, double* dw, double* db,
                      double* din) {
  const std::size_t plane = T * F;
  for (std::size_t co = 0; co < cout; ++co) {
    const double* g = dout + co * plane;
    db[co] += std::accumulate(g, g + plane, 0.0);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* src = in + ci * plane;
      double* dsrc = din != nullptr ? din + ci * plane : nullptr;
      for (std::size_t dt = 0; dt < 3; ++dt) {
        for (std::size_t df = 0; df < 3; ++df) {
          const std::size_t widx = ((co * cin + ci) * 3 + dt) * 3 + df;
          const double wv = w[widx];
          const long ot = static_cast<long>(dt) - 1;
          const long of = static_cast<long>(df) - 1;
          const std::size_t t0 = ot < 0 ? 1 : 0;
          const std::size_t t1 = ot > 0 ? T - 1 : T;
          const std::size_t f0 = of < 0 ? 1 : 0;
          const std::size_t f1 = of > 0 ? F - 1 : F;
          double acc = 0.0;
          for (std::size_t t = t0; t < t1; ++t) {
            const double* s = src + (t + ot) * F + of;
            const double* gg = g + t * F;
            for (std::size_t f = f0; f < f1; ++f) {
              acc += gg[f] * s[f];
            }
            if (dsrc != nullptr) {
              double* ds = dsrc + (t + ot) * F + of;
              for (std::size_t f = f0; f < f1; ++f) {
                ds[f] += wv * gg[f];
              }
            }
          }
          dw[widx] += acc;
        }
      }
    }
  }
}

struct GruWeights {
  const double* wi;
  const double* wh;
  const double* bi;
  const double* bh;
};

void gru_dir_forward(const std::vector<double>& in, std::size_t T, std::size_t in_dim,
                     std::size_t H, const GruWeights& w, bool reverse, GruDirCache* cache,
                     std::vector<double>& out, std::size_t out_offset) {
  std::vector<double> h(H, 0.0);
  std::vector<double> gi(3 * H);
  std::vector<double> gh(3 * H);
  if (cache != nullptr) {
    cache->h_prev.assign(T * H, 0.0);
    cache->r.assign(T * H, 0.0);
    cache->z.assign(T * H, 0.0);
    cache->n.assign(T * H, 0.0);
    cache->hn.assign(T * H, 0.0);
  }
  for (std::size_t s = 0; s < T; ++s) {
    const std::size_t t = reverse ? T - 1 - s : s;
    const double* x = in.data() + t * in_dim;
    for (std::size_t g = 0; g < 3 * H; ++g) {
      const double* wr = w.wi + g * in_dim;
      double acc = w.bi[g];
      for (std::size_t k = 0; k < in_dim; ++k) {
        acc += wr[k] * x[k];
      }
      gi[g] = acc;
      const double* hr = w.wh + g * H;
      double acch = w.bh[g];
      for (std::size_t k = 0; k < H; ++k) {
        acch += hr[k] * h[k];
      }
      gh[g] = acch;
    }
    for (std::size_t j = 0; j < H; ++j) {
      const double r = sigmoid(gi[j] + gh[j]);
      const double z = sigmoid(gi[H + j] + gh[H + j]);
      const double hn = gh[2 * H + j];
      const double n = std::tanh(gi[2 * H + j] + r * hn);
      if (cache != nullptr) {
        cache->h_prev[t * H + j] = h[j];
        cache->r[t * H + j] = r;
        cache->z[t * H + j] = z;
        cache->n[t * H + j] = n;
        cache->hn[t * H + j] = hn;
      }
      h[j] = (1.0 - z) * n + z * h[j];
      out[t * 2 * H + out_offset + j] = h[j];
    }
  }
}

void gru_dir_backward(const std::vector<double>& in, std::size_t T, std::size_t in_dim,
                      std::size_t H, const GruWeights& w, bool reverse, const GruDirCache& c,
                      const std::vector<double>& dout, std::size_t out_offset, double* dwi,
                      double* dwh, double* dbi, double* dbh, std::vector<double>* din) {
  std::vector<double> carry(H, 0.0);
  std::vector<double> gi(3 * H);
  std::vector<double> gh(3 * H);
  std::vector<double> dprev(H);
  for (std::size_t s = 0; s < T; ++s) {
    const std::size_t t = reverse ? s : T - 1 - s;
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t k = t * H + j;
      const double dh = dout[t * 2 * H + out_offset + j] + carry[j];
      const double z = c.z[k];
      const double n = c.n[k];
      const double r = c.r[k];
      const double dn = dh * (1.0 - z);
      const double dz = dh * (c.h_prev[k] - n);
      dprev[j] = dh * z;
      const double dan = dn * (1.0 - n * n);
      const double dr = dan * c.hn[k];
      const double dhn = dan * r;
      const double daz = dz * z * (1.0 - z);
      const double dar = dr * r * (1.0 - r);
      gi[j] = dar;
      gi[H + j] = daz;
      gi[2 * H + j] = dan;
      gh[j] = dar;
      gh[H + j] = daz;
      gh[2 * H + j] = dhn;
    }
    const double* x = in.data() + t * in_dim;
    const double* hp = c.h_prev.data() + t * H;
    for (std::size_t g = 0; g < 3 * H; ++g) {
      const double a = gi[g];
      double* dwr = dwi + g * in_dim;
      const double* wr = w.wi + g * in_dim;
      for (std::size_t k = 0; k < in_dim; ++k) {
        dwr[k] += a * x[k];
      }
      if (din != nullptr) {
        double* dx = din->data() + t * in_dim;
        for (std::size_t k = 0; k < in_dim; ++k) {
          dx[k] += wr[k] * a;
        }
      }
      dbi[g] += a;
      const double b = gh[g];
      double* dhr = dwh + g * H;
      const double* hr = w.wh + g * H;
      for (std::size_t k = 0; k < H; ++k) {
        dhr[k] += b * hp[k];
        dprev[k] += hr[k] * b;
      }
      dbh[g] += b;
    }
    carry = dprev;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and layout
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (conv_blocks.empty()) {
    throw InvalidInput("model needs at least one convolution block");
  }
  if (n_mel_in == 0 || recurrent_hidden == 0 || recurrent_layers == 0 || n_classes == 0) {
    throw InvalidInput("model dimensions must be positive");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw InvalidInput("dropout rate must lie in [0,1)");
  }
  std::size_t freq = n_mel_in;
  for (const auto& b : conv_blocks) {
    if (b.out_channels == 0 || b.pool_time == 0 || b.pool_freq == 0) {
      throw InvalidInput("conv block fields must be positive");
    }
    freq /= b.pool_freq;
  }
  if (freq != 1) {
    throw InvalidInput("frequency pooling must reduce the mel axis to exactly 1");
  }
}

std::size_t ModelConfig::time_pool() const {
  std::size_t p = 1;
  for (const auto& b : conv_blocks) {
    p *= b.pool_time;
  }
  return p;
}

std::string ModelConfig::to_json() const {
  json blocks = json::array();
  for (const auto& b : conv_blocks) {
    blocks.push_back({b.out_channels, b.pool_time, b.pool_freq});
  }
  return json{{"n_mel_in", n_mel_in},
              {"conv_blocks", blocks},
              {"recurrent_hidden", recurrent_hidden},
              {"recurrent_layers", recurrent_layers},
              {"n_classes", n_classes},
              {"dropout_rate", dropout_rate},
              {"norm_momentum", norm_momentum}}
      .dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ModelConfig cfg;
    cfg.n_mel_in = j.at("n_mel_in").get<std::size_t>();
    cfg.conv_blocks.clear();
    for (const auto& b : j.at("conv_blocks")) {
      cfg.conv_blocks.push_back(
          {b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>(), b.at(2).get<std::size_t>()});
    }
    cfg.recurrent_hidden = j.at("recurrent_hidden").get<std::size_t>();
    cfg.recurrent_layers = j.at("recurrent_layers").get<std::size_t>();
    cfg.n_classes = j.at("n_classes").get<std::size_t>();
    cfg.dropout_rate = j.at("dropout_rate").get<double>();
    cfg.norm_momentum = j.at("norm_momentum").get<double>();
    return cfg;
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

std::size_t LayoutEntry::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void Layout::add(const std::string& name, std::vector<std::size_t> shape, bool trainable) {
  LayoutEntry e{name, total_, std::move(shape), trainable};
  total_ += e.size();
  index_[name] = entries_.size();
  entries_.push_back(std::move(e));
}

const LayoutEntry& Layout::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) {
    throw InvalidInput("unknown layout entry '" + name + "'");
  }
  return entries_[it->second];
}

std::string Layout::to_json() const {
  json arr = json::array();
  for (const auto& e : entries_) {
    arr.push_back({{"name", e.name}, {"offset", e.offset}, {"shape", e.shape},
                   {"trainable", e.trainable}});
  }
  return arr.dump();
}

std::size_t expected_param_count(const ModelConfig& cfg) {
  std::size_t total = 0;
  std::size_t cin = 1;
  for (const auto& b : cfg.conv_blocks) {
    const std::size_t c = b.out_channels;
    total += cin * c * 9 + c;  // convolution
    total += 4 * c;            // scale, shift, running mean, running var
    total += c * c + c;        // GLU linear
    cin = c;
  }
  const std::size_t h = cfg.recurrent_hidden;
  for (std::size_t l = 0; l < cfg.recurrent_layers; ++l) {
    const std::size_t in = l == 0 ? cin : 2 * h;
    total += 2 * (3 * h * in + 3 * h * h + 6 * h);
  }
  total += cfg.n_classes * 2 * h + cfg.n_classes;
  return total;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::size_t cin = 1;
  for (std::size_t b = 0; b < cfg_.conv_blocks.size(); ++b) {
    const std::size_t c = cfg_.conv_blocks[b].out_channels;
    layout_.add(block_name("conv", b, "weight"), {c, cin, 3, 3});
    layout_.add(block_name("conv", b, "bias"), {c});
    layout_.add(block_name("norm", b, "scale"), {c});
    layout_.add(block_name("norm", b, "shift"), {c});
    layout_.add(block_name("norm", b, "running_mean"), {c}, false);
    layout_.add(block_name("norm", b, "running_var"), {c}, false);
    layout_.add(block_name("glu", b, "weight"), {c, c});
    layout_.add(block_name("glu", b, "bias"), {c});
    cin = c;
  }
  const std::size_t h = cfg_.recurrent_hidden;
  for (std::size_t l = 0; l < cfg_.recurrent_layers; ++l) {
    const std::size_t in = l == 0 ? cin : 2 * h;
    for (bool rev : {false, true}) {
      layout_.add(gru_name(l, rev, "w_input"), {3 * h, in});
      layout_.add(gru_name(l, rev, "w_hidden"), {3 * h, h});
      layout_.add(gru_name(l, rev, "b_input"), {3 * h});
      layout_.add(gru_name(l, rev, "b_hidden"), {3 * h});
    }
  }
  layout_.add("head.weight", {cfg_.n_classes, 2 * h});
  layout_.add("head.bias", {cfg_.n_classes});
}

ModelParams Model::init_params(std::uint64_t seed) const {
  ModelParams p(layout_.total(), 0.0);
  Rng rng(seed);
  for (const auto& e : layout_.entries()) {
    double* dst = p.data() + e.offset;
    const std::string& n = e.name;
    auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".scale") || ends_with(".running_var")) {
      std::fill(dst, dst + e.size(), 1.0);
      continue;
    }
    double limit = 0.0;
    if (n.rfind("conv", 0) == 0 && ends_with(".weight")) {
      const double fan_in = static_cast<double>(e.shape[1] * 9);
      const double fan_out = static_cast<double>(e.shape[0] * 9);
      limit = std::sqrt(6.0 / (fan_in + fan_out));
    } else if (ends_with(".weight")) {
      limit = std::sqrt(6.0 / static_cast<double>(e.shape[0] + e.shape[1]));
    } else if (ends_with(".w_input") || ends_with(".w_hidden")) {
      limit = 1.0 / std::sqrt(static_cast<double>(cfg_.recurrent_hidden));
    }
    if (limit > 0.0) {
      for (std::size_t i = 0; i < e.size(); ++i) {
        dst[i] = rng.uniform(-limit, limit);
      }
    }
  }
  return p;
}

std::size_t Model::output_frames(std::size_t in_frames) const {
  std::size_t t = in_frames;
  for (const auto& b : cfg_.conv_blocks) {
    t /= b.pool_time;
  }
  return t;
}

PosteriorGrid Model::forward(const ModelParams& params, const FeatureGrid& x) const {
  return run(params, x, Mode::Eval, 0, nullptr);
}

PosteriorGrid Model::forward_train(const ModelParams& params, const FeatureGrid& x,
                                   std::uint64_t dropout_seed, ForwardCache& cache) const {
  return run(params, x, Mode::Train, dropout_seed, &cache);
}

PosteriorGrid Model::run(const ModelParams& params, const FeatureGrid& x, Mode mode,
                         std::uint64_t dropout_seed, ForwardCache* cache) const {
  if (params.size() != layout_.total()) {
    throw InvalidInput("parameter vector does not match the model layout");
  }
  if (x.channels() != cfg_.n_mel_in) {
    throw InvalidInput("feature channel count does not match the model config");
  }
  if (output_frames(x.frames()) == 0) {
    throw InvalidInput("input too short for the time pooling");
  }
  const bool train = mode == Mode::Train;
  Rng rng(dropout_seed);
  const double rate = train ? cfg_.dropout_rate : 0.0;
  if (cache != nullptr) {
    *cache = ForwardCache{};
    cache->mode = mode;
    cache->in_frames = x.frames();
  }

  std::size_t ch = 1;
  std::size_t T = x.frames();
  std::size_t F = x.channels();
  std::vector<double> act = x.data.values();  // 1 x T x F

  for (std::size_t b = 0; b < cfg_.conv_blocks.size(); ++b) {
    const auto& bc = cfg_.conv_blocks[b];
    const std::size_t co = bc.out_channels;
    const std::size_t plane = T * F;
    std::vector<double> conv(co * plane);
    conv3x3(act.data(), ch, co, T, F, ptr(params, layout_.at(block_name("conv", b, "weight"))),
            ptr(params, layout_.at(block_name("conv", b, "bias"))), conv.data());

    const double* scale = ptr(params, layout_.at(block_name("norm", b, "scale")));
    const double* shift = ptr(params, layout_.at(block_name("norm", b, "shift")));
    const double* rmean = ptr(params, layout_.at(block_name("norm", b, "running_mean")));
    const double* rvar = ptr(params, layout_.at(block_name("norm", b, "running_var")));
    std::vector<double> normed(co * plane);
    for (std::size_t c = 0; c < co; ++c) {
      const double inv = 1.0 / std::sqrt(rvar[c] + kNormEps);
      for (std::size_t i = 0; i < plane; ++i) {
        normed[c * plane + i] = scale[c] * (conv[c * plane + i] - rmean[c]) * inv + shift[c];
      }
    }

    const double* gw = ptr(params, layout_.at(block_name("glu", b, "weight")));
    const double* gb = ptr(params, layout_.at(block_name("glu", b, "bias")));
    std::vector<double> lin(co * plane);
    std::vector<double> gate(co * plane);
    for (std::size_t c = 0; c < co; ++c) {
      double* l = lin.data() + c * plane;
      std::fill(l, l + plane, gb[c]);
      for (std::size_t j = 0; j < co; ++j) {
        const double wv = gw[c * co + j];
        const double* nj = normed.data() + j * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          l[i] += wv * nj[i];
        }
      }
    }
    std::vector<double> gated(co * plane);
    for (std::size_t i = 0; i < co * plane; ++i) {
      gate[i] = sigmoid(normed[i]);
      gated[i] = lin[i] * gate[i];
    }
    std::vector<double> mask = dropout_mask(rng, train ? co * plane : 0, rate);
    if (!mask.empty()) {
      for (std::size_t i = 0; i < gated.size(); ++i) {
        gated[i] *= mask[i];
      }
    }

    const std::size_t Tp = T / bc.pool_time;
    const std::size_t Fp = F / bc.pool_freq;
    const double inv_area = 1.0 / static_cast<double>(bc.pool_time * bc.pool_freq);
    std::vector<double> pooled(co * Tp * Fp, 0.0);
    for (std::size_t c = 0; c < co; ++c) {
      for (std::size_t t = 0; t < Tp * bc.pool_time; ++t) {
        for (std::size_t f = 0; f < Fp * bc.pool_freq; ++f) {
          pooled[(c * Tp + t / bc.pool_time) * Fp + f / bc.pool_freq] +=
              gated[c * plane + t * F + f] * inv_area;
        }
      }
    }

    if (cache != nullptr) {
      BlockCache bcache;
      bcache.in_ch = ch;
      bcache.out_ch = co;
      bcache.time = T;
      bcache.freq = F;
      bcache.input = std::move(act);
      bcache.conv = std::move(conv);
      bcache.normed = std::move(normed);
      bcache.lin = std::move(lin);
      bcache.gate = std::move(gate);
      bcache.mask = std::move(mask);
      cache->blocks.push_back(std::move(bcache));
    }
    act = std::move(pooled);
    ch = co;
    T = Tp;
    F = Fp;
  }

  // channels x T x 1  ->  T x channels
  std::vector<double> seq(T * ch);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < ch; ++c) {
      seq[t * ch + c] = act[c * T + t];
    }
  }

  const std::size_t H = cfg_.recurrent_hidden;
  std::size_t in_dim = ch;
  for (std::size_t l = 0; l < cfg_.recurrent_layers; ++l) {
    std::vector<double> out(T * 2 * H);
    GruLayerCache lc;
    lc.in_dim = in_dim;
    for (bool rev : {false, true}) {
      const GruWeights w{ptr(params, layout_.at(gru_name(l, rev, "w_input"))),
                         ptr(params, layout_.at(gru_name(l, rev, "w_hidden"))),
                         ptr(params, layout_.at(gru_name(l, rev, "b_input"))),
                         ptr(params, layout_.at(gru_name(l, rev, "b_hidden")))};
      gru_dir_forward(seq, T, in_dim, H, w, rev, cache != nullptr ? (rev ? &lc.bwd : &lc.fwd)
                                                                  : nullptr,
                      out, rev ? H : 0);
    }
    std::vector<double> mask = dropout_mask(rng, train ? out.size() : 0, rate);
    std::vector<double> next = out;
    if (!mask.empty()) {
      for (std::size_t i = 0; i < next.size(); ++i) {
        next[i] *= mask[i];
      }
    }
    if (cache != nullptr) {
      lc.input = std::move(seq);
      lc.output = std::move(out);
      lc.mask = std::move(mask);
      cache->gru.push_back(std::move(lc));
    }
    seq = std::move(next);
    in_dim = 2 * H;
  }

  const std::size_t K = cfg_.n_classes;
  const double* hw = ptr(params, layout_.at("head.weight"));
  const double* hb = ptr(params, layout_.at("head.bias"));
  PosteriorGrid y(T, K);
  std::vector<double> logits(T * K);
  for (std::size_t t = 0; t < T; ++t) {
    const double* h = seq.data() + t * 2 * H;
    for (std::size_t k = 0; k < K; ++k) {
      double z = hb[k];
      const double* wr = hw + k * 2 * H;
      for (std::size_t j = 0; j < 2 * H; ++j) {
        z += wr[j] * h[j];
      }
      logits[t * K + k] = z;
      y(t, k) = sigmoid(std::clamp(z, -kLogitClamp, kLogitClamp));
    }
  }
  if (cache != nullptr) {
    cache->out_frames = T;
    cache->head_in = std::move(seq);
    cache->logits = std::move(logits);
    cache->output = y;
  }
  return y;
}

void Model::backward(const ModelParams& params, const ForwardCache& cache,
                     const RealMatrix& grad_out, std::span<double> grad) const {
  if (cache.mode != Mode::Train || cache.blocks.size() != cfg_.conv_blocks.size()) {
    throw InvalidInput("backward needs the cache of a train-mode forward");
  }
  if (grad_out.rows() != cache.out_frames || grad_out.cols() != cfg_.n_classes) {
    throw InvalidInput("output gradient shape does not match the cached forward");
  }
  if (grad.size() != layout_.total() || params.size() != layout_.total()) {
    throw InvalidInput("gradient buffer does not match the model layout");
  }
  const std::size_t T = cache.out_frames;
  const std::size_t K = cfg_.n_classes;
  const std::size_t H = cfg_.recurrent_hidden;

  // Head.
  const auto& hw_e = layout_.at("head.weight");
  const auto& hb_e = layout_.at("head.bias");
  const double* hw = ptr(params, hw_e);
  double* dhw = gptr(grad, hw_e);
  double* dhb = gptr(grad, hb_e);
  std::vector<double> dseq(T * 2 * H, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double* h = cache.head_in.data() + t * 2 * H;
    double* dh = dseq.data() + t * 2 * H;
    for (std::size_t k = 0; k < K; ++k) {
      const double z = cache.logits[t * K + k];
      if (!(z > -kLogitClamp && z < kLogitClamp)) {
        continue;
      }
      const double y = cache.output(t, k);
      const double dz = grad_out(t, k) * y * (1.0 - y);
      if (dz == 0.0) {
        continue;
      }
      dhb[k] += dz;
      double* dwr = dhw + k * 2 * H;
      const double* wr = hw + k * 2 * H;
      for (std::size_t j = 0; j < 2 * H; ++j) {
        dwr[j] += dz * h[j];
        dh[j] += dz * wr[j];
      }
    }
  }

  // Recurrent layers, top down.
  for (std::size_t li = cfg_.recurrent_layers; li-- > 0;) {
    const GruLayerCache& lc = cache.gru[li];
    if (!lc.mask.empty()) {
      for (std::size_t i = 0; i < dseq.size(); ++i) {
        dseq[i] *= lc.mask[i];
      }
    }
    std::vector<double> din(T * lc.in_dim, 0.0);
    for (bool rev : {false, true}) {
      const auto& wi_e = layout_.at(gru_name(li, rev, "w_input"));
      const auto& wh_e = layout_.at(gru_name(li, rev, "w_hidden"));
      const auto& bi_e = layout_.at(gru_name(li, rev, "b_input"));
      const auto& bh_e = layout_.at(gru_name(li, rev, "b_hidden"));
      const GruWeights w{ptr(params, wi_e), ptr(params, wh_e), ptr(params, bi_e),
                         ptr(params, bh_e)};
      gru_dir_backward(lc.input, T, lc.in_dim, H, w, rev, rev ? lc.bwd : lc.fwd, dseq,
                       rev ? H : 0, gptr(grad, wi_e), gptr(grad, wh_e), gptr(grad, bi_e),
                       gptr(grad, bh_e), &din);
    }
    dseq = std::move(din);
  }

  // T x ch  ->  ch x T x 1
  std::size_t ch = cfg_.conv_blocks.back().out_channels;
  std::vector<double> dact(ch * T);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < ch; ++c) {
      dact[c * T + t] = dseq[t * ch + c];
    }
  }

  for (std::size_t b = cfg_.conv_blocks.size(); b-- > 0;) {
    const auto& bc = cfg_.conv_blocks[b];
    const BlockCache& c = cache.blocks[b];
    const std::size_t co = c.out_ch;
    const std::size_t Tin = c.time;
    const std::size_t Fin = c.freq;
    const std::size_t plane = Tin * Fin;
    const std::size_t Tp = Tin / bc.pool_time;
    const std::size_t Fp = Fin / bc.pool_freq;
    const double inv_area = 1.0 / static_cast<double>(bc.pool_time * bc.pool_freq);

    // pooling + dropout
    std::vector<double> dg(co * plane, 0.0);
    for (std::size_t cc = 0; cc < co; ++cc) {
      for (std::size_t t = 0; t < Tp * bc.pool_time; ++t) {
        for (std::size_t f = 0; f < Fp * bc.pool_freq; ++f) {
          dg[cc * plane + t * Fin + f] =
              dact[(cc * Tp + t / bc.pool_time) * Fp + f / bc.pool_freq] * inv_area;
        }
      }
    }
    if (!c.mask.empty()) {
      for (std::size_t i = 0; i < dg.size(); ++i) {
        dg[i] *= c.mask[i];
      }
    }

    // GLU
    const auto& gw_e = layout_.at(block_name("glu", b, "weight"));
    const auto& gb_e = layout_.at(block_name("glu", b, "bias"));
    const double* gw = ptr(params, gw_e);
    double* dgw = gptr(grad, gw_e);
    double* dgb = gptr(grad, gb_e);
    std::vector<double> dlin(co * plane);
    std::vector<double> dnormed(co * plane);
    for (std::size_t i = 0; i < co * plane; ++i) {
      const double s = c.gate[i];
      dlin[i] = dg[i] * s;
      dnormed[i] = dg[i] * c.lin[i] * s * (1.0 - s);
    }
    for (std::size_t cc = 0; cc < co; ++cc) {
      const double* dl = dlin.data() + cc * plane;
      dgb[cc] += std::accumulate(dl, dl + plane, 0.0);
      for (std::size_t j = 0; j < co; ++j) {
        const double* nj = c.normed.data() + j * plane;
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          acc += dl[i] * nj[i];
        }
        dgw[cc * co + j] += acc;
        const double wv = gw[cc * co + j];
        double* dn = dnormed.data() + j * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          dn[i] += wv * dl[i];
        }
      }
    }

    // standardisation + affine
    const auto& sc_e = layout_.at(block_name("norm", b, "scale"));
    const auto& sh_e = layout_.at(block_name("norm", b, "shift"));
    const double* scale = ptr(params, sc_e);
    const double* rmean = ptr(params, layout_.at(block_name("norm", b, "running_mean")));
    const double* rvar = ptr(params, layout_.at(block_name("norm", b, "running_var")));
    double* dscale = gptr(grad, sc_e);
    double* dshift = gptr(grad, sh_e);
    std::vector<double> dconv(co * plane);
    for (std::size_t cc = 0; cc < co; ++cc) {
      const double inv = 1.0 / std::sqrt(rvar[cc] + kNormEps);
      double ds = 0.0;
      double dsh = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double g = dnormed[cc * plane + i];
        ds += g * (c.conv[cc * plane + i] - rmean[cc]) * inv;
        dsh += g;
        dconv[cc * plane + i] = g * scale[cc] * inv;
      }
      dscale[cc] += ds;
      dshift[cc] += dsh;
    }

    // convolution
    const auto& cw_e = layout_.at(block_name("conv", b, "weight"));
    const auto& cb_e = layout_.at(block_name("conv", b, "bias"));
    std::vector<double> din = b > 0 ? std::vector<double>(c.in_ch * plane, 0.0)
                                    : std::vector<double>{};
    conv3x3_backward(c.input.data(), c.in_ch, co, Tin, Fin, ptr(params, cw_e), dconv.data(),
                     gptr(grad, cw_e), gptr(grad, cb_e), b > 0 ? din.data() : nullptr);
    dact = std::move(din);
    ch = c.in_ch;
  }
}

std::vector<double> Model::backward(const ModelParams& params, const ForwardCache& cache,
                                    const RealMatrix& grad_out) const {
  std::vector<double> g(layout_.total(), 0.0);
  backward(params, cache, grad_out, g);
  return g;
}

void Model::update_running_stats(ModelParams& params,
                                 std::span<const ForwardCache* const> caches) const {
  if (caches.empty()) {
    return;
  }
  const double mom = cfg_.norm_momentum;
  for (std::size_t b = 0; b < cfg_.conv_blocks.size(); ++b) {
    const std::size_t co = cfg_.conv_blocks[b].out_channels;
    double* rmean = params.data() + layout_.at(block_name("norm", b, "running_mean")).offset;
    double* rvar = params.data() + layout_.at(block_name("norm", b, "running_var")).offset;
    for (std::size_t c = 0; c < co; ++c) {
      double sum = 0.0;
      std::size_t count = 0;
      for (const ForwardCache* fc : caches) {
        const BlockCache& bc = fc->blocks.at(b);
        const std::size_t plane = bc.time * bc.freq;
        const double* v = bc.conv.data() + c * plane;
        sum = std::accumulate(v, v + plane, sum);
        count += plane;
      }
      const double mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (const ForwardCache* fc : caches) {
        const BlockCache& bc = fc->blocks.at(b);
        const std::size_t plane = bc.time * bc.freq;
        const double* v = bc.conv.data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sq += (v[i] - mean) * (v[i] - mean);
        }
      }
      const double var = sq / static_cast<double>(count);
      rmean[c] = (1.0 - mom) * rmean[c] + mom * mean;
      rvar[c] = (1.0 - mom) * rvar[c] + mom * var;
    }
  }
}

// ---------------------------------------------------------------------------
// Free functions
// ---------------------------------------------------------------------------

std::vector<double> glu(std::span<const double> values, std::size_t channels,
                        std::span<const double> weight, std::span<const double> bias) {
  if (channels == 0 || values.size() % channels != 0 || weight.size() != channels * channels ||
      bias.size() != channels) {
    throw InvalidInput("glu: shape mismatch");
  }
  const std::size_t positions = values.size() / channels;
  std::vector<double> out(values.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < positions; ++p) {
      double lin = bias[c];
      for (std::size_t j = 0; j < channels; ++j) {
        lin += weight[c * channels + j] * values[j * positions + p];
      }
      out[c * positions + p] = lin * sigmoid(values[c * positions + p]);
    }
  }
  return out;
}

std::vector<double> clip_pool(const PosteriorGrid& p) {
  std::vector<double> mean(p.cols(), 0.0);
  if (p.rows() == 0) {
    return mean;
  }
  for (std::size_t t = 0; t < p.rows(); ++t) {
    for (std::size_t c = 0; c < p.cols(); ++c) {
      mean[c] += p(t, c);
    }
  }
  for (double& m : mean) {
    m /= static_cast<double>(p.rows());
  }
  return mean;
}

RealMatrix clip_pool_backward(std::span<const double> grad, std::size_t frames) {
  RealMatrix g(frames, grad.size());
  const double inv = frames > 0 ? 1.0 / static_cast<double>(frames) : 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t c = 0; c < grad.size(); ++c) {
      g(t, c) = grad[c] * inv;
    }
  }
  return g;
}

ModelParams ema_update(const ModelParams& teacher, const ModelParams& student, double decay) {
  if (teacher.size() != student.size()) {
    throw InvalidInput("ema_update: layout mismatch");
  }
  if (!(decay >= 0.0 && decay < 1.0)) {
    throw InvalidInput("ema_update: decay must lie in [0,1)");
  }
  ModelParams out(teacher.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = decay * teacher[i] + (1.0 - decay) * student[i];
  }
  return out;
}

OptState make_opt_state(std::size_t n, double lr_cap) {
  return OptState{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0, lr_cap};
}

void adam_step(ModelParams& params, std::span<const double> grads, OptState& opt, double lr,
               const std::vector<std::uint8_t>* trainable) {
  if (grads.size() != params.size() || opt.m.size() != params.size() ||
      opt.v.size() != params.size()) {
    throw InvalidInput("adam_step: shape mismatch");
  }
  if (trainable != nullptr && trainable->size() != params.size()) {
    throw InvalidInput("adam_step: trainable mask shape mismatch");
  }
  for (double g : grads) {
    if (!std::isfinite(g)) {
      throw NumericError("training diverged: non-finite gradient");
    }
  }
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;
  const double rate = std::min(lr, opt.lr_cap);
  ++opt.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (trainable != nullptr && (*trainable)[i] == 0) {
      continue;
    }
    opt.m[i] = beta1 * opt.m[i] + (1.0 - beta1) * grads[i];
    opt.v[i] = beta2 * opt.v[i] + (1.0 - beta2) * grads[i] * grads[i];
    const double mhat = opt.m[i] / c1;
    const double vhat = opt.v[i] / c2;
    params[i] -= rate * mhat / (std::sqrt(vhat) + eps);
  }
}

std::vector<std::uint8_t> trainable_mask(const Layout& layout) {
  std::vector<std::uint8_t> mask(layout.total(), 1);
  for (const auto& e : layout.entries()) {
    if (!e.trainable) {
      std::fill_n(mask.begin() + static_cast<long>(e.offset), e.size(), 0);
    }
  }
  return mask;
}

}  // namespace crst
