// SPDX-License-Identifier: Apache-2.0

#include "crst/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace crst {

namespace {

std::vector<std::size_t> onset_order(const std::vector<EventInterval>& ev) {
  std::vector<std::size_t> idx(ev.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return ev[a].onset < ev[b].onset; });
  return idx;
}

void check_class(const EventInterval& e, std::size_t n_classes) {
  if (e.class_id < 0 || static_cast<std::size_t>(e.class_id) >= n_classes) {
    throw InvalidInput("event class id out of range");
  }
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') {
    out.emplace_back();
  }
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw Error("cannot write " + path.string());
  }
  return f;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw FormatError("cannot read " + path.string());
  }
  return f;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') {
    s.pop_back();
  }
  return s;
}

}  // namespace

bool within_collar(const EventInterval& det, const EventInterval& ref, double collar) {
  return std::abs(det.onset - ref.onset) < collar && std::abs(det.offset - ref.offset) < collar;
}

MatchResult match_events(const std::vector<EventInterval>& detected,
                         const std::vector<EventInterval>& reference, std::size_t n_classes,
                         double collar) {
  MatchResult m;
  m.counts.resize(n_classes);
  m.ref_missed.assign(reference.size(), 1);
  m.det_matched.assign(detected.size(), 0);
  for (const auto& e : detected) check_class(e, n_classes);
  for (const auto& e : reference) check_class(e, n_classes);
  const auto det_order = onset_order(detected);
  for (std::size_t r : onset_order(reference)) {
    for (std::size_t d : det_order) {
      if (m.det_matched[d] == 0 && detected[d].class_id == reference[r].class_id &&
          within_collar(detected[d], reference[r], collar)) {
        m.det_matched[d] = 1;
        m.ref_missed[r] = 0;
        m.pairs.emplace_back(d, r);
        break;
      }
    }
  }
  for (std::size_t r = 0; r < reference.size(); ++r) {
    auto& c = m.counts[static_cast<std::size_t>(reference[r].class_id)];
    (m.ref_missed[r] != 0 ? c.fn : c.tp) += 1;
  }
  for (std::size_t d = 0; d < detected.size(); ++d) {
    if (m.det_matched[d] == 0) {
      m.counts[static_cast<std::size_t>(detected[d].class_id)].fp += 1;
    }
  }
  return m;
}

MatchResult match_corpus(const EventTable& detected, const EventTable& reference,
                         std::size_t n_classes, double collar) {
  MatchResult total;
  total.counts.resize(n_classes);
  std::set<std::string> ids;
  for (const auto& [k, v] : detected) ids.insert(k);
  for (const auto& [k, v] : reference) ids.insert(k);
  static const std::vector<EventInterval> kEmpty;
  for (const auto& id : ids) {
    const auto di = detected.find(id);
    const auto ri = reference.find(id);
    const auto m = match_events(di != detected.end() ? di->second : kEmpty,
                                ri != reference.end() ? ri->second : kEmpty, n_classes, collar);
    for (std::size_t c = 0; c < n_classes; ++c) {
      total.counts[c].tp += m.counts[c].tp;
      total.counts[c].fp += m.counts[c].fp;
      total.counts[c].fn += m.counts[c].fn;
    }
  }
  return total;
}

ScoreReport score(const MatchResult& match) {
  ScoreReport r;
  for (const auto& c : match.counts) {
    ClassScore s;
    s.counts = c;
    const double tp = static_cast<double>(c.tp);
    s.precision = c.tp + c.fp > 0 ? tp / static_cast<double>(c.tp + c.fp) : 0.0;
    s.recall = c.tp + c.fn > 0 ? tp / static_cast<double>(c.tp + c.fn) : 0.0;
    s.f = s.precision + s.recall > 0.0
              ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
              : 0.0;
    r.classes.push_back(s);
  }
  if (!r.classes.empty()) {
    double sum = 0.0;
    for (const auto& s : r.classes) sum += s.f;
    r.macro_f = sum / static_cast<double>(r.classes.size());
  }
  return r;
}

Matrix<std::size_t> confusion_matrix(const std::vector<EventInterval>& detected,
                                     const std::vector<EventInterval>& reference,
                                     std::size_t n_classes, double collar) {
  Matrix<std::size_t> m(n_classes, n_classes + 1, 0);
  for (const auto& e : detected) check_class(e, n_classes);
  std::vector<std::uint8_t> used(detected.size(), 0);
  const auto det_order = onset_order(detected);
  for (std::size_t r : onset_order(reference)) {
    const auto& ref = reference[r];
    check_class(ref, n_classes);
    long pick = -1;
    for (std::size_t d : det_order) {
      if (used[d] != 0 || !within_collar(detected[d], ref, collar)) {
        continue;
      }
      if (detected[d].class_id == ref.class_id) {
        pick = static_cast<long>(d);
        break;
      }
      if (pick < 0) {
        pick = static_cast<long>(d);
      }
    }
    const auto rc = static_cast<std::size_t>(ref.class_id);
    if (pick < 0) {
      m(rc, n_classes) += 1;
    } else {
      used[static_cast<std::size_t>(pick)] = 1;
      m(rc, static_cast<std::size_t>(detected[static_cast<std::size_t>(pick)].class_id)) += 1;
    }
  }
  return m;
}

Matrix<std::size_t> confusion_corpus(const EventTable& detected, const EventTable& reference,
                                     std::size_t n_classes, double collar) {
  Matrix<std::size_t> total(n_classes, n_classes + 1, 0);
  static const std::vector<EventInterval> kEmpty;
  for (const auto& [id, refs] : reference) {
    const auto di = detected.find(id);
    const auto m =
        confusion_matrix(di != detected.end() ? di->second : kEmpty, refs, n_classes, collar);
    for (std::size_t i = 0; i < m.size(); ++i) {
      total.values()[i] += m.values()[i];
    }
  }
  return total;
}

std::size_t max_concurrency(const EventInterval& ref, const std::vector<EventInterval>& clip) {
  // The active set only changes at onsets and offsets, so checking the
  // reference onset and every onset inside its span is enough.
  std::vector<double> probes{ref.onset};
  for (const auto& e : clip) {
    if (e.onset > ref.onset && e.onset < ref.offset) {
      probes.push_back(e.onset);
    }
  }
  std::size_t best = 0;
  for (double t : probes) {
    std::set<int> active;
    for (const auto& e : clip) {
      if (e.onset <= t && t < e.offset) {
        active.insert(e.class_id);
      }
    }
    best = std::max(best, active.size());
  }
  return std::max<std::size_t>(best, 1);
}

ConcurrencyStats concurrency_stats(const EventTable& reference, std::size_t n_classes) {
  ConcurrencyStats s;
  s.counts = Matrix<std::size_t>(n_classes + 1, 3, 0);
  s.percent = RealMatrix(n_classes + 1, 3, 0.0);
  for (const auto& [id, clip] : reference) {
    for (const auto& e : clip) {
      check_class(e, n_classes);
      const std::size_t k = max_concurrency(e, clip);
      const std::size_t col = k == 1 ? 0 : (k == 2 ? 1 : 2);
      s.counts(static_cast<std::size_t>(e.class_id), col) += 1;
      s.counts(n_classes, col) += 1;
    }
  }
  for (std::size_t r = 0; r <= n_classes; ++r) {
    const std::size_t tot = s.counts(r, 0) + s.counts(r, 1) + s.counts(r, 2);
    for (std::size_t c = 0; c < 3; ++c) {
      s.percent(r, c) = tot > 0 ? 100.0 * static_cast<double>(s.counts(r, c)) / tot : 0.0;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Welch's t-test
// ---------------------------------------------------------------------------

namespace {

// Continued fraction for the incomplete beta, modified Lentz.
double beta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-15;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) {
      break;
    }
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) {
    throw InvalidInput("incomplete_beta: a and b must be positive");
  }
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                     b * std::log1p(-x);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return bt * beta_cf(a, b, x) / a;
  }
  return 1.0 - bt * beta_cf(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) {
    throw InvalidInput("degrees of freedom must be positive");
  }
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) {
    throw InvalidInput("welch_t: each sample needs at least two values");
  }
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  const double va = std::pow(stddev_of(a), 2) / static_cast<double>(a.size());
  const double vb = std::pow(stddev_of(b), 2) / static_cast<double>(b.size());
  WelchResult r;
  if (va + vb == 0.0) {
    r.degenerate = true;
    if (ma == mb) {
      r.p = 1.0;
    } else {
      r.t = ma > mb ? std::numeric_limits<double>::infinity()
                    : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = (ma - mb) / std::sqrt(va + vb);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  r.df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

void write_intervals_csv(const EventTable& table, const std::filesystem::path& path) {
  auto f = open_out(path);
  f << "clip_id,class,onset,offset\n";
  for (const auto& [id, events] : table) {
    for (const auto& e : events) {
      f << id << ',' << e.class_id << ',' << format_double(e.onset) << ','
        << format_double(e.offset) << '\n';
    }
  }
}

EventTable read_intervals_csv(const std::filesystem::path& path) {
  auto f = open_in(path);
  std::string line;
  std::size_t lineno = 0;
  EventTable table;
  if (!std::getline(f, line) || strip_cr(line) != "clip_id,class,onset,offset") {
    throw FormatError(path.string() + ":1: expected header clip_id,class,onset,offset");
  }
  lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    const auto where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (cells.size() != 4 || cells[0].empty()) {
      throw FormatError(where + "expected 4 fields");
    }
    double cls = 0.0;
    EventInterval e;
    if (!parse_double(cells[1], cls) || cls < 0 || cls != std::floor(cls) ||
        !parse_double(cells[2], e.onset) || !parse_double(cells[3], e.offset)) {
      throw FormatError(where + "malformed number");
    }
    if (!(e.offset > e.onset) || e.onset < 0.0) {
      throw FormatError(where + "interval must satisfy 0 <= onset < offset");
    }
    e.class_id = static_cast<int>(cls);
    table[cells[0]].push_back(e);
  }
  return table;
}

void write_score_csv(const ScoreReport& report, const std::filesystem::path& path) {
  auto f = open_out(path);
  f << "class,precision,recall,f,tp,fp,fn\n";
  for (std::size_t c = 0; c < report.classes.size(); ++c) {
    const auto& s = report.classes[c];
    f << c << ',' << format_double(s.precision) << ',' << format_double(s.recall) << ','
      << format_double(s.f) << ',' << s.counts.tp << ',' << s.counts.fp << ',' << s.counts.fn
      << '\n';
  }
  f << "macro,,," << format_double(report.macro_f) << ",,,\n";
}

ScoreReport read_score_csv(const std::filesystem::path& path) {
  auto f = open_in(path);
  std::string line;
  if (!std::getline(f, line) || strip_cr(line) != "class,precision,recall,f,tp,fp,fn") {
    throw FormatError(path.string() + ":1: unexpected score header");
  }
  ScoreReport r;
  std::size_t lineno = 1;
  bool macro_seen = false;
  while (std::getline(f, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    const auto where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (cells.size() != 7) {
      throw FormatError(where + "expected 7 fields");
    }
    if (cells[0] == "macro") {
      if (!parse_double(cells[3], r.macro_f)) throw FormatError(where + "malformed number");
      macro_seen = true;
      continue;
    }
    ClassScore s;
    double tp = 0, fp = 0, fn = 0;
    if (!parse_double(cells[1], s.precision) || !parse_double(cells[2], s.recall) ||
        !parse_double(cells[3], s.f) || !parse_double(cells[4], tp) ||
        !parse_double(cells[5], fp) || !parse_double(cells[6], fn)) {
      throw FormatError(where + "malformed number");
    }
    s.counts = {static_cast<std::size_t>(tp), static_cast<std::size_t>(fp),
                static_cast<std::size_t>(fn)};
    r.classes.push_back(s);
  }
  if (!macro_seen) {
    throw FormatError(path.string() + ": missing macro row");
  }
  return r;
}

void write_confusion_csv(const Matrix<std::size_t>& m, const std::filesystem::path& path) {
  auto f = open_out(path);
  f << "reference";
  for (std::size_t c = 0; c + 1 < m.cols(); ++c) f << ",det_" << c;
  f << ",missed\n";
  for (std::size_t r = 0; r < m.rows(); ++r) {
    f << r;
    for (std::size_t c = 0; c < m.cols(); ++c) f << ',' << m(r, c);
    f << '\n';
  }
}

void write_concurrency_csv(const ConcurrencyStats& s, const std::filesystem::path& path) {
  auto f = open_out(path);
  f << "class,k1_percent,k2_percent,k3plus_percent,k1,k2,k3plus\n";
  for (std::size_t r = 0; r < s.percent.rows(); ++r) {
    f << (r + 1 == s.percent.rows() ? std::string("total") : std::to_string(r));
    for (std::size_t c = 0; c < 3; ++c) f << ',' << format_double(s.percent(r, c));
    for (std::size_t c = 0; c < 3; ++c) f << ',' << s.counts(r, c);
    f << '\n';
  }
}

void write_comparison_csv(const RunComparison& runs, const std::string& reference,
                          const std::filesystem::path& path) {
  const auto it = std::find(runs.variants.begin(), runs.variants.end(), reference);
  const std::vector<double>* ref =
      it != runs.variants.end() ? &runs.values[static_cast<std::size_t>(it - runs.variants.begin())]
                                : nullptr;
  auto f = open_out(path);
  f << "variant,n,mean,std,summary,p_vs_" << reference << '\n';
  for (std::size_t i = 0; i < runs.variants.size(); ++i) {
    const auto& v = runs.values[i];
    const double m = 100.0 * mean_of(v);
    const double s = 100.0 * stddev_of(v);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f ± %.2f", m, s);
    f << runs.variants[i] << ',' << v.size() << ',' << format_double(m) << ','
      << format_double(s) << ',' << buf << ',';
    if (ref != nullptr && runs.variants[i] != reference && v.size() >= 2 && ref->size() >= 2) {
      f << format_double(welch_t(v, *ref).p);
    }
    f << '\n';
  }
}

}  // namespace crst
