// SPDX-License-Identifier: Apache-2.0
//
// Event-based scoring with onset/offset collars, confusion counts,
// concurrency statistics, Welch's t-test and the CSV formats used by the
// command-line tool.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crst/common.hpp"

namespace crst {

inline constexpr double kCollar = 0.2;

/// Events per clip id.
using EventTable = std::map<std::string, std::vector<EventInterval>>;

struct ClassCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

struct MatchResult {
  std::vector<ClassCounts> counts;                        // per class
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (detected, reference)
  std::vector<std::uint8_t> ref_missed;
  std::vector<std::uint8_t> det_matched;
};

/// |onset difference| < collar and |offset difference| < collar.
bool within_collar(const EventInterval& det, const EventInterval& ref, double collar = kCollar);

/// One clip. References are visited in onset order; each takes the
/// earliest-onset eligible detection that is still free.
MatchResult match_events(const std::vector<EventInterval>& detected,
                         const std::vector<EventInterval>& reference, std::size_t n_classes,
                         double collar = kCollar);

/// Sums per-class counts over every clip present in either table.
MatchResult match_corpus(const EventTable& detected, const EventTable& reference,
                         std::size_t n_classes, double collar = kCollar);

struct ClassScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
  ClassCounts counts;
};

struct ScoreReport {
  std::vector<ClassScore> classes;
  double macro_f = 0.0;
};

ScoreReport score(const MatchResult& match);

/// n_classes x (n_classes + 1): time-matched detections counted by
/// (reference class, detected class); the last column holds missed references.
Matrix<std::size_t> confusion_matrix(const std::vector<EventInterval>& detected,
                                     const std::vector<EventInterval>& reference,
                                     std::size_t n_classes, double collar = kCollar);

Matrix<std::size_t> confusion_corpus(const EventTable& detected, const EventTable& reference,
                                     std::size_t n_classes, double collar = kCollar);

/// Rows: classes then a total row. Columns: percent with k = 1, k = 2, k > 2
/// simultaneously active classes over the reference interval.
struct ConcurrencyStats {
  RealMatrix percent;
  Matrix<std::size_t> counts;
};

/// Largest number of distinct classes active at once within ref's span.
std::size_t max_concurrency(const EventInterval& ref, const std::vector<EventInterval>& clip);

ConcurrencyStats concurrency_stats(const EventTable& reference, std::size_t n_classes);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
  bool degenerate = false;
};

WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b);

/// Regularised incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);

/// Two-sided tail probability of Student's t with df degrees of freedom.
double student_t_two_sided(double t, double df);

// CSV ---------------------------------------------------------------------------

void write_intervals_csv(const EventTable& table, const std::filesystem::path& path);
EventTable read_intervals_csv(const std::filesystem::path& path);

void write_score_csv(const ScoreReport& report, const std::filesystem::path& path);
ScoreReport read_score_csv(const std::filesystem::path& path);

void write_confusion_csv(const Matrix<std::size_t>& m, const std::filesystem::path& path);
void write_concurrency_csv(const ConcurrencyStats& s, const std::filesystem::path& path);

/// Variant name -> per-repetition macro F values.
struct RunComparison {
  std::vector<std::string> variants;
  std::vector<std::vector<double>> values;
};

/// "mean ± std" per variant plus Welch p-values against `reference`.
void write_comparison_csv(const RunComparison& runs, const std::string& reference,
                          const std::filesystem::path& path);

double mean_of(const std::vector<double>& v);
/// Sample standard deviation (n - 1).
double stddev_of(const std::vector<double>& v);

}  // namespace crst
