/*
 * Copyright 2026 The LesionFuse Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Challenge metrics: Dice with the empty-mask convention, subject-level
// accuracy, stratified DSC, paired t-test and the lesion-size correlation.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lesionfuse/core/grid.hpp"

namespace lf::eval {

// Both empty scores 1, exactly one empty scores 0.
inline double dice(const Mask& pred, const Mask& gt) {
  require_same_shape(pred, gt, "dice");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

struct CaseResult {
  std::string id;
  double dice = 0.0;
  bool gt_has_lesion = false;
  bool predicted_has_lesion = false;
  double gt_volume_mm3 = 0.0;
  double predicted_volume_mm3 = 0.0;
};

// A prediction counts as "lesion present" when its volume exceeds
// `min_volume_mm3`; the default 0 means any voxel.
inline CaseResult evaluate_case(const std::string& id, const Mask& pred, const Mask& gt,
                                double min_volume_mm3 = 0.0) {
  CaseResult r;
  r.id = id;
  r.dice = dice(pred, gt);
  r.gt_volume_mm3 = mask_volume_mm3(gt);
  r.predicted_volume_mm3 = mask_volume_mm3(pred);
  r.gt_has_lesion = r.gt_volume_mm3 > 0.0;
  r.predicted_has_lesion = r.predicted_volume_mm3 > min_volume_mm3;
  return r;
}

// Results sorted by id so every aggregate is independent of input order.
inline std::vector<CaseResult> canonical_order(std::vector<CaseResult> rs) {
  std::stable_sort(rs.begin(), rs.end(), [](const CaseResult& a, const CaseResult& b) { return a.id < b.id; });
  return rs;
}

inline double subject_accuracy(const std::vector<CaseResult>& results) {
  if (results.empty()) raise<ArgumentError>("subject_accuracy: no cases");
  std::size_t ok = 0;
  for (const auto& r : results) ok += r.predicted_has_lesion == r.gt_has_lesion;
  return static_cast<double>(ok) / static_cast<double>(results.size());
}

struct Summary {
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;  // sample (n-1); 0 for a single value
};

inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  s.n = xs.size();
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

struct ChallengeMetrics {
  double accuracy = 0.0;
  std::optional<Summary> dsc_lesion;     // absent when no case has a lesion
  std::optional<Summary> dsc_no_lesion;  // absent when every case has one
  Summary overall;
  std::size_t n = 0;
};

inline ChallengeMetrics stratified_dsc(const std::vector<CaseResult>& input) {
  if (input.empty()) raise<ArgumentError>("stratified_dsc: no cases");
  const auto results = canonical_order(input);
  std::vector<double> les, none, all;
  for (const auto& r : results) {
    (r.gt_has_lesion ? les : none).push_back(r.dice);
    all.push_back(r.dice);
  }
  ChallengeMetrics m;
  m.n = results.size();
  m.accuracy = subject_accuracy(results);
  if (!les.empty()) m.dsc_lesion = summarize(les);
  if (!none.empty()) m.dsc_no_lesion = summarize(none);
  m.overall = summarize(all);
  return m;
}

namespace detail {

// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr double kTiny = 1e-300;
  constexpr double kEps = 1e-15;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  raise<FittingError>("incomplete beta continued fraction did not converge");
}

}  // namespace detail

inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) raise<ArgumentError>("incomplete_beta: a, b must be > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double front = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                                a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

// P(|T| >= |t|) for Student's t with df degrees of freedom.
inline double student_t_two_tailed(double t, double df) {
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

struct TTest {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
};

inline TTest paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) raise<ArgumentError>("paired_ttest: length mismatch");
  if (a.size() < 2) raise<ArgumentError>("paired_ttest: need at least 2 pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const Summary s = summarize(d);
  if (!(s.sd > 0.0)) raise<DegenerateError>("paired_ttest: differences have zero variance");
  TTest r;
  r.df = static_cast<int>(d.size()) - 1;
  r.t = s.mean / (s.sd / std::sqrt(static_cast<double>(d.size())));
  r.p = student_t_two_tailed(r.t, r.df);
  return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) raise<ArgumentError>("pearson: length mismatch");
  if (x.size() < 2) raise<ArgumentError>("pearson: need at least 2 points");
  const double mx = summarize(x).mean, my = summarize(y).mean;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) raise<DegenerateError>("pearson: constant input");
  return sxy / std::sqrt(sxx * syy);
}

inline double pearson_log_size(const std::vector<double>& volumes_mm3, const std::vector<double>& dices) {
  std::vector<double> lx;
  for (double v : volumes_mm3) {
    if (!(v > 0.0)) raise<ArgumentError>("pearson_log_size: volumes must be > 0");
    lx.push_back(std::log10(v));
  }
  return pearson(lx, dices);
}

}  // namespace lf::eval
