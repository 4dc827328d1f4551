/*
 * Copyright 2026 The SSOD Authors.
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

// OOD evaluation metrics. Scores follow the convention "higher = more ID".

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ssod/error.hpp"
#include "ssod/rng.hpp"

namespace ssod {

struct ScoreSet {
  std::vector<double> id_scores;
  std::vector<double> ood_scores;
};

/// FPR on OOD scores at the largest threshold tau that keeps at least
/// `tpr_target` of the ID scores at or above tau.
inline double fpr_at_tpr(const ScoreSet& s, double tpr_target = 0.95) {
  if (s.id_scores.empty()) throw ConfigError("fpr_at_tpr: id_scores is empty");
  if (s.ood_scores.empty()) throw ConfigError("fpr_at_tpr: ood_scores is empty");
  std::vector<double> id = s.id_scores;
  std::sort(id.begin(), id.end(), std::greater<>());
  const double n_id = static_cast<double>(id.size());
  double tau = id.back();
  for (std::size_t i = 0; i < id.size();) {
    std::size_t j = i;
    while (j < id.size() && id[j] == id[i]) ++j;  // j = #{id >= id[i]}
    if (static_cast<double>(j) / n_id >= tpr_target) {
      tau = id[i];
      break;
    }
    i = j;
  }
  std::size_t fp = 0;
  for (double v : s.ood_scores) fp += v >= tau ? 1 : 0;
  return static_cast<double>(fp) / static_cast<double>(s.ood_scores.size());
}

/// P(id > ood) + 0.5 P(id == ood) via midranks, O(n log n).
inline double auroc(const ScoreSet& s) {
  if (s.id_scores.empty() || s.ood_scores.empty()) throw ConfigError("auroc: both score sets must be non-empty");
  struct Item {
    double v;
    bool is_id;
  };
  std::vector<Item> all;
  all.reserve(s.id_scores.size() + s.ood_scores.size());
  for (double v : s.id_scores) all.push_back({v, true});
  for (double v : s.ood_scores) all.push_back({v, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });
  // Twice the Mann-Whitney U statistic of the ID sample, kept integral.
  std::int64_t twice_u = 0;
  std::int64_t ood_below = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::int64_t id_here = 0, ood_here = 0;
    while (j < all.size() && all[j].v == all[i].v) {
      (all[j].is_id ? id_here : ood_here) += 1;
      ++j;
    }
    twice_u += id_here * (2 * ood_below + ood_here);
    ood_below += ood_here;
    i = j;
  }
  const double pairs = static_cast<double>(s.id_scores.size()) * static_cast<double>(s.ood_scores.size());
  return static_cast<double>(twice_u) / (2.0 * pairs);
}

inline double id_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw ConfigError("id_accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                      std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ConfigError("id_accuracy: no samples");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

struct Histogram {
  std::vector<double> bin_left;
  double bin_width = 0.0;
  std::vector<double> p_id;
  std::vector<double> p_ood;
  double overlap = 0.0;
};

/// Normalized histograms over [min, max] of the union, plus the overlap
/// sum_b min(p_id[b], p_ood[b]).
inline Histogram confidence_histogram(const ScoreSet& s, std::size_t bins) {
  if (bins < 2) throw ConfigError("confidence_histogram: need at least 2 bins");
  if (s.id_scores.empty() || s.ood_scores.empty()) throw ConfigError("confidence_histogram: empty score set");
  double lo = s.id_scores[0], hi = s.id_scores[0];
  for (const auto* v : {&s.id_scores, &s.ood_scores}) {
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  Histogram h;
  h.bin_width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
  h.bin_left.resize(bins);
  for (std::size_t b = 0; b < bins; ++b) h.bin_left[b] = lo + h.bin_width * static_cast<double>(b);
  auto fill = [&](const std::vector<double>& v, std::vector<double>& p) {
    p.assign(bins, 0.0);
    for (double x : v) {
      auto b = static_cast<std::size_t>((x - lo) / h.bin_width);
      p[std::min(b, bins - 1)] += 1.0;
    }
    for (auto& c : p) c /= static_cast<double>(v.size());
  };
  fill(s.id_scores, h.p_id);
  fill(s.ood_scores, h.p_ood);
  for (std::size_t b = 0; b < bins; ++b) h.overlap += std::min(h.p_id[b], h.p_ood[b]);
  return h;
}

/// Seeded subsample of the larger side so both sides have equal counts.
/// Order of the kept scores follows the original order.
inline ScoreSet equalize_counts(const ScoreSet& s, std::uint64_t seed) {
  ScoreSet out = s;
  auto shrink = [seed](std::vector<double>& v, std::size_t n) {
    if (v.size() <= n) return;
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    std::vector<double> kept;
    kept.reserve(n);
    for (auto i : idx) kept.push_back(v[i]);
    v = std::move(kept);
  };
  const std::size_t n = std::min(out.id_scores.size(), out.ood_scores.size());
  shrink(out.id_scores, n);
  shrink(out.ood_scores, n);
  return out;
}

/// Points of the ROC curve (fpr, tpr), one per distinct threshold, from
/// (0,0) to (1,1).
inline std::vector<std::pair<double, double>> roc_curve(const ScoreSet& s) {
  std::vector<double> thresholds = s.id_scores;
  thresholds.insert(thresholds.end(), s.ood_scores.begin(), s.ood_scores.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::vector<double> id = s.id_scores, ood = s.ood_scores;
  std::sort(id.begin(), id.end());
  std::sort(ood.begin(), ood.end());
  auto frac_at_least = [](const std::vector<double>& v, double t) {
    const auto it = std::lower_bound(v.begin(), v.end(), t);
    return static_cast<double>(v.end() - it) / static_cast<double>(v.size());
  };
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  for (double t : thresholds) pts.emplace_back(frac_at_least(ood, t), frac_at_least(id, t));
  return pts;
}

// Exports.

inline void write_histogram_csv(const std::filesystem::path& path, const Histogram& h) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << std::setprecision(9) << "bin_left,p_id,p_ood\n";
  for (std::size_t b = 0; b < h.bin_left.size(); ++b) os << h.bin_left[b] << ',' << h.p_id[b] << ',' << h.p_ood[b] << '\n';
}

inline void write_roc_csv(const std::filesystem::path& path, const std::vector<std::pair<double, double>>& roc) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << std::setprecision(9) << "fpr,tpr\n";
  for (const auto& [f, t] : roc) os << f << ',' << t << '\n';
}

/// Minimal standalone SVG line chart; each series is a polyline.
struct SvgSeries {
  std::string label;
  std::string color;
  std::vector<std::pair<double, double>> points;
};

inline std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                                 const std::vector<SvgSeries>& series) {
  constexpr double kW = 480, kH = 320, kL = 56, kR = 16, kT = 32, kB = 44;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  auto px = [&](double x) { return kL + (x - x0) / (x1 - x0) * (kW - kL - kR); };
  auto py = [&](double y) { return kH - kB - (y - y0) / (y1 - y0) * (kH - kT - kB); };
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW
     << ' ' << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 8 << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label
     << "</text>\n";
  os << "<text x=\"14\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
     << kH / 2 << ")\">" << y_label << "</text>\n";
  os << std::setprecision(3);
  os << "<text x=\"" << kL << "\" y=\"" << kH - kB + 14 << "\" font-size=\"10\">" << x0 << "</text>\n";
  os << "<text x=\"" << kW - kR << "\" y=\"" << kH - kB + 14 << "\" text-anchor=\"end\" font-size=\"10\">" << x1
     << "</text>\n";
  os << "<text x=\"" << kL - 4 << "\" y=\"" << kH - kB << "\" text-anchor=\"end\" font-size=\"10\">" << y0 << "</text>\n";
  os << "<text x=\"" << kL - 4 << "\" y=\"" << kT + 8 << "\" text-anchor=\"end\" font-size=\"10\">" << y1 << "</text>\n";
  os << std::setprecision(2);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : s.points) os << px(x) << ',' << py(y) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << kW - kR - 4 << "\" y=\"" << kT + 14 * (i + 1) << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
       << s.color << "\">" << s.label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_histogram_svg(const std::filesystem::path& path, const std::string& title, const Histogram& h) {
  SvgSeries id{"ID", "#2a7d2a", {}}, ood{"OOD", "#c0392b", {}};
  for (std::size_t b = 0; b < h.bin_left.size(); ++b) {
    const double c = h.bin_left[b] + h.bin_width / 2;
    id.points.emplace_back(c, h.p_id[b]);
    ood.points.emplace_back(c, h.p_ood[b]);
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << svg_line_plot(title, "score", "fraction", {id, ood});
}

}  // namespace ssod
