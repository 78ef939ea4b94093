#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "afine/data.hpp"
#include "afine/errors.hpp"
#include "afine/model.hpp"
#include "afine/plot.hpp"

namespace afine {

// ---- manifest ----

enum class Preference { y, z, tie };

inline Preference parse_preference(const std::string& s) {
  if (s == "y") return Preference::y;
  if (s == "z") return Preference::z;
  if (s == "tie") return Preference::tie;
  throw DataError("unknown preference '" + s + "'");
}

inline const char* preference_name(Preference p) {
  switch (p) {
    case Preference::y: return "y";
    case Preference::z: return "z";
    case Preference::tie: return "tie";
  }
  return "?";
}

struct EvalPair {
  std::string reference_id;
  std::string y_id;
  std::string z_id;
  Preference human_preference = Preference::tie;
  std::string subset_tag;
};

inline constexpr const char* kEvalHeader = "# afine-eval v1";

inline std::vector<EvalPair> read_eval_pairs(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open eval manifest: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("empty eval manifest: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kEvalHeader) throw DataError(path + ": missing eval header '" + kEvalHeader + "'");
  std::vector<EvalPair> out;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::skip_line(line)) continue;
    auto fields = detail::split_fields(line, 5, path + ":" + std::to_string(lineno));
    if (fields[1] == fields[2])
      throw DataError(path + ":" + std::to_string(lineno) + ": y and z must differ");
    out.push_back({fields[0], fields[1], fields[2], parse_preference(fields[3]), fields[4]});
  }
  return out;
}

inline void write_eval_pairs(const std::vector<EvalPair>& pairs, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write eval manifest: " + path);
  f << kEvalHeader << "\n";
  for (const auto& p : pairs)
    f << p.reference_id << "," << p.y_id << "," << p.z_id << ","
      << preference_name(p.human_preference) << "," << p.subset_tag << "\n";
}

// ---- metric adapters ----

// Uniform lower-is-better interface over A-FINE and the classical baselines;
// higher-is-better metrics are negated inside the adapter.
struct PairScorer {
  std::string name;
  std::function<double(const Image& ref, const Image& test)> badness;
};

inline PairScorer make_scorer(const std::string& metric, const ModelParameters* model) {
  if (metric == "afine") {
    if (!model) throw ConfigError("metric 'afine' requires a model checkpoint");
    return {"afine",
            [model](const Image& r, const Image& t) { return afine_score(*model, r, t); }};
  }
  if (metric == "psnr")
    return {"psnr", [](const Image& r, const Image& t) { return -psnr(r, t); }};
  if (metric == "ssim")
    return {"ssim", [](const Image& r, const Image& t) { return -ssim_global(r, t); }};
  throw ConfigError("unknown metric '" + metric + "' (expected afine, psnr, or ssim)");
}

// ---- judging ----

struct JudgeOutcome {
  Preference predicted = Preference::y;
  bool tie_break = false;
};

// Predicts the image with the better (lower) badness; exact ties go to the
// lexicographically first id and are recorded.
inline JudgeOutcome judge_pair(const PairScorer& scorer, const Image& ref, const Image& y,
                               const Image& z, const std::string& y_id, const std::string& z_id) {
  double sy = scorer.badness(ref, y);
  double sz = scorer.badness(ref, z);
  if (sy < sz) return {Preference::y, false};
  if (sz < sy) return {Preference::z, false};
  return {y_id <= z_id ? Preference::y : Preference::z, true};
}

// ---- report ----

struct SubsetStats {
  std::size_t judged = 0;
  std::size_t correct = 0;
  std::size_t ties_excluded = 0;
  std::size_t tie_break_events = 0;

  // Percentage in [0,100]; NaN when nothing was judged.
  double accuracy_percent() const {
    if (judged == 0) return std::numeric_limits<double>::quiet_NaN();
    return 100.0 * double(correct) / double(judged);
  }
};

struct EvalReport {
  std::string metric;
  std::string checkpoint_id;
  std::map<std::string, SubsetStats> subsets;
  SubsetStats overall;
  bool degenerate_warning = false;
};

// 2AFC accuracy over the manifest. Ground-truth ties never enter the
// denominator; they are tallied separately. A warning is raised when exact
// prediction ties exceed 1% of judgments, which also catches constant
// metrics.
inline EvalReport evaluate(const PairScorer& scorer, const std::vector<EvalPair>& manifest,
                           const ImageStore& images, const std::string& checkpoint_id = "") {
  std::vector<std::string> missing;
  for (const auto& p : manifest)
    for (const std::string* id : {&p.reference_id, &p.y_id, &p.z_id})
      if (!images.exists(*id)) missing.push_back(*id);
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    std::string msg = "eval manifest references unresolvable images:";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
    throw DataError(msg);
  }

  EvalReport report;
  report.metric = scorer.name;
  report.checkpoint_id = checkpoint_id;
  for (const auto& p : manifest) {
    SubsetStats& sub = report.subsets[p.subset_tag];
    if (p.human_preference == Preference::tie) {
      sub.ties_excluded++;
      report.overall.ties_excluded++;
      continue;
    }
    JudgeOutcome out = judge_pair(scorer, images.get(p.reference_id), images.get(p.y_id),
                                  images.get(p.z_id), p.y_id, p.z_id);
    bool ok = out.predicted == p.human_preference;
    sub.judged++;
    report.overall.judged++;
    if (ok) {
      sub.correct++;
      report.overall.correct++;
    }
    if (out.tie_break) {
      sub.tie_break_events++;
      report.overall.tie_break_events++;
    }
  }
  report.degenerate_warning =
      report.overall.judged > 0 &&
      double(report.overall.tie_break_events) > 0.01 * double(report.overall.judged);
  return report;
}

// ---- serialization ----

namespace detail {

inline std::string accuracy_field(const SubsetStats& s) {
  if (s.judged == 0) return "n/a";
  std::ostringstream os;
  os.precision(6);
  os << s.accuracy_percent();
  return os.str();
}

}  // namespace detail

inline void write_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write report: " + path);
  f << "metric,subset,count,accuracy\n";
  for (const auto& [tag, s] : report.subsets)
    f << report.metric << "," << tag << "," << s.judged << "," << detail::accuracy_field(s)
      << "\n";
  f << report.metric << ",overall," << report.overall.judged << ","
    << detail::accuracy_field(report.overall) << "\n";
  if (!f) throw DataError("failed writing report: " + path);
}

inline nlohmann::json report_to_json(const EvalReport& report) {
  auto stats = [](const SubsetStats& s) {
    nlohmann::json j{{"count", s.judged},
                     {"correct", s.correct},
                     {"ties", s.ties_excluded},
                     {"tie_breaks", s.tie_break_events}};
    if (s.judged > 0)
      j["accuracy"] = s.accuracy_percent();
    else
      j["accuracy"] = nullptr;
    return j;
  };
  nlohmann::json j;
  j["metric"] = report.metric;
  j["checkpoint"] = report.checkpoint_id;
  j["subsets"] = nlohmann::json::object();
  for (const auto& [tag, s] : report.subsets) j["subsets"][tag] = stats(s);
  j["overall"] = stats(report.overall);
  j["degenerate_warning"] = report.degenerate_warning;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  auto stats = [](const nlohmann::json& s) {
    SubsetStats out;
    out.judged = s.at("count").get<std::size_t>();
    out.correct = s.at("correct").get<std::size_t>();
    out.ties_excluded = s.at("ties").get<std::size_t>();
    out.tie_break_events = s.at("tie_breaks").get<std::size_t>();
    return out;
  };
  EvalReport r;
  r.metric = j.at("metric").get<std::string>();
  r.checkpoint_id = j.at("checkpoint").get<std::string>();
  for (const auto& [tag, s] : j.at("subsets").items()) r.subsets[tag] = stats(s);
  r.overall = stats(j.at("overall"));
  r.degenerate_warning = j.at("degenerate_warning").get<bool>();
  return r;
}

inline void write_report_json(const EvalReport& report, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write report: " + path);
  f << report_to_json(report).dump(2) << "\n";
}

inline EvalReport read_report_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open report: " + path);
  nlohmann::json j;
  f >> j;
  return report_from_json(j);
}

// Accuracy bar chart: one bar per subset plus overall, 0..100% axis with
// gridlines every 25%, accuracy printed above each bar.
inline void render_report_plot(const EvalReport& report, const std::string& path) {
  std::vector<std::pair<std::string, const SubsetStats*>> bars;
  for (const auto& [tag, s] : report.subsets) bars.emplace_back(tag, &s);
  bars.emplace_back("overall", &report.overall);

  int bar_w = 48, gap = 28, margin = 48;
  int w = margin * 2 + int(bars.size()) * (bar_w + gap) - gap;
  int h = 320;
  int base = h - 48, top = 32;
  Canvas canvas(w, h);
  for (int q = 0; q <= 4; ++q) {
    int y = base - q * (base - top) / 4;
    canvas.hline(margin - 8, w - margin + 8, y, 210, 210, 210);
    canvas.draw_number(4, y - 5, std::to_string(q * 25), 120, 120, 120);
  }
  int x = margin;
  for (const auto& [tag, s] : bars) {
    double acc = s->judged == 0 ? 0.0 : s->accuracy_percent();
    int bh = int(std::lround(acc / 100.0 * (base - top)));
    canvas.fill_rect(x, base - bh, x + bar_w, base, 66, 110, 180);
    std::ostringstream label;
    label.precision(3);
    label << (s->judged == 0 ? 0.0 : acc);
    canvas.draw_number(x, base - bh - 14, label.str(), 40, 40, 40);
    x += bar_w + gap;
  }
  canvas.hline(margin - 8, w - margin + 8, base, 60, 60, 60);
  canvas.save(path);
}

}  // namespace afine
