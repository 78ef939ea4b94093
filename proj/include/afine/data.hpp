#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "afine/errors.hpp"
#include "afine/image.hpp"
#include "afine/ranking.hpp"

namespace afine {

// ---- vocabulary ----

enum class Vote { worse, similar, better };
enum class Label { worse, similar, better, outlier };

inline Vote parse_vote(const std::string& s) {
  if (s == "worse") return Vote::worse;
  if (s == "similar") return Vote::similar;
  if (s == "better") return Vote::better;
  throw DataError("unknown vote '" + s + "'");
}

inline const char* vote_name(Vote v) {
  switch (v) {
    case Vote::worse: return "worse";
    case Vote::similar: return "similar";
    case Vote::better: return "better";
  }
  return "?";
}

inline Label parse_label(const std::string& s) {
  if (s == "worse") return Label::worse;
  if (s == "similar") return Label::similar;
  if (s == "better") return Label::better;
  if (s == "outlier") return Label::outlier;
  throw DataError("unknown label '" + s + "'");
}

inline const char* label_name(Label l) {
  switch (l) {
    case Label::worse: return "worse";
    case Label::similar: return "similar";
    case Label::better: return "better";
    case Label::outlier: return "outlier";
  }
  return "?";
}

// ---- records ----

struct PairAnnotation {
  std::string reference_id;
  std::string test_id;
  std::vector<Vote> votes;
};

struct AggregatedLabel {
  std::string reference_id;
  std::string test_id;
  Label label = Label::outlier;
};

struct Triplet {
  std::string reference_id;
  std::string y_id;
  std::string z_id;
  double p = 0.5;  // in {0, 0.5, 1}
};

struct MosRecord {
  std::string reference_id;
  std::string test_id;
  double mos = 0.0;
};

// ---- aggregation (majority vote with tie-outlier removal) ----

// Strict majority over the vote multiset; a three-way tie (or any multiset
// without a strict majority) is an outlier. With fewer than three votes only
// unanimity yields a label.
inline AggregatedLabel aggregate_votes(const PairAnnotation& ann) {
  if (ann.votes.empty()) throw DataError("pair " + ann.reference_id + "," + ann.test_id +
                                         " has no votes");
  std::size_t counts[3] = {0, 0, 0};
  for (Vote v : ann.votes) counts[std::size_t(v)]++;
  AggregatedLabel out{ann.reference_id, ann.test_id, Label::outlier};
  std::size_t total = ann.votes.size();
  if (total < 3) {
    for (int i = 0; i < 3; ++i)
      if (counts[i] == total) out.label = Label(i);
    return out;
  }
  for (int i = 0; i < 3; ++i)
    if (counts[i] * 2 > total) out.label = Label(i);
  return out;
}

struct LabelStatistics {
  std::size_t worse = 0, similar = 0, better = 0, outlier = 0;
  std::size_t total() const { return worse + similar + better + outlier; }
  double fraction(std::size_t n) const { return total() == 0 ? 0.0 : double(n) / double(total()); }
};

inline LabelStatistics dataset_statistics(const std::vector<AggregatedLabel>& labels) {
  LabelStatistics s;
  for (const auto& l : labels) {
    switch (l.label) {
      case Label::worse: s.worse++; break;
      case Label::similar: s.similar++; break;
      case Label::better: s.better++; break;
      case Label::outlier: s.outlier++; break;
    }
  }
  return s;
}

// ---- triplet construction ----

enum class TripletMode { ref_as_test, cross_test, both };

inline TripletMode parse_triplet_mode(const std::string& s) {
  if (s == "ref-as-test") return TripletMode::ref_as_test;
  if (s == "cross-test") return TripletMode::cross_test;
  if (s == "both") return TripletMode::both;
  throw DataError("unknown triplet mode '" + s + "'");
}

namespace detail {

inline double label_rank(Label l) {
  switch (l) {
    case Label::worse: return 0.0;
    case Label::similar: return 1.0;
    case Label::better: return 2.0;
    default: throw DataError("outlier label in triplet construction");
  }
}

}  // namespace detail

// Builds training triplets from aggregated labels. Outlier rows are dropped
// first. ref-as-test emits (x, y, x); cross-test pairs test images of the
// same reference under the order worse < similar < better, equal categories
// yielding p = 0.5.
inline std::vector<Triplet> build_triplets(const std::vector<AggregatedLabel>& labels,
                                           TripletMode mode) {
  std::vector<AggregatedLabel> kept;
  kept.reserve(labels.size());
  for (const auto& l : labels)
    if (l.label != Label::outlier) kept.push_back(l);

  std::vector<Triplet> out;
  if (mode == TripletMode::ref_as_test || mode == TripletMode::both) {
    for (const auto& l : kept) {
      double p = l.label == Label::better ? 1.0 : (l.label == Label::similar ? 0.5 : 0.0);
      out.push_back({l.reference_id, l.test_id, l.reference_id, p});
    }
  }
  if (mode == TripletMode::cross_test || mode == TripletMode::both) {
    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<const AggregatedLabel*>> by_ref;
    for (const auto& l : kept) {
      auto [it, inserted] = by_ref.try_emplace(l.reference_id);
      if (inserted) order.push_back(l.reference_id);
      it->second.push_back(&l);
    }
    for (const auto& ref : order) {
      const auto& group = by_ref[ref];
      for (std::size_t i = 0; i < group.size(); ++i)
        for (std::size_t j = i + 1; j < group.size(); ++j) {
          double p = ranking_label(detail::label_rank(group[i]->label),
                                   detail::label_rank(group[j]->label));
          out.push_back({ref, group[i]->test_id, group[j]->test_id, p});
        }
    }
  }
  return out;
}

// MOS-annotated corpora: same-content test images are paired and labeled by
// comparing raw MOS within the shared reference.
inline std::vector<Triplet> build_triplets_mos(const std::vector<MosRecord>& records) {
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<const MosRecord*>> by_ref;
  for (const auto& r : records) {
    auto [it, inserted] = by_ref.try_emplace(r.reference_id);
    if (inserted) order.push_back(r.reference_id);
    it->second.push_back(&r);
  }
  std::vector<Triplet> out;
  for (const auto& ref : order) {
    const auto& group = by_ref[ref];
    for (std::size_t i = 0; i < group.size(); ++i)
      for (std::size_t j = i + 1; j < group.size(); ++j)
        out.push_back({ref, group[i]->test_id, group[j]->test_id,
                       ranking_label(group[i]->mos, group[j]->mos)});
  }
  return out;
}

// ---- content-independent splitting ----

struct SplitResult {
  std::vector<std::string> train, val, test;
};

// Partition at the content level with a seeded shuffle; sizes follow the
// largest-remainder rule so e.g. 100 contents at 7:1:2 give exactly 70/10/20.
inline SplitResult split_dataset(std::vector<std::string> contents, double r_train, double r_val,
                                 double r_test, std::uint64_t seed) {
  if (r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0)
    throw DataError("split ratios must be positive");
  if (std::fabs(r_train + r_val + r_test - 1.0) > 1e-9)
    throw DataError("split ratios must sum to 1");
  if (contents.size() < 3) throw DataError("fewer contents than splits");
  std::mt19937_64 rng(seed);
  std::shuffle(contents.begin(), contents.end(), rng);
  std::size_t n = contents.size();
  double ratios[3] = {r_train, r_val, r_test};
  std::size_t sizes[3];
  double fracs[3];
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double exact = ratios[i] * double(n);
    sizes[i] = std::size_t(exact);
    fracs[i] = exact - double(sizes[i]);
    assigned += sizes[i];
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (fracs[i] > fracs[best]) best = i;
    sizes[best]++;
    fracs[best] = -1.0;
    assigned++;
  }
  SplitResult s;
  auto it = contents.begin();
  s.train.assign(it, it + sizes[0]);
  it += sizes[0];
  s.val.assign(it, it + sizes[1]);
  it += sizes[1];
  s.test.assign(it, it + sizes[2]);
  return s;
}

// ---- manifest files ----
// Votes are headerless CSV lines `reference_path,test_path,vote,subject_id`.
// Derived manifests carry a one-line versioned header, which also stops a
// labels file from being fed back into the aggregator.

inline constexpr const char* kLabelsHeader = "# afine-labels v1";
inline constexpr const char* kTripletsHeader = "# afine-triplets v1";
inline constexpr const char* kMosHeader = "# afine-mos v1";

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, std::size_t expect,
                                             const std::string& where) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  if (out.size() != expect)
    throw DataError(where + ": expected " + std::to_string(expect) + " fields, got " +
                    std::to_string(out.size()) + " in '" + line + "'");
  return out;
}

inline bool skip_line(const std::string& line) {
  return line.empty() || line[0] == '#';
}

}  // namespace detail

inline std::vector<PairAnnotation> read_votes(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open vote file: " + path);
  std::vector<std::string> order;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::vector<PairAnnotation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("# afine-", 0) == 0)
      throw DataError(path + " is a derived manifest, not a raw vote file");
    if (detail::skip_line(line)) continue;
    auto fields = detail::split_fields(line, 4, path + ":" + std::to_string(lineno));
    auto key = std::make_pair(fields[0], fields[1]);
    auto it = index.find(key);
    if (it == index.end()) {
      index[key] = out.size();
      out.push_back({fields[0], fields[1], {}});
      it = index.find(key);
    }
    out[it->second].votes.push_back(parse_vote(fields[2]));
  }
  if (out.empty()) throw DataError("vote file is empty: " + path);
  return out;
}

inline void write_labels(const std::vector<AggregatedLabel>& labels, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write labels: " + path);
  f << kLabelsHeader << "\n";
  for (const auto& l : labels)
    f << l.reference_id << "," << l.test_id << "," << label_name(l.label) << "\n";
  if (!f) throw DataError("failed writing labels: " + path);
}

inline std::vector<AggregatedLabel> read_labels(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open labels: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("empty labels file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kLabelsHeader)
    throw DataError(path + ": missing labels header '" + kLabelsHeader + "'");
  std::vector<AggregatedLabel> out;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::skip_line(line)) continue;
    auto fields = detail::split_fields(line, 3, path + ":" + std::to_string(lineno));
    out.push_back({fields[0], fields[1], parse_label(fields[2])});
  }
  return out;
}

inline void write_triplets(const std::vector<Triplet>& triplets, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write triplets: " + path);
  f << kTripletsHeader << "\n";
  for (const auto& t : triplets) {
    const char* p = t.p == 1.0 ? "1" : (t.p == 0.0 ? "0" : "0.5");
    f << t.reference_id << "," << t.y_id << "," << t.z_id << "," << p << "\n";
  }
  if (!f) throw DataError("failed writing triplets: " + path);
}

inline std::vector<Triplet> read_triplets(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open triplets: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("empty triplet file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTripletsHeader)
    throw DataError(path + ": missing triplet header '" + kTripletsHeader + "'");
  std::vector<Triplet> out;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::skip_line(line)) continue;
    auto fields = detail::split_fields(line, 4, path + ":" + std::to_string(lineno));
    double p = std::stod(fields[3]);
    if (p != 0.0 && p != 0.5 && p != 1.0)
      throw DataError(path + ":" + std::to_string(lineno) + ": p must be 0, 0.5, or 1");
    if (fields[1] == fields[2])
      throw DataError(path + ":" + std::to_string(lineno) + ": y and z must differ");
    out.push_back({fields[0], fields[1], fields[2], p});
  }
  return out;
}

inline std::vector<MosRecord> read_mos(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open MOS manifest: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("empty MOS manifest: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMosHeader) throw DataError(path + ": missing MOS header '" + kMosHeader + "'");
  std::vector<MosRecord> out;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::skip_line(line)) continue;
    auto fields = detail::split_fields(line, 3, path + ":" + std::to_string(lineno));
    out.push_back({fields[0], fields[1], std::stod(fields[2])});
  }
  return out;
}

inline bool is_mos_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open file: " + path);
  std::string line;
  std::getline(f, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line == kMosHeader;
}

inline std::vector<std::string> read_contents(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open contents list: " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::skip_line(line)) continue;
    out.push_back(line);
  }
  return out;
}

inline void write_id_list(const std::vector<std::string>& ids, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write: " + path);
  for (const auto& id : ids) f << id << "\n";
  if (!f) throw DataError("failed writing: " + path);
}

// ---- image access ----

// Resolves manifest ids against a corpus root and caches decoded images.
// put() registers in-memory images, which the synthetic pipeline and tests
// use in place of a corpus directory.
class ImageStore {
 public:
  ImageStore() = default;
  explicit ImageStore(std::string corpus_root) : root_(std::move(corpus_root)) {}

  std::string resolve(const std::string& id) const {
    if (root_.empty() || std::filesystem::path(id).is_absolute()) return id;
    return (std::filesystem::path(root_) / id).string();
  }

  bool exists(const std::string& id) const {
    return cache_.count(id) > 0 || std::filesystem::exists(resolve(id));
  }

  const Image& get(const std::string& id) const {
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    auto [jt, _] = cache_.emplace(id, load_image(resolve(id)));
    return jt->second;
  }

  void put(const std::string& id, Image img) { cache_[id] = std::move(img); }

 private:
  std::string root_;
  mutable std::unordered_map<std::string, Image> cache_;
};

// Fails with the full list of unresolvable ids (capped) rather than the
// first one, so a broken manifest is diagnosable in one pass.
inline void verify_triplet_images(const std::vector<Triplet>& triplets, const ImageStore& store) {
  std::vector<std::string> missing;
  auto check = [&](const std::string& id) {
    if (!store.exists(id)) missing.push_back(id);
  };
  for (const auto& t : triplets) {
    check(t.reference_id);
    check(t.y_id);
    check(t.z_id);
  }
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    std::string msg = "unresolvable images:";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " (+" + std::to_string(missing.size() - 20) + " more)";
    throw DataError(msg);
  }
}

}  // namespace afine
