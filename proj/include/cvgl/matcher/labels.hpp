#pragma once

// Adaptive mutual matching: mutual nearest neighbours, the top1 - top2 gap
// filter, the curriculum threshold schedule, and label audits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "cvgl/core.hpp"
#include "cvgl/io.hpp"
#include "cvgl/matcher/similarity.hpp"
#include "json.hpp"

namespace cvgl {

inline constexpr double kInfiniteGap = std::numeric_limits<double>::infinity();

struct LabelRecord {
  std::size_t g = 0;
  std::size_t s = 0;
  double gap_g = 0.0;
  double gap_s = 0.0;
  int round_added = 0;
  friend bool operator==(const LabelRecord&, const LabelRecord&) = default;
};

// One-to-one set of (ground, satellite) correspondences.
struct PseudoLabelSet {
  std::vector<LabelRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  friend bool operator==(const PseudoLabelSet&, const PseudoLabelSet&) = default;

  void validate(std::size_t n_ground, std::size_t n_sat) const {
    std::vector<bool> gs(n_ground, false), ss(n_sat, false);
    for (const auto& r : records) {
      require(r.g < n_ground && r.s < n_sat, "PseudoLabelSet: index out of range");
      require(!gs[r.g] && !ss[r.s], "PseudoLabelSet: label set is not one-to-one");
      gs[r.g] = ss[r.s] = true;
    }
  }
};

namespace detail {

struct Top2 {
  std::size_t arg = 0;
  double first = -std::numeric_limits<double>::infinity();
  double second = -std::numeric_limits<double>::infinity();

  void push(std::size_t idx, double v) {
    if (v > first) {
      second = first;
      first = v;
      arg = idx;
    } else if (v > second) {
      second = v;
    }
  }
  double gap(std::size_t count) const { return count < 2 ? kInfiniteGap : first - second; }
};

}  // namespace detail

// (i, j) is kept iff j is the first maximum of row i and i is the first
// maximum of column j. Records are ordered by ground row.
inline PseudoLabelSet mutual_match(const SimilarityMatrix& m) {
  const std::size_t ng = m.n_ground(), ns = m.n_sat();
  require(ng >= 1 && ns >= 1, "mutual_match: empty similarity matrix");
  std::vector<detail::Top2> rows(ng), cols(ns);
  parallel_for(0, ng, [&](std::size_t i) {
    for (std::size_t j = 0; j < ns; ++j) rows[i].push(j, m(i, j));
  });
  parallel_for(0, ns, [&](std::size_t j) {
    for (std::size_t i = 0; i < ng; ++i) cols[j].push(i, m(i, j));
  });
  PseudoLabelSet out;
  for (std::size_t i = 0; i < ng; ++i) {
    const std::size_t j = rows[i].arg;
    if (cols[j].arg == i) out.records.push_back({i, j, rows[i].gap(ns), cols[j].gap(ng), 0});
  }
  return out;
}

// Strict inequality: a record survives when its gap exceeds tau. The
// one-sided form looks at the ground-query gap only.
inline PseudoLabelSet threshold_filter(const PseudoLabelSet& labels, double tau, bool one_sided = false) {
  require(tau >= 0.0, "threshold_filter: tau must be nonnegative");
  PseudoLabelSet out;
  for (const auto& r : labels.records) {
    const double gap = one_sided ? r.gap_g : std::min(r.gap_g, r.gap_s);
    if (gap > tau) out.records.push_back(r);
  }
  return out;
}

struct CurriculumState {
  int round = 0;
  double threshold = 0.05;
  double tau0 = 0.05;
  double tau_min = 0.0;
  int total_rounds = 0;
  bool one_sided = false;
  // Labels that every round keeps regardless of the matcher (ground truth).
  PseudoLabelSet frozen;
  // The label set produced by the latest round.
  PseudoLabelSet labels;

  static CurriculumState start(double tau0, double tau_min, int total_rounds, bool one_sided = false) {
    if (!(tau0 >= 0 && tau_min >= 0 && tau_min <= tau0)) throw ConfigError("curriculum: need 0 <= tau_min <= tau0");
    if (total_rounds < 0) throw ConfigError("curriculum: total_rounds must be >= 0");
    CurriculumState s;
    s.threshold = tau0;
    s.tau0 = tau0;
    s.tau_min = tau_min;
    s.total_rounds = total_rounds;
    s.one_sided = one_sided;
    return s;
  }
};

inline double scheduled_threshold(double tau0, double tau_min, int round, int total_rounds) {
  if (total_rounds <= 0) return tau0;
  const double t = tau0 * (1.0 - static_cast<double>(round) / static_cast<double>(total_rounds));
  return std::max(tau_min, t);
}

// Frozen records first, then matcher labels that do not collide with them,
// in ground-row order.
inline PseudoLabelSet merge_with_frozen(const PseudoLabelSet& frozen, const PseudoLabelSet& labels,
                                        std::size_t n_ground, std::size_t n_sat) {
  std::vector<bool> gs(n_ground, false), ss(n_sat, false);
  PseudoLabelSet out = frozen;
  for (const auto& r : frozen.records) gs[r.g] = ss[r.s] = true;
  for (const auto& r : labels.records)
    if (!gs[r.g] && !ss[r.s]) {
      out.records.push_back(r);
      gs[r.g] = ss[r.s] = true;
    }
  std::stable_sort(out.records.begin() + static_cast<std::ptrdiff_t>(frozen.size()), out.records.end(),
                   [](const LabelRecord& a, const LabelRecord& b) { return a.g < b.g; });
  return out;
}

// Rebuilds the label set at the next threshold. A pair that was present in
// the previous round keeps its round_added; new pairs get round + 1.
inline PseudoLabelSet curriculum_step(CurriculumState& state, const SimilarityMatrix& m) {
  require(state.round < state.total_rounds, "curriculum_step: all rounds are exhausted");
  const int next = state.round + 1;
  state.threshold = scheduled_threshold(state.tau0, state.tau_min, next, state.total_rounds);
  PseudoLabelSet fresh = threshold_filter(mutual_match(m), state.threshold, state.one_sided);
  for (auto& r : fresh.records) {
    r.round_added = next;
    for (const auto& p : state.labels.records)
      if (p.g == r.g && p.s == r.s) {
        r.round_added = p.round_added;
        break;
      }
  }
  state.labels = merge_with_frozen(state.frozen, fresh, m.n_ground(), m.n_sat());
  state.round = next;
  return state.labels;
}

struct Audit {
  std::size_t total = 0;
  std::size_t correct = 0;
  double precision() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
  friend bool operator==(const Audit&, const Audit&) = default;
};

// gt[g] is the true satellite index of ground row g.
inline Audit label_audit(const PseudoLabelSet& labels, const std::vector<std::size_t>& gt) {
  Audit a;
  for (const auto& r : labels.records) {
    require(r.g < gt.size(), "label_audit: no ground truth for ground row " + std::to_string(r.g));
    ++a.total;
    if (gt[r.g] == r.s) ++a.correct;
  }
  return a;
}

// ---------------------------------------------------------------------------
// JSON lines: {"g":..,"s":..,"gap_g":..,"gap_s":..,"round":..}. An infinite
// gap (a side of size one) is written as null.

inline std::string format_labels_jsonl(const PseudoLabelSet& labels) {
  std::string out;
  for (const auto& r : labels.records) {
    nlohmann::ordered_json j;
    j["g"] = r.g;
    j["s"] = r.s;
    j["gap_g"] = std::isfinite(r.gap_g) ? nlohmann::ordered_json(r.gap_g) : nlohmann::ordered_json(nullptr);
    j["gap_s"] = std::isfinite(r.gap_s) ? nlohmann::ordered_json(r.gap_s) : nlohmann::ordered_json(nullptr);
    j["round"] = r.round_added;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline PseudoLabelSet parse_labels_jsonl(const std::string& text, const std::string& source) {
  PseudoLabelSet out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(where + ": malformed label record (" + e.what() + ")");
    }
    const auto gap = [&](const char* key) {
      if (!j.contains(key)) throw ContractError(where + ": missing " + key);
      if (j[key].is_null()) return kInfiniteGap;
      if (!j[key].is_number()) throw ContractError(where + ": " + key + " is not a number");
      return j[key].get<double>();
    };
    const auto index = [&](const char* key) -> std::int64_t {
      if (!j.contains(key) || !j[key].is_number_integer()) throw ContractError(where + ": missing integer " + key);
      return j[key].get<std::int64_t>();
    };
    const auto g = index("g"), s = index("s"), round = index("round");
    if (g < 0 || s < 0 || round < 0) throw ContractError(where + ": negative index");
    out.records.push_back({static_cast<std::size_t>(g), static_cast<std::size_t>(s), gap("gap_g"), gap("gap_s"),
                           static_cast<int>(round)});
  }
  return out;
}

inline void write_labels(const std::filesystem::path& path, const PseudoLabelSet& labels) {
  io::write_text(path, format_labels_jsonl(labels));
}

inline PseudoLabelSet read_labels(const std::filesystem::path& path) {
  return parse_labels_jsonl(io::read_text(path), path.string());
}

}  // namespace cvgl
