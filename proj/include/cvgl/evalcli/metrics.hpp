#pragma once

// Recall@k, retrieval / stage reports with JSON round-tripping, and the
// per-round trend CSV.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cvgl/core.hpp"
#include "cvgl/io.hpp"
#include "cvgl/matcher/similarity.hpp"
#include "json.hpp"

namespace cvgl {

// Fraction of queries whose true index is among the first k retrieved.
inline double recall_at_k(const std::vector<std::vector<std::size_t>>& retrieved, const std::vector<std::size_t>& gt,
                          std::size_t k) {
  require(retrieved.size() == gt.size(), "recall_at_k: query count mismatch");
  require(k >= 1, "recall_at_k: k must be at least 1");
  if (retrieved.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < retrieved.size(); ++q) {
    require(retrieved[q].size() >= k, "recall_at_k: query " + std::to_string(q) + " has fewer than k results");
    for (std::size_t r = 0; r < k; ++r)
      if (retrieved[q][r] == gt[q]) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(retrieved.size());
}

// k used for R@percent%: ceil(percent * n / 100), at least 1. The small
// slack keeps exact products such as 1 * 100 / 100 from rounding up.
inline std::size_t percent_k(double percent, std::size_t n) {
  const double raw = percent * static_cast<double>(n) / 100.0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

struct RetrievalReport {
  std::string split;
  std::size_t n_queries = 0;
  std::map<std::size_t, double> recall_at;
  double percent = 1.0;
  std::size_t percent_k = 1;
  double recall_at_percent = 0.0;
  std::string config_hash;

  double r_at(std::size_t k) const {
    const auto it = recall_at.find(k);
    require(it != recall_at.end(), "RetrievalReport: R@" + std::to_string(k) + " was not computed");
    return it->second;
  }
  friend bool operator==(const RetrievalReport&, const RetrievalReport&) = default;
};

// Retrieval of S rows for every G row with gt[i] the true S row of G row i.
inline RetrievalReport retrieval_report(const SimilarityMatrix& m, const std::vector<std::size_t>& gt,
                                        const std::vector<std::size_t>& ks, double percent, std::string split) {
  require(m.n_ground() > 0, "evaluate: empty split");
  RetrievalReport r;
  r.split = std::move(split);
  r.n_queries = m.n_ground();
  r.percent = percent;
  r.percent_k = std::min(percent_k(percent, m.n_sat()), m.n_sat());
  std::size_t kmax = r.percent_k;
  for (std::size_t k : ks) kmax = std::max(kmax, std::min(k, m.n_sat()));
  const auto top = topk_rows(m, kmax);
  std::vector<std::vector<std::size_t>> retrieved(top.size());
  for (std::size_t q = 0; q < top.size(); ++q)
    for (const auto& s : top[q]) retrieved[q].push_back(s.index);
  for (std::size_t k : ks) r.recall_at[k] = recall_at_k(retrieved, gt, std::min(k, m.n_sat()));
  r.recall_at_percent = recall_at_k(retrieved, gt, r.percent_k);
  return r;
}

struct RoundRecord {
  int round = 0;
  double threshold = 0.0;
  std::size_t labels = 0;
  std::size_t correct = 0;
  std::size_t frozen = 0;
  double r_at_1 = 0.0;
  double precision() const { return labels == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels); }
  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

struct StageReport {
  std::string stage;
  std::vector<double> epoch_losses;
  std::vector<RoundRecord> rounds;
  RetrievalReport retrieval;
  std::vector<std::string> warnings;
  std::string config_hash;
  friend bool operator==(const StageReport&, const StageReport&) = default;
};

// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const RetrievalReport& r) {
  nlohmann::ordered_json j;
  j["split"] = r.split;
  j["n_queries"] = r.n_queries;
  nlohmann::ordered_json rec = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.recall_at) rec[std::to_string(k)] = v;
  j["recall_at"] = rec;
  j["percent"] = r.percent;
  j["percent_k"] = r.percent_k;
  j["recall_at_percent"] = r.recall_at_percent;
  j["config_hash"] = r.config_hash;
  return j;
}

inline RetrievalReport retrieval_from_json(const nlohmann::json& j) {
  RetrievalReport r;
  r.split = j.at("split").get<std::string>();
  r.n_queries = j.at("n_queries").get<std::size_t>();
  for (const auto& [k, v] : j.at("recall_at").items()) r.recall_at[std::stoull(k)] = v.get<double>();
  r.percent = j.at("percent").get<double>();
  r.percent_k = j.at("percent_k").get<std::size_t>();
  r.recall_at_percent = j.at("recall_at_percent").get<double>();
  r.config_hash = j.at("config_hash").get<std::string>();
  return r;
}

inline nlohmann::ordered_json to_json(const StageReport& s) {
  nlohmann::ordered_json j;
  j["stage"] = s.stage;
  j["config_hash"] = s.config_hash;
  j["epoch_losses"] = s.epoch_losses;
  nlohmann::ordered_json rounds = nlohmann::ordered_json::array();
  for (const auto& r : s.rounds)
    rounds.push_back({{"round", r.round},
                      {"threshold", r.threshold},
                      {"labels", r.labels},
                      {"correct", r.correct},
                      {"frozen", r.frozen},
                      {"precision", r.precision()},
                      {"r_at_1", r.r_at_1}});
  j["rounds"] = rounds;
  j["retrieval"] = to_json(s.retrieval);
  j["warnings"] = s.warnings;
  return j;
}

inline StageReport stage_from_json(const nlohmann::json& j) {
  StageReport s;
  s.stage = j.at("stage").get<std::string>();
  s.config_hash = j.at("config_hash").get<std::string>();
  s.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
  for (const auto& r : j.at("rounds"))
    s.rounds.push_back({r.at("round").get<int>(), r.at("threshold").get<double>(), r.at("labels").get<std::size_t>(),
                        r.at("correct").get<std::size_t>(), r.at("frozen").get<std::size_t>(),
                        r.at("r_at_1").get<double>()});
  s.retrieval = retrieval_from_json(j.at("retrieval"));
  s.warnings = j.at("warnings").get<std::vector<std::string>>();
  return s;
}

inline std::string format_stage_reports(const std::vector<StageReport>& reports) {
  nlohmann::ordered_json j;
  j["format"] = "cvgl-report";
  j["version"] = 1;
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (const auto& s : reports) stages.push_back(to_json(s));
  j["stages"] = stages;
  return j.dump(2) + "\n";
}

inline std::vector<StageReport> parse_stage_reports(const std::string& text, const std::string& source) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "cvgl-report") throw ContractError(source + ": not a report file");
    std::vector<StageReport> out;
    for (const auto& s : j.at("stages")) out.push_back(stage_from_json(s));
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(source + ": malformed report (" + e.what() + ")");
  }
}

// ---------------------------------------------------------------------------

inline std::string format_trend_csv(const std::vector<StageReport>& reports) {
  require(!reports.empty(), "emit_trend_csv: no reports");
  std::string out = "round,threshold,labels,correct,precision,r_at_1\n";
  char line[256];
  for (const auto& s : reports)
    for (const auto& r : s.rounds) {
      std::snprintf(line, sizeof line, "%d,%.6g,%zu,%zu,%.6f,%.6f\n", r.round, r.threshold, r.labels, r.correct,
                    r.precision(), r.r_at_1);
      out += line;
    }
  return out;
}

inline void emit_trend_csv(const std::vector<StageReport>& reports, const std::filesystem::path& path) {
  io::write_text(path, format_trend_csv(reports));
}

}  // namespace cvgl
