#pragma once

#include <algorithm>
#include <cctype>
#include <istream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "atnf/core.hpp"

namespace atnf {

// Object-hallucination and yes/no probing scores over pre-extracted annotations.

struct caption_annotation {
  std::string id;
  std::set<std::string> mentioned;
  std::set<std::string> truth;
};

struct chair_result {
  std::optional<real> chair_i;  // hallucinated mentions / all mentions
  std::optional<real> chair_s;  // captions with a hallucination / captions
  std::optional<real> recall;   // (caption, truth object) pairs mentioned / all such pairs
  std::size_t captions = 0, mentions = 0, hallucinated = 0, truth_pairs = 0, covered = 0;
};

inline std::string normalize_object(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return s;
}

inline chair_result chair_scores(const std::vector<caption_annotation>& anns) {
  if (anns.empty()) throw contract_error("chair_scores: no annotations");
  chair_result r;
  std::size_t bad_captions = 0;
  for (const auto& a : anns) {
    std::set<std::string> truth, mentioned;
    for (const auto& t : a.truth) truth.insert(normalize_object(t));
    for (const auto& m : a.mentioned) mentioned.insert(normalize_object(m));
    std::size_t bad = 0;
    for (const auto& m : mentioned)
      if (!truth.count(m)) ++bad;
    for (const auto& t : truth)
      if (mentioned.count(t)) ++r.covered;
    r.mentions += mentioned.size();
    r.hallucinated += bad;
    r.truth_pairs += truth.size();
    if (bad) ++bad_captions;
  }
  r.captions = anns.size();
  if (r.mentions) r.chair_i = static_cast<real>(r.hallucinated) / static_cast<real>(r.mentions);
  r.chair_s = static_cast<real>(bad_captions) / static_cast<real>(r.captions);
  if (r.truth_pairs) r.recall = static_cast<real>(r.covered) / static_cast<real>(r.truth_pairs);
  return r;
}

struct pope_record {
  std::string id;
  bool pred = false;  // true = "yes"
  bool label = false;
};

struct pope_result {
  std::optional<real> accuracy, precision, recall, f1;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline pope_result pope_scores(const std::vector<pope_record>& recs) {
  if (recs.empty()) throw contract_error("pope_scores: no records");
  pope_result r;
  for (const auto& x : recs) {
    if (x.pred && x.label) ++r.tp;
    else if (x.pred) ++r.fp;
    else if (x.label) ++r.fn;
    else ++r.tn;
  }
  r.accuracy = static_cast<real>(r.tp + r.tn) / static_cast<real>(recs.size());
  if (r.tp + r.fp) r.precision = static_cast<real>(r.tp) / static_cast<real>(r.tp + r.fp);
  if (r.tp + r.fn) r.recall = static_cast<real>(r.tp) / static_cast<real>(r.tp + r.fn);
  if (r.precision && r.recall && *r.precision + *r.recall > 0)
    r.f1 = 2 * *r.precision * *r.recall / (*r.precision + *r.recall);
  return r;
}

namespace detail {

// Calls fn(json, line_number) for every non-blank line.
template <typename Fn>
void for_each_jsonl(std::istream& is, Fn&& fn) {
  std::string line;
  std::size_t lineno = 0, records = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw format_error("line " + std::to_string(lineno) + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw format_error("line " + std::to_string(lineno) + ": expected a JSON object");
    try {
      fn(j, lineno);
    } catch (const nlohmann::json::exception& e) {
      throw format_error("line " + std::to_string(lineno) + ": " + e.what());
    }
    ++records;
  }
  if (records == 0) throw format_error("input holds no records");
}

inline std::string id_field(const nlohmann::json& j) {
  const auto& v = j.at("id");
  return v.is_string() ? v.get<std::string>() : v.dump();
}

inline bool yes_no(const nlohmann::json& j, const char* key, std::size_t lineno) {
  const auto s = normalize_object(j.at(key).get<std::string>());
  if (s == "yes") return true;
  if (s == "no") return false;
  throw format_error("line " + std::to_string(lineno) + ": field '" + key + "' must be yes or no");
}

}  // namespace detail

// {"id", "mentioned": [...], "truth": [...]}
inline std::vector<caption_annotation> read_caption_annotations(std::istream& is) {
  std::vector<caption_annotation> out;
  detail::for_each_jsonl(is, [&](const nlohmann::json& j, std::size_t) {
    caption_annotation a;
    a.id = detail::id_field(j);
    for (const auto& m : j.at("mentioned")) a.mentioned.insert(normalize_object(m.get<std::string>()));
    for (const auto& t : j.at("truth")) a.truth.insert(normalize_object(t.get<std::string>()));
    out.push_back(std::move(a));
  });
  return out;
}

// {"id", "pred": "yes|no", "label": "yes|no"}
inline std::vector<pope_record> read_pope_records(std::istream& is) {
  std::vector<pope_record> out;
  detail::for_each_jsonl(is, [&](const nlohmann::json& j, std::size_t lineno) {
    out.push_back({detail::id_field(j), detail::yes_no(j, "pred", lineno), detail::yes_no(j, "label", lineno)});
  });
  return out;
}

}  // namespace atnf
