/**
 * @file analysis.hpp
 * @brief Rating instruments (performance items, IOS, sFSS), the ratings CSV,
 *        and the paired-contrast estimator of condition effects.
 */

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace duet {

class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ============================================================================
// Instruments
// ============================================================================

inline constexpr int kSfssItems = 9;

struct RatingForm {
  int musicality = 4;
  int realism = 4;
  int ease_to_interact = 4;
  int creativity_improvisation = 4;
  int enjoyable = 4;
  int interesting = 4;
  int ios = 3;
  std::array<int, kSfssItems> sfss_items{3, 3, 3, 3, 3, 3, 3, 3, 3};

  bool operator==(const RatingForm&) const = default;
};

/// Performance item names in questionnaire order, paired with their fields.
inline const std::array<std::pair<const char*, int RatingForm::*>, 6>& performance_items() {
  static const std::array<std::pair<const char*, int RatingForm::*>, 6> items = {{
      {"musicality", &RatingForm::musicality},
      {"realism", &RatingForm::realism},
      {"ease_to_interact", &RatingForm::ease_to_interact},
      {"creativity_improvisation", &RatingForm::creativity_improvisation},
      {"enjoyable", &RatingForm::enjoyable},
      {"interesting", &RatingForm::interesting},
  }};
  return items;
}

/// Mean of the nine flow items; throws on a missing or out-of-range item.
inline double score_sfss(const std::vector<int>& items) {
  if (items.size() != kSfssItems) {
    throw AnalysisError("sfss needs 9 items, got " + std::to_string(items.size()));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i] < 1 || items[i] > 5) {
      throw AnalysisError("sfss_items[" + std::to_string(i) + "] out of range 1..5");
    }
    sum += items[i];
  }
  return sum / kSfssItems;
}

inline double score_sfss(const std::array<int, kSfssItems>& items) {
  return score_sfss(std::vector<int>(items.begin(), items.end()));
}

/// Range violations as "<field> < lo" / "<field> > hi"; empty when valid.
inline std::vector<std::string> validate_form(const RatingForm& form) {
  std::vector<std::string> out;
  auto check = [&out](const std::string& name, int v, int lo, int hi) {
    if (v < lo) out.push_back(name + " < " + std::to_string(lo));
    if (v > hi) out.push_back(name + " > " + std::to_string(hi));
  };
  for (const auto& [name, field] : performance_items()) check(name, form.*field, 1, 7);
  check("ios", form.ios, 0, 6);
  for (int i = 0; i < kSfssItems; ++i) check("sfss_items[" + std::to_string(i) + "]", form.sfss_items[i], 1, 5);
  return out;
}

inline void to_json(nlohmann::json& j, const RatingForm& f) {
  j = nlohmann::json::object();
  for (const auto& [name, field] : performance_items()) j[name] = f.*field;
  j["ios"] = f.ios;
  j["sfss_items"] = f.sfss_items;
}

inline void from_json(const nlohmann::json& j, RatingForm& f) {
  for (const auto& [name, field] : performance_items()) f.*field = j.at(name).get<int>();
  f.ios = j.at("ios").get<int>();
  const auto items = j.at("sfss_items").get<std::vector<int>>();
  if (items.size() != kSfssItems) throw AnalysisError("sfss_items must have 9 entries");
  std::copy(items.begin(), items.end(), f.sfss_items.begin());
}

// ============================================================================
// Conditions and rows
// ============================================================================

/// One design cell: the human baseline or a (bars, temperature, similarity)
/// partner configuration.
struct Condition {
  bool human = true;
  int bars = 2;
  bool high_temperature = false;
  bool high_similarity = false;

  static Condition baseline() { return {}; }
  static Condition partner(int bars, bool high_t, bool high_s) { return {false, bars, high_t, high_s}; }

  /// "H", "2B-T+S", ...
  std::string label() const {
    if (human) return "H";
    return std::to_string(bars) + "B" + (high_temperature ? "+T" : "-T") + (high_similarity ? "+S" : "-S");
  }

  /// "Baseline (Human)", "2Bar -Temp +Sim", ...
  std::string long_label() const {
    if (human) return "Baseline (Human)";
    return std::to_string(bars) + "Bar " + (high_temperature ? "+Temp " : "-Temp ") +
           (high_similarity ? "+Sim" : "-Sim");
  }

  bool operator==(const Condition& o) const { return label() == o.label(); }
  bool operator<(const Condition& o) const { return order() < o.order(); }

  /// Position in the report: baseline first, then the eight partner cells.
  int order() const;
};

inline const std::vector<Condition>& all_conditions() {
  static const std::vector<Condition> cells = {
      Condition::baseline(),
      Condition::partner(2, false, true),
      Condition::partner(2, true, false),
      Condition::partner(2, false, false),
      Condition::partner(2, true, true),
      Condition::partner(4, false, true),
      Condition::partner(4, true, false),
      Condition::partner(4, false, false),
      Condition::partner(4, true, true),
  };
  return cells;
}

inline int Condition::order() const {
  const auto& cells = all_conditions();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].label() == label()) return static_cast<int>(i);
  }
  return static_cast<int>(cells.size());
}

inline Condition parse_condition(const std::string& token) {
  for (const auto& c : all_conditions()) {
    if (c.label() == token) return c;
  }
  throw AnalysisError("unknown condition '" + token + "'");
}

struct RatingRow {
  std::string participant;
  Condition condition;
  std::string measure;
  double value = 0.0;
  std::map<std::string, std::string> extra;  // unknown CSV columns

  bool operator==(const RatingRow&) const = default;
};

/// Expands one submitted form into rows: six items, "ios", and "sfss".
inline std::vector<RatingRow> form_rows(const std::string& participant, const Condition& condition,
                                        const RatingForm& form) {
  std::vector<RatingRow> rows;
  for (const auto& [name, field] : performance_items()) rows.push_back({participant, condition, name, double(form.*field), {}});
  rows.push_back({participant, condition, "ios", static_cast<double>(form.ios), {}});
  rows.push_back({participant, condition, "sfss", score_sfss(form.sfss_items), {}});
  return rows;
}

// ============================================================================
// Ratings CSV
// ============================================================================

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw AnalysisError("unterminated quote in CSV line");
  fields.push_back(cur);
  return fields;
}

}  // namespace detail

/// Reads `participant,condition,measure,value` (any column order, extra
/// columns kept in RatingRow::extra).
inline std::vector<RatingRow> read_ratings_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw AnalysisError("ratings CSV is empty");
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"participant", "condition", "measure", "value"}) {
    if (!col.count(need)) throw AnalysisError(std::string("ratings CSV missing column '") + need + "'");
  }

  std::vector<RatingRow> rows;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size()) {
      throw AnalysisError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                          " fields");
    }
    RatingRow row;
    row.participant = f[col["participant"]];
    row.condition = parse_condition(f[col["condition"]]);
    row.measure = f[col["measure"]];
    try {
      std::size_t used = 0;
      row.value = std::stod(f[col["value"]], &used);
      if (used != f[col["value"]].size()) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
      throw AnalysisError("line " + std::to_string(line_no) + ": bad value '" + f[col["value"]] + "'");
    }
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] != "participant" && header[i] != "condition" && header[i] != "measure" && header[i] != "value") {
        row.extra[header[i]] = f[i];
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_ratings_csv(std::ostream& os, const std::vector<RatingRow>& rows) {
  os << "participant,condition,measure,value\n";
  os << std::setprecision(17);
  for (const auto& r : rows) os << r.participant << ',' << r.condition.label() << ',' << r.measure << ',' << r.value << '\n';
}

// ============================================================================
// Paired-contrast estimator
// ============================================================================

struct ConditionEffect {
  Condition condition;
  double estimate = 0.0;
  std::optional<double> std_error;  // absent when fewer than 2 participants
  int n_participants = 0;
};

struct EffectTable {
  std::string measure;
  double baseline_mean = 0.0;
  std::optional<double> baseline_std_error;
  int n_baseline = 0;
  std::vector<ConditionEffect> effects;  // report order
  std::vector<std::string> warnings;
};

inline std::vector<std::string> default_exclusions() { return {"musicality", "interesting"}; }

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation / sqrt(n); absent for n < 2.
inline std::optional<double> standard_error(const std::vector<double>& v) {
  if (v.size() < 2) return std::nullopt;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
}

}  // namespace detail

/// baseline_i = participant i's mean Human rating; effect_c = mean over
/// participants of (mean_i(c) - baseline_i); std_error = sd / sqrt(n).
inline EffectTable estimate_effects(const std::vector<RatingRow>& rows, const std::string& measure) {
  // participant -> condition label -> ratings
  std::map<std::string, std::map<std::string, std::vector<double>>> cells;
  std::map<std::string, Condition> conditions;
  for (const auto& r : rows) {
    if (r.measure != measure) continue;
    cells[r.participant][r.condition.label()].push_back(r.value);
    conditions[r.condition.label()] = r.condition;
  }
  if (cells.empty()) throw AnalysisError("no ratings for measure '" + measure + "'");

  EffectTable table;
  table.measure = measure;
  std::map<std::string, double> baseline;
  for (const auto& [pid, by_cond] : cells) {
    const auto it = by_cond.find("H");
    if (it == by_cond.end()) {
      table.warnings.push_back("participant " + pid + " has no human-baseline rating for " + measure + "; excluded");
      continue;
    }
    baseline[pid] = detail::mean_of(it->second);
  }
  if (baseline.empty()) throw AnalysisError("no participant has a human-baseline rating for '" + measure + "'");

  std::vector<double> bases;
  for (const auto& [pid, b] : baseline) bases.push_back(b);
  table.baseline_mean = detail::mean_of(bases);
  table.baseline_std_error = detail::standard_error(bases);
  table.n_baseline = static_cast<int>(bases.size());

  std::vector<Condition> present;
  for (const auto& [label, c] : conditions) {
    if (!c.human) present.push_back(c);
  }
  std::sort(present.begin(), present.end());
  for (const auto& c : present) {
    std::vector<double> diffs;
    for (const auto& [pid, b] : baseline) {
      const auto& by_cond = cells[pid];
      const auto it = by_cond.find(c.label());
      if (it != by_cond.end()) diffs.push_back(detail::mean_of(it->second) - b);
    }
    if (diffs.empty()) continue;
    table.effects.push_back({c, detail::mean_of(diffs), detail::standard_error(diffs), static_cast<int>(diffs.size())});
  }
  return table;
}

inline double reconstruct_condition_mean(double baseline, double effect) { return baseline + effect; }

/// Canonical measure order: six items, ios, sfss, then anything else by name.
inline std::vector<std::string> measures_present(const std::vector<RatingRow>& rows) {
  std::vector<std::string> order;
  for (const auto& [name, field] : performance_items()) order.push_back(name);
  order.push_back("ios");
  order.push_back("sfss");
  std::set<std::string> seen;
  for (const auto& r : rows) seen.insert(r.measure);
  std::vector<std::string> out;
  for (const auto& m : order) {
    if (seen.erase(m)) out.push_back(m);
  }
  out.insert(out.end(), seen.begin(), seen.end());
  return out;
}

/// One table per measure present, minus the exclusions.
inline std::vector<EffectTable> analyze(const std::vector<RatingRow>& rows,
                                        const std::vector<std::string>& exclusions = default_exclusions()) {
  if (rows.empty()) throw AnalysisError("no ratings");
  std::vector<EffectTable> out;
  for (const auto& m : measures_present(rows)) {
    if (std::find(exclusions.begin(), exclusions.end(), m) != exclusions.end()) continue;
    out.push_back(estimate_effects(rows, m));
  }
  return out;
}

/// Aligned text table: a baseline row and one row per partner cell, each
/// entry "estimate (se)".
inline std::string format_report(const std::vector<EffectTable>& tables) {
  auto fixed3 = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << v;
    return s.str();
  };
  auto cell = [&](double v, const std::optional<double>& se) {
    return fixed3(v) + " (" + (se ? fixed3(*se) : std::string("n/a")) + ")";
  };
  constexpr int kLabelWidth = 20;
  constexpr int kColWidth = 26;

  std::ostringstream os;
  os << "contrast estimate vs human baseline (standard errors in brackets)\n";
  os << std::left << std::setw(kLabelWidth) << "";
  for (const auto& t : tables) os << std::setw(kColWidth) << t.measure;
  os << '\n';
  for (const auto& c : all_conditions()) {
    std::ostringstream line;
    line << std::left << std::setw(kLabelWidth) << c.long_label();
    bool any = false;
    for (const auto& t : tables) {
      std::string text = "-";
      if (c.human) {
        text = cell(t.baseline_mean, t.baseline_std_error);
        any = true;
      } else {
        for (const auto& e : t.effects) {
          if (e.condition == c) {
            text = cell(e.estimate, e.std_error);
            any = true;
          }
        }
      }
      line << std::setw(kColWidth) << text;
    }
    if (any) os << line.str() << '\n';
  }
  for (const auto& t : tables) {
    for (const auto& w : t.warnings) os << "warning: " << w << '\n';
  }
  return os.str();
}

}  // namespace duet
