#pragma once

// Classifier/regressor compositions and their evaluation.
//
//   R   : mixed GNN
//   CR  : classifier positive → blackout-only GNN, else 0
//   CVR : as CR, but a negative whose mixed-GNN estimate exceeds the
//         verification threshold is treated as a missed blackout and sent to
//         the blackout-only GNN
//
// The "+" variants are the same compositions with GNNs trained on an
// augmented topology; the topology travels inside each GnnModel.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "blackout/cascade.hpp"
#include "blackout/error.hpp"
#include "blackout/gbt.hpp"
#include "blackout/gnn.hpp"
#include "blackout/io.hpp"
#include "json.hpp"

namespace blackout::pipeline {

enum class Variant { R, CR, CVR };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::R: return "R";
    case Variant::CR: return "CR";
    case Variant::CVR: return "CVR";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "R") return Variant::R;
  if (s == "CR") return Variant::CR;
  if (s == "CVR") return Variant::CVR;
  throw ValidationError("unknown variant '" + std::string(s) + "' (expected R, CR or CVR)");
}

/// Upper-bound probe that reads the ground truth. Only `evaluate` accepts it.
struct PerfectClassifier {};

using Classifier = std::variant<std::monostate, gbt::BoostedForest, PerfectClassifier>;

struct PipelineModel {
  Variant variant = Variant::R;
  Classifier classifier;
  std::optional<gnn::GnnModel> mixed_gnn;
  std::optional<gnn::GnnModel> blackout_gnn;
  double verification_threshold = 100.0;  // MW, compared with strict >
  double blackout_threshold = kBlackoutThreshold;

  bool has_classifier() const { return !std::holds_alternative<std::monostate>(classifier); }
  bool uses_perfect_classifier() const { return std::holds_alternative<PerfectClassifier>(classifier); }

  /// Throws ValidationError when a component required by the variant is missing.
  void check() const {
    if (!(verification_threshold > 0.0)) throw ValidationError("verification threshold must be positive");
    switch (variant) {
      case Variant::R:
        if (!mixed_gnn) throw ValidationError("variant R requires a mixed GNN");
        break;
      case Variant::CR:
        if (!has_classifier()) throw ValidationError("variant CR requires a classifier");
        if (!blackout_gnn) throw ValidationError("variant CR requires a blackout-only GNN");
        break;
      case Variant::CVR:
        if (!has_classifier()) throw ValidationError("variant CVR requires a classifier");
        if (!blackout_gnn) throw ValidationError("variant CVR requires a blackout-only GNN");
        if (!mixed_gnn) throw ValidationError("variant CVR requires a mixed GNN");
        break;
    }
  }
};

/// 1 iff the true blackout size exceeds the threshold.
inline int perfect_classifier(double true_mw, double threshold = kBlackoutThreshold) {
  return is_blackout(true_mw, threshold) ? 1 : 0;
}

/// Combine component outputs. Regressor outputs are thunks so unused ones are
/// never evaluated.
template <typename MixedFn, typename BlackoutFn>
double combine(const PipelineModel& m, std::optional<bool> positive, MixedFn&& mixed, BlackoutFn&& blackout) {
  switch (m.variant) {
    case Variant::R: return mixed();
    case Variant::CR: return *positive ? blackout() : 0.0;
    case Variant::CVR:
      if (*positive) return blackout();
      return mixed() > m.verification_threshold ? blackout() : 0.0;
  }
  return 0.0;
}

/// Deployable prediction in MW. Rejects models built on the perfect classifier.
inline double predict(const PipelineModel& m, const GridState& state, std::span<const LineId> failures) {
  m.check();
  if (m.uses_perfect_classifier()) {
    throw PreconditionError("the perfect classifier needs ground truth and is evaluation-only");
  }
  std::optional<bool> positive;
  if (const auto* forest = std::get_if<gbt::BoostedForest>(&m.classifier)) {
    positive = gbt::predict_gbt(*forest, gbt::featurize(state, failures)).positive;
  }
  auto run = [&](const gnn::GnnModel& g) { return gnn::predict_mw(g, gnn::encode(g, state, failures)); };
  return combine(
      m, positive, [&] { return run(*m.mixed_gnn); }, [&] { return run(*m.blackout_gnn); });
}

// ---------------------------------------------------------------------------
// Evaluation

struct CategoryStats {
  std::size_t count = 0;
  std::optional<double> mae;
  std::optional<double> medae;
};

inline double median(std::vector<double> v) {
  const auto n = v.size();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (n % 2) return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(v.begin(), mid);
  return 0.5 * (lower + upper);
}

inline CategoryStats error_stats(const std::vector<double>& abs_errors) {
  CategoryStats s;
  s.count = abs_errors.size();
  if (abs_errors.empty()) return s;
  double sum = 0.0;
  for (auto e : abs_errors) sum += e;
  s.mae = sum / static_cast<double>(abs_errors.size());
  s.medae = median(abs_errors);
  return s;
}

/// Denominator of the severe-error incidence: every evaluated sample, or
/// only the samples whose label could qualify (y > high for under-estimates,
/// y < low for over-estimates).
enum class IncidenceBase { AllSamples, Category };

inline const char* to_string(IncidenceBase b) { return b == IncidenceBase::AllSamples ? "all" : "category"; }

inline IncidenceBase parse_incidence_base(std::string_view s) {
  if (s == "all") return IncidenceBase::AllSamples;
  if (s == "category") return IncidenceBase::Category;
  throw ValidationError("unknown incidence base '" + std::string(s) + "' (expected all or category)");
}

struct SevereSet {
  std::size_t count = 0;
  double incidence_pct = 0.0;  // count / denominator × 100; 0 when the denominator is empty
  std::optional<double> mae;
  std::optional<double> medae;
};

struct SevereErrors {
  double low = 10.0;
  double high = 50.0;
  IncidenceBase base = IncidenceBase::AllSamples;
  SevereSet under;  // ŷ < low and y > high
  SevereSet over;   // y < low and ŷ > high
};

inline bool severe_under(double predicted, double truth, double low, double high) {
  return predicted < low && truth > high;
}

inline bool severe_over(double predicted, double truth, double low, double high) {
  return truth < low && predicted > high;
}

inline SevereErrors severe_errors(std::span<const double> predicted, std::span<const double> truth,
                                  double low = 10.0, double high = 50.0,
                                  IncidenceBase base = IncidenceBase::AllSamples) {
  if (predicted.size() != truth.size()) throw PreconditionError("predictions and labels differ in length");
  if (!(low < high)) throw PreconditionError("severe-error thresholds need low < high");
  SevereErrors out{low, high, base, {}, {}};
  std::vector<double> under, over;
  std::size_t could_under = 0, could_over = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    could_under += truth[i] > high;
    could_over += truth[i] < low;
    const double err = std::abs(predicted[i] - truth[i]);
    if (severe_under(predicted[i], truth[i], low, high)) under.push_back(err);
    if (severe_over(predicted[i], truth[i], low, high)) over.push_back(err);
  }
  auto fill = [&](const std::vector<double>& errs, std::size_t category) {
    const auto stats = error_stats(errs);
    const double total = static_cast<double>(base == IncidenceBase::AllSamples ? truth.size() : category);
    return SevereSet{errs.size(), total > 0 ? 100.0 * static_cast<double>(errs.size()) / total : 0.0, stats.mae,
                     stats.medae};
  };
  out.under = fill(under, could_under);
  out.over = fill(over, could_over);
  return out;
}

struct EvalReport {
  std::string name;
  Variant variant = Variant::R;
  CategoryStats all;
  CategoryStats blackout;
  CategoryStats non_blackout;
  SevereErrors severe;
  std::optional<gbt::Metrics> classifier;
  std::vector<double> predicted;
  std::vector<double> truth;
};

struct EvalOptions {
  double severe_low = 10.0;
  double severe_high = 50.0;
  IncidenceBase incidence = IncidenceBase::AllSamples;
  std::size_t workers = 1;
};

/// Score a model on the given samples. Categories follow the true label.
inline EvalReport evaluate(const PipelineModel& m, const SampleSet& set, std::span<const std::size_t> indices,
                           const EvalOptions& options = {}) {
  m.check();
  if (indices.empty()) throw PreconditionError("empty evaluation set");
  const auto n = indices.size();
  EvalReport report;
  report.variant = m.variant;
  report.truth.resize(n);
  for (std::size_t k = 0; k < n; ++k) report.truth[k] = set.samples[indices[k]].blackout_mw;

  std::vector<int> positive(n, 0);
  if (const auto* forest = std::get_if<gbt::BoostedForest>(&m.classifier)) {
    parallel_for(n, options.workers, [&](std::size_t k) {
      const auto& s = set.samples[indices[k]];
      positive[k] = gbt::predict_gbt(*forest, gbt::featurize(set.state_of(s), s.failures)).positive ? 1 : 0;
    });
  } else if (m.uses_perfect_classifier()) {
    for (std::size_t k = 0; k < n; ++k) positive[k] = perfect_classifier(report.truth[k], m.blackout_threshold);
  }

  auto run_all = [&](const gnn::GnnModel& g) {
    std::vector<gnn::GraphSample> graphs(n);
    parallel_for(n, options.workers, [&](std::size_t k) {
      const auto& s = set.samples[indices[k]];
      graphs[k] = gnn::encode(g, set.state_of(s), s.failures, s.blackout_mw);
    });
    return gnn::predict_many(g, graphs, 64, options.workers);
  };
  std::vector<double> mixed, blackout;
  if (m.variant != Variant::CR && m.mixed_gnn) mixed = run_all(*m.mixed_gnn);
  if (m.variant != Variant::R && m.blackout_gnn) blackout = run_all(*m.blackout_gnn);

  report.predicted.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::optional<bool> pos;
    if (m.has_classifier()) pos = positive[k] != 0;
    report.predicted[k] = combine(
        m, pos, [&] { return mixed[k]; }, [&] { return blackout[k]; });
  }

  std::vector<double> all, bo, non_bo;
  std::vector<int> labels(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double err = std::abs(report.predicted[k] - report.truth[k]);
    all.push_back(err);
    labels[k] = is_blackout(report.truth[k], m.blackout_threshold) ? 1 : 0;
    (labels[k] ? bo : non_bo).push_back(err);
  }
  report.all = error_stats(all);
  report.blackout = error_stats(bo);
  report.non_blackout = error_stats(non_bo);
  report.severe = severe_errors(report.predicted, report.truth, options.severe_low, options.severe_high,
                                options.incidence);
  if (m.has_classifier()) report.classifier = gbt::classifier_metrics(positive, labels);
  return report;
}

// ---------------------------------------------------------------------------
// Report files

namespace detail {

inline std::string cell(const std::optional<double>& v) { return v ? io::format_double(*v) : std::string(); }

inline nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace detail

/// One row shaped like the blackout-size results table.
inline std::string report_csv(const EvalReport& r) {
  using detail::cell;
  std::string out = "model,all_count,all_mae_mw,all_medae_mw,bo_count,bo_mae_mw,bo_medae_mw,"
                    "non_bo_count,non_bo_mae_mw,non_bo_medae_mw\n";
  out += r.name + "," + std::to_string(r.all.count) + "," + cell(r.all.mae) + "," + cell(r.all.medae) + "," +
         std::to_string(r.blackout.count) + "," + cell(r.blackout.mae) + "," + cell(r.blackout.medae) + "," +
         std::to_string(r.non_blackout.count) + "," + cell(r.non_blackout.mae) + "," +
         cell(r.non_blackout.medae) + "\n";
  return out;
}

/// Severe under/over-estimate statistics.
inline std::string severe_csv(const EvalReport& r) {
  using detail::cell;
  std::string out = "model,kind,low_mw,high_mw,incidence_base,count,incidence_pct,mae_mw,medae_mw\n";
  auto row = [&](const char* kind, const SevereSet& s) {
    out += r.name + "," + kind + "," + io::format_double(r.severe.low) + "," + io::format_double(r.severe.high) +
           "," + to_string(r.severe.base) + "," + std::to_string(s.count) + "," + io::format_double(s.incidence_pct) + "," + cell(s.mae) + "," +
           cell(s.medae) + "\n";
  };
  row("under", r.severe.under);
  row("over", r.severe.over);
  return out;
}

inline std::string parity_csv(const EvalReport& r) {
  std::string out = "predicted_mw,true_mw\n";
  for (std::size_t i = 0; i < r.truth.size(); ++i) {
    out += io::format_double(r.predicted[i]) + "," + io::format_double(r.truth[i]) + "\n";
  }
  return out;
}

inline nlohmann::json report_json(const EvalReport& r) {
  using detail::opt;
  auto cat = [](const CategoryStats& c) {
    return nlohmann::json{{"count", c.count}, {"mae_mw", opt(c.mae)}, {"medae_mw", opt(c.medae)}};
  };
  auto sev = [](const SevereSet& s) {
    return nlohmann::json{{"count", s.count}, {"incidence_pct", s.incidence_pct}, {"mae_mw", opt(s.mae)},
                          {"medae_mw", opt(s.medae)}};
  };
  nlohmann::json j{{"model", r.name},
                   {"variant", to_string(r.variant)},
                   {"all", cat(r.all)},
                   {"blackout", cat(r.blackout)},
                   {"non_blackout", cat(r.non_blackout)},
                   {"severe",
                    {{"low_mw", r.severe.low},
                     {"high_mw", r.severe.high},
                     {"incidence_base", to_string(r.severe.base)},
                     {"under", sev(r.severe.under)},
                     {"over", sev(r.severe.over)}}}};
  if (r.classifier) {
    const auto& c = *r.classifier;
    j["classifier"] = {{"tp", c.tp},          {"fp", c.fp},
                       {"tn", c.tn},          {"fn", c.fn},
                       {"accuracy", c.accuracy}, {"precision", opt(c.precision)},
                       {"recall", opt(c.recall)}, {"f1", opt(c.f1)}};
  }
  return j;
}

}  // namespace blackout::pipeline
