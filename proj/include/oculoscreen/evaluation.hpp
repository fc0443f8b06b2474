#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "oculoscreen/capture.hpp"
#include "oculoscreen/classifier.hpp"
#include "oculoscreen/random.hpp"

namespace oculoscreen {

// ---- fold planning ----

struct FoldPlan {
  int k = 5;
  std::uint64_t seed = 0;
  std::map<std::string, int> assignment;

  std::vector<std::string> fold(int f) const {
    std::vector<std::string> ids;
    for (const auto& [id, fi] : assignment)
      if (fi == f) ids.push_back(id);
    return ids;
  }
};

// Stratified, identity-disjoint plan. Within each cohort (fixed cohort
// order) identities are sorted, shuffled by seed and dealt round-robin; the
// deal position carries over between cohorts so overall fold sizes differ
// by at most one as well.
inline FoldPlan make_folds(std::span<const std::pair<std::string, CohortLabel>> identities, int k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorCode::kInvalidArgument, "k must be >= 2");
  std::map<std::string, CohortLabel> unique;
  for (const auto& [id, c] : identities) {
    auto [it, inserted] = unique.emplace(id, c);
    if (!inserted && it->second != c)
      throw Error(ErrorCode::kDuplicateIdentity, "identity '" + id + "' has two cohort labels");
  }
  std::map<CohortLabel, std::vector<std::string>> by_cohort;
  for (const auto& [id, c] : unique) by_cohort[c].push_back(id);
  for (const auto& [c, ids] : by_cohort)
    if (static_cast<int>(ids.size()) < k)
      throw Error(ErrorCode::kCohortTooSmall, std::string(to_string(c)) + " has " + std::to_string(ids.size()) +
                                                  " identities, fewer than k=" + std::to_string(k));
  FoldPlan plan{k, seed, {}};
  int next = 0;
  for (CohortLabel c : kAllCohorts) {
    auto it = by_cohort.find(c);
    if (it == by_cohort.end()) continue;
    auto& ids = it->second;
    Rng rng = Rng::derive(seed, 0xF01D, static_cast<std::uint64_t>(c));
    rng.shuffle(std::span<std::string>(ids));
    for (const auto& id : ids) {
      plan.assignment[id] = next;
      next = (next + 1) % k;
    }
  }
  return plan;
}

// ---- metrics ----

using Ratio = std::optional<double>;

struct EvalTaxonomy {
  std::array<Taxonomy, kNumCohorts> mapping = {Taxonomy::kCovid, Taxonomy::kOther, Taxonomy::kOther,
                                               Taxonomy::kNegative};

  Taxonomy operator()(CohortLabel c) const { return mapping[static_cast<std::size_t>(c)]; }
  static bool positive(Taxonomy t) { return t != Taxonomy::kNegative; }
};

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (FPR, TPR)
  double auc = 0.0;
};

// Sweeps thresholds over the unique scores, highest first; tied scores
// move together so ties contribute a diagonal segment.
inline RocCurve roc_auc(std::span<const double> scores, std::span<const bool> is_target) {
  if (scores.size() != is_target.size()) throw Error(ErrorCode::kInvalidArgument, "scores and labels differ in length");
  const auto pos = std::count(is_target.begin(), is_target.end(), true);
  const auto neg = static_cast<long>(is_target.size()) - pos;
  if (pos == 0 || neg == 0) throw Error(ErrorCode::kOneClassOnly, "ROC needs both target and non-target scores");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  RocCurve roc;
  roc.points.emplace_back(0.0, 0.0);
  long tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (is_target[order[i]] ? tp : fp) += 1;
    roc.points.emplace_back(static_cast<double>(fp) / neg, static_cast<double>(tp) / pos);
  }
  for (std::size_t i = 1; i < roc.points.size(); ++i) {
    const auto [x0, y0] = roc.points[i - 1];
    const auto [x1, y1] = roc.points[i];
    roc.auc += (x1 - x0) * (y0 + y1) / 2.0;
  }
  return roc;
}

struct MetricsReport {
  long n = 0;
  long positives = 0;
  long negatives = 0;
  Ratio sensitivity, specificity, accuracy, fpe, fne, fdpe;
  // Cohort-level recall: fraction of a cohort predicted as that cohort.
  std::map<CohortLabel, Ratio> per_group_sensitivity;
  std::map<CohortLabel, Ratio> per_group_auc;
  std::map<Taxonomy, Ratio> taxonomy_auc;
  std::map<CohortLabel, RocCurve> roc_curves;
  // [truth][predicted], indexed by CohortLabel value.
  std::array<std::array<long, kNumCohorts>, kNumCohorts> confusion{};
};

inline Ratio ratio(long num, long den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

inline MetricsReport compute_metrics(std::span<const CohortLabel> truths, std::span<const Prediction> preds,
                                     const EvalTaxonomy& tax = {}) {
  if (truths.size() != preds.size() || truths.empty())
    throw Error(ErrorCode::kInvalidArgument, "truths and predictions must have equal non-zero length");
  MetricsReport r;
  r.n = static_cast<long>(truths.size());
  long tp = 0, tn = 0, fp = 0, fn = 0, wrong_type = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const Taxonomy t = tax(truths[i]);
    const Taxonomy p = tax(preds[i].predicted_cohort);
    r.confusion[static_cast<std::size_t>(truths[i])][static_cast<std::size_t>(preds[i].predicted_cohort)] += 1;
    const bool tpos = EvalTaxonomy::positive(t), ppos = EvalTaxonomy::positive(p);
    if (tpos) {
      ++r.positives;
      if (ppos) {
        ++tp;
        if (p != t) ++wrong_type;
      } else {
        ++fn;
      }
    } else {
      ++r.negatives;
      (ppos ? fp : tn) += 1;
    }
  }
  r.sensitivity = ratio(tp, r.positives);
  r.specificity = ratio(tn, r.negatives);
  r.accuracy = ratio(tp + tn, r.n);
  r.fpe = ratio(fp, r.negatives);
  r.fne = ratio(fn, r.positives);
  r.fdpe = ratio(wrong_type, r.positives);

  for (CohortLabel c : kAllCohorts) {
    const auto ci = static_cast<std::size_t>(c);
    long members = 0;
    for (std::size_t j = 0; j < kNumCohorts; ++j) members += r.confusion[ci][j];
    r.per_group_sensitivity[c] = ratio(r.confusion[ci][ci], members);

    if (members == 0 || members == r.n) {
      r.per_group_auc[c] = std::nullopt;
      continue;
    }
    std::vector<double> scores;
    std::unique_ptr<bool[]> flags(new bool[truths.size()]);
    for (std::size_t i = 0; i < truths.size(); ++i) {
      scores.push_back(preds[i].prob(c));
      flags[i] = truths[i] == c;
    }
    RocCurve roc = roc_auc(scores, std::span<const bool>(flags.get(), truths.size()));
    r.per_group_auc[c] = roc.auc;
    r.roc_curves[c] = std::move(roc);
  }

  for (Taxonomy t : {Taxonomy::kNegative, Taxonomy::kCovid, Taxonomy::kOther}) {
    std::vector<double> scores;
    std::unique_ptr<bool[]> flags(new bool[truths.size()]);
    long members = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
      double s = 0.0;
      for (CohortLabel c : kAllCohorts)
        if (tax(c) == t) s += preds[i].prob(c);
      scores.push_back(s);
      flags[i] = tax(truths[i]) == t;
      members += flags[i];
    }
    r.taxonomy_auc[t] =
        (members == 0 || members == r.n) ? Ratio{} : Ratio{roc_auc(scores, std::span<const bool>(flags.get(), truths.size())).auc};
  }
  return r;
}

// ---- cross-validation ----

struct CvOptions {
  int k = 5;
  std::vector<std::uint64_t> seeds = {0};
  TrainConfig train;
  PipelineConfig pipeline;
  int jobs = 1;
  // Called after every finished fold (from the worker thread).
  std::function<void(const std::string&)> progress;
};

struct OutOfFold {
  std::string identity_id;
  std::string session_id;
  CohortLabel truth = CohortLabel::kHealthy;
  int repeat = 0;
  int fold = 0;
  Prediction prediction;
  GridAttribution attribution;
};

struct FoldResult {
  int repeat = 0;
  std::uint64_t seed = 0;
  int fold = 0;
  MetricsReport metrics;
  TrainingMeta training;
  double sparsity = 0.0;
};

struct CvResult {
  int k = 5;
  std::vector<std::uint64_t> seeds;
  std::vector<FoldResult> folds;
  MetricsReport average;
  std::vector<OutOfFold> predictions;
};

namespace detail {

inline Ratio mean_defined(const std::vector<Ratio>& values) {
  double sum = 0.0;
  long n = 0;
  for (const auto& v : values)
    if (v) sum += *v, ++n;
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

}  // namespace detail

// Arithmetic mean of per-fold ratios (undefined entries skipped), summed
// confusion counts, ROC curves pooled over all out-of-fold predictions.
inline MetricsReport average_reports(std::span<const FoldResult> folds, std::span<const OutOfFold> pooled) {
  MetricsReport avg;
  auto collect = [&](auto member) {
    std::vector<Ratio> v;
    for (const auto& f : folds) v.push_back(f.metrics.*member);
    return detail::mean_defined(v);
  };
  avg.sensitivity = collect(&MetricsReport::sensitivity);
  avg.specificity = collect(&MetricsReport::specificity);
  avg.accuracy = collect(&MetricsReport::accuracy);
  avg.fpe = collect(&MetricsReport::fpe);
  avg.fne = collect(&MetricsReport::fne);
  avg.fdpe = collect(&MetricsReport::fdpe);
  for (const auto& f : folds) {
    avg.n += f.metrics.n;
    avg.positives += f.metrics.positives;
    avg.negatives += f.metrics.negatives;
    for (std::size_t i = 0; i < kNumCohorts; ++i)
      for (std::size_t j = 0; j < kNumCohorts; ++j) avg.confusion[i][j] += f.metrics.confusion[i][j];
  }
  for (CohortLabel c : kAllCohorts) {
    std::vector<Ratio> auc, sens;
    for (const auto& f : folds) {
      auc.push_back(f.metrics.per_group_auc.at(c));
      sens.push_back(f.metrics.per_group_sensitivity.at(c));
    }
    avg.per_group_auc[c] = detail::mean_defined(auc);
    avg.per_group_sensitivity[c] = detail::mean_defined(sens);
  }
  for (Taxonomy t : {Taxonomy::kNegative, Taxonomy::kCovid, Taxonomy::kOther}) {
    std::vector<Ratio> v;
    for (const auto& f : folds) v.push_back(f.metrics.taxonomy_auc.at(t));
    avg.taxonomy_auc[t] = detail::mean_defined(v);
  }
  if (!pooled.empty()) {
    std::vector<CohortLabel> truths;
    std::vector<Prediction> preds;
    for (const auto& o : pooled) {
      truths.push_back(o.truth);
      preds.push_back(o.prediction);
    }
    avg.roc_curves = compute_metrics(truths, preds).roc_curves;
  }
  return avg;
}

// Preprocesses every session once, then for each seed and fold trains on
// k-2 folds, early-stops on fold (f+1) mod k and tests on fold f.
inline CvResult cross_validate(const DatasetManifest& manifest, const std::filesystem::path& base_dir,
                               const CvOptions& opt) {
  manifest.quality_policy.check();
  std::vector<PersonCells> people;
  people.reserve(manifest.sessions.size());
  std::vector<std::pair<std::string, CohortLabel>> identities;
  for (const auto& s : manifest.sessions) {
    if (!s.cohort) throw Error(ErrorCode::kInvalidArgument, "session " + s.session_id + " has no cohort label");
    const auto violations = validate_session(s, manifest.quality_policy, base_dir);
    if (!violations.empty())
      throw Error(ErrorCode::kValidationFailed, "session " + s.session_id + ": " + describe(violations.front()));
    people.push_back(prepare_person(s, base_dir, opt.pipeline));
    identities.emplace_back(s.identity_id, *s.cohort);
  }

  struct Task {
    int repeat;
    std::uint64_t seed;
    int fold;
  };
  std::vector<FoldPlan> plans;
  std::vector<Task> tasks;
  for (std::size_t r = 0; r < opt.seeds.size(); ++r) {
    plans.push_back(make_folds(identities, opt.k, opt.seeds[r]));
    for (int f = 0; f < opt.k; ++f) tasks.push_back({static_cast<int>(r), opt.seeds[r], f});
  }

  CvResult result;
  result.k = opt.k;
  result.seeds = opt.seeds;
  result.folds.resize(tasks.size());
  std::vector<std::vector<OutOfFold>> oof(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());

  auto run = [&](std::size_t t) {
    const Task& task = tasks[t];
    const FoldPlan& plan = plans[task.repeat];
    const int val_fold = (task.fold + 1) % opt.k;
    std::vector<const PersonCells*> tr, va, te;
    for (const auto& p : people) {
      const int f = plan.assignment.at(p.identity_id);
      (f == task.fold ? te : f == val_fold ? va : tr).push_back(&p);
    }
    TrainConfig tc = opt.train;
    tc.seed = opt.train.seed ^ (task.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(task.fold) + 1);
    const TrainResult trained = train(tr, va, tc, opt.pipeline);
    const auto preds = predict_batch(trained.bundle, te);
    std::vector<CohortLabel> truths;
    for (std::size_t i = 0; i < te.size(); ++i) {
      truths.push_back(*te[i]->cohort);
      oof[t].push_back({te[i]->identity_id, te[i]->session_id, *te[i]->cohort, task.repeat, task.fold, preds[i],
                        grid_attribution(trained.bundle, *te[i])});
    }
    result.folds[t] = {task.repeat, task.seed, task.fold, compute_metrics(truths, preds), trained.bundle.meta,
                       trained.bundle.sparsity()};
    if (opt.progress) {
      char buf[160];
      const auto& m = result.folds[t].metrics;
      std::snprintf(buf, sizeof buf, "seed %llu fold %d/%d: n=%ld accuracy=%.3f COVID recall=%.3f epochs=%d",
                    static_cast<unsigned long long>(task.seed), task.fold + 1, opt.k, m.n, m.accuracy.value_or(-1),
                    m.per_group_sensitivity.at(CohortLabel::kCovid).value_or(-1), trained.bundle.meta.epochs_run);
      opt.progress(buf);
    }
  };

  const int jobs = std::max(1, std::min<int>(opt.jobs, static_cast<int>(tasks.size())));
  if (jobs == 1) {
    for (std::size_t t = 0; t < tasks.size(); ++t) run(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (int j = 0; j < jobs; ++j)
      workers.emplace_back([&] {
        for (std::size_t t; (t = next.fetch_add(1)) < tasks.size();) {
          try {
            run(t);
          } catch (...) {
            errors[t] = std::current_exception();
          }
        }
      });
    for (auto& w : workers) w.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  for (auto& v : oof)
    for (auto& o : v) result.predictions.push_back(std::move(o));
  result.average = average_reports(result.folds, result.predictions);
  return result;
}

// ---- report files ----

namespace detail {

inline json ratio_json(const Ratio& r) { return r ? json(*r) : json("undefined"); }

inline std::string ratio_text(const Ratio& r) {
  if (!r) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *r);
  return buf;
}

}  // namespace detail

inline json to_json_value(const MetricsReport& r, bool with_curves) {
  json j = {{"n", r.n},
            {"positives", r.positives},
            {"negatives", r.negatives},
            {"sensitivity", detail::ratio_json(r.sensitivity)},
            {"specificity", detail::ratio_json(r.specificity)},
            {"accuracy", detail::ratio_json(r.accuracy)},
            {"fpe", detail::ratio_json(r.fpe)},
            {"fne", detail::ratio_json(r.fne)},
            {"fdpe", detail::ratio_json(r.fdpe)}};
  json auc = json::object(), sens = json::object(), tax = json::object(), conf = json::object();
  for (CohortLabel c : kAllCohorts) {
    auc[std::string(to_string(c))] = detail::ratio_json(r.per_group_auc.count(c) ? r.per_group_auc.at(c) : Ratio{});
    sens[std::string(to_string(c))] =
        detail::ratio_json(r.per_group_sensitivity.count(c) ? r.per_group_sensitivity.at(c) : Ratio{});
    json row = json::object();
    for (CohortLabel p : kAllCohorts)
      row[std::string(to_string(p))] = r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(p)];
    conf[std::string(to_string(c))] = row;
  }
  for (const auto& [t, v] : r.taxonomy_auc) tax[std::string(to_string(t))] = detail::ratio_json(v);
  j["per_group_auc"] = auc;
  j["per_group_sensitivity"] = sens;
  j["taxonomy_auc"] = tax;
  j["confusion"] = conf;
  if (with_curves) {
    json curves = json::object();
    for (const auto& [c, roc] : r.roc_curves) {
      json pts = json::array();
      for (const auto& [x, y] : roc.points) pts.push_back({x, y});
      curves[std::string(to_string(c))] = {{"auc", roc.auc}, {"points", pts}};
    }
    j["roc_curves"] = curves;
  }
  return j;
}

inline json to_json_value(const CvResult& r) {
  json folds = json::array();
  for (const auto& f : r.folds)
    folds.push_back({{"repeat", f.repeat},
                     {"seed", f.seed},
                     {"fold", f.fold},
                     {"metrics", to_json_value(f.metrics, false)},
                     {"training",
                      {{"epochs_run", f.training.epochs_run},
                       {"best_epoch", f.training.best_epoch},
                       {"best_val_loss", f.training.best_val_loss},
                       {"head_sparsity", f.sparsity}}}});
  return {{"k", r.k}, {"seeds", r.seeds}, {"folds", folds}, {"average", to_json_value(r.average, true)}};
}

// report.json, folds.csv (one row per fold plus a mean row, one column per
// metric) and roc_<COHORT>.csv with the pooled out-of-fold curves.
inline void write_cv_reports(const CvResult& r, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  detail::write_text(out_dir / "report.json", to_json_value(r).dump(2) + "\n");

  std::ostringstream csv;
  csv << "repeat,seed,fold,n,sensitivity,specificity,accuracy,fpe,fne,fdpe";
  for (CohortLabel c : kAllCohorts) csv << ",auc_" << to_string(c);
  for (CohortLabel c : kAllCohorts) csv << ",recall_" << to_string(c);
  csv << "\n";
  auto row = [&](const std::string& repeat, const std::string& seed, const std::string& fold, const MetricsReport& m) {
    csv << repeat << "," << seed << "," << fold << "," << m.n;
    for (const auto* v : {&m.sensitivity, &m.specificity, &m.accuracy, &m.fpe, &m.fne, &m.fdpe})
      csv << "," << detail::ratio_text(*v);
    for (CohortLabel c : kAllCohorts) csv << "," << detail::ratio_text(m.per_group_auc.at(c));
    for (CohortLabel c : kAllCohorts) csv << "," << detail::ratio_text(m.per_group_sensitivity.at(c));
    csv << "\n";
  };
  for (const auto& f : r.folds) row(std::to_string(f.repeat), std::to_string(f.seed), std::to_string(f.fold), f.metrics);
  row("mean", "", "", r.average);
  detail::write_text(out_dir / "folds.csv", csv.str());

  for (const auto& [c, roc] : r.average.roc_curves) {
    std::ostringstream os;
    os << "fpr,tpr\n";
    char buf[64];
    for (const auto& [x, y] : roc.points) {
      std::snprintf(buf, sizeof buf, "%.10g,%.10g\n", x, y);
      os << buf;
    }
    detail::write_text(out_dir / ("roc_" + std::string(to_string(c)) + ".csv"), os.str());
  }
}

}  // namespace oculoscreen
