// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
// failure. The synthetic recovery and null checks dominate the runtime.
#include <fcntl.h>
#include <malloc.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "oculoscreen/evaluation.hpp"
#include "oculoscreen/service.hpp"
#include "support.hpp"

using namespace oculoscreen;
using testing_support::TempDir;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s  %-28s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !ok;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

Prediction random_prediction(Rng& rng) {
  std::array<double, 4> l;
  for (auto& v : l) v = rng.normal();
  // Occasional exact ties exercise the tie rule.
  if (rng.uniform() < 0.1) l[1] = l[0];
  return make_prediction(l);
}

// ---- metric oracle ----

void check_metric_oracle() {
  const auto t0 = Clock::now();
  Rng rng(101);
  const int kNeg = 0, kCov = 1, kOth = 2;
  auto tax_index = [](CohortLabel c) {
    switch (c) {
      case CohortLabel::kHealthy: return 0;
      case CohortLabel::kCovid: return 1;
      default: return 2;
    }
  };
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(200));
    std::vector<CohortLabel> truths;
    std::vector<Prediction> preds;
    long table[3][3] = {};
    for (int i = 0; i < n; ++i) {
      truths.push_back(static_cast<CohortLabel>(rng.below(4)));
      preds.push_back(random_prediction(rng));
      ++table[tax_index(truths.back())][tax_index(preds.back().predicted_cohort)];
    }
    long pos = 0, neg = 0;
    for (int p = 0; p < 3; ++p) pos += table[kCov][p] + table[kOth][p], neg += table[kNeg][p];
    const long tp = table[kCov][kCov] + table[kCov][kOth] + table[kOth][kCov] + table[kOth][kOth];
    const long tn = table[kNeg][kNeg];
    const long fp = table[kNeg][kCov] + table[kNeg][kOth];
    const long fn = table[kCov][kNeg] + table[kOth][kNeg];
    const long wrong = table[kCov][kOth] + table[kOth][kCov];
    const auto r = compute_metrics(truths, preds);
    auto eq = [](const Ratio& got, long num, long den) {
      return den == 0 ? !got.has_value() : got.has_value() && *got == static_cast<double>(num) / static_cast<double>(den);
    };
    const bool ok = eq(r.sensitivity, tp, pos) && eq(r.specificity, tn, neg) && eq(r.accuracy, tp + tn, n) &&
                    eq(r.fpe, fp, neg) && eq(r.fne, fn, pos) && eq(r.fdpe, wrong, pos);
    mismatches += !ok;
  }
  const double secs = seconds_since(t0);
  report(mismatches == 0 && secs < 10.0, "metric oracle", fmt("1000 instances, %d mismatches, %.2fs", mismatches, secs));
}

// ---- AUC duality ----

void check_auc_duality() {
  const auto t0 = Clock::now();
  Rng rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(499));
    const int levels = 1 + static_cast<int>(rng.below(25));
    std::vector<double> s(n);
    std::unique_ptr<bool[]> t(new bool[n]);
    for (int i = 0; i < n; ++i) {
      s[i] = trial % 2 ? static_cast<double>(rng.below(levels)) : rng.uniform();
      t[i] = rng.uniform() < 0.5;
    }
    t[0] = true;
    t[1] = false;
    double wins = 0;
    long pairs = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (t[i] && !t[j]) ++pairs, wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    const double auc = roc_auc(s, std::span<const bool>(t.get(), n)).auc;
    worst = std::max(worst, std::abs(auc - wins / pairs));
  }
  const double secs = seconds_since(t0);
  report(worst <= 1e-9 && secs < 10.0, "AUC duality", fmt("200 sets, max |diff| %.3g, %.2fs", worst, secs));
}

// ---- folds ----

void check_folds() {
  std::vector<std::pair<std::string, CohortLabel>> ids;
  const std::pair<CohortLabel, int> counts[] = {
      {CohortLabel::kCovid, 104}, {CohortLabel::kPulmonary, 131}, {CohortLabel::kOcular, 68}, {CohortLabel::kHealthy, 136}};
  for (const auto& [c, n] : counts)
    for (int i = 0; i < n; ++i) ids.emplace_back(std::string(to_string(c)) + "-" + std::to_string(i), c);
  int bad = 0;
  Rng rng(303);
  for (int s = 0; s < 100; ++s) {
    const auto plan = make_folds(ids, 5, rng.next());
    std::set<std::string> seen;
    std::vector<int> sizes;
    bool ok = plan.assignment.size() == ids.size();
    for (int f = 0; f < 5; ++f) {
      const auto fold = plan.fold(f);
      sizes.push_back(static_cast<int>(fold.size()));
      for (const auto& id : fold) ok = ok && seen.insert(id).second;
    }
    ok = ok && seen.size() == ids.size();
    std::sort(sizes.rbegin(), sizes.rend());
    ok = ok && sizes == std::vector<int>{88, 88, 88, 88, 87};
    for (const auto& [c, n] : counts)
      for (int f = 0; f < 5; ++f) {
        int k = 0;
        for (const auto& [id, cc] : ids) k += cc == c && plan.assignment.at(id) == f;
        ok = ok && std::abs(k - n / 5.0) <= 1.0;
      }
    bad += !ok;
  }
  report(bad == 0, "fold properties", fmt("100 seeds, %d violating plans", bad));
}

// ---- partition completeness ----

void check_partitions() {
  Rng rng(404);
  int bad = 0;
  for (int i = 0; i < 50; ++i) {
    const int h = 4 + static_cast<int>(rng.below(60)), w = 4 + static_cast<int>(rng.below(120));
    for (const auto& spec : {GridSpec::rect(2, 4), GridSpec::sector(8)}) {
      std::vector<int> sum(static_cast<std::size_t>(h) * w, 0);
      for (const auto& m : cell_masks(h, w, spec))
        for (std::size_t p = 0; p < sum.size(); ++p) sum[p] += m[p];
      bad += std::any_of(sum.begin(), sum.end(), [](int v) { return v != 1; });
    }
  }
  report(bad == 0, "partition completeness", fmt("50 crops x 2 modes, %d imperfect", bad));
}

// ---- gradient check ----

void check_gradient() {
  Rng rng(505);
  EncoderConfig cfg;
  cfg.seed = 9;
  ConvEncoder<double> enc(cfg);
  using M = ConvEncoder<double>::Matrix;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    M x(1, enc.input_size());
    for (Eigen::Index j = 0; j < x.size(); ++j) x(0, j) = rng.uniform();
    M g_out(1, enc.embed_dim());
    for (Eigen::Index j = 0; j < g_out.size(); ++j) g_out(0, j) = rng.normal();
    std::vector<double> dir(enc.parameters().size());
    for (auto& v : dir) v = rng.normal();

    ConvEncoder<double>::Cache cache;
    enc.forward(x, &cache);
    std::vector<double> grad(dir.size(), 0.0);
    enc.backward(cache, g_out, grad);
    double analytic = 0.0;
    for (std::size_t i = 0; i < dir.size(); ++i) analytic += grad[i] * dir[i];

    auto params = enc.parameters();
    const std::vector<double> saved(params.begin(), params.end());
    auto objective = [&](double h) {
      for (std::size_t i = 0; i < dir.size(); ++i) params[i] = saved[i] + h * dir[i];
      return (enc.forward(x).array() * g_out.array()).sum();
    };
    const double h = 1e-6;
    const double numeric = (objective(h) - objective(-h)) / (2 * h);
    std::copy(saved.begin(), saved.end(), params.begin());
    worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8}));
  }
  report(worst < 1e-4, "encoder gradient check", fmt("20 pairs, max rel err %.3g", worst));
}

// ---- cross-validated recovery ----

struct SeedSummary {
  std::uint64_t seed;
  MetricsReport avg;
};

std::vector<SeedSummary> per_seed(const CvResult& r) {
  std::vector<SeedSummary> out;
  for (std::size_t s = 0; s < r.seeds.size(); ++s) {
    std::vector<FoldResult> folds;
    std::vector<OutOfFold> preds;
    for (const auto& f : r.folds)
      if (f.repeat == static_cast<int>(s)) folds.push_back(f);
    for (const auto& p : r.predictions)
      if (p.repeat == static_cast<int>(s)) preds.push_back(p);
    out.push_back({r.seeds[s], average_reports(folds, preds)});
  }
  return out;
}

CvResult run_cv(const fs::path& dir, double signal, const char* label) {
  SynthConfig sc;
  sc.signal = signal;
  sc.seed = signal > 0 ? 2024 : 2025;
  auto t0 = Clock::now();
  const auto manifest = generate_corpus(sc, dir);
  std::fprintf(stderr, "[%s] generated %zu sessions in %.1fs\n", label, manifest.sessions.size(), seconds_since(t0));
  CvOptions opt;
  opt.k = 5;
  opt.seeds = {1, 2, 3, 4, 5};
  opt.progress = [label](const std::string& s) { std::fprintf(stderr, "[%s] %s\n", label, s.c_str()); };
  t0 = Clock::now();
  auto r = cross_validate(manifest, dir, opt);
  std::fprintf(stderr, "[%s] cross-validation took %.1fs\n", label, seconds_since(t0));
  return r;
}

void check_recovery(const CvResult& r) {
  int good = 0;
  std::string detail;
  for (const auto& s : per_seed(r)) {
    const double sens = s.avg.per_group_sensitivity.at(CohortLabel::kCovid).value_or(0.0);
    double min_auc = 1.0;
    for (CohortLabel c : kAllCohorts) min_auc = std::min(min_auc, s.avg.per_group_auc.at(c).value_or(0.0));
    const bool ok = sens >= 0.80 && min_auc >= 0.95;
    good += ok;
    detail += fmt("; seed %llu: COVID sens %.3f min AUC %.3f", static_cast<unsigned long long>(s.seed), sens, min_auc);
  }
  report(good >= 4, "synthetic recovery", fmt("%d/5 seeds pass", good) + detail);
}

void check_null(const CvResult& r) {
  double sum = 0.0;
  std::string detail;
  for (const auto& s : per_seed(r)) {
    const double auc = s.avg.per_group_auc.at(CohortLabel::kCovid).value_or(0.5);
    sum += auc;
    detail += fmt("%.3f ", auc);
  }
  const double mean = sum / 5.0;
  report(mean >= 0.43 && mean <= 0.57, "null check", fmt("mean COVID AUC %.3f over seeds [ ", mean) + detail + "]");
}

void check_attribution(const CvResult& r, const fs::path& corpus) {
  double worst = 0.0;
  for (const auto& o : r.predictions) {
    const auto& a = o.attribution;
    const double sum = std::accumulate(a.scores.begin(), a.scores.end(), 0.0) + a.bias;
    worst = std::max({worst, std::abs(sum - a.logit), std::abs(a.logit - o.prediction.logits[class_index(a.cohort)])});
  }
  const json cues = detail::read_json_file(corpus / "cues.json");
  double cue_sum = 0.0, other_sum = 0.0;
  long cue_n = 0, other_n = 0;
  int sessions = 0;
  for (const auto& o : r.predictions) {
    if (o.repeat != 0 || o.truth != CohortLabel::kCovid || o.attribution.cohort != CohortLabel::kCovid) continue;
    const auto cells = cues.at(o.identity_id).at("cells").get<std::vector<int>>();
    ++sessions;
    for (GazeAngle g : kAllAngles)
      for (int c = 0; c < o.attribution.cells; ++c) {
        const double v = o.attribution.score(g, c);
        if (std::find(cells.begin(), cells.end(), c) != cells.end()) cue_sum += v, ++cue_n;
        else other_sum += v, ++other_n;
      }
  }
  const double cue_mean = cue_n ? cue_sum / cue_n : 0.0, other_mean = other_n ? other_sum / other_n : 0.0;
  report(worst <= 1e-6 && sessions >= 50 && cue_n > 0 && other_n > 0 && cue_mean > other_mean, "attribution soundness",
         fmt("%zu predictions, max reconstruction err %.3g; %d COVID sessions, cue mean %.4f vs non-cue %.4f",
             r.predictions.size(), worst, sessions, cue_mean, other_mean));
}

void check_heldout_screening(const CvResult& r) {
  int n = 0, hit = 0;
  for (const auto& o : r.predictions) {
    if (o.repeat != 0 || o.truth != CohortLabel::kCovid) continue;
    ++n;
    hit += o.prediction.taxonomy == Taxonomy::kCovid && o.prediction.prob(CohortLabel::kCovid) > 0.5;
  }
  report(n > 0 && hit >= 0.8 * n, "held-out COVID screening", fmt("%d/%d COVID sessions screened COVID with p > 0.5", hit, n));
}

// ---- service restart ----

struct Server {
  pid_t pid = -1;
  int port = 0;
};

Server spawn_server(const fs::path& model, const fs::path& data, const fs::path& policy) {
  int fds[2];
  if (pipe(fds) != 0) throw std::runtime_error("pipe failed");
  const pid_t pid = fork();
  if (pid == 0) {
    dup2(fds[1], STDOUT_FILENO);
    close(fds[0]);
    close(fds[1]);
    execl(OCULOSCREEN_CLI, OCULOSCREEN_CLI, "serve", "--model", model.c_str(), "--data-dir", data.c_str(), "--host",
          "127.0.0.1", "--port", "0", "--policy", policy.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  close(fds[1]);
  std::string line;
  pollfd p{fds[0], POLLIN, 0};
  char ch;
  while (poll(&p, 1, 60000) > 0 && read(fds[0], &ch, 1) == 1 && ch != '\n') line += ch;
  close(fds[0]);
  const auto colon = line.rfind(':');
  if (line.rfind("listening on ", 0) != 0 || colon == std::string::npos) {
    kill(pid, SIGKILL);
    waitpid(pid, nullptr, 0);
    throw std::runtime_error("server did not start: '" + line + "'");
  }
  return {pid, std::stoi(line.substr(colon + 1))};
}

void kill_hard(Server& s) {
  kill(s.pid, SIGKILL);
  waitpid(s.pid, nullptr, 0);
}

void check_service(const fs::path& corpus, const fs::path& work) {
  std::string failure;
  json screened, after;
  try {
    // Small model trained in-process; its quality is irrelevant here.
    const auto people = testing_support::synth_people(testing_support::small_corpus(6, 77));
    std::vector<const PersonCells*> tr, va;
    for (std::size_t i = 0; i < people.size(); ++i) (i % 3 == 0 ? va : tr).push_back(&people[i]);
    TrainConfig tc;
    tc.epochs = 2;
    save_bundle(train(tr, va, tc).bundle, work / "model");
    std::ofstream(work / "policy.json") << to_json_value(synth_quality_policy(SynthConfig{})).dump();

    const auto manifest = load_manifest(corpus / "manifest.json");
    const auto& session = manifest.sessions.front();
    Server srv = spawn_server(work / "model", work / "data", work / "policy.json");
    std::string id;
    {
      httplib::Client cli("127.0.0.1", srv.port);
      auto res = cli.Post("/v1/sessions", R"({"consent": true})", "application/json");
      if (!res || res->status != 201) throw std::runtime_error("create failed");
      id = json::parse(res->body).at("session_id");
      auto put = [&](GazeAngle a, const std::vector<std::uint8_t>& bytes, const std::string& query) {
        return cli.Put("/v1/sessions/" + id + "/images/" + std::string(to_string(a)) + query,
                       std::string(bytes.begin(), bytes.end()), "image/png");
      };
      const auto dark = encode_png(testing_support::solid(192, 96, 5, 5, 5));
      res = put(GazeAngle::kHorizontal, dark, "");
      if (!res || res->status != 422) throw std::runtime_error("dark upload was not rejected with 422");
      for (GazeAngle a : kAllAngles) {
        const auto& rec = session.images.at(a);
        const auto& b = rec.boxes.front().box;
        res = put(a, read_file_bytes(corpus / rec.path), fmt("?box=%d,%d,%d,%d", b.x, b.y, b.w, b.h));
        if (!res || res->status != 200) throw std::runtime_error("upload of " + std::string(to_string(a)) + " failed");
      }
      res = cli.Post("/v1/sessions/" + id + "/screen", "", "application/json");
      if (!res || res->status != 200) throw std::runtime_error("screen failed");
      screened = json::parse(res->body);
    }
    kill_hard(srv);

    srv = spawn_server(work / "model", work / "data", work / "policy.json");
    {
      httplib::Client cli("127.0.0.1", srv.port);
      auto res = cli.Get("/v1/sessions/" + id);
      if (!res || res->status != 200) throw std::runtime_error("GET after restart failed");
      after = json::parse(res->body).at("status");
    }
    kill_hard(srv);
  } catch (const std::exception& e) {
    failure = e.what();
  }
  const bool ok = failure.empty() && after.value("state", "") == "SCREENED" && after.contains("result") &&
                  after.at("result") == screened;
  report(ok, "service state machine",
         failure.empty() ? fmt("after kill -9 + restart: state %s, result %s", after.value("state", "?").c_str(),
                               ok ? "identical" : "differs")
                         : failure);
}

}  // namespace

int main() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  const auto t0 = Clock::now();

  check_metric_oracle();
  check_auc_duality();
  check_folds();
  check_partitions();
  check_gradient();

  TempDir work;
  try {
    const auto signal = run_cv(work / "signal", 1.0, "s=1");
    check_recovery(signal);
    check_attribution(signal, work / "signal");
    check_heldout_screening(signal);
  } catch (const std::exception& e) {
    report(false, "synthetic recovery", e.what());
  }
  try {
    check_null(run_cv(work / "null", 0.0, "s=0"));
  } catch (const std::exception& e) {
    report(false, "null check", e.what());
  }
  fs::create_directories(work / "service");
  check_service(work / "signal", work / "service");

  std::printf("%s: %d failing, %.0fs total\n", failures ? "FAILED" : "ALL PASSED", failures, seconds_since(t0));
  return failures ? 1 : 0;
}
