#include <malloc.h>
#include <signal.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "oculoscreen/config.hpp"
#include "oculoscreen/evaluation.hpp"
#include "oculoscreen/service.hpp"
#include "oculoscreen/synthgen.hpp"

namespace fs = std::filesystem;
using namespace oculoscreen;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> k, repeats, jobs, epochs, port;
  std::optional<double> l1;
  std::optional<std::string> grid, host, data_dir, policy_file;
};

AppConfig resolve(const std::string& config_file, const Overrides& o) {
  AppConfig c;
  if (!config_file.empty()) c = load_config(config_file, c);
  if (o.policy_file) c.quality_policy = overlay_config({{"quality_policy", detail::read_json_file(*o.policy_file)}}, c).quality_policy;
  if (o.seed) c.evaluation.seed = c.training.seed = *o.seed;
  if (o.k) c.evaluation.k = *o.k;
  if (o.repeats) c.evaluation.repeats = *o.repeats;
  if (o.jobs) c.evaluation.jobs = *o.jobs;
  if (o.epochs) c.training.epochs = *o.epochs;
  if (o.l1) c.training.l1_lambda = *o.l1;
  if (o.grid) {
    const std::string g = detail::upper(*o.grid);
    if (g == "RECT") c.pipeline.grid = GridSpec::rect(2, 4);
    else if (g == "SECTOR") c.pipeline.grid = GridSpec::sector(8);
    else throw Error(ErrorCode::kInvalidArgument, "--grid must be RECT or SECTOR");
  }
  if (o.host) c.host = *o.host;
  if (o.port) c.port = *o.port;
  if (o.data_dir) c.data_dir = *o.data_dir;
  if (c.evaluation.repeats < 1 || c.evaluation.jobs < 1)
    throw Error(ErrorCode::kInvalidArgument, "--repeats and --jobs must be >= 1");
  c.training.check();
  return c;
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

int cmd_synth_gen(const fs::path& out, double signal, std::uint64_t seed, const std::string& preset, int per_cohort,
                  double noise, int devices, double device_shift) {
  SynthConfig sc;
  sc.signal = signal;
  sc.seed = seed;
  sc.noise_sigma = noise;
  sc.devices = devices;
  sc.device_shift = device_shift;
  if (preset == "protocol") sc.n_per_cohort = SynthConfig::protocol_counts();
  else if (preset != "collected") throw Error(ErrorCode::kInvalidArgument, "--preset must be collected or protocol");
  if (per_cohort > 0)
    for (auto& [c, n] : sc.n_per_cohort) n = per_cohort;
  const auto m = generate_corpus(sc, out);
  std::cerr << "wrote " << m.sessions.size() << " sessions to " << out.string() << "\n";
  return 0;
}

int cmd_validate(const fs::path& manifest_path, std::optional<std::string> base) {
  const auto m = load_manifest(manifest_path);
  m.quality_policy.check();
  const fs::path dir = base ? fs::path(*base) : manifest_path.parent_path();
  json sessions = json::array();
  std::size_t bad = 0;
  for (const auto& s : m.sessions) {
    const auto v = validate_session(s, m.quality_policy, dir);
    json list = json::array();
    for (const auto& x : v) list.push_back({{"kind", to_string(x.kind)}, {"angle", x.angle ? json(to_string(*x.angle)) : json(nullptr)}, {"message", describe(x)}});
    bad += !v.empty();
    sessions.push_back({{"session_id", s.session_id}, {"valid", v.empty()}, {"violations", list}});
  }
  print_json({{"sessions", sessions}, {"total", m.sessions.size()}, {"invalid", bad}});
  if (bad) throw Error(ErrorCode::kValidationFailed, std::to_string(bad) + " of " + std::to_string(m.sessions.size()) + " sessions failed validation");
  return 0;
}

std::vector<PersonCells> prepare_all(const DatasetManifest& m, const fs::path& dir, const PipelineConfig& p) {
  std::vector<PersonCells> people;
  for (const auto& s : m.sessions) {
    const auto v = validate_session(s, m.quality_policy, dir);
    if (!v.empty()) throw Error(ErrorCode::kValidationFailed, "session " + s.session_id + ": " + describe(v.front()));
    if (!s.cohort) throw Error(ErrorCode::kInvalidArgument, "session " + s.session_id + " has no cohort label");
    people.push_back(prepare_person(s, dir, p));
  }
  return people;
}

// Single split: fold 0 of a k-fold plan validates, the rest trains.
int cmd_train(const fs::path& manifest_path, const fs::path& out, const AppConfig& c) {
  const auto m = load_manifest(manifest_path);
  m.quality_policy.check();
  const auto people = prepare_all(m, manifest_path.parent_path(), c.pipeline);
  std::vector<std::pair<std::string, CohortLabel>> ids;
  for (const auto& p : people) ids.emplace_back(p.identity_id, *p.cohort);
  const auto plan = make_folds(ids, c.evaluation.k, c.evaluation.seed);
  std::vector<const PersonCells*> tr, va;
  for (const auto& p : people) (plan.assignment.at(p.identity_id) == 0 ? va : tr).push_back(&p);
  const auto result = train(tr, va, c.training, c.pipeline);
  save_bundle(result.bundle, out);
  std::vector<CohortLabel> truths;
  for (const auto* p : va) truths.push_back(*p->cohort);
  const auto metrics = compute_metrics(truths, predict_batch(result.bundle, va));
  print_json({{"model_dir", out.string()},
              {"model_version", model_version(result.bundle)},
              {"train_size", tr.size()},
              {"validation_size", va.size()},
              {"epochs_run", result.bundle.meta.epochs_run},
              {"best_epoch", result.bundle.meta.best_epoch},
              {"head_sparsity", result.bundle.sparsity()},
              {"validation", to_json_value(metrics, false)}});
  return 0;
}

int cmd_evaluate(const fs::path& manifest_path, const fs::path& out, const AppConfig& c) {
  const auto m = load_manifest(manifest_path);
  CvOptions opt;
  opt.k = c.evaluation.k;
  opt.seeds.clear();
  for (int r = 0; r < c.evaluation.repeats; ++r) opt.seeds.push_back(c.evaluation.seed + static_cast<std::uint64_t>(r));
  opt.train = c.training;
  opt.pipeline = c.pipeline;
  opt.jobs = c.evaluation.jobs;
  opt.progress = [](const std::string& s) { std::cerr << s << "\n"; };
  const auto r = cross_validate(m, manifest_path.parent_path(), opt);
  write_cv_reports(r, out);
  print_json(to_json_value(r.average, false));
  return 0;
}

int cmd_screen(const fs::path& model_dir, std::optional<std::string> session_dir, std::optional<std::string> manifest,
               std::optional<std::string> session_id, const AppConfig& c) {
  const auto model = load_bundle(model_dir);
  CaptureSession s;
  fs::path base;
  if (session_dir) {
    base = *session_dir;
    const json j = detail::read_json_file(base / "session.json");
    const json& sj = j.contains("session") ? j.at("session") : j;
    s = detail::read_session(detail::FieldReader(sj, j.contains("session") ? "session" : ""));
  } else {
    if (!manifest || !session_id) throw Error(ErrorCode::kInvalidArgument, "screen needs --session or --manifest with --session-id");
    const auto m = load_manifest(*manifest);
    base = fs::path(*manifest).parent_path();
    const auto it = std::find_if(m.sessions.begin(), m.sessions.end(),
                                 [&](const auto& x) { return x.session_id == *session_id || x.identity_id == *session_id; });
    if (it == m.sessions.end()) throw Error(ErrorCode::kNotFound, "no session '" + *session_id + "' in manifest");
    s = *it;
  }
  for (GazeAngle a : kAllAngles)
    if (!s.images.count(a))
      throw Error(ErrorCode::kMissingAngle, std::string(to_string(a)) + " is missing from session " + s.session_id);
  const PersonCells cells = prepare_person(s, base, model.config);
  const Prediction p = predict(model, cells);
  const GridAttribution a = grid_attribution(model, cells);
  ScreeningResult r;
  r.session_id = s.session_id;
  r.probs = p.probs;
  r.predicted_cohort = p.predicted_cohort;
  r.taxonomy = p.taxonomy;
  r.risk_tier = risk_tier(p.prob(CohortLabel::kCovid), c.risk);
  r.attributed_cohort = a.cohort;
  r.top_cells = top_cells(a);
  r.model_version = model_version(model);
  r.timestamp = utc_timestamp();
  print_json(to_json_value(r));
  return 0;
}

int cmd_serve(std::optional<std::string> model_dir, const AppConfig& c) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  ServiceConfig sc;
  sc.data_dir = c.data_dir;
  if (model_dir) sc.model_dir = *model_dir;
  sc.quality_policy = c.quality_policy;
  sc.risk = c.risk;
  ScreeningService svc(sc);
  HttpServer http(svc);
  const int port = http.start(c.host, c.port);
  std::cout << "listening on " << c.host << ":" << port << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  http.stop();
  std::cerr << "stopped\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep large temporaries on the heap instead of fresh mmaps per call.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Periocular screening toolkit"};
  app.require_subcommand(1, 1);
  std::string config_file;
  Overrides o;
  app.add_option("--config", config_file, "JSON config overlaid on the built-in defaults")->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("synth-gen", "Write a synthetic corpus with a manifest and cue sidecar");
  std::string gen_out, preset = "collected";
  double signal = 1.0, noise = 0.05, device_shift = 0.0;
  std::uint64_t gen_seed = 0;
  int per_cohort = 0, devices = 1;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--signal", signal)->check(CLI::Range(0.0, 1.0));
  gen->add_option("--seed", gen_seed);
  gen->add_option("--ratios,--preset", preset, "collected (104/131/68/136) or protocol (300/100/100/100)");
  gen->add_option("--per-cohort", per_cohort, "same count for every cohort");
  gen->add_option("--noise", noise);
  gen->add_option("--devices", devices);
  gen->add_option("--device-shift", device_shift);

  auto* val = app.add_subcommand("validate", "Check a manifest and every session against its quality policy");
  std::string manifest;
  std::optional<std::string> base;
  val->add_option("--manifest", manifest)->required();
  val->add_option("--base", base, "directory image paths are relative to");

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed);
    sub->add_option("--k", o.k);
    sub->add_option("--epochs", o.epochs);
    sub->add_option("--l1", o.l1);
    sub->add_option("--grid", o.grid, "RECT or SECTOR");
  };

  auto* tr = app.add_subcommand("train", "Train one model on a single split and save the bundle");
  std::string out;
  tr->add_option("--manifest", manifest)->required();
  tr->add_option("--out", out)->required();
  add_common(tr);

  auto* ev = app.add_subcommand("evaluate", "Stratified k-fold cross-validation");
  ev->add_option("--manifest", manifest)->required();
  ev->add_option("--out", out)->required();
  ev->add_option("--repeats", o.repeats, "seeds seed..seed+repeats-1");
  ev->add_option("--jobs", o.jobs);
  add_common(ev);

  auto* sc = app.add_subcommand("screen", "Predict one session");
  std::string model;
  std::optional<std::string> session_dir, session_id, screen_manifest;
  sc->add_option("--model", model)->required();
  sc->add_option("--session", session_dir, "session directory holding session.json");
  sc->add_option("--manifest", screen_manifest);
  sc->add_option("--session-id", session_id);

  auto* sv = app.add_subcommand("serve", "Run the HTTP service");
  std::optional<std::string> serve_model;
  sv->add_option("--model", serve_model);
  sv->add_option("--data-dir", o.data_dir);
  sv->add_option("--host", o.host);
  sv->add_option("--port", o.port, "0 picks a free port");
  sv->add_option("--policy", o.policy_file, "quality policy JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: USAGE: " << e.what() << "\n";
    return 2;
  }

  try {
    const AppConfig c = resolve(config_file, o);
    if (*gen) return cmd_synth_gen(gen_out, signal, gen_seed, preset, per_cohort, noise, devices, device_shift);
    if (*val) return cmd_validate(manifest, base);
    if (*tr) return cmd_train(manifest, out, c);
    if (*ev) return cmd_evaluate(manifest, out, c);
    if (*sc) return cmd_screen(model, session_dir, screen_manifest, session_id, c);
    if (*sv) return cmd_serve(serve_model, c);
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.detail() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: INTERNAL: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
