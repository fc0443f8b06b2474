#include <gtest/gtest.h>

#include <thread>

#include "oculoscreen/service.hpp"
#include "support.hpp"

using namespace oculoscreen;
using testing_support::TempDir;

namespace {

const SynthConfig& corpus() {
  static const SynthConfig c = testing_support::small_corpus(2, 13);
  return c;
}

std::string png_for(int index, GazeAngle a) {
  const auto bytes = encode_png(render_view(make_identity(corpus(), index), a, corpus()));
  return {bytes.begin(), bytes.end()};
}

std::string box_param(int index) {
  const auto b = make_identity(corpus(), index).eye_box;
  return std::to_string(b.x) + "," + std::to_string(b.y) + "," + std::to_string(b.w) + "," + std::to_string(b.h);
}

ServiceConfig config_for(const std::filesystem::path& dir) {
  ServiceConfig c;
  c.data_dir = dir;
  c.quality_policy = synth_quality_policy(corpus());
  return c;
}

std::shared_ptr<const ModelBundle> small_model() {
  static const auto m = [] {
    auto b = std::make_shared<ModelBundle>();
    Rng rng(4);
    for (Eigen::Index i = 0; i < b->head_weights.size(); ++i) b->head_weights.data()[i] = 0.05 * rng.normal();
    return std::shared_ptr<const ModelBundle>(b);
  }();
  return m;
}

class Http : public ::testing::Test {
 protected:
  void SetUp() override { boot(); }
  void TearDown() override {
    server_.reset();
    svc_.reset();
  }

  void boot(bool with_model = true) {
    server_.reset();
    svc_ = std::make_unique<ScreeningService>(config_for(dir_.path()));
    if (with_model) svc_->set_model(small_model());
    server_ = std::make_unique<HttpServer>(*svc_);
    port_ = server_->start("127.0.0.1", 0);
  }

  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }

  std::string create() {
    auto res = client().Post("/v1/sessions", R"({"consent": true, "metadata": {"operator": "t"}})", "application/json");
    EXPECT_EQ(res->status, 201);
    return json::parse(res->body).at("session_id");
  }

  httplib::Result put(const std::string& id, GazeAngle a, const std::string& body, const std::string& query = "") {
    return client().Put("/v1/sessions/" + id + "/images/" + std::string(to_string(a)) + query, body, "image/png");
  }

  void upload_all(const std::string& id, int index) {
    for (GazeAngle a : kAllAngles) ASSERT_EQ(put(id, a, png_for(index, a), "?box=" + box_param(index))->status, 200);
  }

  TempDir dir_;
  std::unique_ptr<ScreeningService> svc_;
  std::unique_ptr<HttpServer> server_;
  int port_ = 0;
};

}  // namespace

TEST(RiskTier, Thresholds) {
  EXPECT_EQ(risk_tier(0.1), RiskTier::kLow);
  EXPECT_EQ(risk_tier(0.2), RiskTier::kElevated);
  EXPECT_EQ(risk_tier(0.599), RiskTier::kElevated);
  EXPECT_EQ(risk_tier(0.6), RiskTier::kHigh);
  // probs (0.7, 0.1, 0.1, 0.1) over [HEALTHY, COVID, PULMONARY, OCULAR]
  ScreeningResult r;
  r.probs = {0.7, 0.1, 0.1, 0.1};
  EXPECT_EQ(risk_tier(r.prob(CohortLabel::kCovid)), RiskTier::kLow);
  EXPECT_EQ(risk_tier(0.5, {0.4, 0.5}), RiskTier::kHigh);
  EXPECT_THROW((RiskThresholds{0.7, 0.6}.check()), Error);
}

TEST(BoxHints, Parse) {
  const auto h = parse_box_hints("1,2,30,40;5,6,7,8,LEFT_EYE");
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[0].box, (BoundingBox{1, 2, 30, 40}));
  EXPECT_FALSE(h[0].side.has_value());
  EXPECT_EQ(h[1].side, EyeSide::kLeftEye);
  EXPECT_THROW(parse_box_hints("1,2,3"), Error);
}

TEST(Store, StateMachineAndRejection) {
  TempDir dir;
  SessionStore store(dir.path());
  try {
    store.create({{"consent", false}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConsentMissing);
  }
  EXPECT_THROW(store.create(json::object()), Error);
  const auto a = store.create({{"consent", true}});
  EXPECT_EQ(a.status.state, SessionState::kOpen);
  EXPECT_THROW(store.reject(a.session.session_id, {}), Error);
  store.reject(a.session.session_id, {"operator aborted"});
  const auto r = store.get(a.session.session_id);
  EXPECT_EQ(r.status.state, SessionState::kRejected);
  EXPECT_FALSE(r.status.violations.empty());
  try {
    store.reject(a.session.session_id, {"again"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConflict);
  }
  EXPECT_FALSE(store.exists("../etc"));
  EXPECT_THROW(store.get("nope"), Error);
}

TEST(Store, RejectedSessionRefusesUploads) {
  TempDir dir;
  ScreeningService svc(config_for(dir.path()));
  const auto id = svc.create({{"consent", true}}).session.session_id;
  svc.store().reject(id, {"blurred"});
  const auto bytes = encode_png(render_view(make_identity(corpus(), 0), GazeAngle::kUp, corpus()));
  try {
    svc.upload(id, GazeAngle::kUp, bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConflict);
  }
}

TEST_F(Http, CreateRequiresConsent) {
  auto res = client().Post("/v1/sessions", R"({"consent": false})", "application/json");
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body).at("error"), "CONSENT_MISSING");
  res = client().Post("/v1/sessions", "{", "application/json");
  EXPECT_EQ(res->status, 400);
  const auto a = create(), b = create();
  EXPECT_NE(a, b);
}

TEST_F(Http, UploadFlowReachesComplete) {
  const auto id = create();
  int n = 0;
  for (GazeAngle a : kAllAngles) {
    auto res = put(id, a, png_for(0, a), "?box=" + box_param(0) + "&device_id=phone-1");
    ASSERT_EQ(res->status, 200) << res->body;
    const auto body = json::parse(res->body);
    EXPECT_EQ(body.at("passes"), true);
    EXPECT_EQ(body.at("state"), ++n == 5 ? "COMPLETE" : "OPEN");
  }
  const auto status = json::parse(client().Get("/v1/sessions/" + id)->body);
  EXPECT_EQ(status.at("status").at("state"), "COMPLETE");
  EXPECT_EQ(status.at("session").at("images").size(), 5u);
  const auto stored = svc_->get(id);
  EXPECT_EQ(stored.session.images.at(GazeAngle::kUp).device_id, "phone-1");
  EXPECT_EQ(stored.session.images.at(GazeAngle::kUp).boxes.size(), 1u);
}

TEST_F(Http, UploadErrors) {
  EXPECT_EQ(put("s-unknown", GazeAngle::kUp, png_for(0, GazeAngle::kUp))->status, 404);
  const auto id = create();
  EXPECT_EQ(client().Put("/v1/sessions/" + id + "/images/SIDEWAYS", png_for(0, GazeAngle::kUp), "image/png")->status, 400);
  EXPECT_EQ(put(id, GazeAngle::kUp, "not an image")->status, 400);

  // Too small for the policy floor.
  const auto small = encode_png(testing_support::solid(40, 20, 200, 200, 200));
  auto res = put(id, GazeAngle::kUp, std::string(small.begin(), small.end()));
  ASSERT_EQ(res->status, 422);
  auto body = json::parse(res->body);
  EXPECT_EQ(body.at("resolution_ok"), false);
  EXPECT_EQ(body.at("error"), "QUALITY_FAILED");

  // A failed angle can be retaken; a passed one cannot.
  EXPECT_EQ(put(id, GazeAngle::kUp, png_for(0, GazeAngle::kUp))->status, 200);
  res = put(id, GazeAngle::kUp, png_for(0, GazeAngle::kUp));
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(json::parse(res->body).at("error"), "CONFLICT");
}

TEST_F(Http, ProtocolPolicyRejectsLowResolution) {
  server_.reset();
  ServiceConfig cfg = config_for(dir_.path());
  cfg.quality_policy = QualityPolicy{};
  svc_ = std::make_unique<ScreeningService>(cfg);
  server_ = std::make_unique<HttpServer>(*svc_);
  port_ = server_->start("127.0.0.1", 0);
  const auto id = create();
  auto res = put(id, GazeAngle::kHorizontal, png_for(0, GazeAngle::kHorizontal));
  EXPECT_EQ(res->status, 422);
  EXPECT_EQ(json::parse(res->body).at("resolution_ok"), false);
}

TEST_F(Http, ScreenLifecycle) {
  const auto id = create();
  auto res = client().Post("/v1/sessions/" + id + "/screen", "", "application/json");
  EXPECT_EQ(res->status, 409);
  upload_all(id, 1);
  res = client().Post("/v1/sessions/" + id + "/screen", "", "application/json");
  ASSERT_EQ(res->status, 200) << res->body;
  const auto first = json::parse(res->body);
  double sum = 0;
  for (const auto& [k, v] : first.at("probs").items()) sum += v.get<double>();
  EXPECT_NEAR(sum, 1.0, 1e-9);
  EXPECT_EQ(first.at("attribution").at("top_cells").size(), 5u);
  EXPECT_EQ(first.at("attribution").at("top_cells").at("UP").size(), 3u);
  EXPECT_EQ(first.at("model_version"), model_version(*small_model()));

  // Idempotent without force.
  res = client().Post("/v1/sessions/" + id + "/screen", "", "application/json");
  EXPECT_EQ(json::parse(res->body), first);
  const auto status = json::parse(client().Get("/v1/sessions/" + id)->body);
  EXPECT_EQ(status.at("status").at("state"), "SCREENED");
  EXPECT_EQ(status.at("status").at("result"), first);

  // Uploads after screening conflict.
  EXPECT_EQ(put(id, GazeAngle::kUp, png_for(1, GazeAngle::kUp))->status, 409);

  std::this_thread::sleep_for(std::chrono::milliseconds(1100));
  res = client().Post("/v1/sessions/" + id + "/screen?force=true", "", "application/json");
  ASSERT_EQ(res->status, 200);
  const auto forced = json::parse(res->body);
  EXPECT_NE(forced.at("timestamp"), first.at("timestamp"));
  EXPECT_EQ(forced.at("probs"), first.at("probs"));
}

TEST_F(Http, NoModelIs503) {
  boot(false);
  const auto id = create();
  upload_all(id, 0);
  auto res = client().Post("/v1/sessions/" + id + "/screen", "", "application/json");
  EXPECT_EQ(res->status, 503);
  EXPECT_EQ(json::parse(res->body).at("error"), "NO_MODEL");
  const auto models = json::parse(client().Get("/v1/models")->body);
  EXPECT_EQ(models.at("loaded"), false);
}

TEST_F(Http, ModelsEndpoint) {
  const auto j = json::parse(client().Get("/v1/models")->body);
  EXPECT_EQ(j.at("loaded"), true);
  EXPECT_EQ(j.at("model_version"), model_version(*small_model()));
  EXPECT_EQ(j.at("config").at("class_order").size(), 4u);
}

TEST_F(Http, UnknownSessionIs404) {
  auto res = client().Get("/v1/sessions/s-0000000000000000");
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(json::parse(res->body).at("error"), "NOT_FOUND");
  EXPECT_EQ(client().Post("/v1/sessions/zzz/screen", "", "application/json")->status, 404);
}

TEST_F(Http, StateSurvivesRestart) {
  const auto open = create();
  ASSERT_EQ(put(open, GazeAngle::kLeft, png_for(2, GazeAngle::kLeft), "?box=" + box_param(2))->status, 200);
  const auto done = create();
  upload_all(done, 3);
  const auto result = json::parse(client().Post("/v1/sessions/" + done + "/screen", "", "application/json")->body);
  const auto before_open = json::parse(client().Get("/v1/sessions/" + open)->body);
  const auto before_done = json::parse(client().Get("/v1/sessions/" + done)->body);

  boot();
  EXPECT_EQ(json::parse(client().Get("/v1/sessions/" + open)->body), before_open);
  EXPECT_EQ(json::parse(client().Get("/v1/sessions/" + done)->body), before_done);
  EXPECT_EQ(json::parse(client().Post("/v1/sessions/" + done + "/screen", "", "application/json")->body), result);
  // The open session continues where it left off.
  EXPECT_EQ(put(open, GazeAngle::kLeft, png_for(2, GazeAngle::kLeft))->status, 409);
  EXPECT_EQ(put(open, GazeAngle::kUp, png_for(2, GazeAngle::kUp))->status, 200);
}

TEST_F(Http, ConcurrentUploadsKeepEveryAngle) {
  for (int round = 0; round < 5; ++round) {
    const auto id = create();
    std::vector<std::thread> threads;
    std::vector<int> codes(kNumAngles);
    for (std::size_t i = 0; i < kNumAngles; ++i)
      threads.emplace_back([&, i] {
        const GazeAngle a = kAllAngles[i];
        codes[i] = put(id, a, png_for(round % 8, a), "?box=" + box_param(round % 8))->status;
      });
    for (auto& t : threads) t.join();
    for (int c : codes) EXPECT_EQ(c, 200);
    const auto s = svc_->get(id);
    EXPECT_EQ(s.session.images.size(), kNumAngles);
    EXPECT_EQ(s.status.state, SessionState::kComplete);
  }
}
