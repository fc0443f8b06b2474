#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "oculoscreen/capture.hpp"
#include "oculoscreen/classifier.hpp"
#include "oculoscreen/service.hpp"
#include "oculoscreen/synthgen.hpp"

namespace oculoscreen {

struct EvalConfig {
  int k = 5;
  std::uint64_t seed = 0;
  int repeats = 1;
  int jobs = 1;
};

// Every tunable number in one place. Built-in defaults, overlaid by a JSON
// file, overlaid by command-line flags.
struct AppConfig {
  PipelineConfig pipeline;
  TrainConfig training;
  EvalConfig evaluation;
  RiskThresholds risk;
  QualityPolicy quality_policy;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path data_dir = "data";
};

inline json to_json_value(const AppConfig& c) {
  return {{"pipeline", to_json_value(c.pipeline)},
          {"training", to_json_value(c.training)},
          {"evaluation",
           {{"k", c.evaluation.k}, {"seed", c.evaluation.seed}, {"repeats", c.evaluation.repeats}, {"jobs", c.evaluation.jobs}}},
          {"risk_thresholds", {{"elevated", c.risk.elevated}, {"high", c.risk.high}}},
          {"quality_policy", to_json_value(c.quality_policy)},
          {"service", {{"host", c.host}, {"port", c.port}, {"data_dir", c.data_dir.string()}}}};
}

inline AppConfig overlay_config(const json& j, AppConfig base = {}) {
  if (!j.is_object()) throw Error(ErrorCode::kParseError, "config root must be an object");
  try {
    if (j.contains("pipeline")) base.pipeline = pipeline_from_json(j.at("pipeline"), base.pipeline);
    if (j.contains("training")) base.training = train_from_json(j.at("training"), base.training);
    if (j.contains("evaluation")) {
      const auto& e = j.at("evaluation");
      if (e.contains("k")) base.evaluation.k = e.at("k").get<int>();
      if (e.contains("seed")) base.evaluation.seed = e.at("seed").get<std::uint64_t>();
      if (e.contains("repeats")) base.evaluation.repeats = e.at("repeats").get<int>();
      if (e.contains("jobs")) base.evaluation.jobs = e.at("jobs").get<int>();
    }
    if (j.contains("risk_thresholds")) {
      const auto& r = j.at("risk_thresholds");
      if (r.contains("elevated")) base.risk.elevated = r.at("elevated").get<double>();
      if (r.contains("high")) base.risk.high = r.at("high").get<double>();
    }
    if (j.contains("quality_policy")) {
      const auto& q = j.at("quality_policy");
      if (q.contains("min_width")) base.quality_policy.min_width = q.at("min_width").get<int>();
      if (q.contains("min_height")) base.quality_policy.min_height = q.at("min_height").get<int>();
      if (q.contains("min_mean_luma")) base.quality_policy.min_mean_luma = q.at("min_mean_luma").get<double>();
      if (q.contains("allow_override")) base.quality_policy.allow_override = q.at("allow_override").get<bool>();
    }
    if (j.contains("service")) {
      const auto& s = j.at("service");
      if (s.contains("host")) base.host = s.at("host").get<std::string>();
      if (s.contains("port")) base.port = s.at("port").get<int>();
      if (s.contains("data_dir")) base.data_dir = s.at("data_dir").get<std::string>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("config: ") + e.what());
  }
  base.risk.check();
  base.quality_policy.check();
  if (base.evaluation.repeats < 1 || base.evaluation.jobs < 1)
    throw Error(ErrorCode::kInvalidArgument, "repeats and jobs must be >= 1");
  return base;
}

inline AppConfig load_config(const std::filesystem::path& path, AppConfig base = {}) {
  return overlay_config(detail::read_json_file(path), std::move(base));
}

}  // namespace oculoscreen
