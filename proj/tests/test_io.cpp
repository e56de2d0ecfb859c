#include "cemrrl/checkpoint.hpp"
#include "cemrrl/config.hpp"
#include "cemrrl/trajectory_io.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace cemrrl;
using testutil::tiny_config;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "cemrrl_test_io";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  Config c = tiny_config();
  c.scenario.num_pedestrians = 7;
  c.hyper.target_entropy = -4.5;
  c.hyper.alpha_scale = 0.3;
  c.orca.robot_share = 0.25;
  c.terms.use_entropy = false;
  c.stochastic_eval = true;
  const Config back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.hyper.target_entropy, -4.5);
  EXPECT_EQ(back.network.actor_hidden, c.network.actor_hidden);

  const auto path = scratch("config.json");
  save_config(path.string(), c);
  EXPECT_EQ(to_json(load_config(path.string())), to_json(c));
}

TEST(Config, PartialOverlayKeepsDefaults) {
  const auto j = nlohmann::json::parse(R"({"hyper": {"alpha_scale": 2.0}, "scenario": {"num_pedestrians": 9}})");
  const Config c = config_from_json(j);
  EXPECT_EQ(c.hyper.alpha_scale, 2.0);
  EXPECT_EQ(c.scenario.num_pedestrians, 9u);
  EXPECT_EQ(c.hyper.lambda_reg, 0.1);
  EXPECT_EQ(c.scenario.dt, 0.25);
  EXPECT_EQ(c.hyper.resolved_target_entropy(c.scenario), -6.0);
}

TEST(Config, RejectsUnknownAndInvalid) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"hyperz": {}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"hyper": {"alpha": 1}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"hyper": {"gamma": "high"}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse("[1, 2]")), ConfigError);
  EXPECT_THROW(load_config(scratch("missing.json").string()), ConfigError);
  const auto bad = scratch("bad.json");
  std::ofstream(bad) << "{ not json";
  EXPECT_THROW(load_config(bad.string()), ConfigError);
}

TEST(Checkpoint, FileRoundTripAndErrors) {
  Checkpoint c;
  c.tensors.push_back({"a", {2, 3}, {1.0, -2.5, 3e-300, 0.1, 1.0 / 3.0, -0.0}});
  c.tensors.push_back({"b", {1}, {42.0}});
  c.meta = {{"kind", "test"}, {"n", 3}};
  const auto path = scratch("ckpt");
  write_checkpoint(path.string(), c);
  const auto back = read_checkpoint(path.string());
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.tensors[0].data, c.tensors[0].data);
  EXPECT_TRUE(std::signbit(back.tensors[0].data[5]));
  EXPECT_EQ(back.tensors[0].shape, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(back.get("b").data[0], 42.0);
  EXPECT_EQ(back.meta, c.meta);
  EXPECT_THROW(back.get("zzz"), std::runtime_error);

  Checkpoint wrong;
  wrong.tensors.push_back({"x", {2}, {1.0}});
  EXPECT_THROW(write_checkpoint(scratch("w").string(), wrong), CheckpointError);

  const auto not_ckpt = scratch("not_ckpt");
  std::ofstream(not_ckpt) << "hello\n";
  EXPECT_THROW(read_checkpoint(not_ckpt.string()), CheckpointError);
  EXPECT_THROW(read_checkpoint(scratch("absent").string()), CheckpointError);

  // chop the tail off the binary payload
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  const auto cut = scratch("cut");
  std::ofstream(cut, std::ios::binary) << bytes.substr(0, bytes.size() - 4);
  EXPECT_THROW(read_checkpoint(cut.string()), CheckpointError);
  const auto garbled = scratch("garbled");
  std::ofstream(garbled, std::ios::binary) << kCheckpointMagic << "\n{oops\n";
  EXPECT_THROW(read_checkpoint(garbled.string()), CheckpointError);
}

TEST(Trajectories, ExportCountsSchemaAndRoundTrip) {
  const Config c = tiny_config();
  Learner learner(c, 2);
  std::stringstream out;
  const std::size_t written = io::export_trajectories(learner, c, 1, 17, out);

  // independent replay of the same episode through the evaluation harness
  std::vector<World> worlds;
  const auto report = eval::evaluate(eval::actor_policy_factory(learner, c), c, 1, 17, 1,
                                     [&](std::size_t, std::size_t, const env::Environment& e, const env::JointAction&,
                                         const env::StepOutcome&) { worlds.push_back(e.world()); });
  EXPECT_EQ(written, report.episodes[0].steps);

  std::string line;
  std::size_t lines = 0;
  std::istringstream raw(out.str());
  while (std::getline(raw, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("schema_version"), 1);
    EXPECT_EQ(j.at("schema"), "cemrrl.trajectory");
    ++lines;
  }
  EXPECT_EQ(lines, written);

  const auto records = io::read_trajectories(out);
  ASSERT_EQ(records.size(), worlds.size());
  for (std::size_t s = 0; s < records.size(); ++s) {
    const auto& r = records[s];
    EXPECT_EQ(r.step, s);
    EXPECT_EQ(r.t, 0.25 * static_cast<double>(s + 1));
    ASSERT_EQ(r.agents.size(), worlds[s].size());
    for (std::size_t a = 0; a < r.agents.size(); ++a) {
      EXPECT_EQ(r.agents[a].x, worlds[s][a].position.x());
      EXPECT_EQ(r.agents[a].y, worlds[s][a].position.y());
      EXPECT_EQ(r.agents[a].heading, worlds[s][a].heading);
    }
    EXPECT_EQ(r.agents[0].kind, "leader");
    EXPECT_EQ(r.actions.size(), 3u);
    EXPECT_EQ(r.formation_errors.size(), 2u);
    EXPECT_EQ(r.intrinsic.total, std::sqrt(2.0 * r.intrinsic.b_s) * r.intrinsic.n_d + r.intrinsic.c_s);
    const bool last = s + 1 == records.size();
    EXPECT_EQ(r.termination == "Running", !last);
  }
}

TEST(Trajectories, EpisodeCountScalesRecords) {
  const Config c = tiny_config();
  Learner learner(c, 3);
  std::stringstream out;
  const std::size_t n = io::export_trajectories(learner, c, 3, 5, out);
  const auto records = io::read_trajectories(out);
  EXPECT_EQ(records.size(), n);
  EXPECT_EQ(records.back().episode, 2u);
  const auto report = eval::evaluate(eval::actor_policy_factory(learner, c), c, 3, 5);
  std::size_t steps = 0;
  for (const auto& e : report.episodes) steps += e.steps;
  EXPECT_EQ(n, steps);
}

TEST(Trajectories, ParseErrors) {
  EXPECT_THROW(io::parse_trajectory_record("{"), io::TrajectoryFormatError);
  EXPECT_THROW(io::parse_trajectory_record(R"({"schema": "other"})"), io::TrajectoryFormatError);
  EXPECT_THROW(io::parse_trajectory_record(R"({"schema": "cemrrl.trajectory", "schema_version": 2})"),
               io::TrajectoryFormatError);
  EXPECT_THROW(io::parse_trajectory_record(R"({"schema": "cemrrl.trajectory", "schema_version": 1})"),
               io::TrajectoryFormatError);
  io::TrajectoryRecord r;
  r.agents.push_back({"pedestrian", 0.1, 0.2, 0.3, 0.4, -3.0, 0.3});
  r.actions.push_back({0.5, -0.5});
  r.intrinsic = {0.1, 0.2, 0.3, 0.4};
  const auto back = io::parse_trajectory_record(io::to_json(r).dump());
  EXPECT_EQ(back.agents, r.agents);
  EXPECT_EQ(back.actions, r.actions);
  EXPECT_EQ(back.intrinsic.c_s, 0.3);
}

TEST(Config, ShippedConfigsLoad) {
  const std::string dir = CEMRRL_CONFIG_DIR;
  EXPECT_EQ(to_json(load_config(dir + "/default.json")), to_json(Config{}));
  const Config desk = load_config(dir + "/desk_trend.json");
  EXPECT_EQ(desk.hyper.resolved_intrinsic_batch(), 32u);
  EXPECT_EQ(desk.hyper.batch_size, 256u);
}
