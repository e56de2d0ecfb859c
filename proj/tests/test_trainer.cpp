#include "cemrrl/eval.hpp"
#include "cemrrl/trainer.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <limits>
#include <regex>
#include <sstream>

using namespace cemrrl;
using testutil::tiny_config;

namespace {

// Records every hook as one character: S step, I intrinsic (i = skipped),
// C critic, A actor, E episode end.
struct EventProbe : TrainingProbe {
  std::string events;
  bool views_ok = true;
  std::vector<std::size_t> steps_per_episode;
  std::size_t steps = 0;

  void on_step(std::size_t, const marl::Transition&) override {
    events += 'S';
    ++steps;
  }
  void on_intrinsic_step(std::size_t, std::size_t, marl::SampleView view, bool updated) override {
    views_ok = views_ok && view == marl::SampleView::Transitions;
    events += updated ? 'I' : 'i';
  }
  void on_critic_update(std::size_t, std::size_t, marl::SampleView view) override {
    views_ok = views_ok && view == marl::SampleView::Trajectories;
    events += 'C';
  }
  void on_actor_update(std::size_t, std::size_t, marl::SampleView view) override {
    views_ok = views_ok && view == marl::SampleView::Trajectories;
    events += 'A';
  }
  void on_episode_end(const EpisodeLog&) override {
    events += 'E';
    steps_per_episode.push_back(steps);
    steps = 0;
  }
};

std::string train_log(const Config& c, std::uint64_t seed, std::size_t episodes) {
  Trainer t(c, seed);
  std::ostringstream out;
  t.train(episodes, &out);
  return out.str();
}

}  // namespace

TEST(Trainer, ScheduleOrdering) {
  EventProbe probe;
  Trainer t(tiny_config(), 3, &probe);
  const auto logs = t.train(5);
  EXPECT_TRUE(probe.views_ok);
  // each episode: (step, intrinsic) per timestep, then every critic, then every actor
  std::smatch m;
  std::string rest = probe.events;
  std::size_t count = 0;
  while (std::regex_search(rest, m, std::regex("^(S[Ii])+CCCAAAE"))) {
    EXPECT_EQ(m.length(0), static_cast<long>(2 * probe.steps_per_episode[count] + 7));
    rest = m.suffix();
    ++count;
  }
  EXPECT_TRUE(rest.empty()) << rest;
  EXPECT_EQ(count, 5u);
  // the buffer is empty during the first episode, so every intrinsic update skips
  const std::size_t first = probe.steps_per_episode[0];
  EXPECT_EQ(probe.events.substr(0, 2 * first).find('I'), std::string::npos);
  EXPECT_EQ(logs[0].intrinsic_updates, 0u);
  for (const auto& l : logs) EXPECT_TRUE(l.actor_critic_updated);
  std::size_t stored = logs[0].steps;
  for (std::size_t k = 1; k < logs.size(); ++k) {
    if (stored >= 16) {
      EXPECT_EQ(logs[k].intrinsic_updates, logs[k].steps);
    }
    stored += logs[k].steps;
  }
}

TEST(Trainer, FixedSeedReproducesMetricsLog) {
  const auto a = train_log(tiny_config(), 11, 3);
  const auto b = train_log(tiny_config(), 11, 3);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, train_log(tiny_config(), 12, 3));
}

TEST(Trainer, MetricsLogRecords) {
  const auto log = train_log(tiny_config(), 4, 3);
  std::istringstream in(log);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("schema"), "cemrrl.metrics");
    EXPECT_EQ(j.at("episode"), n);
    EXPECT_EQ(j.at("returns").size(), 3u);
    for (const char* key : {"intrinsic_mean", "success", "collision", "nav_time", "afe", "beta", "kappa_f", "kappa_s"})
      EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_GT(j.at("kappa_f").get<double>(), j.at("kappa_s").get<double>());
    EXPECT_EQ(int(j.at("success").get<bool>()) + int(j.at("collision").get<bool>()) + int(j.at("timeout").get<bool>()),
              1);
    ++n;
  }
  EXPECT_EQ(n, 3u);
}

TEST(Trainer, BufferRespectsCapacity) {
  Config c = tiny_config();
  c.hyper.buffer_capacity = 120;
  Trainer t(c, 5);
  for (int k = 0; k < 6; ++k) {
    t.run_episode();
    EXPECT_LE(t.buffer().size(), 120u);
  }
}

TEST(Trainer, DivergenceAbortsWithDiagnostic) {
  Trainer t(tiny_config(), 6);
  t.learner().critics()[1].params()[0].weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    t.run_episode();
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("training diverged"), std::string::npos);
    EXPECT_NE(what.find("critic_finite"), std::string::npos);
    EXPECT_NE(what.find("\"seed\":6"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Config c = tiny_config();
  Trainer t(c, 8);
  t.train(2);
  const auto path = std::filesystem::temp_directory_path() / "cemrrl_test_ckpt";
  write_checkpoint(path.string(), t.checkpoint());
  const Checkpoint back = read_checkpoint(path.string());
  std::filesystem::remove(path);

  const Checkpoint orig = t.checkpoint();
  ASSERT_EQ(back.tensors.size(), orig.tensors.size());
  for (std::size_t k = 0; k < orig.tensors.size(); ++k) {
    EXPECT_EQ(back.tensors[k].name, orig.tensors[k].name);
    EXPECT_EQ(back.tensors[k].data, orig.tensors[k].data) << orig.tensors[k].name;
  }
  EXPECT_EQ(back.meta.at("episodes_trained"), 2u);

  const auto loaded = load_learner(back);
  std::vector<NamedTensor> reexport;
  loaded.learner->export_tensors(reexport);
  for (std::size_t k = 0; k < orig.tensors.size(); ++k) EXPECT_EQ(reexport[k].data, orig.tensors[k].data);
  EXPECT_EQ(to_json(loaded.config), to_json(c));

  const auto m1 = eval::evaluate(eval::actor_policy_factory(t.learner(), c), c, 4, 1).metrics;
  const auto m2 = eval::evaluate_checkpoint(back, 4, 1).metrics;
  EXPECT_EQ(eval::to_json(m1), eval::to_json(m2));
}

TEST(Checkpoint, RejectsOtherKinds) {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "something-else"}};
  EXPECT_THROW(load_learner(ckpt), CheckpointError);
}

// Robot i's action may depend only on its own observation: poisoning every
// other robot's observation and the joint vector must leave it unchanged.
TEST(DecentralizedExecution, ActionReadsOnlyOwnObservation) {
  const Config c = tiny_config();
  Learner learner(c, 9);
  env::Environment environment(c.scenario, c.orca);
  Rng rng(2);
  const JointObservation obs = environment.reset(rng);
  const double nan = std::numeric_limits<double>::quiet_NaN();

  for (std::size_t i = 0; i < 3; ++i) {
    JointObservation poisoned = obs;
    poisoned.flat.setConstant(nan);
    for (std::size_t j = 0; j < 3; ++j) {
      if (j == i) continue;
      poisoned.per_robot[j].self_full.setConstant(nan);
      for (auto& o : poisoned.per_robot[j].others_observable) o.setConstant(nan);
    }
    auto clean_policy = eval::actor_policy_factory(learner, c)();
    auto poisoned_policy = eval::actor_policy_factory(learner, c)();
    clean_policy->begin_episode(obs);
    poisoned_policy->begin_episode(poisoned);
    Rng r1(5), r2(5);
    for (int step = 0; step < 3; ++step) {
      const auto a = clean_policy->act(obs, r1);
      const auto b = poisoned_policy->act(poisoned, r2);
      EXPECT_EQ(a[i].v, b[i].v);
      EXPECT_EQ(a[i].w, b[i].w);
      EXPECT_TRUE(std::isfinite(b[i].v) && std::isfinite(b[i].w));
    }
  }
}

TEST(DecentralizedExecution, DeterministicActionIsTanhOfMean) {
  const Config c = tiny_config();
  Learner learner(c, 10);
  const auto& actor = learner.actors()[0];
  Rng rng(1);
  const Vector tau = testutil::random_vector(static_cast<Eigen::Index>(actor.input_dim()), rng);
  const auto head = nn::make_head(actor.net().forward(tau), actor.policy_options());
  const auto s = actor.act(tau, rng, true);
  EXPECT_NEAR(s.action[0], c.scenario.v_max * std::tanh(head.mean[0]), 1e-12);
  EXPECT_NEAR(s.action[1], c.scenario.w_max * std::tanh(head.mean[1]), 1e-12);
}
