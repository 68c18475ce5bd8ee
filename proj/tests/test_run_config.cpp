#include <gtest/gtest.h>

#include "sembid/csv.hpp"
#include "sembid/error.hpp"
#include "sembid/run_config.hpp"
#include "test_util.hpp"

using namespace sembid;

TEST(RunConfig, DefaultsValidate) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.pipeline.seq_len, 64u);
  EXPECT_EQ(get_config_value(c, "bid.mode"), "target_rps");
  EXPECT_EQ(get_config_value(c, "bid.budget"), "");
}

TEST(RunConfig, SetAndGetEveryKey) {
  RunConfig c;
  for (const auto& key : run_config_keys()) {
    const std::string v = get_config_value(c, key);
    EXPECT_NO_THROW(set_config_value(c, key, v)) << key;
    EXPECT_EQ(get_config_value(c, key), v) << key;
  }
}

TEST(RunConfig, TypedValues) {
  RunConfig c;
  set_config_value(c, "seed", "18446744073709551615");
  EXPECT_EQ(c.seed, 18446744073709551615ULL);
  set_config_value(c, "embed.negative_term", "logistic");
  EXPECT_EQ(c.pipeline.embed.negative_term, NegativeTerm::Logistic);
  set_config_value(c, "rpc.tree_grid", "5, 10,20");
  EXPECT_EQ(c.pipeline.tree_grid, (std::vector<int>{5, 10, 20}));
  set_config_value(c, "bid.budget", "5");
  EXPECT_EQ(c.budget, 5.0);
  set_config_value(c, "sim.split", "traffic");
  EXPECT_EQ(c.sim_split, ArmSplit::Traffic);
  set_config_value(c, "sim.match_spend", "false");
  EXPECT_FALSE(c.sim_match_spend);
  set_config_value(c, "cluster.threshold", "0.1");
  EXPECT_EQ(c.pipeline.cluster_threshold, 0.1);

  EXPECT_THROW(set_config_value(c, "nope", "1"), Error);
  EXPECT_THROW(set_config_value(c, "seed", "-1"), Error);
  EXPECT_THROW(set_config_value(c, "seed", "12x"), Error);
  EXPECT_THROW(set_config_value(c, "embed.epochs", "2.5"), Error);
  EXPECT_THROW(set_config_value(c, "sim.match_spend", "yes"), Error);
  EXPECT_THROW(set_config_value(c, "bid.mode", "cheap"), Error);
  EXPECT_THROW(set_config_value(c, "world.noise_scale", "abc"), Error);
}

TEST(RunConfig, SerializeRoundTrip) {
  RunConfig c = preset_config("table3");
  c.budget = 12.5;
  c.pipeline.l2_grid = {0.1, 1e-7};
  c.world.noise_scale = 0.123456789012345;
  const std::string text = serialize_run_config(c);
  const RunConfig back = parse_run_config(text);
  EXPECT_EQ(serialize_run_config(back), text);
  EXPECT_EQ(back.world.noise_scale, c.world.noise_scale);
  EXPECT_EQ(back.pipeline.l2_grid, c.pipeline.l2_grid);

  test_support::TempDir dir;
  save_run_config(dir.file("run.cfg"), c);
  EXPECT_EQ(serialize_run_config(load_run_config(dir.file("run.cfg"))), text);
}

TEST(RunConfig, ParseCommentsAndErrors) {
  const RunConfig c = parse_run_config("# header\n\n  seed = 7   # trailing\nworld.n_ads=50\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.world.n_ads, 50u);
  EXPECT_EQ(c.threads, 1);  // untouched keys keep defaults

  try {
    parse_run_config("seed = 1\nwrong.key = 3\n", "run.cfg");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_EQ(e.field(), "wrong.key");
  }
  EXPECT_THROW(parse_run_config("seed 1\n"), ParseError);
}

TEST(RunConfig, OverridesWin) {
  RunConfig c = parse_run_config("seed = 3\n");
  apply_override(c, "seed=9");
  apply_override(c, " gbrt.n_trees = 17 ");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.pipeline.gbrt.n_trees, 17);
  EXPECT_THROW(apply_override(c, "seed"), Error);
}

TEST(RunConfig, ValidateRejectsBadValues) {
  RunConfig c;
  c.rpc_model = "forest";
  EXPECT_THROW(c.validate(), Error);
  c = RunConfig{};
  c.budget = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = RunConfig{};
  c.world.feedback_sparsity = 2.0;
  EXPECT_THROW(c.validate(), Error);
  c = RunConfig{};
  c.pipeline.embed.shape.heads = 3;
  EXPECT_THROW(c.validate(), Error);
}

TEST(RunConfig, Presets) {
  for (const auto& name : preset_names()) EXPECT_NO_THROW(preset_config(name).validate()) << name;
  EXPECT_EQ(preset_config("table2").world.feedback_sparsity, 0.9);
  EXPECT_EQ(preset_config("table3").sim_seeds, 20u);
  EXPECT_EQ(preset_config("table3").sim_split, ArmSplit::Traffic);
  EXPECT_FALSE(preset_config("table3").sim_common_random_numbers);
  const RunConfig null = preset_config("null");
  EXPECT_EQ(null.world.feedback_sparsity, 0.0);
  EXPECT_LT(null.pipeline.cluster_threshold, 0.0);
  EXPECT_EQ(null.sim_split, ArmSplit::Traffic);
  EXPECT_THROW(preset_config("table9"), Error);
}

TEST(RunConfig, SyncPropagatesSeed) {
  RunConfig c;
  c.seed = 42;
  c.threads = 3;
  c.sync();
  EXPECT_EQ(c.pipeline.seed, 42u);
  EXPECT_EQ(c.world.seed, 42u);
  EXPECT_EQ(c.pipeline.threads, 3);
}
