#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "sembid/csv.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using sembid::test_support::TempDir;

namespace {

struct CliRun {
  int code = -1;
  std::string output;
};

CliRun run_cli(const TempDir& dir, const std::string& args) {
  const std::string log = dir.file("cli.log");
  const std::string cmd = "cd '" + dir.path().string() + "' && '" SEMBID_CLI_PATH "' " + args + " > '" + log + "' 2>&1";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = sembid::csv::read_text_file(log);
  return r;
}

void write(const TempDir& dir, const std::string& name, const std::string& text) {
  sembid::csv::write_text_file(dir.file(name), text);
}

std::string read(const fs::path& p) { return sembid::csv::read_text_file(p.string()); }

// Small enough that every stage finishes in about a second.
const char* kSmallConfig =
    "world.n_ads = 300\n"
    "world.n_product_types = 2\n"
    "world.themes_per_type = 2\n"
    "world.feedback_sparsity = 0.5\n"
    "tokenize.seq_len = 16\n"
    "embed.layers = 1\n"
    "embed.heads = 2\n"
    "embed.d_model = 16\n"
    "embed.d_ff = 32\n"
    "embed.d_out = 8\n"
    "embed.epochs = 2\n"
    "embed.negative_term = logistic\n"
    "classifier.epochs = 10\n"
    "gbrt.n_trees = 30\n"
    "rpc.tree_grid = 10,30\n";

void run_pipeline(const TempDir& dir, const std::string& out) {
  const std::string c = "--config small.cfg --out " + out + " ";
  ASSERT_EQ(run_cli(dir, c + "simulate --emit-world").code, 0);
  const std::string w = out + "/world/";
  ASSERT_EQ(run_cli(dir, c + "ingest --catalog " + w + "catalog.csv --search-terms " + w + "search_terms.csv").code, 0);
  for (const char* stage : {"pairs", "train-embed", "embed", "cluster"}) {
    const CliRun r = run_cli(dir, c + stage);
    ASSERT_EQ(r.code, 0) << stage << ": " << r.output;
  }
  ASSERT_EQ(run_cli(dir, c + "train-rpc --response " + w + "response.csv").code, 0);
  ASSERT_EQ(run_cli(dir, c + "eval --response " + w + "response.csv").code, 0);
  ASSERT_EQ(run_cli(dir, c + "bid").code, 0);
}

}  // namespace

TEST(Cli, NoArgumentsPrintsUsage) {
  TempDir dir;
  const CliRun r = run_cli(dir, "");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("Usage"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  TempDir dir;
  EXPECT_EQ(run_cli(dir, "frobnicate").code, 2);
  EXPECT_EQ(run_cli(dir, "bid --no-such-flag").code, 2);
  EXPECT_EQ(run_cli(dir, "bid --budget notanumber").code, 2);
  EXPECT_EQ(run_cli(dir, "--help").code, 0);
}

TEST(Cli, StageErrorsExitOne) {
  TempDir dir;
  CliRun r = run_cli(dir, "bid --groups missing.csv");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("missing.csv"), std::string::npos);
  write(dir, "bad.csv", "group_id,rpc\ng1,-1\n");
  r = run_cli(dir, "bid --groups bad.csv");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("non-negative"), std::string::npos);
  EXPECT_EQ(run_cli(dir, "--set nope=1 bid --groups bad.csv").code, 1);
  EXPECT_EQ(run_cli(dir, "pairs").code, 1);  // nothing ingested yet
  EXPECT_EQ(run_cli(dir, "simulate --preset table9").code, 1);
}

TEST(Cli, BudgetBidsTwoGroupInstance) {
  TempDir dir;
  write(dir, "groups.csv", "group_id,rpc,click_slope\ng1,2,1\ng2,1,1\n");
  const CliRun r = run_cli(dir, "bid --mode budget --budget 5 --groups groups.csv");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("g1=2 g2=1"), std::string::npos) << r.output;
  EXPECT_EQ(read(dir.path() / "out" / "bids.csv"), "group_id,bid\ng1,2\ng2,1\n");
}

TEST(Cli, ConfigFileThenOverrides) {
  TempDir dir;
  write(dir, "groups.csv", "group_id,rpc,click_slope\ng1,3,1\ng2,1,2\n");
  write(dir, "run.cfg", "bid.mode = budget\nbid.budget = 5\n");
  const CliRun r = run_cli(dir, "--config run.cfg --set bid.budget=11 bid --groups groups.csv");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read(dir.path() / "out" / "bids.csv"), "group_id,bid\ng1,3\ng2,1\n");
  const std::string logged = read(dir.path() / "out" / "config.bid.txt");
  EXPECT_NE(logged.find("bid.budget = 11\n"), std::string::npos);
  // A flag beats both.
  ASSERT_EQ(run_cli(dir, "--config run.cfg --set bid.budget=11 bid --budget 44 --groups groups.csv").code, 0);
  EXPECT_EQ(read(dir.path() / "out" / "bids.csv"), "group_id,bid\ng1,6\ng2,2\n");
}

TEST(Cli, StagedPipelineIsByteIdentical) {
  // Same relative paths in two scratch directories, so the configs match too.
  TempDir first, second;
  for (const TempDir* d : {&first, &second}) {
    write(*d, "small.cfg", kSmallConfig);
    run_pipeline(*d, "out");
  }
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(first.path() / "out")) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), first.path());
    ASSERT_TRUE(fs::exists(second.path() / rel)) << rel;
    EXPECT_EQ(read(entry.path()), read(second.path() / rel)) << rel;
    ++compared;
  }
  EXPECT_GE(compared, 20u);
  for (const char* f : {"catalog.csv", "pairs.csv", "embed_model.txt", "embeddings.csv", "groups.csv",
                        "rpc_model.txt", "economics.csv", "bids.csv", "eval.csv"}) {
    EXPECT_TRUE(fs::exists(first.path() / "out" / f)) << f;
  }
}

TEST(Cli, LoggedConfigReplaysStage) {
  TempDir dir;
  write(dir, "small.cfg", kSmallConfig);
  run_pipeline(dir, "a");
  const std::string before = read(dir.path() / "a" / "embeddings.csv");
  fs::remove(dir.path() / "a" / "embeddings.csv");
  ASSERT_EQ(run_cli(dir, "--config a/config.embed.txt embed").code, 0);
  EXPECT_EQ(read(dir.path() / "a" / "embeddings.csv"), before);
}

TEST(Cli, SimulateWritesReports) {
  TempDir dir;
  write(dir, "small.cfg", kSmallConfig);
  CliRun r = run_cli(dir, "--config small.cfg --out s1 simulate --seeds 2");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("AB"), std::string::npos);
  ASSERT_EQ(run_cli(dir, "--config small.cfg --out s2 simulate --seeds 2").code, 0);
  for (const char* f : {"offline.csv", "experiment.csv", "simulate_report.txt"}) {
    EXPECT_EQ(read(dir.path() / "s1" / f), read(dir.path() / "s2" / f)) << f;
  }
  const std::string offline = read(dir.path() / "s1" / "offline.csv");
  EXPECT_EQ(offline.rfind("seed,model,mode,", 0), 0u);
  EXPECT_NE(offline.find("\n2,gbrt,cluster,"), std::string::npos);
  // Two workers give the same bytes as one.
  ASSERT_EQ(run_cli(dir, "--config small.cfg --out s3 --threads 2 simulate --seeds 2").code, 0);
  EXPECT_EQ(read(dir.path() / "s1" / "experiment.csv"), read(dir.path() / "s3" / "experiment.csv"));
}
