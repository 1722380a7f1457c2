#include "pnpslab/errors.hpp"
#include "pnpslab/runner.hpp"

#include <doctest.h>

#include <sys/wait.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace pnpslab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "pnpslab_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

std::size_t data_rows(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n - 1;
}

// Small enough for unit tests; the acceptance binary runs the real sizes.
ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.model.embed_dim = 8;
  c.model.hidden_dim = 8;
  c.model.mlp_hidden = 8;
  c.train.epochs = 1;
  c.probing.n_examples = 600;
  c.mdl.schedule = {0.1, 0.5, 1.0};
  c.sweep.strengths = {0.5, 0.9};
  c.sweep.n_train = 600;
  c.inlp.n_train = 600;
  c.inlp.n_rep_train = 400;
  c.inlp.n_rep_eval = 400;
  c.inlp.inlp.max_iters = 3;
  c.cross_group.options = {1000, 400};
  c.cross_group.epochs = 1;
  c.method_table.low_pn_n_train = 600;
  c.method_table.high_pn_n_train = 600;
  c.method_table.high_pn_epochs = 1;
  c.pnps.n_samples = 2000;
  c.seeds = {0, 1};
  return c;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(PNPSLAB_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_SUITE("runner") {

TEST_CASE("config parsing keeps defaults and rejects unknown keys") {
  const ExperimentConfig d = parse_experiment_config(json::object());
  CHECK(to_json(d) == to_json(ExperimentConfig{}));

  const ExperimentConfig c = parse_experiment_config(json::parse(R"({
      "experiment": "bias_sweep",
      "task": {"task_id": "B", "bias_strength": 0.8},
      "train": {"method": "group_dro", "epochs": 2},
      "sweep": {"strengths": [0.5, 0.7]},
      "seeds": [3, 4]})"));
  CHECK(c.experiment == Experiment::BiasSweep);
  CHECK(c.task.task_id == TaskId::B);
  CHECK(c.task.bias_strength == 0.8);
  CHECK(c.train.method == Method::GroupDro);
  CHECK(c.train.epochs == 2);
  CHECK(c.sweep.strengths == std::vector<double>{0.5, 0.7});
  CHECK(c.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(c.probe.l2 == 1e-4);

  CHECK(to_json(parse_experiment_config(to_json(c))) == to_json(c));

  for (const char* bad : {R"({"sedes": [1]})", R"({"train": {"lr": 0.1}})", R"({"inlp": {"max_iter": 3}})",
                          R"({"mdl": {"schedule": [0.5, 1.0], "blocks": 2}})", R"({"task": {"bias": 0.9}})"})
    CHECK_THROWS_AS(parse_experiment_config(json::parse(bad)), ConfigError);
  for (const char* bad : {R"({"seeds": []})", R"({"train": {"epochs": "three"}})", R"({"experiment": "tables"})",
                          R"({"sweep": {"strengths": [0.3]}})", R"({"mdl": {"schedule": [0.5, 0.9]}})",
                          R"({"train": {"method": "jtt"}})", R"({"model": 3})"})
    CHECK_THROWS_AS_MESSAGE(parse_experiment_config(json::parse(bad)), Error, std::string(bad));
}

TEST_CASE("config files") {
  const fs::path dir = scratch("config");
  std::ofstream(dir / "ok.json") << R"({"experiment": "pnps_report", "pnps": {"tasks": ["C"]}})";
  CHECK(load_experiment_config(dir / "ok.json").pnps.tasks == std::vector<TaskId>{TaskId::C});
  std::ofstream(dir / "broken.json") << "{\"experiment\": ";
  CHECK_THROWS_AS(load_experiment_config(dir / "broken.json"), ConfigError);
  CHECK_THROWS_AS(load_experiment_config(dir / "missing.json"), ConfigError);
}

TEST_CASE("git blob hash") {
  CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("median") {
  CHECK(median({3, 1, 2}) == 2);
  CHECK(median({4, 1, 3, 2}) == 2.5);
  CHECK(std::isnan(median({})));
}

TEST_CASE("parallel_for covers every index and rethrows") {
  for (int threads : {1, 3}) {
    std::vector<int> hits(50, 0);
    parallel_for(50, threads, [&](std::size_t i) { hits[i] += 1; });
    CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    std::atomic<int> ran{0};
    CHECK_THROWS_AS(parallel_for(10, threads,
                                 [&](std::size_t i) {
                                   ++ran;
                                   if (i == 4) throw NumericError("boom");
                                 }),
                    NumericError);
    CHECK(ran == 10);
  }
}

TEST_CASE("pnps report rows and CSV") {
  ExperimentConfig c = tiny_config();
  const fs::path dir = scratch("pnps");
  const auto r = run_pnps_report(c, {dir, 1});
  CHECK(first_line(dir / "pnps.csv") ==
        "task,feature,target_label,pn,pn_stderr,ps,ps_stderr,spuriousness,category,method,n_samples");
  CHECK(data_rows(dir / "pnps.csv") == 2 * (2 + 2 + 3));
  bool saw_a = false, saw_c = false;
  for (const auto& row : r.rows) {
    if (row.method != EstimateMethod::Exact) continue;
    if (row.task == TaskId::A && row.target_label == 1) {
      saw_a = true;
      CHECK(*row.pn == 0.0);
      CHECK(*row.ps == 0.0);
      CHECK(*row.category == Category::Irrelevant);
    }
    if (row.task == TaskId::C && row.target_label == 2) {
      saw_c = true;
      CHECK(*row.pn == 1.0);
      CHECK(*row.ps == doctest::Approx(0.3).epsilon(1e-15));
      CHECK(*row.category == Category::NecessaryNotSufficient);
    }
  }
  CHECK(saw_a);
  CHECK(saw_c);
  for (std::size_t i = 0; i + 1 < r.rows.size(); i += 2) {
    const auto& exact = r.rows[i];
    const auto& mc = r.rows[i + 1];
    REQUIRE(mc.method == EstimateMethod::MonteCarlo);
    if (exact.pn) CHECK(std::abs(*mc.pn - *exact.pn) <= 4 * *mc.pn_stderr + 1e-12);
    if (exact.ps) CHECK(std::abs(*mc.ps - *exact.ps) <= 4 * *mc.ps_stderr + 1e-12);
  }

  const json record = json::parse(slurp(dir / "run_record.json"));
  CHECK(record["content_hash"].get<std::string>().size() == 40);
  CHECK(record["artifacts"] == json::array({"pnps.csv", "pnps_plot.json"}));
  CHECK(record["config"]["experiment"] == "pnps_report");
  CHECK(json::parse(slurp(dir / "pnps_plot.json")).contains("$schema"));
}

TEST_CASE("bias sweep is deterministic and complete") {
  ExperimentConfig c = tiny_config();
  const fs::path a = scratch("sweep_a"), b = scratch("sweep_b");
  const auto ra = run_bias_sweep(c, {a, 1});
  run_bias_sweep(c, {b, 2});
  CHECK(ra.rows.size() == 2 * 2 * 2);
  CHECK(data_rows(a / "sweep.csv") == 8);
  CHECK(first_line(a / "sweep.csv") ==
        "cell,task,strength,method,seed,compression,online_bits,uniform_bits,probe_acc,task_acc,n_fit");
  CHECK(slurp(a / "sweep.csv") == slurp(b / "sweep.csv"));
  for (const auto& f : ra.record.artifacts)
    if (f.ends_with(".csv")) CHECK(slurp(a / f) == slurp(b / f));
  CHECK(first_line(a / "history" / "A_erm_s0.5_seed0.csv") == "epoch,split,group,n,loss,accuracy,method,seed");
  CHECK(json::parse(slurp(a / "run_record.json"))["summary"]["seeds"] == json::array({0, 1}));
  CHECK(json::parse(slurp(a / "run_record.json"))["content_hash"] ==
        json::parse(slurp(b / "run_record.json"))["content_hash"]);
}

TEST_CASE("INLP sweep, cross-group and method table emit their tables") {
  ExperimentConfig c = tiny_config();
  c.seeds = {0};
  const fs::path inlp_dir = scratch("inlp");
  const auto ri = run_inlp_sweep(c, {inlp_dir, 1});
  CHECK(ri.runs.size() == 2);
  CHECK(first_line(inlp_dir / "inlp" / "high_pn_seed0.csv") ==
        "iteration,rank,probe_acc,task_acc_overall,task_acc_minority");
  CHECK(fs::exists(inlp_dir / "inlp_plot.json"));

  const fs::path cg = scratch("cross_group");
  const auto rc = run_cross_group(c, {cg, 1});
  CHECK(rc.runs.size() == 2);
  const std::string table = slurp(cg / "cross_group.csv");
  CHECK(table.find("in-distribution") != std::string::npos);
  CHECK(table.find("out-of-distribution") != std::string::npos);

  const fs::path mt = scratch("method_table");
  const auto rm = run_method_table(c, {mt, 1});
  CHECK(rm.rows.size() == 5 * 2);
  CHECK(data_rows(mt / "method_table_summary.csv") == 10);
  for (const auto& row : rm.rows) {
    CHECK(row.compression > 0.0);
    CHECK(row.uniform_bits > 0.0);
  }
}

TEST_CASE("generate, train and probe round trip through files") {
  ExperimentConfig c = tiny_config();
  c.seeds = {0};
  c.generate = {300, 100, 100};
  const fs::path gen = scratch("generate");
  const auto rg = run_generate(c, {gen, 1});
  CHECK(rg.artifacts.size() == 6);
  CHECK(fs::exists(gen / "data" / "seed0" / "train.jsonl"));

  const fs::path tr = scratch("train");
  run_train(c, {tr, 1});
  const fs::path ckpt = tr / "seed0" / "model.ckpt";
  REQUIRE(fs::exists(ckpt));
  const fs::path pr = scratch("probe");
  const auto rp = run_probe(c, {pr, 1}, ckpt);
  CHECK(rp.summary.contains("compression"));
  CHECK(first_line(pr / "mdl.csv") == "block_end,block_codelength_bits,cumulative_bits,compression");
}

TEST_CASE("CLI exit codes and output override") {
  const fs::path dir = scratch("cli");
  std::ofstream(dir / "unknown.json") << R"({"experimnt": "pnps_report"})";
  std::ofstream(dir / "numeric.json") << R"({"train": {"learning_rate": 1e308, "epochs": 2},
      "model": {"embed_dim": 4, "hidden_dim": 4, "mlp_hidden": 4},
      "generate": {"n_train": 64, "n_dev": 16, "n_test": 16}})";
  std::ofstream(dir / "small.json") << R"({"pnps": {"tasks": ["A"], "n_samples": 100}})";
  std::ofstream(dir / "schedule.json") << R"({"mdl": {"schedule": [0.5, 0.9]}})";
  CHECK(run_cli("--config " + (dir / "unknown.json").string() + " pnps") == 2);
  CHECK(run_cli("--config " + (dir / "schedule.json").string() + " pnps") == 2);
  CHECK(run_cli("--bogus pnps") == 2);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("--config " + (dir / "numeric.json").string() + " --out " + (dir / "num").string() + " train") == 3);
  CHECK(run_cli("--config " + (dir / "small.json").string() + " --out " + (dir / "flag").string() + " pnps") == 0);
  CHECK(fs::exists(dir / "flag" / "pnps.csv"));
  CHECK(run_cli("--config " + (dir / "small.json").string() + " --out " + (dir / "flag").string() + " --seed 5 pnps") == 0);
  const std::string env = "PNPSLAB_OUT=" + (dir / "env").string() + " ";
  const int status = std::system((env + PNPSLAB_CLI_PATH + " --config " + (dir / "small.json").string() + " --out " +
                                  (dir / "ignored").string() + " pnps > /dev/null 2>&1")
                                     .c_str());
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(fs::exists(dir / "env" / "pnps.csv"));
  CHECK_FALSE(fs::exists(dir / "ignored"));
}

} // TEST_SUITE
