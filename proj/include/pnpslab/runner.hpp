#pragma once

// Experiment orchestration: config schema, canned experiments, run records.

#include "pnpslab/datagen.hpp"
#include "pnpslab/oracle.hpp"
#include "pnpslab/repranalysis.hpp"
#include "pnpslab/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace pnpslab {

enum class Experiment { PnpsReport, BiasSweep, InlpSweep, CrossGroup, MethodTable, Generate, Train, Probe };

std::string to_string(Experiment experiment);
Experiment parse_experiment(std::string_view text);

struct PnpsSettings {
  std::vector<TaskId> tasks{TaskId::A, TaskId::B, TaskId::C};
  std::size_t n_samples = 10000;
  double threshold = 0.5;
};

struct GenerateSettings {
  std::size_t n_train = 10000;
  std::size_t n_dev = 2000;
  std::size_t n_test = 2000;
};

/// Probing data shared by every experiment that measures extractability.
struct ProbingSettings {
  /// Examples drawn for representation read-out; MDL runs on the
  /// feature-balanced subset.
  std::size_t n_examples = 10000;
};

struct SweepSettings {
  std::vector<TaskId> tasks{TaskId::A, TaskId::B};
  std::vector<double> strengths{0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99};
  std::size_t n_train = 20000;
};

struct InlpSettings {
  /// Up to the full representation width, so removal can run to exhaustion.
  InlpConfig inlp{.max_iters = 64};
  TaskId low_pn_task = TaskId::A;
  double low_pn_strength = 0.5;
  TaskId high_pn_task = TaskId::C;
  std::size_t n_train = 30000;
  std::size_t n_rep_train = 5000;
  std::size_t n_rep_eval = 5000;
};

struct CrossGroupSettings {
  std::vector<TaskId> tasks{TaskId::A, TaskId::B};
  CrossGroupOptions options{};
  int epochs = 4;
};

struct MethodTableSettings {
  std::vector<Method> methods{Method::Erm, Method::Subsample, Method::Poe, Method::Dfl, Method::GroupDro};
  std::size_t low_pn_n_train = 30000;
  std::size_t high_pn_n_train = 60000;
  int high_pn_epochs = 4;
  double marker_prevalence = 0.5;
  double marker_strength = 0.9;
  int marker_target = 1;
  TaskId high_pn_task = TaskId::B;
  double high_pn_strength = 0.9;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::PnpsReport;
  TaskSpec task{};
  TrainConfig train{.adam = {.learning_rate = 3e-3}};
  ModelConfig model{};
  ProbeConfig probe{};
  MdlConfig mdl{};
  ProbingSettings probing{};
  PnpsSettings pnps{};
  GenerateSettings generate{};
  SweepSettings sweep{};
  InlpSettings inlp{};
  CrossGroupSettings cross_group{};
  MethodTableSettings method_table{};
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "runs";

  void validate() const;
};

/// Keys absent from `j` keep their defaults; unknown keys are a ConfigError.
ExperimentConfig parse_experiment_config(const nlohmann::json& j, ExperimentConfig base = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path, ExperimentConfig base = {});
nlohmann::json to_json(const ExperimentConfig& config);

struct RunContext {
  std::filesystem::path out_dir;
  int threads = 1;
};

struct RunRecord {
  nlohmann::json config;
  /// Git blob hash (SHA-1 over "blob <len>\0<canonical config>").
  std::string content_hash;
  std::string started_at;
  std::string finished_at;
  std::vector<std::string> artifacts; // relative to the run directory
  nlohmann::json summary = nlohmann::json::object();
};

std::string git_blob_hash(const std::string& content);
void write_run_record(const RunRecord& record, const std::filesystem::path& dir);

/// Calls fn(i) for i in [0, n) on up to `threads` workers; the first
/// exception (by index) is rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// --- Results -----------------------------------------------------------------

struct PnpsRow {
  TaskId task = TaskId::A;
  std::string feature;
  int target_label = 0;
  std::optional<double> pn, pn_stderr, ps, ps_stderr, spuriousness;
  std::optional<Category> category;
  EstimateMethod method = EstimateMethod::Exact;
  std::size_t n_samples = 0;
};

struct PnpsResult {
  std::vector<PnpsRow> rows;
  RunRecord record;
};

struct ExtractabilityRow {
  std::string cell;    // e.g. "A" or "low_pn"
  TaskId task = TaskId::A;
  double strength = 0.5;
  Method method = Method::Erm;
  std::uint64_t seed = 0;
  double compression = 0.0;
  double online_bits = 0.0;
  double uniform_bits = 0.0;
  double probe_acc = 0.0;
  double task_acc = 0.0;
  std::size_t n_fit = 0;
};

struct SweepResult {
  std::vector<ExtractabilityRow> rows; // sorted by (task, strength, seed)
  RunRecord record;
};

struct InlpRun {
  std::string feature_kind; // "low_pn" or "high_pn"
  TaskId task = TaskId::A;
  std::uint64_t seed = 0;
  InlpResult result;
};

struct InlpSweepResult {
  std::vector<InlpRun> runs; // sorted by (feature_kind, seed)
  RunRecord record;
};

struct CrossGroupRun {
  TaskId task = TaskId::A;
  std::uint64_t seed = 0;
  CrossGroupReport report;
};

struct CrossGroupResult {
  std::vector<CrossGroupRun> runs; // sorted by (task, seed)
  RunRecord record;
};

struct MethodTableResult {
  std::vector<ExtractabilityRow> rows; // sorted by (cell, method, seed)
  RunRecord record;
};

// --- Experiments -------------------------------------------------------------
// Each writes its CSVs, plot specs and run_record.json under ctx.out_dir.

std::vector<PnpsRow> pnps_rows(const ExperimentConfig& config);
PnpsResult run_pnps_report(const ExperimentConfig& config, const RunContext& ctx);
SweepResult run_bias_sweep(const ExperimentConfig& config, const RunContext& ctx);
InlpSweepResult run_inlp_sweep(const ExperimentConfig& config, const RunContext& ctx);
CrossGroupResult run_cross_group(const ExperimentConfig& config, const RunContext& ctx);
MethodTableResult run_method_table(const ExperimentConfig& config, const RunContext& ctx);

/// Writes train/dev/test JSONL files.
RunRecord run_generate(const ExperimentConfig& config, const RunContext& ctx);
/// Trains one model per seed and saves model checkpoints and histories.
RunRecord run_train(const ExperimentConfig& config, const RunContext& ctx);
/// Probes a checkpoint (or a freshly trained model when none is given).
RunRecord run_probe(const ExperimentConfig& config, const RunContext& ctx,
                    const std::optional<std::filesystem::path>& checkpoint);

/// Representations of a fresh probing sample and their extractability.
ExtractabilityRow measure_extractability(const Model& model, const Dataset& probing, const FeatureHandle& feature,
                                         const ExperimentConfig& config, std::uint64_t seed,
                                         MdlReport* mdl_out = nullptr);

// --- CSV writers -------------------------------------------------------------

void write_pnps_csv(std::ostream& out, const std::vector<PnpsRow>& rows);
void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& rows);
void write_extractability_csv(std::ostream& out, const std::vector<ExtractabilityRow>& rows);

double median(std::vector<double> values);

} // namespace pnpslab
