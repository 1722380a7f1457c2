#include "pnpslab/runner.hpp"

#include "pnpslab/checkpoint.hpp"
#include "pnpslab/csv.hpp"
#include "pnpslab/dataset_io.hpp"
#include "pnpslab/errors.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace pnpslab {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Experiment experiment) {
  switch (experiment) {
  case Experiment::PnpsReport: return "pnps_report";
  case Experiment::BiasSweep: return "bias_sweep";
  case Experiment::InlpSweep: return "inlp_sweep";
  case Experiment::CrossGroup: return "cross_group";
  case Experiment::MethodTable: return "method_table";
  case Experiment::Generate: return "generate";
  case Experiment::Train: return "train";
  case Experiment::Probe: return "probe";
  }
  return "?";
}

Experiment parse_experiment(std::string_view text) {
  for (auto e : {Experiment::PnpsReport, Experiment::BiasSweep, Experiment::InlpSweep, Experiment::CrossGroup,
                 Experiment::MethodTable, Experiment::Generate, Experiment::Train, Experiment::Probe})
    if (text == to_string(e)) return e;
  throw ConfigError("unknown experiment '" + std::string(text) + "'");
}

// --- Config ------------------------------------------------------------------

namespace {

/// Reads known keys of one JSON object and rejects the rest.
class ObjectReader {
public:
  ObjectReader(const json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError("'" + context_ + "' must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("bad value for '" + context_ + "." + key + "': " + e.what());
    }
  }

  template <class T, class Parse>
  void get_parsed(const char* key, T& out, Parse parse) {
    std::string text;
    auto it = j_.find(key);
    if (it == j_.end()) return;
    get(key, text);
    out = parse(text);
  }

  template <class T, class Parse>
  void get_parsed_list(const char* key, std::vector<T>& out, Parse parse) {
    std::vector<std::string> texts;
    auto it = j_.find(key);
    if (it == j_.end()) return;
    get(key, texts);
    out.clear();
    for (const auto& t : texts) out.push_back(parse(t));
  }

  const json* sub(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + context_ + "." + key + "'");
  }

private:
  const json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

std::vector<std::string> names(const std::vector<TaskId>& tasks) {
  std::vector<std::string> out;
  for (auto t : tasks) out.push_back(to_string(t));
  return out;
}

} // namespace

void ExperimentConfig::validate() const {
  task.validate();
  train.validate();
  model.validate();
  probe.validate();
  mdl.validate();
  inlp.inlp.validate();
  if (seeds.empty()) throw ConfigError("seeds must be non-empty");
  if (pnps.tasks.empty() || sweep.tasks.empty() || cross_group.tasks.empty())
    throw ConfigError("task lists must be non-empty");
  if (pnps.n_samples == 0) throw ConfigError("pnps.n_samples must be >= 1");
  if (!(pnps.threshold > 0.0 && pnps.threshold <= 1.0)) throw ConfigError("pnps.threshold must lie in (0, 1]");
  if (sweep.strengths.empty()) throw ConfigError("sweep.strengths must be non-empty");
  for (double s : sweep.strengths)
    if (!(s >= 0.5 && s <= 1.0)) throw ConfigError("sweep strengths must lie in [0.5, 1]");
  if (method_table.methods.empty()) throw ConfigError("method_table.methods must be non-empty");
  if (!(method_table.high_pn_strength >= 0.5 && method_table.high_pn_strength <= 1.0))
    throw ConfigError("method_table.high_pn_strength must lie in [0.5, 1]");
  if (!(method_table.marker_prevalence >= 0.0 && method_table.marker_prevalence <= 1.0) ||
      !(method_table.marker_strength >= 0.0 && method_table.marker_strength <= 1.0))
    throw ConfigError("marker prevalence and strength must lie in [0, 1]");
  if (cross_group.epochs < 1 || method_table.high_pn_epochs < 1) throw ConfigError("epochs must be >= 1");
  if (probing.n_examples < 4) throw ConfigError("probing.n_examples must be >= 4");
  if (sweep.n_train == 0 || inlp.n_train == 0 || method_table.low_pn_n_train == 0 || method_table.high_pn_n_train == 0 || inlp.n_rep_train == 0 ||
      inlp.n_rep_eval == 0 || cross_group.options.n_train == 0 || cross_group.options.n_test == 0)
    throw ConfigError("experiment sizes must be >= 1");
}

ExperimentConfig parse_experiment_config(const json& j, ExperimentConfig c) {
  ObjectReader top(j, "config");
  top.get_parsed("experiment", c.experiment, parse_experiment);
  if (const json* t = top.sub("task")) c.task = task_spec_from_json(*t, c.task);
  if (const json* t = top.sub("train")) {
    ObjectReader r(*t, "train");
    r.get_parsed("method", c.train.method, parse_method);
    r.get("epochs", c.train.epochs);
    r.get("batch_size", c.train.batch_size);
    r.get("learning_rate", c.train.adam.learning_rate);
    r.get("dfl_gamma", c.train.dfl_gamma);
    r.get("dro_eta", c.train.dro_eta);
    r.finish();
  }
  if (const json* t = top.sub("model")) {
    ObjectReader r(*t, "model");
    r.get("embed_dim", c.model.embed_dim);
    r.get("hidden_dim", c.model.hidden_dim);
    r.get("mlp_hidden", c.model.mlp_hidden);
    r.get("init_scale", c.model.init_scale);
    r.get_parsed("encoder", c.model.encoder, parse_encoder);
    r.get("reverse_input", c.model.reverse_input);
    r.finish();
  }
  if (const json* t = top.sub("probe")) {
    ObjectReader r(*t, "probe");
    r.get_parsed("solver", c.probe.solver, parse_probe_solver);
    r.get("l2", c.probe.l2);
    r.get("max_newton_iters", c.probe.max_newton_iters);
    r.get("epochs", c.probe.epochs);
    r.get("batch_size", c.probe.batch_size);
    r.get("learning_rate", c.probe.learning_rate);
    r.get("held_out_fraction", c.probe.held_out_fraction);
    r.finish();
  }
  if (const json* t = top.sub("mdl")) {
    ObjectReader r(*t, "mdl");
    r.get("schedule", c.mdl.schedule);
    r.get("l2_grid", c.mdl.l2_grid);
    r.get("validation_fraction", c.mdl.validation_fraction);
    r.finish();
  }
  if (const json* t = top.sub("probing")) {
    ObjectReader r(*t, "probing");
    r.get("n_examples", c.probing.n_examples);
    r.finish();
  }
  if (const json* t = top.sub("pnps")) {
    ObjectReader r(*t, "pnps");
    r.get_parsed_list("tasks", c.pnps.tasks, parse_task_id);
    r.get("n_samples", c.pnps.n_samples);
    r.get("threshold", c.pnps.threshold);
    r.finish();
  }
  if (const json* t = top.sub("generate")) {
    ObjectReader r(*t, "generate");
    r.get("n_train", c.generate.n_train);
    r.get("n_dev", c.generate.n_dev);
    r.get("n_test", c.generate.n_test);
    r.finish();
  }
  if (const json* t = top.sub("sweep")) {
    ObjectReader r(*t, "sweep");
    r.get_parsed_list("tasks", c.sweep.tasks, parse_task_id);
    r.get("strengths", c.sweep.strengths);
    r.get("n_train", c.sweep.n_train);
    r.finish();
  }
  if (const json* t = top.sub("inlp")) {
    ObjectReader r(*t, "inlp");
    r.get("max_iters", c.inlp.inlp.max_iters);
    r.get("stop_at_majority", c.inlp.inlp.stop_at_majority);
    r.get("tolerance", c.inlp.inlp.tolerance);
    r.get_parsed("low_pn_task", c.inlp.low_pn_task, parse_task_id);
    r.get("low_pn_strength", c.inlp.low_pn_strength);
    r.get_parsed("high_pn_task", c.inlp.high_pn_task, parse_task_id);
    r.get("n_train", c.inlp.n_train);
    r.get("n_rep_train", c.inlp.n_rep_train);
    r.get("n_rep_eval", c.inlp.n_rep_eval);
    r.finish();
  }
  if (const json* t = top.sub("cross_group")) {
    ObjectReader r(*t, "cross_group");
    r.get_parsed_list("tasks", c.cross_group.tasks, parse_task_id);
    r.get("n_train", c.cross_group.options.n_train);
    r.get("n_test", c.cross_group.options.n_test);
    r.get("epochs", c.cross_group.epochs);
    r.finish();
  }
  if (const json* t = top.sub("method_table")) {
    ObjectReader r(*t, "method_table");
    r.get_parsed_list("methods", c.method_table.methods, parse_method);
    r.get("low_pn_n_train", c.method_table.low_pn_n_train);
    r.get("high_pn_n_train", c.method_table.high_pn_n_train);
    r.get("high_pn_epochs", c.method_table.high_pn_epochs);
    r.get("marker_prevalence", c.method_table.marker_prevalence);
    r.get("marker_strength", c.method_table.marker_strength);
    r.get("marker_target", c.method_table.marker_target);
    r.get_parsed("high_pn_task", c.method_table.high_pn_task, parse_task_id);
    r.get("high_pn_strength", c.method_table.high_pn_strength);
    r.finish();
  }
  top.get("seeds", c.seeds);
  std::string out = c.output_dir.string();
  top.get("output_dir", out);
  c.output_dir = out;
  top.finish();
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j, std::move(base));
}

json to_json(const ExperimentConfig& c) {
  std::vector<std::string> methods;
  for (auto m : c.method_table.methods) methods.push_back(to_string(m));
  return json{
      {"experiment", to_string(c.experiment)},
      {"task", to_json(c.task)},
      {"train",
       {{"method", to_string(c.train.method)},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.adam.learning_rate},
        {"dfl_gamma", c.train.dfl_gamma},
        {"dro_eta", c.train.dro_eta}}},
      {"model",
       {{"embed_dim", c.model.embed_dim},
        {"hidden_dim", c.model.hidden_dim},
        {"mlp_hidden", c.model.mlp_hidden},
        {"init_scale", c.model.init_scale},
        {"encoder", to_string(c.model.encoder)},
        {"reverse_input", c.model.reverse_input}}},
      {"probe",
       {{"solver", to_string(c.probe.solver)},
        {"l2", c.probe.l2},
        {"max_newton_iters", c.probe.max_newton_iters},
        {"epochs", c.probe.epochs},
        {"batch_size", c.probe.batch_size},
        {"learning_rate", c.probe.learning_rate},
        {"held_out_fraction", c.probe.held_out_fraction}}},
      {"mdl",
       {{"schedule", c.mdl.schedule},
        {"l2_grid", c.mdl.l2_grid},
        {"validation_fraction", c.mdl.validation_fraction}}},
      {"probing", {{"n_examples", c.probing.n_examples}}},
      {"pnps", {{"tasks", names(c.pnps.tasks)}, {"n_samples", c.pnps.n_samples}, {"threshold", c.pnps.threshold}}},
      {"generate", {{"n_train", c.generate.n_train}, {"n_dev", c.generate.n_dev}, {"n_test", c.generate.n_test}}},
      {"sweep", {{"tasks", names(c.sweep.tasks)}, {"strengths", c.sweep.strengths}, {"n_train", c.sweep.n_train}}},
      {"inlp",
       {{"max_iters", c.inlp.inlp.max_iters},
        {"stop_at_majority", c.inlp.inlp.stop_at_majority},
        {"tolerance", c.inlp.inlp.tolerance},
        {"low_pn_task", to_string(c.inlp.low_pn_task)},
        {"low_pn_strength", c.inlp.low_pn_strength},
        {"high_pn_task", to_string(c.inlp.high_pn_task)},
        {"n_train", c.inlp.n_train},
        {"n_rep_train", c.inlp.n_rep_train},
        {"n_rep_eval", c.inlp.n_rep_eval}}},
      {"cross_group",
       {{"tasks", names(c.cross_group.tasks)},
        {"n_train", c.cross_group.options.n_train},
        {"n_test", c.cross_group.options.n_test},
        {"epochs", c.cross_group.epochs}}},
      {"method_table",
       {{"methods", methods},
        {"low_pn_n_train", c.method_table.low_pn_n_train},
        {"high_pn_n_train", c.method_table.high_pn_n_train},
        {"high_pn_epochs", c.method_table.high_pn_epochs},
        {"marker_prevalence", c.method_table.marker_prevalence},
        {"marker_strength", c.method_table.marker_strength},
        {"marker_target", c.method_table.marker_target},
        {"high_pn_task", to_string(c.method_table.high_pn_task)},
        {"high_pn_strength", c.method_table.high_pn_strength}}},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir.string()},
  };
}

// --- Run plumbing ------------------------------------------------------------

std::string git_blob_hash(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("SHA-1 digest failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class RunWriter {
public:
  RunWriter(const ExperimentConfig& config, const RunContext& ctx, Experiment experiment) : dir_(ctx.out_dir) {
    ExperimentConfig snapshot = config;
    snapshot.experiment = experiment;
    snapshot.output_dir = ctx.out_dir;
    record_.config = to_json(snapshot);
    json inputs = record_.config;
    inputs.erase("output_dir");
    record_.content_hash = git_blob_hash(inputs.dump());
    record_.started_at = utc_now();
    fs::create_directories(dir_);
  }

  /// Opens `relative` for writing and records it as an artifact.
  std::ofstream open(const fs::path& relative) {
    const fs::path full = dir_ / relative;
    if (full.has_parent_path()) fs::create_directories(full.parent_path());
    std::ofstream out(full, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + full.string());
    std::lock_guard lock(mutex_);
    record_.artifacts.push_back(relative.generic_string());
    return out;
  }

  /// Records a file written by someone else.
  void add_artifact(const fs::path& relative) {
    std::lock_guard lock(mutex_);
    record_.artifacts.push_back(relative.generic_string());
  }

  fs::path path(const fs::path& relative) const {
    const fs::path full = dir_ / relative;
    if (full.has_parent_path()) fs::create_directories(full.parent_path());
    return full;
  }

  void plot(const fs::path& relative, json spec) {
    spec["$schema"] = "https://vega.github.io/schema/vega-lite/v5.json";
    open(relative) << spec.dump(2) << '\n';
  }

  json& summary() { return record_.summary; }

  RunRecord finish() {
    record_.finished_at = utc_now();
    std::sort(record_.artifacts.begin(), record_.artifacts.end());
    write_run_record(record_, dir_);
    return record_;
  }

private:
  fs::path dir_;
  RunRecord record_;
  std::mutex mutex_;
};

TaskSpec spec_for(const ExperimentConfig& c, TaskId task, std::uint64_t seed) {
  TaskSpec spec = c.task;
  spec.task_id = task;
  spec.seed = c.task.seed + seed;
  spec.validate();
  return spec;
}

TrainConfig train_for(const ExperimentConfig& c, Method method, std::uint64_t seed) {
  TrainConfig t = c.train;
  t.method = method;
  t.seed = seed;
  return t;
}

ModelConfig model_for(const ExperimentConfig& c, const TaskSpec& spec, std::uint64_t seed) {
  ModelConfig m = model_config_for(spec, c.model);
  m.seed = seed;
  return m;
}

} // namespace

void write_run_record(const RunRecord& record, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "run_record.json");
  if (!out) throw ConfigError("cannot write run record in " + dir.string());
  json j{{"config", record.config},
         {"content_hash", record.content_hash},
         {"started_at", record.started_at},
         {"finished_at", record.finished_at},
         {"artifacts", record.artifacts},
         {"summary", record.summary}};
  out << j.dump(2) << '\n';
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::clamp<long>(threads, 1, static_cast<long>(std::max<std::size_t>(n, 1))));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// --- CSV writers -------------------------------------------------------------

void write_pnps_csv(std::ostream& out, const std::vector<PnpsRow>& rows) {
  CsvWriter csv(out, {"task", "feature", "target_label", "pn", "pn_stderr", "ps", "ps_stderr", "spuriousness",
                      "category", "method", "n_samples"});
  for (const auto& r : rows)
    csv.row({to_string(r.task), r.feature, std::to_string(r.target_label), format_number(r.pn),
             format_number(r.pn_stderr), format_number(r.ps), format_number(r.ps_stderr),
             format_number(r.spuriousness), r.category ? to_string(*r.category) : "NA", to_string(r.method),
             std::to_string(r.n_samples)});
}

void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& rows) {
  CsvWriter csv(out, {"epoch", "split", "group", "n", "loss", "accuracy", "method", "seed"});
  for (const auto& r : rows)
    csv.row({std::to_string(r.epoch), r.split, r.group, std::to_string(r.n), format_number(r.loss),
             format_number(r.accuracy), to_string(r.method), std::to_string(r.seed)});
}

void write_extractability_csv(std::ostream& out, const std::vector<ExtractabilityRow>& rows) {
  CsvWriter csv(out, {"cell", "task", "strength", "method", "seed", "compression", "online_bits", "uniform_bits",
                      "probe_acc", "task_acc", "n_fit"});
  for (const auto& r : rows)
    csv.row({r.cell, to_string(r.task), format_number(r.strength), to_string(r.method), std::to_string(r.seed),
             format_number(r.compression), format_number(r.online_bits), format_number(r.uniform_bits),
             format_number(r.probe_acc), format_number(r.task_acc), std::to_string(r.n_fit)});
}

// --- PN / PS -----------------------------------------------------------------

std::vector<PnpsRow> pnps_rows(const ExperimentConfig& config) {
  std::vector<PnpsRow> rows;
  for (TaskId task : config.pnps.tasks) {
    const TaskSpec spec = spec_for(config, task, config.seeds.front());
    const FeatureHandle feature(spec);
    for (int target = 0; target < spec.num_classes(); ++target)
      for (auto method : {EstimateMethod::Exact, EstimateMethod::MonteCarlo}) {
        MarginalOptions opt{method, config.pnps.n_samples, config.seeds.front() * 1000 + std::uint64_t(target)};
        PnpsRow row;
        row.task = task;
        row.feature = feature.name();
        row.target_label = target;
        row.method = method;
        row.n_samples = method == EstimateMethod::Exact ? 0 : config.pnps.n_samples;
        try {
          const auto pn = pn_marginal(spec, feature, target, opt);
          row.pn = pn.value;
          row.pn_stderr = pn.std_error;
        } catch (const UndefinedEstimateError&) {
        }
        try {
          const auto ps = ps_marginal(spec, feature, target, opt);
          row.ps = ps.value;
          row.ps_stderr = ps.std_error;
          row.spuriousness = 1.0 - ps.value;
        } catch (const UndefinedEstimateError&) {
        }
        if (row.pn && row.ps) row.category = categorize(*row.pn, *row.ps, config.pnps.threshold);
        rows.push_back(row);
      }
  }
  return rows;
}

PnpsResult run_pnps_report(const ExperimentConfig& config, const RunContext& ctx) {
  RunWriter run(config, ctx, Experiment::PnpsReport);
  PnpsResult result{pnps_rows(config), {}};
  {
    auto out = run.open("pnps.csv");
    write_pnps_csv(out, result.rows);
  }
  run.plot("pnps_plot.json",
           {{"data", {{"url", "pnps.csv"}}},
            {"transform", json::array({{{"filter", "datum.method == 'exact' && datum.pn != 'NA' && datum.ps != 'NA'"}}})},
            {"mark", "point"},
            {"encoding",
             {{"x", {{"field", "pn"}, {"type", "quantitative"}, {"scale", {{"domain", {0, 1}}}}}},
              {"y", {{"field", "ps"}, {"type", "quantitative"}, {"scale", {{"domain", {0, 1}}}}}},
              {"color", {{"field", "task"}, {"type", "nominal"}}},
              {"shape", {{"field", "target_label"}, {"type", "nominal"}}}}}});
  for (const auto& r : result.rows)
    if (r.method == EstimateMethod::Exact)
      run.summary()["categories"][to_string(r.task) + "/y=" + std::to_string(r.target_label)] =
          r.category ? to_string(*r.category) : "undefined";
  result.record = run.finish();
  return result;
}

// --- Extractability ----------------------------------------------------------

ExtractabilityRow measure_extractability(const Model& model, const Dataset& probing, const FeatureHandle& feature,
                                         const ExperimentConfig& config, std::uint64_t seed, MdlReport* mdl_out) {
  const RepMatrix reps = extract_representations(model, probing, feature);
  Rng rng(seed ^ 0x5bd1e995ull);
  const auto rows = balanced_rows(reps.probe_labels, 2, rng);
  const Eigen::MatrixXd x = select_rows(reps.x, rows);
  const Eigen::VectorXi f = select_rows(reps.probe_labels, rows);
  MdlConfig mdl = config.mdl;
  mdl.probe = config.probe;
  mdl.seed = seed;
  const MdlReport report = mdl_online_code(x, f, 2, mdl);
  ProbeConfig pc = config.probe;
  pc.seed = seed;
  const auto probe = train_linear_probe(reps.x, reps.probe_labels, pc, 2);

  ExtractabilityRow row;
  row.seed = seed;
  row.compression = report.compression;
  row.online_bits = report.online_bits;
  row.uniform_bits = report.uniform_bits;
  row.probe_acc = probe.held_out_accuracy;
  row.task_acc = evaluate_groups(model, probing, feature).accuracy;
  if (mdl_out) *mdl_out = report;
  return row;
}

namespace {

std::string cell_name(const ExtractabilityRow& r) {
  std::ostringstream s;
  s << r.cell << "_" << to_string(r.method) << "_s" << format_number(r.strength) << "_seed" << r.seed;
  return s.str();
}

void write_cell_artifacts(RunWriter& run, const ExtractabilityRow& row, const std::vector<HistoryRow>& history,
                          const MdlReport& mdl) {
  {
    auto out = run.open(fs::path("history") / (cell_name(row) + ".csv"));
    write_history_csv(out, history);
  }
  auto out = run.open(fs::path("mdl") / (cell_name(row) + ".csv"));
  write_mdl_csv(out, mdl);
}

} // namespace

SweepResult run_bias_sweep(const ExperimentConfig& config, const RunContext& ctx) {
  RunWriter run(config, ctx, Experiment::BiasSweep);
  struct Cell {
    TaskId task;
    double strength;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (TaskId task : config.sweep.tasks)
    for (double s : config.sweep.strengths)
      for (auto seed : config.seeds) cells.push_back({task, s, seed});
  std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
    return std::tie(a.task, a.strength, a.seed) < std::tie(b.task, b.strength, b.seed);
  });

  SweepResult result;
  result.rows.resize(cells.size());
  parallel_for(cells.size(), ctx.threads, [&](std::size_t i) {
    const Cell& c = cells[i];
    TaskSpec spec = spec_for(config, c.task, c.seed);
    spec.bias_strength = c.strength;
    const FeatureHandle feature(spec);
    const Dataset train_set = sample_dataset(spec, config.sweep.n_train, Split::Train);
    auto trained = train(Model(model_for(config, spec, c.seed)), train_set, feature,
                         train_for(config, config.train.method, c.seed));
    const Dataset probing = sample_dataset(spec, config.probing.n_examples, Split::Test);
    MdlReport mdl;
    ExtractabilityRow row = measure_extractability(trained.model, probing, feature, config, c.seed, &mdl);
    row.cell = to_string(c.task);
    row.task = c.task;
    row.strength = c.strength;
    row.method = config.train.method;
    row.n_fit = trained.train_size;
    write_cell_artifacts(run, row, trained.history, mdl);
    result.rows[i] = row;
  });

  {
    auto out = run.open("sweep.csv");
    write_extractability_csv(out, result.rows);
  }
  run.plot("sweep_plot.json",
           {{"data", {{"url", "sweep.csv"}}},
            {"mark", {{"type", "line"}, {"point", true}}},
            {"encoding",
             {{"x", {{"field", "strength"}, {"type", "quantitative"}, {"title", "bias strength"}}},
              {"y", {{"aggregate", "median"}, {"field", "compression"}, {"type", "quantitative"},
                     {"scale", {{"type", "log"}}}}},
              {"color", {{"field", "task"}, {"type", "nominal"}}}}}});
  for (TaskId task : config.sweep.tasks)
    for (double s : config.sweep.strengths) {
      std::vector<double> comp;
      for (const auto& r : result.rows)
        if (r.task == task && r.strength == s) comp.push_back(r.compression);
      run.summary()["median_compression"][to_string(task)][format_number(s)] = median(comp);
    }
  run.summary()["seeds"] = config.seeds;
  result.record = run.finish();
  return result;
}

// --- INLP sweep --------------------------------------------------------------

InlpSweepResult run_inlp_sweep(const ExperimentConfig& config, const RunContext& ctx) {
  RunWriter run(config, ctx, Experiment::InlpSweep);
  struct Cell {
    std::string kind;
    TaskId task;
    double strength;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (auto seed : config.seeds) {
    cells.push_back({"high_pn", config.inlp.high_pn_task, config.task.bias_strength, seed});
    cells.push_back({"low_pn", config.inlp.low_pn_task, config.inlp.low_pn_strength, seed});
  }
  std::sort(cells.begin(), cells.end(),
            [](const Cell& a, const Cell& b) { return std::tie(a.kind, a.seed) < std::tie(b.kind, b.seed); });

  InlpSweepResult result;
  result.runs.resize(cells.size());
  parallel_for(cells.size(), ctx.threads, [&](std::size_t i) {
    const Cell& c = cells[i];
    TaskSpec spec = spec_for(config, c.task, c.seed);
    spec.bias_strength = c.kind == "low_pn" ? c.strength : spec.bias_strength;
    const FeatureHandle feature(spec);
    const Dataset train_set = sample_dataset(spec, config.inlp.n_train, Split::Train);
    auto trained = train(Model(model_for(config, spec, c.seed)), train_set, feature,
                         train_for(config, config.train.method, c.seed));
    const RepMatrix rep_train =
        extract_representations(trained.model, sample_dataset(spec, config.inlp.n_rep_train, Split::Dev), feature);
    const RepMatrix rep_eval =
        extract_representations(trained.model, sample_dataset(spec, config.inlp.n_rep_eval, Split::Test), feature);
    InlpConfig ic = config.inlp.inlp;
    ic.probe = config.probe;
    ic.seed = c.seed;
    InlpRun r{c.kind, c.task, c.seed, inlp(rep_train, rep_eval, ic)};
    {
      auto out = run.open(fs::path("inlp") / (c.kind + "_seed" + std::to_string(c.seed) + ".csv"));
      write_inlp_csv(out, r.result.history);
    }
    {
      auto out = run.open(fs::path("history") / (c.kind + "_seed" + std::to_string(c.seed) + ".csv"));
      write_history_csv(out, trained.history);
    }
    result.runs[i] = std::move(r);
  });

  {
    auto out = run.open("inlp_curves.csv");
    CsvWriter csv(out, {"feature_kind", "task", "seed", "iteration", "rank", "probe_acc", "task_acc_overall",
                        "task_acc_minority"});
    for (const auto& r : result.runs)
      for (const auto& h : r.result.history)
        csv.row({r.feature_kind, to_string(r.task), std::to_string(r.seed), std::to_string(h.iteration),
                 std::to_string(h.rank), format_number(h.probe_acc), format_number(h.task_acc_overall),
                 format_number(h.task_acc_minority)});
  }
  {
    auto out = run.open("inlp_summary.csv");
    CsvWriter csv(out, {"feature_kind", "task", "seed", "status", "iterations", "minority_group", "majority_baseline"});
    for (const auto& r : result.runs)
      csv.row({r.feature_kind, to_string(r.task), std::to_string(r.seed), to_string(r.result.status),
               std::to_string(r.result.projection.iterations),
               r.result.minority ? to_string(*r.result.minority) : "NA", format_number(r.result.majority_baseline)});
  }
  const json fold = {{"fold", {"probe_acc", "task_acc_overall", "task_acc_minority"}}, {"as", {"metric", "value"}}};
  run.plot("inlp_plot.json",
           {{"data", {{"url", "inlp_curves.csv"}}},
            {"transform", json::array({fold})},
            {"facet", {{"column", {{"field", "feature_kind"}, {"type", "nominal"}}}}},
            {"spec",
             {{"mark", "line"},
              {"encoding",
               {{"x", {{"field", "iteration"}, {"type", "quantitative"}}},
                {"y", {{"aggregate", "median"}, {"field", "value"}, {"type", "quantitative"}}},
                {"color", {{"field", "metric"}, {"type", "nominal"}}},
                {"strokeDash", {{"field", "metric"}, {"type", "nominal"}}}}}}}});
  run.summary()["seeds"] = config.seeds;
  result.record = run.finish();
  return result;
}

// --- Cross-group -------------------------------------------------------------

CrossGroupResult run_cross_group(const ExperimentConfig& config, const RunContext& ctx) {
  RunWriter run(config, ctx, Experiment::CrossGroup);
  struct Cell {
    TaskId task;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (TaskId task : config.cross_group.tasks)
    for (auto seed : config.seeds) cells.push_back({task, seed});
  std::sort(cells.begin(), cells.end(),
            [](const Cell& a, const Cell& b) { return std::tie(a.task, a.seed) < std::tie(b.task, b.seed); });

  CrossGroupResult result;
  result.runs.resize(cells.size());
  parallel_for(cells.size(), ctx.threads, [&](std::size_t i) {
    const Cell& c = cells[i];
    const TaskSpec spec = spec_for(config, c.task, c.seed);
    const FeatureHandle feature(spec);
    TrainConfig cross_train = train_for(config, Method::Erm, c.seed);
    cross_train.epochs = config.cross_group.epochs;
    CrossGroupRun r{c.task, c.seed,
                    cross_group_experiment(spec, feature, cross_train,
                                           model_for(config, spec, c.seed), config.cross_group.options)};
    {
      auto out = run.open(fs::path("history") / (to_string(c.task) + "_seed" + std::to_string(c.seed) + ".csv"));
      write_history_csv(out, r.report.history);
    }
    result.runs[i] = std::move(r);
  });

  {
    auto out = run.open("cross_group.csv");
    CsvWriter csv(out, {"task", "seed", "panel", "label", "n", "accuracy"});
    for (const auto& r : result.runs)
      for (const auto& [panel, table] : {std::pair{std::string("in-distribution"), &r.report.in_distribution},
                                         std::pair{std::string("out-of-distribution"), &r.report.out_of_distribution}}) {
        csv.row({to_string(r.task), std::to_string(r.seed), panel, "all", std::to_string(table->total),
                 format_number(table->accuracy)});
        for (std::size_t y = 0; y < table->per_class_accuracy.size(); ++y) {
          std::size_t n = 0;
          for (const auto& [g, s] : table->groups)
            if (g.label == int(y)) n += s.count;
          csv.row({to_string(r.task), std::to_string(r.seed), panel, std::to_string(y), std::to_string(n),
                   format_number(table->per_class_accuracy[y])});
        }
      }
  }
  run.plot("cross_group_plot.json",
           {{"data", {{"url", "cross_group.csv"}}},
            {"facet", {{"column", {{"field", "task"}, {"type", "nominal"}}}}},
            {"spec",
             {{"mark", "bar"},
              {"encoding",
               {{"x", {{"field", "panel"}, {"type", "nominal"}, {"sort", {"in-distribution", "out-of-distribution"}}}},
                {"xOffset", {{"field", "label"}, {"type", "nominal"}}},
                {"y", {{"aggregate", "median"}, {"field", "accuracy"}, {"type", "quantitative"}}},
                {"color", {{"field", "label"}, {"type", "nominal"}}}}}}}});
  for (TaskId task : config.cross_group.tasks) {
    std::vector<double> in, out;
    for (const auto& r : result.runs)
      if (r.task == task) {
        in.push_back(r.report.in_distribution.accuracy);
        out.push_back(r.report.out_of_distribution.accuracy);
      }
    run.summary()[to_string(task)] = {{"median_in_distribution", median(in)}, {"median_out_of_distribution", median(out)}};
  }
  run.summary()["seeds"] = config.seeds;
  result.record = run.finish();
  return result;
}

// --- Method table ------------------------------------------------------------

MethodTableResult run_method_table(const ExperimentConfig& config, const RunContext& ctx) {
  RunWriter run(config, ctx, Experiment::MethodTable);
  const auto& mt = config.method_table;
  struct Cell {
    std::string kind;
    std::size_t method_index;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (const std::string kind : {"high_pn", "low_pn"})
    for (std::size_t m = 0; m < mt.methods.size(); ++m)
      for (auto seed : config.seeds) cells.push_back({kind, m, seed});
  std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
    return std::tie(a.kind, a.method_index, a.seed) < std::tie(b.kind, b.method_index, b.seed);
  });

  // Low PN: the reserved token is stripped from task A and re-injected at the
  // last position as a label-correlated marker. High PN: the reserved token of
  // a task whose label depends on it, at the configured bias strength.
  auto make_data = [&](const std::string& kind, std::uint64_t seed, std::size_t n, Split split) {
    TaskSpec spec = spec_for(config, kind == "low_pn" ? TaskId::A : mt.high_pn_task, seed);
    spec.bias_strength = kind == "low_pn" ? 0.5 : mt.high_pn_strength;
    const FeatureHandle feature(spec);
    Dataset data = sample_dataset(spec, n, split);
    if (kind == "low_pn") {
      std::seed_seq seq{seed, std::uint64_t(split), std::uint64_t(0x6d61726b)};
      Rng rng(seq);
      data = inject_marker_bias(remove_feature(data, feature, rng), feature, mt.marker_prevalence, mt.marker_strength,
                                mt.marker_target, rng);
    }
    return data;
  };

  MethodTableResult result;
  result.rows.resize(cells.size());
  parallel_for(cells.size(), ctx.threads, [&](std::size_t i) {
    const Cell& c = cells[i];
    const Method method = mt.methods[c.method_index];
    const bool high = c.kind == "high_pn";
    const Dataset train_set = make_data(c.kind, c.seed, high ? mt.high_pn_n_train : mt.low_pn_n_train, Split::Train);
    const TaskSpec& spec = train_set.spec();
    const FeatureHandle feature(spec);
    TrainConfig tc = train_for(config, method, c.seed);
    if (high) tc.epochs = mt.high_pn_epochs;
    auto trained = train(Model(model_for(config, spec, c.seed)), train_set, feature, tc);
    const Dataset probing = make_data(c.kind, c.seed, config.probing.n_examples, Split::Test);
    MdlReport mdl;
    ExtractabilityRow row = measure_extractability(trained.model, probing, feature, config, c.seed, &mdl);
    row.cell = c.kind;
    row.task = spec.task_id;
    row.strength = c.kind == "low_pn" ? mt.marker_strength : mt.high_pn_strength;
    row.method = method;
    row.n_fit = trained.train_size;
    write_cell_artifacts(run, row, trained.history, mdl);
    result.rows[i] = row;
  });

  {
    auto out = run.open("method_table.csv");
    write_extractability_csv(out, result.rows);
  }
  {
    auto out = run.open("method_table_summary.csv");
    CsvWriter csv(out, {"cell", "method", "median_compression", "median_probe_acc", "median_task_acc",
                        "compression_ratio_to_erm"});
    for (const std::string kind : {"high_pn", "low_pn"}) {
      auto med = [&](Method m, double ExtractabilityRow::*field) {
        std::vector<double> v;
        for (const auto& r : result.rows)
          if (r.cell == kind && r.method == m) v.push_back(r.*field);
        return median(v);
      };
      const bool has_erm = std::find(mt.methods.begin(), mt.methods.end(), Method::Erm) != mt.methods.end();
      const double erm = has_erm ? med(Method::Erm, &ExtractabilityRow::compression) : std::nan("");
      for (Method m : mt.methods) {
        const double comp = med(m, &ExtractabilityRow::compression);
        csv.row({kind, to_string(m), format_number(comp), format_number(med(m, &ExtractabilityRow::probe_acc)),
                 format_number(med(m, &ExtractabilityRow::task_acc)), format_number(comp / erm)});
        run.summary()[kind][to_string(m)] = {{"median_compression", comp}, {"ratio_to_erm", comp / erm}};
      }
    }
  }
  run.plot("method_table_plot.json",
           {{"data", {{"url", "method_table.csv"}}},
            {"facet", {{"column", {{"field", "cell"}, {"type", "nominal"}}}}},
            {"spec",
             {{"mark", "bar"},
              {"encoding",
               {{"x", {{"field", "method"}, {"type", "nominal"}}},
                {"y", {{"aggregate", "median"}, {"field", "compression"}, {"type", "quantitative"},
                       {"scale", {{"type", "log"}}}}}}}}},
            {"resolve", {{"scale", {{"y", "independent"}}}}}});
  run.summary()["seeds"] = config.seeds;
  result.record = run.finish();
  return result;
}

// --- Single-model commands ---------------------------------------------------

RunRecord run_generate(const ExperimentConfig& config, const RunContext& ctx) {
  RunWriter run(config, ctx, Experiment::Generate);
  for (auto seed : config.seeds) {
    const TaskSpec spec = spec_for(config, config.task.task_id, seed);
    const fs::path dir = fs::path("data") / ("seed" + std::to_string(seed));
    for (auto [split, n] : {std::pair{Split::Train, config.generate.n_train}, std::pair{Split::Dev, config.generate.n_dev},
                            std::pair{Split::Test, config.generate.n_test}}) {
      const fs::path rel = dir / (to_string(split) + ".jsonl");
      serialize(sample_dataset(spec, n, split), run.path(rel));
      run.add_artifact(rel);
      run.add_artifact(spec_sidecar_path(rel));
    }
  }
  return run.finish();
}

RunRecord run_train(const ExperimentConfig& config, const RunContext& ctx) {
  RunWriter run(config, ctx, Experiment::Train);
  std::vector<double> dev_acc(config.seeds.size());
  parallel_for(config.seeds.size(), ctx.threads, [&](std::size_t i) {
    const auto seed = config.seeds[i];
    const TaskSpec spec = spec_for(config, config.task.task_id, seed);
    const FeatureHandle feature(spec);
    const Dataset train_set = sample_dataset(spec, config.generate.n_train, Split::Train);
    const Dataset dev = sample_dataset(spec, config.generate.n_dev, Split::Dev);
    auto trained = train(Model(model_for(config, spec, seed)), train_set, feature,
                         train_for(config, config.train.method, seed), &dev);
    const fs::path dir = "seed" + std::to_string(seed);
    {
      auto out = run.open(dir / "history.csv");
      write_history_csv(out, trained.history);
    }
    save_checkpoint(trained.model, run.path(dir / "model.ckpt"));
    run.add_artifact(dir / "model.ckpt");
    dev_acc[i] = evaluate_groups(trained.model, dev, feature).accuracy;
  });
  for (std::size_t i = 0; i < config.seeds.size(); ++i)
    run.summary()["dev_accuracy"][std::to_string(config.seeds[i])] = dev_acc[i];
  return run.finish();
}

RunRecord run_probe(const ExperimentConfig& config, const RunContext& ctx, const std::optional<fs::path>& checkpoint) {
  RunWriter run(config, ctx, Experiment::Probe);
  const auto seed = config.seeds.front();
  const TaskSpec spec = spec_for(config, config.task.task_id, seed);
  const FeatureHandle feature(spec);
  Model model = checkpoint ? load_checkpoint(*checkpoint)
                           : train(Model(model_for(config, spec, seed)),
                                   sample_dataset(spec, config.generate.n_train, Split::Train), feature,
                                   train_for(config, config.train.method, seed))
                                 .model;
  const Dataset probing = sample_dataset(spec, config.probing.n_examples, Split::Test);
  MdlReport mdl;
  ExtractabilityRow row = measure_extractability(model, probing, feature, config, seed, &mdl);
  row.cell = "probe";
  row.task = spec.task_id;
  row.strength = spec.bias_strength;
  row.method = config.train.method;
  {
    auto out = run.open("probe.csv");
    write_extractability_csv(out, {row});
  }
  {
    auto out = run.open("mdl.csv");
    write_mdl_csv(out, mdl);
  }
  run.summary() = {{"compression", row.compression}, {"probe_acc", row.probe_acc}, {"task_acc", row.task_acc}};
  if (checkpoint) run.summary()["checkpoint"] = checkpoint->string();
  return run.finish();
}

} // namespace pnpslab
