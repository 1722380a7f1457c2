#include "pnpslab/dataset_io.hpp"

#include "pnpslab/errors.hpp"

#include <fstream>

namespace pnpslab {

using nlohmann::json;

json to_json(const TaskSpec& spec) {
  return json{{"task_id", to_string(spec.task_id)},     {"vocab_size", spec.vocab_size},
              {"seq_len", spec.seq_len},                {"reserved_token", spec.reserved_token},
              {"identical_prob", spec.identical_prob},  {"bias_strength", spec.bias_strength},
              {"seed", spec.seed}};
}

TaskSpec task_spec_from_json(const json& j, TaskSpec spec) {
  if (!j.is_object()) throw ConfigError("task spec must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "task_id") spec.task_id = parse_task_id(value.get<std::string>());
      else if (key == "vocab_size") spec.vocab_size = value.get<int>();
      else if (key == "seq_len") spec.seq_len = value.get<int>();
      else if (key == "reserved_token") spec.reserved_token = value.get<Token>();
      else if (key == "identical_prob") spec.identical_prob = value.get<double>();
      else if (key == "bias_strength") spec.bias_strength = value.get<double>();
      else if (key == "seed") spec.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown task spec key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad task spec value: ") + e.what());
  }
  spec.validate();
  return spec;
}

std::filesystem::path spec_sidecar_path(const std::filesystem::path& data_path) {
  return std::filesystem::path(data_path.string() + ".spec.json");
}

void serialize(const Dataset& dataset, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream header(spec_sidecar_path(path));
    if (!header) throw ConfigError("cannot write " + spec_sidecar_path(path).string());
    json h = to_json(dataset.spec());
    h["split"] = to_string(dataset.split());
    h["n"] = dataset.size();
    header << h.dump(2) << '\n';
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  const std::string split = to_string(dataset.split());
  for (const auto& e : dataset.examples()) {
    json line{{"tokens", e.tokens}, {"label", e.label}, {"feats", e.feats}, {"split", split}};
    out << line.dump() << '\n';
  }
}

namespace {

Example parse_example(const json& j, const TaskSpec& spec, std::size_t lineno) {
  for (const char* key : {"tokens", "label", "feats", "split"})
    if (!j.contains(key)) throw ParseError(std::string("missing field '") + key + "'", lineno);
  if (!j["tokens"].is_array()) throw ParseError("'tokens' must be an array", lineno);
  if (!j["label"].is_number_integer()) throw ParseError("'label' must be an integer", lineno);
  if (!j["feats"].is_object()) throw ParseError("'feats' must be an object", lineno);

  Example e;
  for (const auto& t : j["tokens"]) {
    if (!t.is_number_integer()) throw ParseError("token ids must be integers", lineno);
    const auto id = t.get<long long>();
    if (id < 0 || id >= spec.vocab_size)
      throw ParseError("token id " + std::to_string(id) + " outside vocabulary of size " +
                           std::to_string(spec.vocab_size),
                       lineno);
    e.tokens.push_back(static_cast<Token>(id));
  }
  if (e.tokens.size() != static_cast<std::size_t>(spec.seq_len))
    throw ParseError("expected " + std::to_string(spec.seq_len) + " tokens, got " +
                         std::to_string(e.tokens.size()),
                     lineno);
  if (e.tokens[0] == spec.reserved_token || e.tokens[1] == spec.reserved_token)
    throw ParseError("reserved token in positions 1-2", lineno);

  for (const auto& [name, value] : j["feats"].items()) {
    if (!value.is_number_integer() || (value.get<int>() != 0 && value.get<int>() != 1))
      throw ParseError("feature '" + name + "' must be 0 or 1", lineno);
    e.feats[name] = value.get<int>();
  }
  const FeatureHandle feature(spec);
  auto it = e.feats.find(feature.name());
  if (it == e.feats.end()) throw ParseError("missing feats key '" + feature.name() + "'", lineno);
  if (it->second != feature.detect(e))
    throw ParseError("feats['" + feature.name() + "'] disagrees with the token sequence", lineno);

  e.label = j["label"].get<int>();
  if (e.label < 0 || e.label >= spec.num_classes())
    throw ParseError("label " + std::to_string(e.label) + " out of range", lineno);
  e.latent = recompute_latent(spec, e.tokens);
  if (e.label != label_fn(spec.task_id, e.latent.identical, e.latent.feature))
    throw ParseError("label inconsistent with the task's label function", lineno);
  return e;
}

} // namespace

Dataset deserialize(const std::filesystem::path& path) {
  const auto header_path = spec_sidecar_path(path);
  std::ifstream header(header_path);
  if (!header) throw ParseError("missing spec header " + header_path.string(), 0);
  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed spec header: ") + e.what(), 0);
  }
  Split split = Split::Train;
  if (h.contains("split")) split = parse_split(h["split"].get<std::string>());
  h.erase("split");
  h.erase("n");
  const TaskSpec spec = task_spec_from_json(h);

  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string(), 0);
  std::vector<Example> examples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    if (!j.is_object()) throw ParseError("record must be a JSON object", lineno);
    examples.push_back(parse_example(j, spec, lineno));
    if (!j["split"].is_string() || j["split"].get<std::string>() != to_string(split))
      throw ParseError("split tag disagrees with the header", lineno);
  }
  return Dataset(spec, std::move(examples), split);
}

} // namespace pnpslab
