#pragma once

// Dataset files are JSON lines, one example per line:
//
//   {"tokens":[17,17,4,...],"label":1,"feats":{"reserved":0},"split":"train"}
//
// The TaskSpec lives in a sidecar header next to the data file
// (`<path>.spec.json`).

#include "pnpslab/datagen.hpp"

#include <filesystem>

#include <json.hpp>

namespace pnpslab {

nlohmann::json to_json(const TaskSpec& spec);

/// Reads the keys present in `j` over `base`; unknown keys are a ConfigError.
TaskSpec task_spec_from_json(const nlohmann::json& j, TaskSpec base = {});

std::filesystem::path spec_sidecar_path(const std::filesystem::path& data_path);

void serialize(const Dataset& dataset, const std::filesystem::path& path);

/// Throws ParseError carrying the 1-based line number of the first bad record.
Dataset deserialize(const std::filesystem::path& path);

} // namespace pnpslab
