#pragma once

// Text checkpoint layout (one token or value per line, values in shortest
// round-trip decimal form, blocks in Parameters declaration order):
//
//   pnpslab-checkpoint 1
//   vocab_size <int>
//   embed_dim <int>
//   hidden_dim <int>
//   mlp_hidden <int>
//   n_classes <int>
//   init_scale <double>
//   seed <uint64>
//   encoder lstm|mean_pool
//   reverse_input 0|1
//   block <name> <rows> <cols>
//   <rows*cols values, column-major>
//   ... (eight blocks)
//   end

#include "pnpslab/neuralnet.hpp"

#include <filesystem>

namespace pnpslab {

void save_checkpoint(const SequenceClassifier<double>& model, const std::filesystem::path& path);

/// Throws ParseError on malformed input.
SequenceClassifier<double> load_checkpoint(const std::filesystem::path& path);

} // namespace pnpslab
