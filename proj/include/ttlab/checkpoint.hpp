#pragma once

#include <string>

#include "ttlab/model.hpp"

namespace ttlab::model {

// Single-file container: 8-byte magic "TTCKPT01", little-endian u64 header
// length, JSON header (model config plus a tensor manifest with offsets),
// then raw float32 payloads.  Writes are atomic (temp file + rename).
void save_checkpoint(Parameters& params, const std::string& path);
Parameters load_checkpoint(const std::string& path);

}  // namespace ttlab::model
