#pragma once

#include <map>
#include <string>

#include "tdpo/tensor.hpp"

namespace tdpo::ad {

/// Versioned binary container of named tensors.
/// Layout: magic "TDPR" | u32 version | u64 record count | records, each
/// u32 name length | name bytes | u8 dtype tag | u32 ndim | u64 dims... |
/// raw little-endian data (8 bytes per entry for f64, 4 for f32).
/// Round trips are bit-exact at the stored precision.
void save_checkpoint(const std::string& path,
                     const std::map<std::string, Tensor>& tensors);

std::map<std::string, Tensor> load_checkpoint(const std::string& path);

/// FNV-1a over the raw bytes of a tensor's data; used for content hashes in
/// run manifests and frozen-weight assertions.
std::uint64_t content_hash(const Tensor& t);
std::uint64_t content_hash_file(const std::string& path);

}  // namespace tdpo::ad
