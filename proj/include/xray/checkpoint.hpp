#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "xray/tensor.hpp"

namespace xray {

// Checkpoint container layout:
//   <JSON header>\n<blob bytes>
// The header is a compact JSON array of {"name", "shape", "byte_offset"} objects;
// byte_offset counts from the first byte after the newline. Each blob is the
// tensor's elements as little-endian IEEE-754 binary32, blobs packed in header order.

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);

/// 64-bit FNV-1a digest rendered as 16 hex chars; used as a checkpoint identity.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace xray
