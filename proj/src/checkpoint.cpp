#include "xray/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

namespace xray {

namespace {

void put_f32_le(std::string& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  nlohmann::json header = nlohmann::json::array();
  std::set<std::string> seen;
  std::size_t offset = 0;
  for (const auto& nt : tensors) {
    if (!seen.insert(nt.name).second) {
      throw CheckpointError("duplicate tensor name '" + nt.name + "'");
    }
    header.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}, {"byte_offset", offset}});
    offset += nt.tensor.size() * 4;
  }
  std::string out = header.dump();
  out.push_back('\n');
  out.reserve(out.size() + offset);
  for (const auto& nt : tensors) {
    for (float v : nt.tensor.data()) put_f32_le(out, v);
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw CheckpointError("checkpoint header is not newline-terminated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin(), bytes.begin() + static_cast<long>(nl));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.is_array()) throw CheckpointError("checkpoint header must be a JSON array");
  const auto* blob = reinterpret_cast<const unsigned char*>(bytes.data()) + nl + 1;
  const std::size_t blob_size = bytes.size() - nl - 1;
  std::vector<NamedTensor> out;
  std::size_t expected_end = 0;
  for (const auto& entry : header) {
    NamedTensor nt;
    try {
      nt.name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("byte_offset").get<std::size_t>();
      const std::size_t count = shape_numel(shape);
      if (offset + count * 4 > blob_size) {
        throw CheckpointError("tensor '" + nt.name + "' extends past end of file");
      }
      std::vector<float> data(count);
      for (std::size_t i = 0; i < count; ++i) data[i] = get_f32_le(blob + offset + 4 * i);
      nt.tensor = Tensor(shape, std::move(data));
      expected_end = std::max(expected_end, offset + count * 4);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("malformed checkpoint header entry: ") + e.what());
    }
    out.push_back(std::move(nt));
  }
  if (expected_end != blob_size) {
    throw CheckpointError("checkpoint has " + std::to_string(blob_size - expected_end) +
                          " trailing bytes after the last tensor");
  }
  return out;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to '" + path.string() + "'");
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file_bytes(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace xray
