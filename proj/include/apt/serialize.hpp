#pragma once

#include "apt/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace apt {

// On-disk container: magic, format version, JSON metadata block, then named
// arrays with declared shapes/dtypes as raw little-endian payloads.
enum class Dtype { f64, u8 };

struct NamedArray {
  std::string name;
  Dtype dtype = Dtype::f64;
  Tensor data;  // u8 arrays must hold integral values in [0,255]
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;  // throws if absent
  void add(const std::string& name, Tensor t, Dtype dtype = Dtype::f64);
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

constexpr uint32_t kCheckpointVersion = 1;

// Content hashing for config stamps and artifact integrity checks.
std::string hex64(uint64_t v);
uint64_t hash_file(const std::string& path);        // throws if unreadable
std::string hash_file_hex(const std::string& path);
std::string hash_json_hex(const nlohmann::json& j);  // canonical dump then FNV-1a

// Small file helpers shared across modules.
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace apt
