#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "plequiv/tensor.hpp"

namespace plequiv {

// Binary tensor container, all integers and floats little-endian:
//   header:  u32 magic "PLQT", u32 version, u32 tensor count
//   tensor:  u32 name length, name bytes, u32 rank, u64 dims[rank], f64 data[numel]

inline constexpr std::uint32_t kTensorFileMagic = 0x54514C50;  // "PLQT"
inline constexpr std::uint32_t kTensorFileVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
/// Throws std::runtime_error on short reads.
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);

/// Single tensor record without the container header.
void write_tensor_record(std::ostream& os, const NamedTensor& t);
NamedTensor read_tensor_record(std::istream& is);

void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(std::istream& is);

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

/// Looks up `name`; throws std::runtime_error when missing.
const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace plequiv
