#include "plequiv/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace plequiv {
namespace {

constexpr std::uint32_t kMaxRank = 16;
constexpr std::uint32_t kMaxNameLength = 4096;

template <typename T>
void write_le(std::ostream& os, T v) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  os.write(bytes.data(), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), sizeof(T))) {
    throw std::runtime_error("tensor stream: unexpected end of data");
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
void write_f64(std::ostream& os, double v) { write_le(os, v); }
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
double read_f64(std::istream& is) { return read_le<double>(is); }

void write_tensor_record(std::ostream& os, const NamedTensor& t) {
  write_u32(os, static_cast<std::uint32_t>(t.name.size()));
  os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
  write_u32(os, static_cast<std::uint32_t>(t.tensor.rank()));
  for (std::size_t d : t.tensor.shape()) write_u64(os, d);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.tensor.data().data()),
             static_cast<std::streamsize>(t.tensor.size() * sizeof(double)));
  } else {
    for (double v : t.tensor.data()) write_f64(os, v);
  }
}

NamedTensor read_tensor_record(std::istream& is) {
  NamedTensor out;
  const std::uint32_t name_len = read_u32(is);
  if (name_len > kMaxNameLength) throw std::runtime_error("tensor stream: name too long");
  out.name.resize(name_len);
  if (name_len > 0 && !is.read(out.name.data(), name_len)) {
    throw std::runtime_error("tensor stream: truncated name");
  }
  const std::uint32_t rank = read_u32(is);
  if (rank > kMaxRank) throw std::runtime_error("tensor stream: rank too large");
  Shape shape(rank);
  for (auto& d : shape) d = read_u64(is);
  const std::size_t numel = shape_numel(shape);
  if (numel > (std::size_t{1} << 32)) throw std::runtime_error("tensor stream: tensor too large");
  std::vector<double> data(numel);
  if constexpr (std::endian::native == std::endian::little) {
    if (numel > 0 && !is.read(reinterpret_cast<char*>(data.data()),
                              static_cast<std::streamsize>(numel * sizeof(double)))) {
      throw std::runtime_error("tensor stream: truncated data");
    }
  } else {
    for (double& v : data) v = read_f64(is);
  }
  out.tensor = Tensor(std::move(shape), std::move(data));
  return out;
}

void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  write_u32(os, kTensorFileMagic);
  write_u32(os, kTensorFileVersion);
  write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) write_tensor_record(os, t);
}

std::vector<NamedTensor> read_tensors(std::istream& is) {
  if (read_u32(is) != kTensorFileMagic) throw std::runtime_error("tensor file: bad magic");
  const std::uint32_t version = read_u32(is);
  if (version != kTensorFileVersion) {
    throw std::runtime_error("tensor file: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = read_u32(is);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) out.push_back(read_tensor_record(is));
  return out;
}

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_tensors(os, tensors);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_tensors(is);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw std::runtime_error("tensor '" + name + "' not found");
}

}  // namespace plequiv
