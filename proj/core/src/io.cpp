// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kanpaint/errors.hpp"

namespace kanpaint::io {

namespace {

constexpr std::array<char, 4> kMagic{'D', 'K', 'T', '1'};

template <typename T>
void put_le(std::ostream& os, T value) {
  std::array<unsigned char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i)
    bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

template <typename T>
T get_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw DataError("DKT1: truncated header");
  }
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void write_dkt(std::ostream& os, const Tensor& tensor) {
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.rank()));
  for (auto d : tensor.shape()) put_le<std::uint64_t>(os, d);
  for (double v : tensor.values()) {
    put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!os) throw DataError("DKT1: write failed");
}

Tensor read_dkt(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw DataError("DKT1: bad magic");
  }
  const auto rank = get_le<std::uint32_t>(is);
  if (rank > 16) throw DataError("DKT1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_le<std::uint64_t>(is);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) {
    v = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(is)));
  }
  return Tensor(std::move(shape), std::move(values));
}

void save_dkt(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  write_dkt(os, tensor);
}

Tensor load_dkt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  try {
    return read_dkt(is);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_tensor_bundle(const std::filesystem::path& weights, const std::filesystem::path& manifest,
                        const std::vector<NamedTensor>& tensors) {
  std::ofstream ws(weights, std::ios::binary);
  std::ofstream ms(manifest);
  if (!ws || !ms) throw DataError("cannot write tensor bundle at " + weights.string());
  for (const auto& [name, tensor] : tensors) {
    write_dkt(ws, tensor);
    ms << name;
    for (auto d : tensor.shape()) ms << ' ' << d;
    ms << '\n';
  }
}

std::vector<NamedTensor> load_tensor_bundle(const std::filesystem::path& weights,
                                            const std::filesystem::path& manifest) {
  std::ifstream ws(weights, std::ios::binary);
  std::ifstream ms(manifest);
  if (!ws) throw DataError("cannot open " + weights.string());
  if (!ms) throw DataError("cannot open " + manifest.string());
  std::vector<NamedTensor> out;
  std::string line;
  while (std::getline(ms, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    NamedTensor entry;
    ls >> entry.name;
    Shape shape;
    std::size_t d = 0;
    while (ls >> d) shape.push_back(d);
    entry.tensor = read_dkt(ws);
    if (entry.tensor.shape() != shape) {
      throw DataError("tensor bundle: manifest shape " + shape_str(shape) + " for '" + entry.name +
                      "' disagrees with stored " + shape_str(entry.tensor.shape()));
    }
    out.push_back(std::move(entry));
  }
  return out;
}

Tensor quantize_f32(const Tensor& tensor) {
  Tensor out = tensor.detach();
  for (auto& v : out.mutable_values()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

}  // namespace kanpaint::io
