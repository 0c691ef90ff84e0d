#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tensor.h"

namespace m2repa {

// CheckpointBundle wire format, all integers little-endian:
//   magic "M2RP" | format version u32 | record count u32 |
//   per record: name length u16, UTF-8 name, rank u8, extents u64[rank],
//               dtype tag u8 (0 = f32), raw f32 payload |
//   trailing CRC32 (IEEE 802.3) of all preceding bytes.
// A tensor file is the same format with exactly one record.

inline constexpr std::uint32_t kBundleVersion = 1;

struct TensorRecord {
    std::string name;
    Tensor tensor;
};

std::uint32_t crc32(const unsigned char* data, std::size_t len);

void write_bundle(const std::string& path, std::span<const TensorRecord> records);
std::vector<TensorRecord> read_bundle(const std::string& path);

// CRC/structure validation without materializing tensors; throws on failure.
void verify_bundle(const std::string& path);

void write_tensor_file(const std::string& path, const std::string& name, const Tensor& tensor);
TensorRecord read_tensor_file(const std::string& path);

}  // namespace m2repa
