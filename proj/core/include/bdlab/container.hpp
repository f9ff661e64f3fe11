#pragma once

#include "bdlab/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace bdlab {

// Binary checkpoint container:
//
//   "BDLB" | u32 version | u32 meta_len | meta (UTF-8 JSON)
//   u32 tensor_count | { u32 name_len | name | u32 rank | u32 dims[rank] | f32 values[] }*
//
// All integers and floats little-endian. Encoding is a pure function of the
// struct, so save -> load -> save is byte-identical.
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;

    Tensor to_tensor(bool requires_grad = false) const { return Tensor(shape, values, requires_grad); }
    static NamedTensor from(std::string name, const Tensor& t) {
        return {std::move(name), t.shape(), std::vector<float>(t.data().begin(), t.data().end())};
    }
};

struct Container {
    std::uint32_t version = kContainerVersion;
    std::string metadata;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
    const NamedTensor& at(const std::string& name) const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(std::span<const std::uint8_t> bytes);

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);

// FNV-1a 64 over raw bytes; used for bit-exactness checks and config hashes.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::uint64_t fnv1a64(const std::string& text);
std::string hex64(std::uint64_t v);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

} // namespace bdlab
