#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "texlora/tensor.hpp"

namespace texlora {

// Binary tensor blob, little-endian:
//   "TXT0" | rank u32 | dims u32[rank] | dtype u32 (1 = f64) | payload f64[numel]
inline constexpr std::uint32_t kDtypeF64 = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Directory of blobs plus `manifest.json` listing each name, shape and file.
/// `meta_json` is stored under the manifest's "meta" key.
void save_tensor_set(const std::filesystem::path& dir, const std::map<std::string, Tensor>& tensors,
                     const std::string& meta_json = "{}");
std::map<std::string, Tensor> load_tensor_set(const std::filesystem::path& dir, std::string* meta_json = nullptr);

}  // namespace texlora
