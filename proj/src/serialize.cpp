#include "texlora/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"

namespace texlora {

namespace {

constexpr std::array<char, 4> kMagic{'T', 'X', 'T', '0'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

void put_f64(std::ostream& os, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw TensorError("tensor blob truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double get_f64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw TensorError("tensor blob truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
  return std::bit_cast<double>(v);
}

std::string blob_file_name(const std::string& name) {
  std::string f = name;
  std::replace(f.begin(), f.end(), '/', '.');
  return f + ".txt0";
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), kMagic.size());
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  put_u32(os, kDtypeF64);
  for (double v : t.data()) put_f64(os, v);
  if (!os) throw TensorError("failed to write tensor blob");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kMagic) throw TensorError("not a tensor blob (bad magic)");
  const std::uint32_t rank = get_u32(is);
  if (rank > 16) throw TensorError("tensor blob rank " + std::to_string(rank) + " is implausible");
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(is);
  const std::uint32_t dtype = get_u32(is);
  if (dtype != kDtypeF64) throw TensorError("unsupported tensor dtype tag " + std::to_string(dtype));
  std::vector<double> data(numel(shape));
  for (double& v : data) v = get_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw TensorError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TensorError("cannot open " + path.string());
  return read_tensor(is);
}

void save_tensor_set(const std::filesystem::path& dir, const std::map<std::string, Tensor>& tensors,
                     const std::string& meta_json) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "texlora-tensor-set";
  manifest["meta"] = nlohmann::json::parse(meta_json);
  auto& entries = manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    const std::string file = blob_file_name(name);
    save_tensor(dir / file, t);
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
  }
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
  if (!os) throw TensorError("failed to write manifest in " + dir.string());
}

std::map<std::string, Tensor> load_tensor_set(const std::filesystem::path& dir, std::string* meta_json) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw TensorError("no manifest.json in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  std::map<std::string, Tensor> out;
  for (const auto& entry : manifest.at("tensors")) {
    Tensor t = load_tensor(dir / entry.at("file").get<std::string>());
    if (t.shape() != entry.at("shape").get<Shape>()) {
      throw TensorError("blob " + entry.at("file").get<std::string>() + " disagrees with manifest shape");
    }
    out.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  if (meta_json) *meta_json = manifest.contains("meta") ? manifest["meta"].dump() : "{}";
  return out;
}

}  // namespace texlora
