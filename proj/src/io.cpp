#include "texlora/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "texlora/ops.hpp"

namespace texlora {

namespace {

struct File {
  std::FILE* f;
  ~File() {
    if (f) std::fclose(f);
  }
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-') throw std::invalid_argument(key + ": expected an unsigned integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  return x;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& chw) {
  if (chw.rank() != 3 || (chw.dim(0) != 3 && chw.dim(0) != 1))
    throw TensorError("write_png: expected [3,H,W] or [1,H,W], got " + to_string(chw.shape()));
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  File file{std::fopen(path.c_str(), "wb")};
  if (!file.f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialization failed");
  }
  std::vector<png_byte> pixels(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < 3; ++k) {
        const double val = chw[((c == 1 ? 0 : k) * h + y) * w + x];
        const double clamped = std::isfinite(val) ? std::clamp(val, 0.0, 1.0) : 0.0;
        pixels[(y * w + x) * 3 + k] = static_cast<png_byte>(std::lround(clamped * 255.0));
      }
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = pixels.data() + y * w * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::filesystem::path& path) {
  File file{std::fopen(path.c_str(), "rb")};
  if (!file.f) throw std::runtime_error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng initialization failed");
  }
  std::vector<png_byte> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng failed reading " + path.string());
  }
  png_init_io(png, file.f);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  pixels.resize(h * w * 3);
  rows.resize(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = pixels.data() + y * w * 3;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::vector<double> out(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < 3; ++k) out[(k * h + y) * w + x] = pixels[(y * w + x) * 3 + k] / 255.0;
  return Tensor({3, h, w}, std::move(out));
}

Tensor hwc_to_chw(const Tensor& hwc) {
  if (hwc.rank() != 3) throw TensorError("hwc_to_chw: expected [H,W,C], got " + to_string(hwc.shape()));
  return permute(hwc.detach(), {2, 0, 1});
}

KeyValues parse_key_values(std::istream& is) {
  KeyValues kv;
  std::string line;
  std::size_t number = 0;
  while (std::getline(is, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("line " + std::to_string(number) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key.empty()) throw std::invalid_argument("line " + std::to_string(number) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return parse_key_values(is);
}

void apply_train_config(TrainConfig& cfg, const KeyValues& kv) {
  // Preset first so explicit sizes override it.
  if (const auto it = kv.find("model"); it != kv.end()) {
    if (it->second == "toy") cfg.model = ModelConfig::toy();
    else if (it->second == "micro") cfg.model = ModelConfig::micro();
    else if (it->second == "default") cfg.model = ModelConfig::full();
    else throw std::invalid_argument("model: expected toy, micro or default, got '" + it->second + "'");
    cfg.scene.uv_h = cfg.model.uv_h;
    cfg.scene.uv_w = cfg.model.uv_w;
    cfg.scene.img_h = cfg.model.img_h;
    cfg.scene.img_w = cfg.model.img_w;
  }
  for (const auto& [key, value] : kv) {
    if (key == "model") continue;
    if (key == "steps") cfg.steps = to_size(key, value);
    else if (key == "lr") cfg.adam.lr = to_double(key, value);
    else if (key == "beta1") cfg.adam.beta1 = to_double(key, value);
    else if (key == "beta2") cfg.adam.beta2 = to_double(key, value);
    else if (key == "eps") cfg.adam.eps = to_double(key, value);
    else if (key == "seed") cfg.seed = to_size(key, value);
    else if (key == "w1") cfg.weights.w1 = to_double(key, value);
    else if (key == "w2") cfg.weights.w2 = to_double(key, value);
    else if (key == "w3") cfg.weights.w3 = to_double(key, value);
    else if (key == "views") cfg.scene.views = to_size(key, value);
    else if (key == "seg_jitter") cfg.scene.seg_jitter = to_double(key, value);
    else if (key == "uv") cfg.scene.uv_h = cfg.scene.uv_w = cfg.model.uv_h = cfg.model.uv_w = to_size(key, value);
    else if (key == "image")
      cfg.scene.img_h = cfg.scene.img_w = cfg.model.img_h = cfg.model.img_w = to_size(key, value);
    else throw std::invalid_argument("unknown config key '" + key + "'");
  }
}

std::string to_key_values(const TrainConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "steps = " << cfg.steps << "\nlr = " << cfg.adam.lr << "\nbeta1 = " << cfg.adam.beta1
     << "\nbeta2 = " << cfg.adam.beta2 << "\neps = " << cfg.adam.eps << "\nseed = " << cfg.seed
     << "\nw1 = " << cfg.weights.w1 << "\nw2 = " << cfg.weights.w2 << "\nw3 = " << cfg.weights.w3
     << "\nviews = " << cfg.scene.views << "\nseg_jitter = " << cfg.scene.seg_jitter << '\n';
  return os.str();
}

}  // namespace texlora
