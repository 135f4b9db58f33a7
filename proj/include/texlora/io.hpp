#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "texlora/tensor.hpp"
#include "texlora/train.hpp"

namespace texlora {

/// 8-bit PNG of an image [3,H,W] or [1,H,W] in [0,1]; values are clamped.
void write_png(const std::filesystem::path& path, const Tensor& chw);
/// Reads an 8-bit gray, RGB or RGBA PNG as [3,H,W] in [0,1].
Tensor read_png(const std::filesystem::path& path);
/// [H,W,3] -> [3,H,W].
Tensor hwc_to_chw(const Tensor& hwc);

/// `key = value` lines; `#` starts a comment, blank lines are skipped and
/// values may be double-quoted. Throws std::invalid_argument on bad syntax.
using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(std::istream& is);
KeyValues read_key_values(const std::filesystem::path& path);

/// Keys: steps, lr, beta1, beta2, eps, seed, w1, w2, w3, views, uv, image,
/// seg_jitter, model (toy, micro or default). Unknown keys are an error.
void apply_train_config(TrainConfig& cfg, const KeyValues& kv);
std::string to_key_values(const TrainConfig& cfg);

}  // namespace texlora
