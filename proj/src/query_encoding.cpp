#include "texlora/query_encoding.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "texlora/kdtree.hpp"
#include "texlora/ops.hpp"
#include "texlora/serialize.hpp"

namespace texlora {

Tensor PositionalEncoding::tokens() const {
  return reshape(grid, {grid.dim(0) * grid.dim(1), grid.dim(2)});
}

QueryMap build_query_map(const BodyMesh& mesh, std::size_t v, std::size_t u, std::size_t k) {
  mesh.validate();
  if (v == 0 || u == 0) throw std::invalid_argument("query map size must be positive");
  const KdTree2 tree(mesh.uv);
  std::vector<double> grid(v * u * 3);
  for (std::size_t r = 0; r < v; ++r) {
    for (std::size_t c = 0; c < u; ++c) {
      const Vec2 centre{(static_cast<double>(c) + 0.5) / static_cast<double>(u),
                        (static_cast<double>(r) + 0.5) / static_cast<double>(v)};
      const auto nn = tree.nearest(centre, k);
      double total = 0.0;
      Vec3 acc{0.0, 0.0, 0.0};
      for (const auto& n : nn) {
        const double w = 1.0 / (n.distance + 1e-8);
        total += w;
        for (std::size_t a = 0; a < 3; ++a) acc[a] += w * 0.5 * (mesh.vertices[n.index][a] + 1.0);
      }
      for (std::size_t a = 0; a < 3; ++a) grid[(r * u + c) * 3 + a] = std::clamp(acc[a] / total, 0.0, 1.0);
    }
  }
  return QueryMap{Tensor({v, u, 3}, std::move(grid))};
}

QueryMap load_or_build_query_map(const std::filesystem::path& path, const BodyMesh& mesh, std::size_t v,
                                 std::size_t u, std::size_t k) {
  if (std::filesystem::exists(path)) {
    Tensor cached = load_tensor(path);
    if (cached.shape() == Shape{v, u, 3}) return QueryMap{std::move(cached)};
  }
  QueryMap map = build_query_map(mesh, v, u, k);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_tensor(path, map.grid);
  return map;
}

PositionalEncoding sinusoidal_pe(std::size_t h, std::size_t w, std::size_t d) {
  if (d == 0 || d % 4 != 0) {
    throw std::invalid_argument("positional encoding width must be a positive multiple of 4, got " +
                                std::to_string(d));
  }
  if (h == 0 || w == 0) throw std::invalid_argument("positional encoding grid must be non-empty");
  const std::size_t per_axis = d / 2;
  std::vector<double> freq(per_axis / 2);
  for (std::size_t i = 0; i < freq.size(); ++i)
    freq[i] = 1.0 / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(per_axis));

  std::vector<double> grid(h * w * d);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* cell = grid.data() + (y * w + x) * d;
      for (std::size_t i = 0; i < freq.size(); ++i) {
        cell[2 * i] = std::sin(static_cast<double>(y) * freq[i]);
        cell[2 * i + 1] = std::cos(static_cast<double>(y) * freq[i]);
        cell[per_axis + 2 * i] = std::sin(static_cast<double>(x) * freq[i]);
        cell[per_axis + 2 * i + 1] = std::cos(static_cast<double>(x) * freq[i]);
      }
    }
  }
  return PositionalEncoding{Tensor({h, w, d}, std::move(grid))};
}

}  // namespace texlora
