#pragma once

#include <filesystem>

#include "texlora/body.hpp"
#include "texlora/tensor.hpp"

namespace texlora {

/// Color encoding of UV space: grid[v, u, 3] in [0, 1].
struct QueryMap {
  Tensor grid;
};

/// Sinusoidal encoding grid[h, w, d]; first d/2 channels encode the row,
/// the rest the column, as interleaved (sin, cos) pairs.
struct PositionalEncoding {
  Tensor grid;

  /// grid flattened to [h*w, d] in row-major token order.
  Tensor tokens() const;
};

inline constexpr std::size_t kQueryNeighbors = 3;

/// Each texel centre takes the inverse-distance-weighted mean of the
/// [-1,1] -> [0,1] mapped coordinates of its k nearest vertices in UV space.
QueryMap build_query_map(const BodyMesh& mesh, std::size_t v, std::size_t u, std::size_t k = kQueryNeighbors);

/// Reads the cached map at `path` when it exists with the right shape,
/// otherwise builds and writes it.
QueryMap load_or_build_query_map(const std::filesystem::path& path, const BodyMesh& mesh, std::size_t v,
                                 std::size_t u, std::size_t k = kQueryNeighbors);

PositionalEncoding sinusoidal_pe(std::size_t h, std::size_t w, std::size_t d);

}  // namespace texlora
