#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "texlora/body.hpp"

namespace texlora {

struct Neighbor {
  std::size_t index;
  double distance;
};

/// Exact k-nearest-neighbour search over 2D points. Results are sorted by
/// distance; equal distances are ordered by point index.
class KdTree2 {
 public:
  explicit KdTree2(std::vector<Vec2> points);

  std::size_t size() const { return points_.size(); }
  std::vector<Neighbor> nearest(const Vec2& query, std::size_t k) const;

 private:
  struct Node {
    std::uint32_t point;
    std::uint32_t left;
    std::uint32_t right;
    std::uint8_t axis;
  };
  static constexpr std::uint32_t kNone = 0xffffffffu;

  std::uint32_t build(std::vector<std::uint32_t>& idx, std::size_t lo, std::size_t hi, int depth);

  std::vector<Vec2> points_;
  std::vector<Node> nodes_;
  std::uint32_t root_ = kNone;
};

}  // namespace texlora
