#include "texlora/kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

namespace texlora {

KdTree2::KdTree2(std::vector<Vec2> points) : points_(std::move(points)) {
  if (points_.empty()) throw std::invalid_argument("kd-tree needs at least one point");
  std::vector<std::uint32_t> idx(points_.size());
  std::iota(idx.begin(), idx.end(), 0u);
  nodes_.reserve(points_.size());
  root_ = build(idx, 0, idx.size(), 0);
}

std::uint32_t KdTree2::build(std::vector<std::uint32_t>& idx, std::size_t lo, std::size_t hi, int depth) {
  if (lo >= hi) return kNone;
  const auto axis = static_cast<std::uint8_t>(depth % 2);
  const std::size_t mid = lo + (hi - lo) / 2;
  std::nth_element(idx.begin() + static_cast<long>(lo), idx.begin() + static_cast<long>(mid),
                   idx.begin() + static_cast<long>(hi), [&](std::uint32_t a, std::uint32_t b) {
                     const double pa = points_[a][axis], pb = points_[b][axis];
                     return pa < pb || (pa == pb && a < b);
                   });
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back({idx[mid], kNone, kNone, axis});
  const std::uint32_t left = build(idx, lo, mid, depth + 1);
  const std::uint32_t right = build(idx, mid + 1, hi, depth + 1);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

namespace {

struct Candidate {
  double d2;
  std::size_t index;
  bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && index < o.index); }
};

}  // namespace

std::vector<Neighbor> KdTree2::nearest(const Vec2& query, std::size_t k) const {
  if (k == 0) throw std::invalid_argument("kd-tree query needs k >= 1");
  if (k > points_.size()) {
    throw std::invalid_argument("kd-tree query for " + std::to_string(k) + " neighbours but only " +
                                std::to_string(points_.size()) + " points");
  }
  std::vector<Candidate> best;  // sorted ascending, at most k
  best.reserve(k + 1);

  auto offer = [&](std::size_t index) {
    const double dx = points_[index][0] - query[0];
    const double dy = points_[index][1] - query[1];
    const Candidate c{dx * dx + dy * dy, index};
    if (best.size() == k && !(c < best.back())) return;
    best.insert(std::upper_bound(best.begin(), best.end(), c), c);
    if (best.size() > k) best.pop_back();
  };

  auto visit = [&](auto&& self, std::uint32_t node) -> void {
    if (node == kNone) return;
    const Node& n = nodes_[node];
    offer(n.point);
    const double diff = query[n.axis] - points_[n.point][n.axis];
    const std::uint32_t near = diff < 0.0 ? n.left : n.right;
    const std::uint32_t far = diff < 0.0 ? n.right : n.left;
    self(self, near);
    // Ties on the splitting plane may sit on either side, so keep equality.
    if (best.size() < k || diff * diff <= best.back().d2) self(self, far);
  };
  visit(visit, root_);

  std::vector<Neighbor> out;
  out.reserve(best.size());
  for (const auto& c : best) out.push_back({c.index, std::sqrt(c.d2)});
  return out;
}

}  // namespace texlora
