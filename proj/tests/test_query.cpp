#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "test_util.hpp"
#include "texlora/kdtree.hpp"
#include "texlora/query_encoding.hpp"

using namespace texlora;

namespace {

std::vector<Neighbor> linear_scan(const std::vector<Vec2>& pts, const Vec2& q, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double dx = pts[i][0] - q[0], dy = pts[i][1] - q[1];
    all.emplace_back(dx * dx + dy * dy, i);
  }
  std::sort(all.begin(), all.end());
  std::vector<Neighbor> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({all[i].second, std::sqrt(all[i].first)});
  return out;
}

BodyMesh random_mesh(Rng& rng, std::size_t n) {
  BodyMesh m;
  for (std::size_t i = 0; i < n; ++i) {
    m.vertices.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    m.uv.push_back({rng.uniform(), rng.uniform()});
  }
  return m;
}

Tensor brute_force_query_map(const BodyMesh& mesh, std::size_t v, std::size_t u, std::size_t k) {
  std::vector<double> out(v * u * 3);
  for (std::size_t r = 0; r < v; ++r)
    for (std::size_t c = 0; c < u; ++c) {
      const Vec2 q{(c + 0.5) / static_cast<double>(u), (r + 0.5) / static_cast<double>(v)};
      const auto nn = linear_scan(mesh.uv, q, k);
      double total = 0.0;
      double acc[3] = {0, 0, 0};
      for (const auto& n : nn) {
        const double w = 1.0 / (n.distance + 1e-8);
        total += w;
        for (int a = 0; a < 3; ++a) acc[a] += w * (mesh.vertices[n.index][static_cast<std::size_t>(a)] + 1.0) / 2.0;
      }
      for (int a = 0; a < 3; ++a) out[(r * u + c) * 3 + static_cast<std::size_t>(a)] = acc[a] / total;
    }
  return Tensor({v, u, 3}, out);
}

}  // namespace

TEST_CASE("kd-tree examples") {
  const std::vector<Vec2> corners{{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  const KdTree2 tree(corners);
  const auto self = tree.nearest({1, 0}, 1);
  REQUIRE(self.size() == 1);
  CHECK(self[0].index == 1);
  CHECK(self[0].distance == 0.0);

  const auto all = tree.nearest({0.5, 0.5}, 4);
  REQUIRE(all.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(all[i].index == i);
    CHECK(all[i].distance == all[0].distance);
  }
  CHECK_THROWS_AS(tree.nearest({0, 0}, 5), std::invalid_argument);
  CHECK_THROWS_AS(KdTree2({}), std::invalid_argument);
}

TEST_CASE("kd-tree equals linear scan on random instances") {
  Rng rng(21);
  {
    std::vector<Vec2> pts(200);
    for (auto& p : pts) p = {rng.uniform(), rng.uniform()};
    const KdTree2 tree(pts);
    for (int q = 0; q < 50; ++q) {
      const Vec2 query{rng.uniform(), rng.uniform()};
      const auto a = tree.nearest(query, 5), b = linear_scan(pts, query, 5);
      for (std::size_t i = 0; i < 5; ++i) {
        CHECK(a[i].index == b[i].index);
        CHECK(a[i].distance == b[i].distance);
      }
    }
  }
  for (int instance = 0; instance < 100; ++instance) {
    const std::size_t n = 1 + rng.index(120);
    std::vector<Vec2> pts(n);
    // Coarse lattice coordinates force many exact ties.
    for (auto& p : pts) p = {static_cast<double>(rng.index(6)) / 5.0, static_cast<double>(rng.index(6)) / 5.0};
    const KdTree2 tree(pts);
    const std::size_t k = 1 + rng.index(std::min<std::size_t>(n, 8));
    const Vec2 query{rng.uniform(), rng.uniform()};
    const auto a = tree.nearest(query, k), b = linear_scan(pts, query, k);
    for (std::size_t i = 0; i < k; ++i) CHECK(a[i].index == b[i].index);
  }
}

TEST_CASE("query map examples") {
  BodyMesh single;
  single.vertices = {{0, 0, 0}};
  single.uv = {{0.5, 0.5}};
  const QueryMap uniform = build_query_map(single, 4, 5, 1);
  for (double c : uniform.grid.data()) CHECK(c == 0.5);

  BodyMesh pair;
  pair.vertices = {{-1, 0.5, 1}, {1, 1, -1}};
  pair.uv = {{0.125, 0.375}, {0.875, 0.875}};  // texel centres (0,1) and (3,3) of a 4x4 grid
  const QueryMap exact = build_query_map(pair, 4, 4, 1);
  CHECK(exact.grid[(1 * 4 + 0) * 3 + 0] == 0.0);
  CHECK(exact.grid[(1 * 4 + 0) * 3 + 1] == 0.75);
  CHECK(exact.grid[(1 * 4 + 0) * 3 + 2] == 1.0);

  CHECK_THROWS_AS(build_query_map(BodyMesh{}, 4, 4, 1), std::invalid_argument);
}

TEST_CASE("query map matches brute-force k-NN oracle") {
  Rng rng(22);
  for (int trial = 0; trial < 100; ++trial) {
    const BodyMesh mesh = random_mesh(rng, 3 + rng.index(120));
    const std::size_t v = 4 + rng.index(13), u = 4 + rng.index(13), k = 1 + rng.index(3);
    const QueryMap q = build_query_map(mesh, v, u, k);
    CHECK(texlora::testing::max_abs_diff(q.grid, brute_force_query_map(mesh, v, u, k)) < 1e-15);
  }
}

TEST_CASE("query map is deterministic, bounded and NaN-free") {
  const BodyMesh mesh = CapsuleBody{}.mesh();
  const QueryMap a = build_query_map(mesh, 32, 32);
  const QueryMap b = build_query_map(mesh, 32, 32);
  CHECK(std::equal(a.grid.data().begin(), a.grid.data().end(), b.grid.data().begin()));
  for (double c : a.grid.data()) {
    CHECK(std::isfinite(c));
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);
  }
}

TEST_CASE("query map cache round trip") {
  const auto path = std::filesystem::temp_directory_path() / "texlora_test_query_cache.txt0";
  std::filesystem::remove(path);
  const BodyMesh mesh = CapsuleBody{}.mesh();
  const QueryMap built = load_or_build_query_map(path, mesh, 8, 8);
  CHECK(std::filesystem::exists(path));
  const QueryMap cached = load_or_build_query_map(path, mesh, 8, 8);
  CHECK(texlora::testing::max_abs_diff(built.grid, cached.grid) == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("sinusoidal positional encoding") {
  const PositionalEncoding pe = sinusoidal_pe(6, 5, 8);
  CHECK(pe.grid.shape() == Shape{6, 5, 8});
  for (std::size_t c = 0; c < 8; c += 2) {
    CHECK(pe.grid[c] == 0.0);
    CHECK(pe.grid[c + 1] == 1.0);
  }
  for (double v : pe.grid.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK(pe.tokens().shape() == Shape{30, 8});
  CHECK_THROWS_AS(sinusoidal_pe(4, 4, 6), std::invalid_argument);
}

TEST_CASE("positional encodings are pairwise distinct on a 64x64 grid") {
  for (std::size_t d : {4, 8}) {
    const PositionalEncoding pe = sinusoidal_pe(64, 64, d);
    std::set<std::vector<double>> seen;
    for (std::size_t p = 0; p < 64 * 64; ++p) {
      std::vector<double> code(pe.grid.data().begin() + static_cast<long>(p * d),
                               pe.grid.data().begin() + static_cast<long>((p + 1) * d));
      seen.insert(code);
    }
    CHECK(seen.size() == 64 * 64);
  }
}

TEST_CASE("capsule body mesh") {
  const CapsuleBody body;
  const BodyMesh mesh = body.mesh();
  CHECK_NOTHROW(mesh.validate());
  CHECK(mesh.vertices.size() == 520);
  for (const auto& p : mesh.vertices)
    for (double c : p) {
      CHECK(c >= -1.0 - 1e-12);
      CHECK(c <= 1.0 + 1e-12);
    }
  std::set<BodyPart> parts;
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j) parts.insert(body.part_at((j + 0.5) / 64, (i + 0.5) / 64));
  CHECK(parts.size() == kPartCount);
  CHECK(body.in_face_region(0.5, 0.2));
  CHECK(body.part_at(0.5, 0.2) == BodyPart::head);
}
