#include "texlora/body.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace texlora {

void BodyMesh::validate() const {
  if (vertices.empty()) throw std::invalid_argument("body mesh has no vertices");
  if (uv.size() != vertices.size()) throw std::invalid_argument("body mesh needs one uv per vertex");
  for (const auto& f : faces)
    for (auto idx : f)
      if (idx >= vertices.size()) {
        throw std::invalid_argument("face index " + std::to_string(idx) + " out of range");
      }
  for (const auto& p : uv)
    if (!(p[0] >= 0.0 && p[0] <= 1.0 && p[1] >= 0.0 && p[1] <= 1.0)) {
      throw std::invalid_argument("uv coordinate outside [0,1]^2");
    }
}

double CapsuleBody::profile_length() const { return M_PI * radius + 2.0 * half_height; }

Vec3 CapsuleBody::surface_point(double s, double t) const {
  const double cap = 0.5 * M_PI * radius;
  const double a = t * profile_length();
  double y = 0.0, r = radius;
  if (a < cap) {
    const double phi = a / radius;
    y = half_height + radius * std::cos(phi);
    r = radius * std::sin(phi);
  } else if (a <= cap + 2.0 * half_height) {
    y = half_height - (a - cap);
  } else {
    const double phi = (a - cap - 2.0 * half_height) / radius;
    y = -half_height - radius * std::sin(phi);
    r = radius * std::cos(phi);
  }
  const double theta = 2.0 * M_PI * s - M_PI;
  return {r * std::sin(theta), y, r * std::cos(theta)};
}

BodyPart CapsuleBody::part_at(double s, double t) const {
  const double cap = 0.5 * M_PI * radius;
  const double a = t * profile_length();
  if (a < cap) return BodyPart::head;
  if (a > cap + 2.0 * half_height) return BodyPart::hands;
  const double y = half_height - (a - cap);
  if (y < -0.1) return BodyPart::legs;
  const double theta = 2.0 * M_PI * s - M_PI;
  if (std::abs(std::sin(theta)) > 0.8) return BodyPart::arms;
  return std::cos(theta) >= 0.0 ? BodyPart::torso_front : BodyPart::torso_back;
}

bool CapsuleBody::in_face_region(double s, double t) const {
  const double cap_t = 0.5 * M_PI * radius / profile_length();
  return s >= 0.4 && s <= 0.6 && t >= 0.45 * cap_t && t < cap_t;
}

BodyMesh CapsuleBody::mesh() const {
  if (rings < 3 || segments < 3) throw std::invalid_argument("capsule needs at least 3 rings and segments");
  BodyMesh m;
  const std::size_t cols = segments + 1;
  for (std::size_t i = 0; i < rings; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(rings - 1);
    for (std::size_t j = 0; j < cols; ++j) {
      const double s = static_cast<double>(j) / static_cast<double>(segments);
      m.vertices.push_back(surface_point(s, t));
      m.uv.push_back({s, t});
    }
  }
  auto id = [cols](std::size_t i, std::size_t j) { return static_cast<std::uint32_t>(i * cols + j); };
  auto area = [&m](std::uint32_t a, std::uint32_t b, std::uint32_t c) {
    const auto& p = m.vertices[a];
    const auto& q = m.vertices[b];
    const auto& r = m.vertices[c];
    const Vec3 u{q[0] - p[0], q[1] - p[1], q[2] - p[2]};
    const Vec3 v{r[0] - p[0], r[1] - p[1], r[2] - p[2]};
    const Vec3 n{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
    return 0.5 * std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
  };
  for (std::size_t i = 0; i + 1 < rings; ++i) {
    for (std::size_t j = 0; j < segments; ++j) {
      const std::array<std::uint32_t, 3> f1{id(i, j), id(i + 1, j), id(i + 1, j + 1)};
      const std::array<std::uint32_t, 3> f2{id(i, j), id(i + 1, j + 1), id(i, j + 1)};
      if (area(f1[0], f1[1], f1[2]) > 1e-12) m.faces.push_back(f1);
      if (area(f2[0], f2[1], f2[2]) > 1e-12) m.faces.push_back(f2);
    }
  }
  return m;
}

}  // namespace texlora
