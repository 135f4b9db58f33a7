#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace texlora {

using Vec2 = std::array<double, 2>;
using Vec3 = std::array<double, 3>;

struct BodyMesh {
  std::vector<Vec3> vertices;  // mesh-local, inside [-1,1]^3
  std::vector<Vec2> uv;        // (s, t) in [0,1]^2, one per vertex
  std::vector<std::array<std::uint32_t, 3>> faces;

  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;
};

enum class BodyPart : std::uint8_t { head, torso_front, torso_back, arms, legs, hands };
inline constexpr std::size_t kPartCount = 6;

/// Vertical capsule: a cylinder with hemispherical caps. The UV chart is a
/// cylindrical unwrap: s follows the azimuth (front of the body at s = 0.5,
/// seam at the back) and t the arc length of the profile from the top pole.
struct CapsuleBody {
  double radius = 0.45;
  double half_height = 0.55;
  std::size_t rings = 20;
  std::size_t segments = 25;

  double profile_length() const;
  Vec3 surface_point(double s, double t) const;
  BodyPart part_at(double s, double t) const;
  bool in_face_region(double s, double t) const;

  BodyMesh mesh() const;
};

}  // namespace texlora
