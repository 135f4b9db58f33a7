#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "texlora/body.hpp"
#include "texlora/losses.hpp"
#include "texlora/ops.hpp"

namespace texlora {

/// Pinhole camera on a circle around the body's vertical axis, looking at
/// (0, height, 0). yaw 0 sits on +z and sees the front of the body.
struct Camera {
  double yaw = 0.0;
  double distance = 3.0;
  double height = 0.0;
  /// Focal length in units of half the image height.
  double focal = 2.2;
  std::size_t h = 32, w = 32;

  /// Throws std::invalid_argument for a camera that cannot see the whole
  /// body: inside its bounding sphere, non-positive focal or empty image.
  void validate(double bounding_radius) const;
  /// (x, y, depth); x and y in pixels, pixel (i, j) centred at (j+0.5, i+0.5).
  std::array<double, 3> project(const Vec3& p) const;
};

struct SceneConfig {
  std::size_t uv_h = 32, uv_w = 32;
  std::size_t img_h = 32, img_w = 32;
  std::size_t views = 4;
  double distance = 3.0;
  double focal = 2.2;
  /// Largest yaw offset (radians) between the camera that renders the image
  /// and the one that produces its segmentation. 0 keeps them aligned.
  double seg_jitter = 0.0;
  std::size_t synthetic_faces = 8;
  CapsuleBody body;

  void validate() const;
};

struct SceneView {
  Camera camera;
  /// [h*w x v*u]; row p holds bilinear texel weights of pixel p.
  SparseMatrix raster_op;
  Tensor image;        // [3,h,w]
  Tensor part_seg;     // [P,h,w] paired with the image (jittered camera)
  Tensor render_seg;   // [P,h,w] of the raster camera itself
  Tensor coverage;     // [1,h,w]
  Tensor visibility;   // [v,u]
};

struct SyntheticScene {
  SceneConfig cfg;
  std::uint64_t seed = 0;
  BodyMesh mesh;
  Tensor gt_texture;   // [v,u,3]
  Tensor part_seg_uv;  // [P,v,u]
  std::vector<SceneView> views;
  /// Reference face textures for the structure loss.
  SyntheticTextureSet faces;

  /// Texels seen by at least one view, [v,u].
  Tensor visible_union() const;
};

/// Rasterizes the body with z-buffering into a fixed texel-to-pixel map.
SparseMatrix rasterize(const BodyMesh& mesh, const Camera& cam, std::size_t v, std::size_t u,
                       std::vector<Vec2>* pixel_uv = nullptr);

SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& cfg);
SyntheticScene generate_scene(std::uint64_t seed, std::size_t v, std::size_t u, std::size_t h, std::size_t w,
                              std::size_t n_views);

Tensor paint_texture(const CapsuleBody& body, std::size_t v, std::size_t u, std::uint64_t seed);
SyntheticTextureSet make_face_set(const CapsuleBody& body, std::size_t v, std::size_t u, std::size_t n,
                                  std::uint64_t seed);

/// texture [v,u,3] -> image [3,h,w], or [B,v,u,3] -> [B,3,h,w]. Linear and
/// differentiable; the backward pass applies raster_op^T.
Tensor render(const Tensor& texture, const SceneView& view);
/// raster_op^T applied to an image [3,h,w]; returns [v,u,3]. Not taped.
Tensor render_transpose(const Tensor& image, const SceneView& view);

}  // namespace texlora
