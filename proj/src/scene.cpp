#include "texlora/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "texlora/random.hpp"

namespace texlora {

namespace {

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

Vec2 texel_centre(std::size_t r, std::size_t c, std::size_t v, std::size_t u) {
  return {(static_cast<double>(c) + 0.5) / static_cast<double>(u), (static_cast<double>(r) + 0.5) / static_cast<double>(v)};
}

// Smooth bump used for painted features; 1 at the centre, 0 beyond `radius`.
double bump(double ds, double dt, double radius) {
  const double r2 = (ds * ds + dt * dt) / (radius * radius);
  return r2 >= 1.0 ? 0.0 : (1.0 - r2) * (1.0 - r2);
}

// Darkens eyes and mouth inside the face region.
void paint_face(const CapsuleBody& body, double s, double t, double eye_dt, double* rgb) {
  if (!body.in_face_region(s, t)) return;
  const double cap_t = 0.5 * M_PI * body.radius / body.profile_length();
  const double lo = 0.45 * cap_t, span = cap_t - lo;
  const double eye_t = lo + (0.35 + eye_dt) * span;
  const double mouth_t = lo + 0.8 * span;
  double dark = std::max(bump(s - 0.46, t - eye_t, 0.035), bump(s - 0.54, t - eye_t, 0.035));
  dark = std::max(dark, bump((s - 0.5) * 0.5, t - mouth_t, 0.03));
  for (int k = 0; k < 3; ++k) rgb[k] *= 1.0 - 0.7 * dark;
}

Tensor one_hot_seg(const std::vector<Vec2>& pixel_uv, const std::vector<bool>& covered, const CapsuleBody& body,
                   std::size_t h, std::size_t w) {
  std::vector<double> seg(kPartCount * h * w, 0.0);
  for (std::size_t p = 0; p < h * w; ++p) {
    if (!covered[p]) continue;
    const auto part = static_cast<std::size_t>(body.part_at(pixel_uv[p][0], pixel_uv[p][1]));
    seg[part * h * w + p] = 1.0;
  }
  return Tensor({kPartCount, h, w}, std::move(seg));
}

std::vector<bool> covered_rows(const SparseMatrix& r) {
  std::vector<bool> out(r.rows);
  for (std::size_t i = 0; i < r.rows; ++i) out[i] = r.row_ptr[i + 1] > r.row_ptr[i];
  return out;
}

}  // namespace

// ---- camera ----------------------------------------------------------------

void Camera::validate(double bounding_radius) const {
  if (h == 0 || w == 0) throw std::invalid_argument("camera image is empty");
  if (!(focal > 0.0) || !std::isfinite(focal)) throw std::invalid_argument("camera focal length must be positive");
  if (!std::isfinite(yaw) || !std::isfinite(height)) throw std::invalid_argument("camera pose is not finite");
  const double eye = std::sqrt(distance * distance + height * height);
  if (!(distance > 0.0) || !(eye > bounding_radius * 1.05)) {
    throw std::invalid_argument("camera at distance " + std::to_string(distance) +
                                " is inside the body's bounding sphere");
  }
}

std::array<double, 3> Camera::project(const Vec3& p) const {
  const double ex = distance * std::sin(yaw), ez = distance * std::cos(yaw);
  const double dx = p[0] - ex, dy = p[1] - height, dz = p[2] - ez;
  const double xc = dx * std::cos(yaw) - dz * std::sin(yaw);
  const double zc = -dx * std::sin(yaw) - dz * std::cos(yaw);
  const double f = focal * 0.5 * static_cast<double>(h);
  return {0.5 * static_cast<double>(w) + f * xc / zc, 0.5 * static_cast<double>(h) - f * dy / zc, zc};
}

// ---- configuration -----------------------------------------------------------

void SceneConfig::validate() const {
  if (uv_h < 16 || uv_w < 16 || img_h < 16 || img_w < 16)
    throw std::invalid_argument("scene sizes must be at least 16");
  if (views == 0) throw std::invalid_argument("scene needs at least one view");
  if (synthetic_faces == 0) throw std::invalid_argument("scene needs at least one synthetic face");
  if (!(seg_jitter >= 0.0)) throw std::invalid_argument("segmentation jitter must be nonnegative");
}

Tensor SyntheticScene::visible_union() const {
  const std::size_t n = cfg.uv_h * cfg.uv_w;
  std::vector<double> out(n, 0.0);
  for (const SceneView& view : views)
    for (std::size_t i = 0; i < n; ++i) out[i] = std::max(out[i], view.visibility[i]);
  return Tensor({cfg.uv_h, cfg.uv_w}, std::move(out));
}

// ---- rasterization -----------------------------------------------------------

SparseMatrix rasterize(const BodyMesh& mesh, const Camera& cam, std::size_t v, std::size_t u,
                       std::vector<Vec2>* pixel_uv) {
  mesh.validate();
  double bound = 0.0;
  for (const Vec3& p : mesh.vertices) bound = std::max(bound, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  cam.validate(bound);

  const std::size_t h = cam.h, w = cam.w;
  std::vector<std::array<double, 3>> proj(mesh.vertices.size());
  for (std::size_t i = 0; i < proj.size(); ++i) proj[i] = cam.project(mesh.vertices[i]);

  std::vector<double> depth(h * w, std::numeric_limits<double>::infinity());
  std::vector<Vec2> hit(h * w, Vec2{0.0, 0.0});
  for (const auto& f : mesh.faces) {
    const auto& a = proj[f[0]];
    const auto& b = proj[f[1]];
    const auto& c = proj[f[2]];
    const double area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    if (std::abs(area) < 1e-14) continue;
    const double x0 = std::min({a[0], b[0], c[0]}), x1 = std::max({a[0], b[0], c[0]});
    const double y0 = std::min({a[1], b[1], c[1]}), y1 = std::max({a[1], b[1], c[1]});
    const auto lo_j = static_cast<long>(std::max(0.0, std::floor(x0 - 0.5)));
    const auto hi_j = static_cast<long>(std::min(static_cast<double>(w) - 1.0, std::ceil(x1 - 0.5)));
    const auto lo_i = static_cast<long>(std::max(0.0, std::floor(y0 - 0.5)));
    const auto hi_i = static_cast<long>(std::min(static_cast<double>(h) - 1.0, std::ceil(y1 - 0.5)));
    for (long i = lo_i; i <= hi_i; ++i)
      for (long j = lo_j; j <= hi_j; ++j) {
        const double px = static_cast<double>(j) + 0.5, py = static_cast<double>(i) + 0.5;
        const double l0 = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / area;
        const double l1 = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / area;
        const double l2 = 1.0 - l0 - l1;
        if (l0 < 0.0 || l1 < 0.0 || l2 < 0.0) continue;
        // Perspective-correct interpolation.
        const double q0 = l0 / a[2], q1 = l1 / b[2], q2 = l2 / c[2];
        const double inv = q0 + q1 + q2;
        const double z = 1.0 / inv;
        const std::size_t p = static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j);
        if (!(z < depth[p])) continue;
        depth[p] = z;
        const auto& ua = mesh.uv[f[0]];
        const auto& ub = mesh.uv[f[1]];
        const auto& uc = mesh.uv[f[2]];
        hit[p] = {(q0 * ua[0] + q1 * ub[0] + q2 * uc[0]) * z, (q0 * ua[1] + q1 * ub[1] + q2 * uc[1]) * z};
      }
  }

  SparseMatrix r;
  r.rows = h * w;
  r.cols = v * u;
  r.row_ptr.push_back(0);
  for (std::size_t p = 0; p < h * w; ++p) {
    if (std::isfinite(depth[p])) {
      const double x = std::clamp(hit[p][0], 0.0, 1.0) * static_cast<double>(u) - 0.5;
      const double y = std::clamp(hit[p][1], 0.0, 1.0) * static_cast<double>(v) - 0.5;
      const double fx0 = std::floor(x), fy0 = std::floor(y);
      const double fx = x - fx0, fy = y - fy0;
      const auto col = [u](double c) { return static_cast<std::size_t>(std::clamp(c, 0.0, static_cast<double>(u - 1))); };
      const auto row = [v](double c) { return static_cast<std::size_t>(std::clamp(c, 0.0, static_cast<double>(v - 1))); };
      const std::size_t c0 = col(fx0), c1 = col(fx0 + 1.0), r0 = row(fy0), r1 = row(fy0 + 1.0);
      const std::array<std::pair<std::size_t, double>, 4> taps{{{r0 * u + c0, (1 - fx) * (1 - fy)},
                                                                {r0 * u + c1, fx * (1 - fy)},
                                                                {r1 * u + c0, (1 - fx) * fy},
                                                                {r1 * u + c1, fx * fy}}};
      // Merge taps that collapsed onto the same texel at the border.
      std::vector<std::pair<std::size_t, double>> merged;
      for (const auto& [idx, wt] : taps) {
        auto it = std::find_if(merged.begin(), merged.end(), [idx](const auto& e) { return e.first == idx; });
        if (it == merged.end()) merged.emplace_back(idx, wt);
        else it->second += wt;
      }
      std::sort(merged.begin(), merged.end());
      for (const auto& [idx, wt] : merged) {
        if (wt == 0.0) continue;
        r.col_idx.push_back(idx);
        r.values.push_back(wt);
      }
    }
    r.row_ptr.push_back(r.col_idx.size());
  }
  if (pixel_uv) *pixel_uv = std::move(hit);
  return r;
}

// ---- textures ----------------------------------------------------------------

Tensor paint_texture(const CapsuleBody& body, std::size_t v, std::size_t u, std::uint64_t seed) {
  Rng rng(seed);
  // Base colors per part, jittered per seed.
  std::array<std::array<double, 3>, kPartCount> base{{{0.86, 0.67, 0.53},
                                                      {0.80, 0.15, 0.15},
                                                      {0.20, 0.30, 0.75},
                                                      {0.90, 0.80, 0.20},
                                                      {0.15, 0.20, 0.25},
                                                      {0.86, 0.67, 0.53}}};
  for (auto& c : base)
    for (double& x : c) x = clamp01(x + rng.uniform(-0.08, 0.08));
  const double stripe = rng.uniform(5.0, 9.0);
  const double eye_dt = rng.uniform(-0.05, 0.05);

  std::vector<double> out(v * u * 3);
  for (std::size_t r = 0; r < v; ++r)
    for (std::size_t c = 0; c < u; ++c) {
      const auto [s, t] = texel_centre(r, c, v, u);
      const auto part = body.part_at(s, t);
      double rgb[3] = {base[static_cast<std::size_t>(part)][0], base[static_cast<std::size_t>(part)][1],
                       base[static_cast<std::size_t>(part)][2]};
      double shade = 1.0;
      switch (part) {
        case BodyPart::torso_front:
          shade = std::sin(2.0 * M_PI * stripe * t) > 0.0 ? 1.0 : 0.55;
          break;
        case BodyPart::torso_back:
          shade = (static_cast<int>(std::floor(s * 12.0)) + static_cast<int>(std::floor(t * 12.0))) % 2 ? 1.0 : 0.6;
          break;
        case BodyPart::arms:
          shade = std::sin(2.0 * M_PI * 16.0 * s) > 0.0 ? 1.0 : 0.7;
          break;
        case BodyPart::legs:
          shade = 0.85 + 0.15 * std::sin(2.0 * M_PI * 3.0 * t);
          break;
        case BodyPart::head: {
          // Hair on the upper cap and the back of the head.
          const double cap_t = 0.5 * M_PI * body.radius / body.profile_length();
          if (t < 0.45 * cap_t || std::abs(s - 0.5) > 0.2) shade = 0.25;
          break;
        }
        case BodyPart::hands:
          break;
      }
      for (double& x : rgb) x *= shade;
      paint_face(body, s, t, eye_dt, rgb);
      for (std::size_t k = 0; k < 3; ++k) out[(r * u + c) * 3 + k] = clamp01(rgb[k]);
    }
  return Tensor({v, u, 3}, std::move(out));
}

SyntheticTextureSet make_face_set(const CapsuleBody& body, std::size_t v, std::size_t u, std::size_t n,
                                  std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("face set needs at least one texture");
  static constexpr std::array<std::array<double, 3>, 4> kTones{
      {{0.95, 0.80, 0.69}, {0.87, 0.67, 0.53}, {0.68, 0.48, 0.34}, {0.42, 0.28, 0.20}}};
  Rng rng(seed);
  SyntheticTextureSet set;
  std::vector<double> mask(v * u, 0.0);
  for (std::size_t r = 0; r < v; ++r)
    for (std::size_t c = 0; c < u; ++c) {
      const auto [s, t] = texel_centre(r, c, v, u);
      mask[r * u + c] = body.in_face_region(s, t) ? 1.0 : 0.0;
    }
  set.face_mask = Tensor({v, u}, std::move(mask));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& tone = kTones[rng.index(kTones.size())];
    const double eye_dt = rng.uniform(-0.05, 0.05);
    std::vector<double> tex(v * u * 3);
    for (std::size_t r = 0; r < v; ++r)
      for (std::size_t c = 0; c < u; ++c) {
        const auto [s, t] = texel_centre(r, c, v, u);
        const double mottle = 0.03 * rng.normal();
        double rgb[3] = {tone[0] + mottle, tone[1] + mottle, tone[2] + mottle};
        paint_face(body, s, t, eye_dt, rgb);
        for (std::size_t k = 0; k < 3; ++k) tex[(r * u + c) * 3 + k] = clamp01(rgb[k]);
      }
    set.textures.emplace_back(Shape{v, u, 3}, std::move(tex));
  }
  set.validate();
  return set;
}

// ---- scenes ------------------------------------------------------------------

SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  SyntheticScene scene;
  scene.cfg = cfg;
  scene.seed = seed;
  scene.mesh = cfg.body.mesh();
  scene.gt_texture = paint_texture(cfg.body, cfg.uv_h, cfg.uv_w, seed);
  scene.faces = make_face_set(cfg.body, cfg.uv_h, cfg.uv_w, cfg.synthetic_faces, seed + 1);

  const std::size_t v = cfg.uv_h, u = cfg.uv_w, h = cfg.img_h, w = cfg.img_w;
  std::vector<double> seg_uv(kPartCount * v * u, 0.0);
  for (std::size_t r = 0; r < v; ++r)
    for (std::size_t c = 0; c < u; ++c) {
      const auto [s, t] = texel_centre(r, c, v, u);
      seg_uv[static_cast<std::size_t>(cfg.body.part_at(s, t)) * v * u + r * u + c] = 1.0;
    }
  scene.part_seg_uv = Tensor({kPartCount, v, u}, std::move(seg_uv));

  Rng rng(seed + 2);
  for (std::size_t k = 0; k < cfg.views; ++k) {
    SceneView view;
    view.camera.yaw = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(cfg.views) + rng.uniform(-0.2, 0.2);
    view.camera.height = rng.uniform(-0.1, 0.1);
    view.camera.distance = cfg.distance;
    view.camera.focal = cfg.focal;
    view.camera.h = h;
    view.camera.w = w;

    std::vector<Vec2> pixel_uv;
    view.raster_op = rasterize(scene.mesh, view.camera, v, u, &pixel_uv);
    const std::vector<bool> covered = covered_rows(view.raster_op);
    view.render_seg = one_hot_seg(pixel_uv, covered, cfg.body, h, w);

    Camera seg_cam = view.camera;
    seg_cam.yaw += rng.uniform(-cfg.seg_jitter, cfg.seg_jitter);
    if (cfg.seg_jitter > 0.0) {
      std::vector<Vec2> seg_uv_px;
      const SparseMatrix seg_op = rasterize(scene.mesh, seg_cam, v, u, &seg_uv_px);
      view.part_seg = one_hot_seg(seg_uv_px, covered_rows(seg_op), cfg.body, h, w);
    } else {
      view.part_seg = view.render_seg;
    }

    std::vector<double> cov(h * w), vis(v * u, 0.0);
    for (std::size_t p = 0; p < h * w; ++p) cov[p] = covered[p] ? 1.0 : 0.0;
    for (std::size_t e = 0; e < view.raster_op.col_idx.size(); ++e)
      if (view.raster_op.values[e] > 0.0) vis[view.raster_op.col_idx[e]] = 1.0;
    view.coverage = Tensor({1, h, w}, std::move(cov));
    view.visibility = Tensor({v, u}, std::move(vis));
    scene.views.push_back(std::move(view));
  }
  for (SceneView& view : scene.views) view.image = render(scene.gt_texture, view);
  return scene;
}

SyntheticScene generate_scene(std::uint64_t seed, std::size_t v, std::size_t u, std::size_t h, std::size_t w,
                              std::size_t n_views) {
  SceneConfig cfg;
  cfg.uv_h = v;
  cfg.uv_w = u;
  cfg.img_h = h;
  cfg.img_w = w;
  cfg.views = n_views;
  return generate_scene(seed, cfg);
}

// ---- rendering ---------------------------------------------------------------

Tensor render(const Tensor& texture, const SceneView& view) {
  const SparseMatrix& r = view.raster_op;
  const std::size_t h = view.camera.h, w = view.camera.w;
  const bool batched = texture.rank() == 4;
  if ((texture.rank() != 3 && !batched) || texture.shape().back() != 3 ||
      texture.dim(batched ? 1 : 0) * texture.dim(batched ? 2 : 1) != r.cols) {
    throw TensorError("render: texture " + to_string(texture.shape()) + " does not match the raster operator with " +
                      std::to_string(r.cols) + " texels");
  }
  if (!batched) return reshape(transpose(spmm(r, reshape(texture, {r.cols, 3}))), {3, h, w});
  std::vector<Tensor> images;
  for (std::size_t b = 0; b < texture.dim(0); ++b) {
    const Tensor t = reshape(slice(texture, 0, b, 1), {r.cols, 3});
    images.push_back(reshape(transpose(spmm(r, t)), {1, 3, h, w}));
  }
  return concat(images, 0);
}

Tensor render_transpose(const Tensor& image, const SceneView& view) {
  const SparseMatrix& r = view.raster_op;
  if (image.shape() != Shape{3, view.camera.h, view.camera.w})
    throw TensorError("render_transpose: image " + to_string(image.shape()) + " does not match the view");
  const std::size_t n = r.rows;
  std::vector<double> out(r.cols * 3, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t e = r.row_ptr[p]; e < r.row_ptr[p + 1]; ++e)
      for (std::size_t k = 0; k < 3; ++k) out[r.col_idx[e] * 3 + k] += r.values[e] * image[k * n + p];
  const std::size_t v = view.visibility.dim(0), u = view.visibility.dim(1);
  return Tensor({v, u, 3}, std::move(out));
}

}  // namespace texlora
