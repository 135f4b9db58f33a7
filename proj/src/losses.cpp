#include "texlora/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace texlora {

namespace {

Tensor batch_item(const Tensor& x, std::size_t b) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  return reshape(x.dim(0) == 1 ? x : slice(x, 0, b, 1), std::move(s));
}

Tensor flatten_batch(const Tensor& x) { return reshape(x, {x.dim(0), x.numel() / x.dim(0)}); }

Tensor pool_to(const Tensor& masks, std::size_t h, std::size_t w) {
  Tensor m = masks;
  while (m.dim(2) > h && m.dim(2) % 2 == 0 && m.dim(3) % 2 == 0) m = avg_pool2x2(m);
  if (m.dim(2) != h || m.dim(3) != w) {
    throw TensorError("part masks " + to_string(masks.shape()) + " cannot be pooled to " + std::to_string(h) + "x" +
                      std::to_string(w));
  }
  return m;
}

}  // namespace

// ---- feature extractor -----------------------------------------------------

FeatureExtractor::FeatureExtractor() : FeatureExtractor(Config{}) {}

FeatureExtractor::FeatureExtractor(Config cfg) : cfg_(std::move(cfg)) {
  const std::size_t n = cfg_.widths.size();
  if (n == 0 || cfg_.strides.size() != n) throw std::invalid_argument("feature extractor needs one stride per stage");
  for (std::size_t s : cfg_.strides)
    if (s != 1 && s != 2) throw std::invalid_argument("feature extractor strides must be 1 or 2");
  for (std::size_t t : cfg_.reid_taps)
    if (t >= n) throw std::invalid_argument("feature extractor tap out of range");

  Rng rng(cfg_.seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t in = i == 0 ? 3 : cfg_.widths[i - 1];
    weights_.push_back(fan_in_uniform({cfg_.widths[i], in, 3, 3}, in * 9, rng));
    gamma_.push_back(Tensor::ones({cfg_.widths[i]}));
    beta_.push_back(Tensor::zeros({cfg_.widths[i]}));
  }

  // Per-channel second moment of each conv output on random images.
  Rng calib(cfg_.seed + 1);
  Tensor x = calib.uniform_tensor({2, 3, 32, 32}, 0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (cfg_.strides[i] == 2) x = avg_pool2x2(x);
    const Tensor y = conv2d(x, weights_[i], 1, 1);
    const std::size_t ch = y.dim(1), plane = y.dim(2) * y.dim(3);
    RunningStats st{std::vector<double>(ch, 0.0), std::vector<double>(ch, 0.0)};
    for (std::size_t b = 0; b < y.dim(0); ++b)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
          const double v = y[(b * ch + c) * plane + p];
          st.var[c] += v * v;
        }
    for (double& v : st.var) v /= static_cast<double>(y.dim(0) * plane);
    stats_.push_back(std::move(st));
    x = stage(i, x, true);
  }
}

FeatureExtractor FeatureExtractor::identity() {
  FeatureExtractor fx;
  fx.identity_ = true;
  fx.cfg_.reid_taps = {0};
  return fx;
}

std::size_t FeatureExtractor::stage_stride(std::size_t s) const {
  if (identity_) return 1;
  std::size_t total = 1;
  for (std::size_t i = 0; i <= s && i < cfg_.strides.size(); ++i) total *= cfg_.strides[i];
  return total;
}

Tensor FeatureExtractor::stage(std::size_t i, const Tensor& x, bool pooled) const {
  const Tensor in = !pooled && cfg_.strides[i] == 2 ? avg_pool2x2(x) : x;
  BatchNormOptions bn;
  bn.mode = NormMode::eval;
  bn.stats = &stats_[i];
  return relu(batchnorm2d(conv2d(in, weights_[i], 1, 1), gamma_[i], beta_[i], bn));
}

std::vector<Tensor> FeatureExtractor::stages(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw TensorError("feature extractor expects [B,3,H,W], got " + to_string(images.shape()));
  if (identity_) return {images};
  const std::size_t total = stage_stride(cfg_.widths.size() - 1);
  if (images.dim(2) % total != 0 || images.dim(3) % total != 0) {
    throw TensorError("feature extractor input " + to_string(images.shape()) + " is not divisible by " +
                      std::to_string(total));
  }
  std::vector<Tensor> out;
  Tensor x = images;
  for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
    x = stage(i, x, false);
    out.push_back(x);
  }
  return out;
}

FeatureExtractor FeatureExtractor::with_final_scale(double s) const {
  FeatureExtractor fx = *this;
  if (!fx.identity_) fx.weights_.back() = scale(fx.weights_.back(), s);
  return fx;
}

// ---- loss configuration ----------------------------------------------------

void LossWeights::validate() const {
  if (w1 < 0.0 || w2 < 0.0 || w3 < 0.0) throw std::invalid_argument("loss weights must be nonnegative");
}

void SyntheticTextureSet::validate() const {
  if (textures.empty()) throw std::invalid_argument("synthetic texture set is empty");
  if (face_mask.rank() != 2) throw std::invalid_argument("face mask must be [v,u]");
  for (const Tensor& t : textures)
    if (t.shape() != Shape{face_mask.dim(0), face_mask.dim(1), 3})
      throw std::invalid_argument("synthetic texture " + to_string(t.shape()) + " does not match the face mask");
  for (double m : face_mask.data())
    if (m != 0.0 && m != 1.0) throw std::invalid_argument("face mask must be binary");
}

// ---- losses ----------------------------------------------------------------

Tensor reid_loss(const std::vector<Tensor>& rendered_stages, const std::vector<Tensor>& target_stages,
                 const FeatureExtractor& fx) {
  if (rendered_stages.size() != target_stages.size()) throw TensorError("reid_loss: stage count mismatch");
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t tap : fx.reid_taps()) {
    const Tensor& r = rendered_stages.at(tap);
    const Tensor& t = target_stages.at(tap);
    if (r.shape() != t.shape())
      throw TensorError("reid_loss: features " + to_string(r.shape()) + " and " + to_string(t.shape()) + " differ");
    const Tensor diff = sub(l2_normalize(flatten_batch(r), 1), l2_normalize(flatten_batch(t), 1));
    total = add(total, scale(sum(square(diff)), 1.0 / static_cast<double>(r.dim(0))));
  }
  return total;
}

Tensor reid_loss(const Tensor& rendered, const Tensor& target, const FeatureExtractor& fx) {
  if (rendered.shape() != target.shape())
    throw TensorError("reid_loss: images " + to_string(rendered.shape()) + " and " + to_string(target.shape()) +
                      " differ");
  return reid_loss(fx.stages(rendered), fx.stages(target), fx);
}

Tensor gram(const Tensor& features, const Tensor& mask) {
  if (features.rank() != 3) throw TensorError("gram: features must be [C,H,W], got " + to_string(features.shape()));
  const std::size_t c = features.dim(0), h = features.dim(1), w = features.dim(2);
  if (mask.numel() != h * w)
    throw TensorError("gram: mask " + to_string(mask.shape()) + " does not cover " + to_string(features.shape()));
  double area = 0.0;
  for (double m : mask.data()) area += m;
  if (area == 0.0) return Tensor::zeros({c, c});
  const Tensor masked = mul(features, broadcast_to(reshape(mask, {1, h, w}), features.shape()));
  const Tensor x = reshape(masked, {c, h * w});
  return div(matmul(x, transpose(x)), broadcast_to(reshape(sum(mask), {1, 1}), {c, c}));
}

Tensor part_style_loss(const Tensor& rendered_phi1, const Tensor& target_phi1, const Tensor& rendered_parts,
                       const Tensor& target_parts) {
  if (rendered_phi1.rank() != 4 || rendered_phi1.shape() != target_phi1.shape())
    throw TensorError("part_style_loss: features " + to_string(rendered_phi1.shape()) + " and " +
                      to_string(target_phi1.shape()) + " differ");
  if (rendered_parts.rank() != 4 || target_parts.rank() != 4 || rendered_parts.dim(1) != target_parts.dim(1))
    throw TensorError("part_style_loss: part masks " + to_string(rendered_parts.shape()) + " and " +
                      to_string(target_parts.shape()) + " have different part counts");
  const std::size_t batch = rendered_phi1.dim(0), h = rendered_phi1.dim(2), w = rendered_phi1.dim(3);
  const Tensor mr = pool_to(rendered_parts, h, w), mt = pool_to(target_parts, h, w);
  const std::size_t parts = mr.dim(1);
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const Tensor fr = batch_item(rendered_phi1, b), ft = batch_item(target_phi1, b);
    const Tensor pr = batch_item(mr, b), pt = batch_item(mt, b);
    for (std::size_t p = 0; p < parts; ++p) {
      const Tensor gr = gram(fr, batch_item(pr, p)), gt = gram(ft, batch_item(pt, p));
      total = add(total, sum(square(sub(gr, gt))));
    }
  }
  return scale(total, 1.0 / static_cast<double>(batch));
}

Tensor part_style_loss(const Tensor& rendered, const Tensor& target, const Tensor& rendered_parts,
                       const Tensor& target_parts, const FeatureExtractor& fx) {
  return part_style_loss(fx.stages(rendered).front(), fx.stages(target).front(), rendered_parts, target_parts);
}

Tensor ssim_structure(const Tensor& x, const Tensor& y, const Tensor& mask, double c) {
  if (x.shape() != y.shape())
    throw TensorError("ssim_structure: " + to_string(x.shape()) + " and " + to_string(y.shape()) + " differ");
  if (mask.numel() == 0 || x.numel() % mask.numel() != 0)
    throw TensorError("ssim_structure: mask " + to_string(mask.shape()) + " does not tile " + to_string(x.shape()));
  const std::size_t group = x.numel() / mask.numel();
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < x.numel(); ++k)
    if (mask[k / group] > 0.5) idx.push_back(k);
  if (idx.size() < 2) throw TensorError("ssim_structure: region has fewer than two elements");

  const Shape n{idx.size()};
  const Tensor xs = gather(x, idx), ys = gather(y, idx);
  const Tensor dx = sub(xs, broadcast_to(reshape(mean(xs), {1}), n));
  const Tensor dy = sub(ys, broadcast_to(reshape(mean(ys), {1}), n));
  const Tensor vx = mean(square(dx)), vy = mean(square(dy));
  const Tensor cov = mean(mul(dx, dy));
  return div(add(cov, c), add(sqrt(mul(vx, vy)), c));
}

Tensor ssim_structure(const Tensor& x, const Tensor& y, double c) {
  return ssim_structure(x, y, Tensor::ones({x.numel()}), c);
}

Tensor face_structure_loss(const Tensor& texture, const SyntheticTextureSet& set) {
  set.validate();
  const Tensor t = texture.rank() == 3 ? reshape(texture, {1, texture.dim(0), texture.dim(1), texture.dim(2)})
                                       : texture;
  const Shape item{set.face_mask.dim(0), set.face_mask.dim(1), 3};
  if (t.rank() != 4 || Shape(t.shape().begin() + 1, t.shape().end()) != item)
    throw TensorError("face_structure_loss: texture " + to_string(texture.shape()) + " is not " + to_string(item));
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t b = 0; b < t.dim(0); ++b) {
    const Tensor tb = batch_item(t, b);
    for (const Tensor& syn : set.textures) total = add(total, ssim_structure(tb, syn, set.face_mask));
  }
  return scale(total, -1.0 / static_cast<double>(t.dim(0) * set.textures.size()));
}

Tensor total_loss(const Tensor& reid, const Tensor& style, const Tensor& face, const LossWeights& w) {
  w.validate();
  return add(add(scale(reid, w.w1), scale(style, w.w2)), scale(face, w.w3));
}

LossTerms combine_losses(Tensor reid, Tensor style, Tensor face, const LossWeights& w) {
  Tensor total = total_loss(reid, style, face, w);
  return LossTerms{std::move(reid), std::move(style), std::move(face), std::move(total)};
}

// ---- metrics ---------------------------------------------------------------

double ssim_metric(const Tensor& x, const Tensor& y, const Tensor& mask) {
  if (x.shape() != y.shape())
    throw TensorError("ssim_metric: " + to_string(x.shape()) + " and " + to_string(y.shape()) + " differ");
  if (x.rank() != 3 && x.rank() != 4) throw TensorError("ssim_metric: expects [C,H,W] or [B,C,H,W]");
  const std::size_t batch = x.rank() == 4 ? x.dim(0) : 1;
  const std::size_t ch = x.dim(x.rank() - 3), h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t plane = h * w;
  if (mask.numel() != plane && mask.numel() != batch * plane)
    throw TensorError("ssim_metric: mask " + to_string(mask.shape()) + " does not match " + to_string(x.shape()));
  const bool shared = mask.numel() == plane;

  constexpr int radius = 5;
  constexpr double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double g[2 * radius + 1];
  for (int i = -radius; i <= radius; ++i) g[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));

  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* mb = mask.raw() + (shared ? 0 : b * plane);
    for (std::size_t c = 0; c < ch; ++c) {
      const double* xp = x.raw() + (b * ch + c) * plane;
      const double* yp = y.raw() + (b * ch + c) * plane;
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t q = 0; q < w; ++q) {
          if (!(mb[r * w + q] > 0.5)) continue;
          double sw = 0, mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
          for (int dr = -radius; dr <= radius; ++dr) {
            const long rr = static_cast<long>(r) + dr;
            if (rr < 0 || rr >= static_cast<long>(h)) continue;
            for (int dq = -radius; dq <= radius; ++dq) {
              const long qq = static_cast<long>(q) + dq;
              if (qq < 0 || qq >= static_cast<long>(w)) continue;
              const double wt = g[dr + radius] * g[dq + radius];
              const double a = xp[rr * static_cast<long>(w) + qq], bv = yp[rr * static_cast<long>(w) + qq];
              sw += wt;
              mx += wt * a;
              my += wt * bv;
              sxx += wt * a * a;
              syy += wt * bv * bv;
              sxy += wt * a * bv;
            }
          }
          mx /= sw;
          my /= sw;
          const double vx = sxx / sw - mx * mx, vy = syy / sw - my * my, cxy = sxy / sw - mx * my;
          acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
    }
  }
  if (count == 0) throw TensorError("ssim_metric: mask selects no pixels");
  return acc / static_cast<double>(count);
}

double feature_cos_sim(const Tensor& x, const Tensor& y, const FeatureExtractor& fx) {
  if (x.shape() != y.shape())
    throw TensorError("feature_cos_sim: " + to_string(x.shape()) + " and " + to_string(y.shape()) + " differ");
  const Tensor a = fx.stages(x).back(), b = fx.stages(y).back();
  const std::size_t batch = a.dim(0), n = a.numel() / batch;
  double acc = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t k = i * n; k < (i + 1) * n; ++k) {
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    acc += na > 0 && nb > 0 ? dot / std::sqrt(na * nb) : 0.0;
  }
  return acc / static_cast<double>(batch);
}

}  // namespace texlora
