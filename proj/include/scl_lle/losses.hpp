#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "scl_lle/enhancer.hpp"
#include "scl_lle/features.hpp"
#include "scl_lle/image.hpp"
#include "scl_lle/segmenter.hpp"

namespace scl_lle {

// Triplet margins: alpha for the Gram-feature hinge, beta for the mean
// brightness hinge.
struct Margins {
  double alpha = 0.3;
  double beta = 0.04;
};

struct LossWeights {
  double contrastive = 1.0;
  double semantic = 1.0;
  double feature_retention = 1.0;
  double color_constancy = 1.0;
};

struct LossReport {
  double l_c = 0.0;
  double l_sc = 0.0;
  double l_fr = 0.0;
  double l_cc = 0.0;
  double total = 0.0;
  LossWeights weights;
  Margins margins;
  double lambda = 200.0;
};

struct LossConfig {
  Margins margins{};
  double lambda = 200.0;  // illumination smoothness weight inside L_cc
  LossWeights weights{};
  std::vector<std::string> gram_layers;  // empty: every backend tap
  std::string retention_layer;           // empty: backend default
  bool use_negatives = true;
  BrightnessMode brightness = BrightnessMode::ChannelMean;
};

namespace detail {

inline double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

inline std::vector<std::string> resolve_gram_layers(const LossConfig& cfg,
                                                    const FeatureBackend& fb) {
  return cfg.gram_layers.empty() ? fb.layer_ids() : cfg.gram_layers;
}

inline std::string resolve_retention_layer(const LossConfig& cfg, const FeatureBackend& fb) {
  return cfg.retention_layer.empty() ? fb.default_retention_layer() : cfg.retention_layer;
}

// dB is H×W; spreads the brightness gradient onto the three channels.
inline void add_brightness_grad(Tensor& dih, const Tensor& db, BrightnessMode mode,
                                double scale) {
  const std::size_t n = db.size();
  double w[3];
  if (mode == BrightnessMode::ChannelMean) {
    w[0] = w[1] = w[2] = 1.0 / 3.0;
  } else {
    w[0] = 0.299;
    w[1] = 0.587;
    w[2] = 0.114;
  }
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) dih.v[c * n + i] += scale * w[c] * db.v[i];
}

}  // namespace detail

// Diagnostic view of the two hinge terms, mostly for tests.
struct ContrastiveParts {
  double gram_pos = 0.0, gram_neg = 0.0;
  double exp_h = 0.0, exp_p = 0.0, exp_n = 0.0;
  double gram_hinge_arg = 0.0, exp_hinge_arg = 0.0;
};

// L_c: hinge on Gram-set distances plus hinge on mean-intensity distances.
// Passing neg == nullptr drops the negative terms (the "no negatives"
// ablation: pure pull toward the positive).
inline double contrastive_loss(const FeatureBackend& fb, const ImageTensor& enhanced,
                               const ImageTensor& positive, const ImageTensor* negative,
                               const Margins& m, const std::vector<std::string>& layers,
                               double weight = 0.0, Tensor* d_enhanced = nullptr,
                               ContrastiveParts* parts = nullptr) {
  SeqTrace trace;
  FeatureMaps f_h = fb.extract(enhanced, layers, d_enhanced ? &trace : nullptr);
  GramSet g_h = gram_set(f_h);
  GramSet g_p = gram_set(fb.extract(positive, layers));
  double d_pos = gram_distance(g_h, g_p);
  double d_neg = 0.0;
  GramSet g_n;
  if (negative) {
    g_n = gram_set(fb.extract(*negative, layers));
    d_neg = gram_distance(g_h, g_n);
  }
  const double e_h = expectation(enhanced);
  const double e_p = expectation(positive);
  const double e_n = negative ? expectation(*negative) : 0.0;

  const double gram_arg = negative ? d_pos - d_neg + m.alpha : d_pos + m.alpha;
  const double exp_arg = negative ? std::abs(e_h - e_p) - std::abs(e_h - e_n) + m.beta
                                  : std::abs(e_h - e_p) + m.beta;
  const double value = std::max(gram_arg, 0.0) + std::max(exp_arg, 0.0);

  if (parts) {
    *parts = {d_pos, d_neg, e_h, e_p, e_n, gram_arg, exp_arg};
  }

  if (d_enhanced) {
    if (gram_arg > 0.0) {
      auto dtaps = gram_distance_backward(g_h, g_p, weight);
      if (negative) {
        auto dneg = gram_distance_backward(g_h, g_n, -weight);
        for (auto& [name, t] : dtaps) axpy(1.0, dneg.at(name), t);
      }
      std::map<std::string, Tensor> dfeats;
      for (std::size_t l = 0; l < f_h.layers.size(); ++l) {
        const auto& [name, f] = f_h.layers[l];
        dfeats[name] = gram_backward(f, dtaps.at(name));
      }
      axpy(1.0, fb.input_gradient(trace, dfeats), *d_enhanced);
    }
    if (exp_arg > 0.0) {
      double s = detail::sgn(e_h - e_p) - (negative ? detail::sgn(e_h - e_n) : 0.0);
      const double per_elem = weight * s / double(enhanced.size());
      for (double& g : d_enhanced->v) g += per_elem;
    }
  }
  return value;
}

inline double contrastive_loss(const ImageTensor& enhanced, const ImageTensor& positive,
                               const ImageTensor& negative, const FeatureBackend& fb,
                               const Margins& m) {
  return contrastive_loss(fb, enhanced, positive, &negative, m, fb.layer_ids());
}

// Mean brightness over the pixels of one semantic category.
inline double category_brightness_mean(const ImageTensor& enhanced, const LabelMap& labels,
                                       int category,
                                       BrightnessMode mode = BrightnessMode::ChannelMean) {
  if (labels.height != enhanced.height || labels.width != enhanced.width)
    throw ShapeError("category_brightness_mean: label/image size mismatch");
  Tensor b = brightness_map(enhanced, mode);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    if (labels.labels[i] == category) {
      sum += b.v[i];
      ++n;
    }
  }
  if (n == 0)
    throw std::invalid_argument("category_brightness_mean: category " +
                                std::to_string(category) + " not present");
  return sum / double(n);
}

// L_sc: per-category brightness variance (summed over pixels) plus the
// per-pixel-averaged cross entropy of the prediction against the ground
// truth. Ignore pixels are excluded from both terms.
inline double semantic_consistency_loss(const ImageTensor& enhanced, const LabelMap& labels,
                                        const ProbMap& probs,
                                        BrightnessMode mode = BrightnessMode::ChannelMean) {
  if (labels.height != enhanced.height || labels.width != enhanced.width ||
      probs.height != enhanced.height || probs.width != enhanced.width)
    throw ShapeError("semantic_consistency_loss: shape mismatch");
  Tensor b = brightness_map(enhanced, mode);

  std::map<int, std::pair<double, std::size_t>> cats;  // label -> (sum, n)
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    int l = labels.labels[i];
    if (l == kIgnoreIndex) continue;
    if (l >= probs.classes)
      throw FormatError("semantic_consistency_loss: label " + std::to_string(l) +
                        " >= class count " + std::to_string(probs.classes));
    auto& [sum, n] = cats[l];
    sum += b.v[i];
    ++n;
  }
  double variance = 0.0;
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    int l = labels.labels[i];
    if (l == kIgnoreIndex) continue;
    const auto& [sum, n] = cats[l];
    double d = b.v[i] - sum / double(n);
    variance += d * d;
  }

  double ce = 0.0;
  std::size_t n_valid = 0;
  const std::size_t hw = std::size_t(labels.height) * labels.width;
  for (std::size_t i = 0; i < hw; ++i) {
    int l = labels.labels[i];
    if (l == kIgnoreIndex) continue;
    double q = probs.probs.v[std::size_t(l) * hw + i];
    ce += -std::log(std::max(q, 1e-12));
    ++n_valid;
  }
  if (n_valid > 0) ce /= double(n_valid);
  return variance + ce;
}

// Gradient-bearing variant: runs the segmentation backend itself so the CE
// term can propagate into the image when the backend is differentiable.
inline double semantic_consistency_loss_grad(const SegBackend& seg, const ImageTensor& enhanced,
                                             const LabelMap& labels, BrightnessMode mode,
                                             double weight, Tensor* d_enhanced,
                                             ProbMap* probs_out = nullptr) {
  SeqTrace trace;
  ProbMap probs = seg.segment(enhanced, &labels, d_enhanced ? &trace : nullptr);
  double value = semantic_consistency_loss(enhanced, labels, probs, mode);

  if (d_enhanced) {
    const std::size_t hw = std::size_t(labels.height) * labels.width;
    // brightness variance: d/dB_i of sum (B_i - mean_s)^2 is 2(B_i - mean_s)
    Tensor b = brightness_map(enhanced, mode);
    std::map<int, std::pair<double, std::size_t>> cats;
    for (std::size_t i = 0; i < hw; ++i) {
      int l = labels.labels[i];
      if (l == kIgnoreIndex) continue;
      auto& [sum, n] = cats[l];
      sum += b.v[i];
      ++n;
    }
    Tensor db({std::size_t(labels.height), std::size_t(labels.width)});
    for (std::size_t i = 0; i < hw; ++i) {
      int l = labels.labels[i];
      if (l == kIgnoreIndex) continue;
      const auto& [sum, n] = cats[l];
      db.v[i] = 2.0 * (b.v[i] - sum / double(n));
    }
    detail::add_brightness_grad(*d_enhanced, db, mode, weight);

    if (seg.differentiable()) {
      std::size_t n_valid = 0;
      for (std::size_t i = 0; i < hw; ++i)
        if (labels.labels[i] != kIgnoreIndex) ++n_valid;
      if (n_valid > 0) {
        Tensor dprobs(probs.probs.shape);
        for (std::size_t i = 0; i < hw; ++i) {
          int l = labels.labels[i];
          if (l == kIgnoreIndex) continue;
          double q = probs.probs.v[std::size_t(l) * hw + i];
          dprobs.v[std::size_t(l) * hw + i] = weight * (-1.0 / std::max(q, 1e-12)) / double(n_valid);
        }
        axpy(1.0, seg.input_gradient(trace, dprobs), *d_enhanced);
      }
    }
  }
  if (probs_out) *probs_out = std::move(probs);
  return value;
}

// L_fr: mean squared feature difference at one frozen-extractor layer.
inline double feature_retention_loss(const FeatureBackend& fb, const ImageTensor& input,
                                     const ImageTensor& enhanced, const std::string& layer,
                                     double weight = 0.0, Tensor* d_enhanced = nullptr) {
  if (input.height != enhanced.height || input.width != enhanced.width)
    throw ShapeError("feature_retention_loss: images must share spatial size");
  SeqTrace trace;
  const std::vector<std::string> want{layer};
  FeatureMaps f_h = fb.extract(enhanced, want, d_enhanced ? &trace : nullptr);
  FeatureMaps f_l = fb.extract(input, want);
  const Tensor& fh = f_h.layers[0].second;
  const Tensor& fl = f_l.layers[0].second;
  const double norm = 1.0 / double(fh.size());
  double value = 0.0;
  for (std::size_t i = 0; i < fh.size(); ++i) {
    double d = fh.v[i] - fl.v[i];
    value += d * d;
  }
  value *= norm;

  if (d_enhanced) {
    Tensor df(fh.shape);
    for (std::size_t i = 0; i < fh.size(); ++i)
      df.v[i] = weight * 2.0 * norm * (fh.v[i] - fl.v[i]);
    std::map<std::string, Tensor> dfeats;
    dfeats.emplace(layer, std::move(df));
    axpy(1.0, fb.input_gradient(trace, dfeats), *d_enhanced);
  }
  return value;
}

// L_cc: gray-world channel-mean agreement plus total-variation smoothness of
// the curve parameter maps (forward differences, zero-padded far edge,
// averaged per map and over iterations, weighted by lambda).
inline double color_constancy_loss(const ImageTensor& enhanced, const CurveStack& curves,
                                   double lambda, double weight = 0.0,
                                   Tensor* d_enhanced = nullptr, Tensor* d_curves = nullptr) {
  if (curves.height != enhanced.height || curves.width != enhanced.width)
    throw ShapeError("color_constancy_loss: curve/image size mismatch");
  const std::size_t n = enhanced.pixels();
  double j[3] = {0.0, 0.0, 0.0};
  for (int c = 0; c < 3; ++c) {
    const double* p = enhanced.data.data() + std::size_t(c) * n;
    for (std::size_t i = 0; i < n; ++i) j[c] += p[i];
    j[c] /= double(n);
  }
  const double gray_world = (j[0] - j[1]) * (j[0] - j[1]) + (j[0] - j[2]) * (j[0] - j[2]) +
                            (j[1] - j[2]) * (j[1] - j[2]);

  const int h = enhanced.height, w = enhanced.width;
  const int m_count = curves.iterations;
  double tv = 0.0;
  for (int m = 0; m < m_count; ++m) {
    for (int c = 0; c < 3; ++c) {
      const double* a = curves.maps.data() + (std::size_t(m) * 3 + c) * n;
      double s = 0.0;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if (x + 1 < w) s += std::abs(a[y * w + x + 1] - a[y * w + x]);
          if (y + 1 < h) s += std::abs(a[(y + 1) * w + x] - a[y * w + x]);
        }
      }
      tv += s / double(n);
    }
  }
  tv /= double(m_count);
  const double value = gray_world + lambda * tv;

  if (d_enhanced) {
    const double dj[3] = {2.0 * (j[0] - j[1]) + 2.0 * (j[0] - j[2]),
                          -2.0 * (j[0] - j[1]) + 2.0 * (j[1] - j[2]),
                          -2.0 * (j[0] - j[2]) - 2.0 * (j[1] - j[2])};
    for (int c = 0; c < 3; ++c) {
      const double per_elem = weight * dj[c] / double(n);
      double* g = d_enhanced->data() + std::size_t(c) * n;
      for (std::size_t i = 0; i < n; ++i) g[i] += per_elem;
    }
  }
  if (d_curves) {
    if (d_curves->shape != curves.maps.shape) *d_curves = Tensor(curves.maps.shape);
    const double scale = weight * lambda / double(m_count) / double(n);
    for (int m = 0; m < m_count; ++m) {
      for (int c = 0; c < 3; ++c) {
        const double* a = curves.maps.data() + (std::size_t(m) * 3 + c) * n;
        double* da = d_curves->data() + (std::size_t(m) * 3 + c) * n;
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            if (x + 1 < w) {
              double s = detail::sgn(a[y * w + x + 1] - a[y * w + x]);
              da[y * w + x + 1] += scale * s;
              da[y * w + x] -= scale * s;
            }
            if (y + 1 < h) {
              double s = detail::sgn(a[(y + 1) * w + x] - a[y * w + x]);
              da[(y + 1) * w + x] += scale * s;
              da[y * w + x] -= scale * s;
            }
          }
        }
      }
    }
  }
  return value;
}

// Weighted combination. Every term is evaluated (so ablations still report
// the dropped term) but only weighted terms contribute to the total.
inline LossReport total_loss(const LossConfig& cfg, const FeatureBackend& fb,
                             const ImageTensor& input, const ImageTensor& enhanced,
                             const ImageTensor& positive, const ImageTensor* negative,
                             const LabelMap& labels, const ProbMap& probs,
                             const CurveStack& curves) {
  LossReport r;
  r.weights = cfg.weights;
  r.margins = cfg.margins;
  r.lambda = cfg.lambda;
  auto layers = detail::resolve_gram_layers(cfg, fb);
  r.l_c = contrastive_loss(fb, enhanced, positive, cfg.use_negatives ? negative : nullptr,
                           cfg.margins, layers);
  r.l_sc = semantic_consistency_loss(enhanced, labels, probs, cfg.brightness);
  r.l_fr = feature_retention_loss(fb, input, enhanced, detail::resolve_retention_layer(cfg, fb));
  r.l_cc = color_constancy_loss(enhanced, curves, cfg.lambda);
  r.total = r.weights.contrastive * r.l_c + r.weights.semantic * r.l_sc +
            r.weights.feature_retention * r.l_fr + r.weights.color_constancy * r.l_cc;
  return r;
}

// Weighted combination with gradients w.r.t. the enhanced image and the
// curve maps. d_enhanced is 3×H×W, d_curves matches curves.maps; both are
// accumulated into.
inline LossReport total_loss_grad(const LossConfig& cfg, const FeatureBackend& fb,
                                  const SegBackend& seg, const ImageTensor& input,
                                  const ImageTensor& enhanced, const ImageTensor& positive,
                                  const ImageTensor* negative, const LabelMap& labels,
                                  const CurveStack& curves, Tensor* d_enhanced,
                                  Tensor* d_curves, ProbMap* probs_out = nullptr) {
  LossReport r;
  r.weights = cfg.weights;
  r.margins = cfg.margins;
  r.lambda = cfg.lambda;
  auto layers = detail::resolve_gram_layers(cfg, fb);
  r.l_c = contrastive_loss(fb, enhanced, positive, cfg.use_negatives ? negative : nullptr,
                           cfg.margins, layers, cfg.weights.contrastive, d_enhanced);
  r.l_sc = semantic_consistency_loss_grad(seg, enhanced, labels, cfg.brightness,
                                          cfg.weights.semantic, d_enhanced, probs_out);
  r.l_fr = feature_retention_loss(fb, input, enhanced, detail::resolve_retention_layer(cfg, fb),
                                  cfg.weights.feature_retention, d_enhanced);
  r.l_cc = color_constancy_loss(enhanced, curves, cfg.lambda, cfg.weights.color_constancy,
                                d_enhanced, d_curves);
  r.total = r.weights.contrastive * r.l_c + r.weights.semantic * r.l_sc +
            r.weights.feature_retention * r.l_fr + r.weights.color_constancy * r.l_cc;
  return r;
}

}  // namespace scl_lle
