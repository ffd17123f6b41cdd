#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "scl_lle/checkpoint.hpp"
#include "scl_lle/common.hpp"
#include "scl_lle/image.hpp"
#include "scl_lle/segmenter.hpp"

namespace scl_lle {

// ---------------------------------------------------------------------------
// Full-reference metrics
// ---------------------------------------------------------------------------

// Peak 1.0; identical inputs give +inf (serialized as "inf" in reports).
inline double psnr(const ImageTensor& a, const ImageTensor& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("psnr: shape mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= double(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(std::size_t(size) * size);
  const double c = (size - 1) / 2.0;
  double sum = 0.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double v = std::exp(-((y - c) * (y - c) + (x - c) * (x - c)) / (2.0 * sigma * sigma));
      w[std::size_t(y) * size + x] = v;
      sum += v;
    }
  for (double& v : w) v /= sum;
  return w;
}

}  // namespace detail

// Single-scale SSIM on the brightness channel: 11×11 Gaussian window
// (sigma 1.5), K1=0.01, K2=0.03, peak 1, mean over valid window positions.
inline double ssim(const ImageTensor& a, const ImageTensor& b,
                   BrightnessMode mode = BrightnessMode::ChannelMean) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("ssim: shape mismatch");
  constexpr int kWin = 11;
  if (a.height < kWin || a.width < kWin)
    throw ShapeError("ssim: image smaller than the 11x11 window");
  static const std::vector<double> w = detail::gaussian_window(kWin, 1.5);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Tensor xa = brightness_map(a, mode);
  Tensor xb = brightness_map(b, mode);
  const int hw_w = a.width;
  double acc = 0.0;
  std::size_t count = 0;
  for (int y0 = 0; y0 + kWin <= a.height; ++y0) {
    for (int x0 = 0; x0 + kWin <= a.width; ++x0) {
      double mx = 0, my = 0;
      for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
          double wv = w[std::size_t(i) * kWin + j];
          mx += wv * xa.v[std::size_t(y0 + i) * hw_w + (x0 + j)];
          my += wv * xb.v[std::size_t(y0 + i) * hw_w + (x0 + j)];
        }
      double vx = 0, vy = 0, vxy = 0;
      for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
          double wv = w[std::size_t(i) * kWin + j];
          double dx = xa.v[std::size_t(y0 + i) * hw_w + (x0 + j)] - mx;
          double dy = xb.v[std::size_t(y0 + i) * hw_w + (x0 + j)] - my;
          vx += wv * dx * dx;
          vy += wv * dy * dy;
          vxy += wv * dx * dy;
        }
      acc += ((2 * mx * my + c1) * (2 * vxy + c2)) /
             ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return acc / double(count);
}

// ---------------------------------------------------------------------------
// Segmentation metric
// ---------------------------------------------------------------------------

struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::uint64_t> counts;  // gt * S + pred

  explicit ConfusionMatrix(int s) : classes(s), counts(std::size_t(s) * s, 0) {}

  void add(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
      throw ShapeError("confusion: prediction/ground-truth size mismatch");
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      int g = gt.labels[i];
      if (g == kIgnoreIndex) continue;
      int p = pred.labels[i];
      if (g >= classes || p >= classes)
        throw FormatError("confusion: label out of range (gt=" + std::to_string(g) +
                          ", pred=" + std::to_string(p) + ", classes=" + std::to_string(classes) + ")");
      counts[std::size_t(g) * classes + p]++;
    }
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
};

struct MiouResult {
  std::vector<double> per_class;  // NaN for classes absent from both sides
  double mean = 0.0;
};

inline MiouResult miou_from_confusion(const ConfusionMatrix& cm) {
  MiouResult r;
  const int s_n = cm.classes;
  r.per_class.assign(s_n, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int n = 0;
  for (int s = 0; s < s_n; ++s) {
    std::uint64_t tp = cm.counts[std::size_t(s) * s_n + s];
    std::uint64_t fp = 0, fn = 0;
    for (int o = 0; o < s_n; ++o) {
      if (o == s) continue;
      fp += cm.counts[std::size_t(o) * s_n + s];
      fn += cm.counts[std::size_t(s) * s_n + o];
    }
    if (tp + fp + fn == 0) continue;  // absent from both prediction and truth
    double iou = double(tp) / double(tp + fp + fn);
    r.per_class[s] = iou;
    sum += iou;
    ++n;
  }
  r.mean = n > 0 ? sum / n : 0.0;
  return r;
}

inline MiouResult miou(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                       int s_count) {
  if (preds.size() != gts.size()) throw ShapeError("miou: list length mismatch");
  ConfusionMatrix cm(s_count);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], gts[i]);
  return miou_from_confusion(cm);
}

// ---------------------------------------------------------------------------
// NIQE: distance of MSCN-derived patch statistics from a pristine model.
// The model is supplied from a file or fitted from a user corpus; both paths
// use the same feature machinery, so synthetic desk-scale corpora work.
// ---------------------------------------------------------------------------

struct NiqeModel {
  Tensor mean;                       // D
  Tensor cov;                        // D×D
  int patch_size = 96;
  double sharpness_fraction = 0.75;  // model-fitting patch selection
};

namespace niqe_detail {

inline constexpr int kFeatureDim = 36;  // 18 per scale, 2 scales

// replicate-border Gaussian filtering on a H×W field
inline Tensor filter_gauss(const Tensor& in, const std::vector<double>& win, int k) {
  const int h = int(in.shape[0]), w = int(in.shape[1]);
  const int r = k / 2;
  Tensor out(in.shape);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) {
        int yy = std::clamp(y + i - r, 0, h - 1);
        for (int j = 0; j < k; ++j) {
          int xx = std::clamp(x + j - r, 0, w - 1);
          s += win[std::size_t(i) * k + j] * in.v[std::size_t(yy) * w + xx];
        }
      }
      out.v[std::size_t(y) * w + x] = s;
    }
  }
  return out;
}

struct MscnField {
  Tensor mscn;   // H×W
  Tensor sigma;  // H×W local deviation field (sharpness source)
};

inline MscnField mscn_field(const Tensor& gray255) {
  static const std::vector<double> win = detail::gaussian_window(7, 7.0 / 6.0);
  Tensor mu = filter_gauss(gray255, win, 7);
  Tensor sq(gray255.shape);
  for (std::size_t i = 0; i < sq.size(); ++i) sq.v[i] = gray255.v[i] * gray255.v[i];
  Tensor musq = filter_gauss(sq, win, 7);
  MscnField f;
  f.sigma = Tensor(gray255.shape);
  f.mscn = Tensor(gray255.shape);
  for (std::size_t i = 0; i < gray255.size(); ++i) {
    double var = std::max(musq.v[i] - mu.v[i] * mu.v[i], 0.0);
    double sd = std::sqrt(var);
    f.sigma.v[i] = sd;
    f.mscn.v[i] = (gray255.v[i] - mu.v[i]) / (sd + 1.0);
  }
  return f;
}

// gamma-ratio lookup shared by the GGD/AGGD moment-matching fits
inline const std::vector<std::pair<double, double>>& ggd_lookup() {
  static const std::vector<std::pair<double, double>> table = [] {
    std::vector<std::pair<double, double>> t;
    for (double g = 0.2; g <= 10.0 + 1e-9; g += 0.001) {
      double r = std::tgamma(2.0 / g) * std::tgamma(2.0 / g) /
                 (std::tgamma(1.0 / g) * std::tgamma(3.0 / g));
      t.emplace_back(g, r);
    }
    return t;
  }();
  return table;
}

inline double fit_ggd_alpha(double rhat) {
  const auto& tab = ggd_lookup();
  double best_g = tab.front().first, best_d = 1e300;
  for (const auto& [g, r] : tab) {
    double d = (r - rhat) * (r - rhat);
    if (d < best_d) {
      best_d = d;
      best_g = g;
    }
  }
  return best_g;
}

// (alpha, sigma^2) of a generalized Gaussian fit
inline void fit_ggd(const std::vector<double>& v, double* alpha, double* sigma_sq) {
  double m2 = 0.0, mabs = 0.0;
  for (double x : v) {
    m2 += x * x;
    mabs += std::abs(x);
  }
  m2 /= double(v.size());
  mabs /= double(v.size());
  if (mabs < 1e-12) {
    *alpha = 10.0;  // degenerate: flat distribution at zero
    *sigma_sq = 0.0;
    return;
  }
  *alpha = fit_ggd_alpha(mabs * mabs / m2);
  *sigma_sq = m2;
}

// (alpha, eta, sigma_l^2, sigma_r^2) of an asymmetric generalized Gaussian
inline void fit_aggd(const std::vector<double>& v, double out[4]) {
  double sum_l = 0.0, sum_r = 0.0, mabs = 0.0, m2 = 0.0;
  std::size_t n_l = 0, n_r = 0;
  for (double x : v) {
    if (x < 0) {
      sum_l += x * x;
      ++n_l;
    } else if (x > 0) {
      sum_r += x * x;
      ++n_r;
    }
    mabs += std::abs(x);
    m2 += x * x;
  }
  mabs /= double(v.size());
  m2 /= double(v.size());
  double std_l = n_l ? std::sqrt(sum_l / double(n_l)) : 0.0;
  double std_r = n_r ? std::sqrt(sum_r / double(n_r)) : 0.0;
  if (mabs < 1e-12 || std_r < 1e-12) {
    out[0] = 10.0;
    out[1] = 0.0;
    out[2] = std_l * std_l;
    out[3] = std_r * std_r;
    return;
  }
  double gammahat = std_l / std_r;
  double rhat = mabs * mabs / m2;
  double rhatnorm = rhat * (gammahat * gammahat * gammahat + 1.0) * (gammahat + 1.0) /
                    ((gammahat * gammahat + 1.0) * (gammahat * gammahat + 1.0));
  double alpha = fit_ggd_alpha(rhatnorm);
  double g1 = std::tgamma(1.0 / alpha), g2 = std::tgamma(2.0 / alpha),
         g3 = std::tgamma(3.0 / alpha);
  double konst = std::sqrt(g1 / g3);
  double eta = (std_r - std_l) * (g2 / g1) * konst;
  out[0] = alpha;
  out[1] = eta;
  out[2] = std_l * std_l;
  out[3] = std_r * std_r;
}

// 18 features of one patch of an MSCN field
inline void patch_features(const Tensor& mscn, int y0, int x0, int p, double* out) {
  const int w = int(mscn.shape[1]);
  std::vector<double> flat;
  flat.reserve(std::size_t(p) * p);
  for (int y = y0; y < y0 + p; ++y)
    for (int x = x0; x < x0 + p; ++x) flat.push_back(mscn.v[std::size_t(y) * w + x]);
  double alpha, sigma_sq;
  fit_ggd(flat, &alpha, &sigma_sq);
  out[0] = alpha;
  out[1] = sigma_sq;
  const int shifts[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};  // H, V, D1, D2
  for (int s = 0; s < 4; ++s) {
    std::vector<double> prod;
    prod.reserve(std::size_t(p) * p);
    for (int y = y0; y < y0 + p; ++y) {
      for (int x = x0; x < x0 + p; ++x) {
        int yy = y + shifts[s][0], xx = x + shifts[s][1];
        if (yy < y0 || yy >= y0 + p || xx < x0 || xx >= x0 + p) continue;
        prod.push_back(mscn.v[std::size_t(y) * w + x] * mscn.v[std::size_t(yy) * w + xx]);
      }
    }
    fit_aggd(prod, out + 2 + 4 * s);
  }
}

struct ImageFeatures {
  std::vector<std::array<double, kFeatureDim>> per_patch;
  std::vector<double> sharpness;  // per patch, from scale-1 sigma field
};

inline Tensor downsample2(const Tensor& in) {
  const std::size_t h = in.shape[0] / 2, w = in.shape[1] / 2;
  Tensor out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      out.v[y * w + x] = 0.25 * (in.v[(2 * y) * in.shape[1] + 2 * x] +
                                 in.v[(2 * y) * in.shape[1] + 2 * x + 1] +
                                 in.v[(2 * y + 1) * in.shape[1] + 2 * x] +
                                 in.v[(2 * y + 1) * in.shape[1] + 2 * x + 1]);
  return out;
}

inline ImageFeatures image_features(const ImageTensor& img, int patch, BrightnessMode mode) {
  if (patch < 8 || patch % 2 != 0) throw ConfigError("niqe: patch size must be even and >= 8");
  Tensor gray = brightness_map(img, mode);
  for (double& v : gray.v) v *= 255.0;
  const int ph = img.height / patch, pw = img.width / patch;
  if (ph * pw < 4)
    throw ShapeError("niqe: image " + std::to_string(img.height) + "x" +
                     std::to_string(img.width) + " yields fewer than 4 patches of size " +
                     std::to_string(patch));
  // crop to a whole number of patches, then both scales stay aligned
  Tensor cropped({std::size_t(ph) * patch, std::size_t(pw) * patch});
  for (std::size_t y = 0; y < cropped.shape[0]; ++y)
    for (std::size_t x = 0; x < cropped.shape[1]; ++x)
      cropped.v[y * cropped.shape[1] + x] = gray.v[y * std::size_t(img.width) + x];

  MscnField f1 = mscn_field(cropped);
  {
    double var = 0.0, m = 0.0;
    for (double v : f1.mscn.v) m += v;
    m /= double(f1.mscn.size());
    for (double v : f1.mscn.v) var += (v - m) * (v - m);
    var /= double(f1.mscn.size());
    if (var < 1e-10)
      throw FormatError("niqe: degenerate MSCN variance (constant or near-constant image)");
  }
  MscnField f2 = mscn_field(downsample2(cropped));

  ImageFeatures out;
  for (int py = 0; py < ph; ++py) {
    for (int px = 0; px < pw; ++px) {
      std::array<double, kFeatureDim> feat{};
      patch_features(f1.mscn, py * patch, px * patch, patch, feat.data());
      patch_features(f2.mscn, py * patch / 2, px * patch / 2, patch / 2, feat.data() + 18);
      out.per_patch.push_back(feat);
      double sharp = 0.0;
      for (int y = py * patch; y < (py + 1) * patch; ++y)
        for (int x = px * patch; x < (px + 1) * patch; ++x)
          sharp += f1.sigma.v[std::size_t(y) * f1.sigma.shape[1] + x];
      out.sharpness.push_back(sharp / double(patch * patch));
    }
  }
  return out;
}

// Solve A x = b (symmetric PSD-ish) by Gaussian elimination with partial
// pivoting; a small ridge is added if the system is numerically singular.
inline std::vector<double> solve(std::vector<double> a, std::vector<double> b, int n) {
  for (int ridge_pass = 0; ridge_pass < 6; ++ridge_pass) {
    std::vector<double> m = a;
    std::vector<double> x = b;
    bool ok = true;
    for (int col = 0; col < n && ok; ++col) {
      int piv = col;
      for (int r = col + 1; r < n; ++r)
        if (std::abs(m[std::size_t(r) * n + col]) > std::abs(m[std::size_t(piv) * n + col]))
          piv = r;
      if (std::abs(m[std::size_t(piv) * n + col]) < 1e-12) {
        ok = false;
        break;
      }
      if (piv != col) {
        for (int c = 0; c < n; ++c)
          std::swap(m[std::size_t(piv) * n + c], m[std::size_t(col) * n + c]);
        std::swap(x[piv], x[col]);
      }
      for (int r = col + 1; r < n; ++r) {
        double f = m[std::size_t(r) * n + col] / m[std::size_t(col) * n + col];
        if (f == 0.0) continue;
        for (int c = col; c < n; ++c) m[std::size_t(r) * n + c] -= f * m[std::size_t(col) * n + c];
        x[r] -= f * x[col];
      }
    }
    if (ok) {
      for (int r = n - 1; r >= 0; --r) {
        double s = x[r];
        for (int c = r + 1; c < n; ++c) s -= m[std::size_t(r) * n + c] * x[c];
        x[r] = s / m[std::size_t(r) * n + r];
      }
      return x;
    }
    double tr = 0.0;
    for (int i = 0; i < n; ++i) tr += a[std::size_t(i) * n + i];
    double ridge = std::max(tr / n, 1.0) * 1e-8 * std::pow(10.0, ridge_pass);
    for (int i = 0; i < n; ++i) a[std::size_t(i) * n + i] += ridge;
  }
  throw FormatError("niqe: covariance system is singular");
}

}  // namespace niqe_detail

inline NiqeModel fit_niqe(const std::vector<ImageTensor>& corpus, int patch_size = 96,
                          double sharpness_fraction = 0.75,
                          BrightnessMode mode = BrightnessMode::ChannelMean) {
  if (corpus.empty()) throw ConfigError("fit_niqe: empty corpus");
  using niqe_detail::kFeatureDim;
  std::vector<std::array<double, kFeatureDim>> feats;
  std::vector<double> sharp;
  for (const auto& img : corpus) {
    auto f = niqe_detail::image_features(img, patch_size, mode);
    double mx = *std::max_element(f.sharpness.begin(), f.sharpness.end());
    for (std::size_t i = 0; i < f.per_patch.size(); ++i) {
      if (f.sharpness[i] >= sharpness_fraction * mx) {
        feats.push_back(f.per_patch[i]);
        sharp.push_back(f.sharpness[i]);
      }
    }
  }
  if (feats.size() < 2) throw ConfigError("fit_niqe: fewer than 2 patches selected");
  NiqeModel model;
  model.patch_size = patch_size;
  model.sharpness_fraction = sharpness_fraction;
  model.mean = Tensor({std::size_t(kFeatureDim)});
  for (const auto& f : feats)
    for (int d = 0; d < kFeatureDim; ++d) model.mean.v[d] += f[d];
  for (double& v : model.mean.v) v /= double(feats.size());
  model.cov = Tensor({std::size_t(kFeatureDim), std::size_t(kFeatureDim)});
  for (const auto& f : feats)
    for (int i = 0; i < kFeatureDim; ++i)
      for (int j = 0; j < kFeatureDim; ++j)
        model.cov.v[std::size_t(i) * kFeatureDim + j] +=
            (f[i] - model.mean.v[i]) * (f[j] - model.mean.v[j]);
  for (double& v : model.cov.v) v /= double(feats.size() - 1);
  return model;
}

inline double niqe(const ImageTensor& img, const NiqeModel& model,
                   BrightnessMode mode = BrightnessMode::ChannelMean) {
  using niqe_detail::kFeatureDim;
  if (model.mean.size() != kFeatureDim || model.cov.size() != std::size_t(kFeatureDim) * kFeatureDim)
    throw FormatError("niqe: model has wrong dimensions");
  auto f = niqe_detail::image_features(img, model.patch_size, mode);
  std::vector<double> xbar(kFeatureDim, 0.0);
  for (const auto& p : f.per_patch)
    for (int d = 0; d < kFeatureDim; ++d) xbar[d] += p[d];
  for (double& v : xbar) v /= double(f.per_patch.size());

  std::vector<double> cov(std::size_t(kFeatureDim) * kFeatureDim, 0.0);
  if (f.per_patch.size() > 1) {
    for (const auto& p : f.per_patch)
      for (int i = 0; i < kFeatureDim; ++i)
        for (int j = 0; j < kFeatureDim; ++j)
          cov[std::size_t(i) * kFeatureDim + j] += (p[i] - xbar[i]) * (p[j] - xbar[j]);
    for (double& v : cov) v /= double(f.per_patch.size() - 1);
  }
  std::vector<double> avg_cov(cov.size());
  for (std::size_t i = 0; i < cov.size(); ++i) avg_cov[i] = 0.5 * (model.cov.v[i] + cov[i]);
  std::vector<double> diff(kFeatureDim);
  for (int d = 0; d < kFeatureDim; ++d) diff[d] = model.mean.v[d] - xbar[d];
  std::vector<double> sol = niqe_detail::solve(avg_cov, diff, kFeatureDim);
  double q = 0.0;
  for (int d = 0; d < kFeatureDim; ++d) q += diff[d] * sol[d];
  return std::sqrt(std::max(q, 0.0));
}

inline void save_niqe_model(const NiqeModel& m, const std::filesystem::path& path) {
  Archive a;
  a.meta = {{"kind", "niqe"},
            {"patch_size", m.patch_size},
            {"sharpness_fraction", m.sharpness_fraction},
            {"feature_dim", niqe_detail::kFeatureDim}};
  a.arrays["mean"] = ArchiveArray{m.mean, Dtype::F64};
  a.arrays["cov"] = ArchiveArray{m.cov, Dtype::F64};
  save_archive(a, path);
}

inline NiqeModel load_niqe_model(const std::filesystem::path& path) {
  Archive a = load_archive(path);
  if (a.meta.value("kind", "") != "niqe")
    throw FormatError("niqe model: archive kind is '" + a.meta.value("kind", std::string("?")) +
                      "', want 'niqe'");
  NiqeModel m;
  m.patch_size = a.meta.at("patch_size").get<int>();
  m.sharpness_fraction = a.meta.value("sharpness_fraction", 0.75);
  m.mean = a.require("mean");
  m.cov = a.require("cov");
  return m;
}

// ---------------------------------------------------------------------------
// Directory-level evaluation report (per-image rows + aggregate means).
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::vector<std::string> metrics;  // subset of psnr, ssim, niqe, miou
  std::filesystem::path pred_dir;
  std::filesystem::path ref_dir;     // psnr/ssim reference images
  std::filesystem::path labels_dir;  // miou ground-truth label maps
  std::filesystem::path niqe_model;
  SegBackendConfig seg;              // segmenter applied to pred images for miou
  BrightnessMode brightness = BrightnessMode::ChannelMean;
};

struct EvalRow {
  std::string stem;
  std::map<std::string, double> values;
};

struct EvalResult {
  std::vector<EvalRow> rows;
  std::map<std::string, double> aggregate;
  std::optional<MiouResult> miou;
};

namespace detail {

inline std::map<std::string, std::filesystem::path> stems_of(const std::filesystem::path& dir) {
  std::map<std::string, std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) throw IoError("eval: no such directory: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out[e.path().stem().string()] = e.path();
  }
  return out;
}

inline void require_aligned(const std::map<std::string, std::filesystem::path>& a,
                            const std::map<std::string, std::filesystem::path>& b,
                            const std::string& a_name, const std::string& b_name) {
  std::string only_a, only_b;
  for (const auto& [stem, p] : a)
    if (!b.count(stem)) only_a += (only_a.empty() ? "" : ", ") + stem;
  for (const auto& [stem, p] : b)
    if (!a.count(stem)) only_b += (only_b.empty() ? "" : ", ") + stem;
  if (!only_a.empty() || !only_b.empty())
    throw ConfigError("eval: stems do not align; only in " + a_name + ": [" + only_a +
                      "]; only in " + b_name + ": [" + only_b + "]");
  if (a.empty())
    throw ConfigError("eval: no images found in " + a_name + " or " + b_name);
}

}  // namespace detail

inline EvalResult eval_report(const EvalOptions& opts) {
  auto want = [&opts](const char* m) {
    return std::find(opts.metrics.begin(), opts.metrics.end(), m) != opts.metrics.end();
  };
  for (const auto& m : opts.metrics)
    if (m != "psnr" && m != "ssim" && m != "niqe" && m != "miou")
      throw ConfigError("eval: unknown metric '" + m + "'");
  if (opts.metrics.empty()) throw ConfigError("eval: no metrics requested");

  auto preds = detail::stems_of(opts.pred_dir);
  if (preds.empty()) throw ConfigError("eval: no images in " + opts.pred_dir.string());
  std::map<std::string, std::filesystem::path> refs, labels;
  if (want("psnr") || want("ssim")) {
    refs = detail::stems_of(opts.ref_dir);
    detail::require_aligned(preds, refs, opts.pred_dir.string(), opts.ref_dir.string());
  }
  if (want("miou")) {
    labels = detail::stems_of(opts.labels_dir);
    detail::require_aligned(preds, labels, opts.pred_dir.string(), opts.labels_dir.string());
  }
  std::optional<NiqeModel> niqe_model;
  if (want("niqe")) niqe_model = load_niqe_model(opts.niqe_model);
  std::unique_ptr<SegBackend> seg;
  if (want("miou")) seg = make_seg_backend(opts.seg);

  std::vector<std::string> stems;
  for (const auto& [stem, p] : preds) stems.push_back(stem);

  EvalResult result;
  result.rows.resize(stems.size());
  std::vector<LabelMap> pred_labels(stems.size()), gt_labels(stems.size());
  std::vector<std::string> errors(stems.size());
  parallel_for(stems.size(), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      try {
        const std::string& stem = stems[i];
        EvalRow row;
        row.stem = stem;
        ImageTensor pred = load_image(preds.at(stem));
        if (want("psnr") || want("ssim")) {
          ImageTensor ref = load_image(refs.at(stem));
          if (want("psnr")) row.values["psnr"] = psnr(pred, ref);
          if (want("ssim")) row.values["ssim"] = ssim(pred, ref, opts.brightness);
        }
        if (want("niqe")) row.values["niqe"] = niqe(pred, *niqe_model, opts.brightness);
        if (want("miou")) {
          gt_labels[i] = load_label(labels.at(stem), seg->num_classes());
          if (gt_labels[i].height != pred.height || gt_labels[i].width != pred.width)
            throw ShapeError("eval: label/image size mismatch for stem " + stem);
          pred_labels[i] = seg->segment(pred, &gt_labels[i]).argmax();
        }
        result.rows[i] = std::move(row);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  });
  for (const auto& e : errors)
    if (!e.empty()) throw IoError("eval: " + e);

  for (const auto& m : opts.metrics) {
    if (m == "miou") continue;
    double sum = 0.0;
    for (const auto& row : result.rows) sum += row.values.at(m);
    result.aggregate[m] = sum / double(result.rows.size());
  }
  if (want("miou")) {
    result.miou = miou(pred_labels, gt_labels, seg->num_classes());
    result.aggregate["miou"] = result.miou->mean;
  }
  return result;
}

namespace detail {

inline std::string metric_str(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline nlohmann::json metric_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

}  // namespace detail

// Writes report.csv and report.json into out_dir.
inline void write_eval_report(const EvalResult& r, const std::vector<std::string>& metrics,
                              const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> cols;
  for (const auto& m : metrics)
    if (m != "miou") cols.push_back(m);

  {
    std::ofstream csv(out_dir / "report.csv");
    if (!csv) throw IoError("cannot write " + (out_dir / "report.csv").string());
    csv << "stem";
    for (const auto& c : cols) csv << "," << c;
    csv << "\n";
    for (const auto& row : r.rows) {
      csv << row.stem;
      for (const auto& c : cols) csv << "," << detail::metric_str(row.values.at(c));
      csv << "\n";
    }
    csv << "mean";
    for (const auto& c : cols) csv << "," << detail::metric_str(r.aggregate.at(c));
    csv << "\n";
    if (r.miou) csv << "miou," << detail::metric_str(r.miou->mean) << "\n";
  }
  {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
      nlohmann::json jr = {{"stem", row.stem}};
      for (const auto& [k, v] : row.values) jr[k] = detail::metric_json(v);
      rows.push_back(jr);
    }
    nlohmann::json agg;
    for (const auto& [k, v] : r.aggregate) agg[k] = detail::metric_json(v);
    nlohmann::json doc = {{"rows", rows}, {"aggregate", agg}};
    if (r.miou) {
      nlohmann::json per_class = nlohmann::json::array();
      for (double v : r.miou->per_class)
        per_class.push_back(std::isnan(v) ? nlohmann::json() : nlohmann::json(v));
      doc["miou"] = {{"mean", r.miou->mean}, {"per_class", per_class}};
    }
    std::ofstream js(out_dir / "report.json");
    if (!js) throw IoError("cannot write " + (out_dir / "report.json").string());
    js << doc.dump(1) << "\n";
  }
}

}  // namespace scl_lle
