#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>

#include "scl_lle/checkpoint.hpp"
#include "scl_lle/image.hpp"
#include "scl_lle/nn.hpp"
#include "scl_lle/rng.hpp"
#include "scl_lle/tensor.hpp"

namespace scl_lle {

// Per-iteration pixel-correction curve coefficient maps. maps is M×3×H×W with
// every element in [-1,1]; iteration m, channel c lives at flat channel 3m+c.
struct CurveStack {
  int iterations = 0;
  int height = 0;
  int width = 0;
  Tensor maps;

  CurveStack() = default;
  CurveStack(int m, int h, int w)
      : iterations(m), height(h), width(w),
        maps({std::size_t(m), 3, std::size_t(h), std::size_t(w)}) {}

  double at(int m, int c, int y, int x) const { return maps.at4(m, c, y, x); }
  double& at(int m, int c, int y, int x) { return maps.at4(m, c, y, x); }

  bool valid() const {
    if (iterations <= 0 || height <= 0 || width <= 0) return false;
    if (maps.size() != std::size_t(iterations) * 3 * height * width) return false;
    for (double v : maps.v)
      if (!(v >= -1.0 && v <= 1.0)) return false;
    return true;
  }
};

struct EnhancerConfig {
  int width = 32;      // hidden channels
  int iterations = 8;  // curve applications M
};

struct EnhancerParams {
  EnhancerConfig cfg;
  std::map<std::string, Tensor> arrays;
  std::uint64_t seed = 0;
  std::uint64_t train_steps = 0;
  std::string brightness_mode = "mean";
  int format_version = kArchiveVersion;

  std::string fingerprint() const { return params_fingerprint(arrays); }
};

namespace detail {

inline std::array<std::pair<std::size_t, std::size_t>, 7> enhancer_layer_dims(const EnhancerConfig& cfg) {
  const std::size_t w = std::size_t(cfg.width);
  const std::size_t out = 3 * std::size_t(cfg.iterations);
  return {{{w, 3}, {w, w}, {w, w}, {w, w}, {w, 2 * w}, {w, 2 * w}, {out, 2 * w}}};
}

}  // namespace detail

inline EnhancerParams init_enhancer(const EnhancerConfig& cfg, std::uint64_t seed) {
  if (cfg.width < 1 || cfg.iterations < 1)
    throw ConfigError("enhancer: width and iterations must be positive");
  EnhancerParams p;
  p.cfg = cfg;
  p.seed = seed;
  Rng root(seed, "enhancer.init");
  auto dims = detail::enhancer_layer_dims(cfg);
  for (int i = 0; i < 7; ++i) {
    std::string name = "conv" + std::to_string(i + 1);
    Tensor w({dims[i].first, dims[i].second, 3, 3});
    Rng rng = root.fork(name);
    for (double& x : w.v) x = rng.normal(0.0, 0.02);
    p.arrays[name + ".weight"] = std::move(w);
    p.arrays[name + ".bias"] = Tensor({dims[i].first});
  }
  return p;
}

inline void validate_enhancer_params(const EnhancerParams& p) {
  auto dims = detail::enhancer_layer_dims(p.cfg);
  for (int i = 0; i < 7; ++i) {
    std::string name = "conv" + std::to_string(i + 1);
    auto wi = p.arrays.find(name + ".weight");
    auto bi = p.arrays.find(name + ".bias");
    if (wi == p.arrays.end() || bi == p.arrays.end())
      throw FormatError("enhancer params: missing " + name);
    std::vector<std::size_t> want{dims[i].first, dims[i].second, 3, 3};
    if (wi->second.shape != want)
      throw FormatError("enhancer params: " + name + ".weight has shape " +
                        wi->second.shape_str());
    if (bi->second.shape != std::vector<std::size_t>{dims[i].first})
      throw FormatError("enhancer params: " + name + ".bias has shape " + bi->second.shape_str());
    if (!wi->second.all_finite() || !bi->second.all_finite())
      throw FormatError("enhancer params: non-finite values in " + name);
  }
}

struct EnhancerTrace {
  Tensor x0;
  std::array<Tensor, 6> h;  // post-relu hidden activations
  Tensor curves_flat;       // post-tanh, (3M)×H×W
};

// Curve-coefficient estimation: 7 stride-1 3×3 conv layers with skip
// concatenations feeding layers 5-7, tanh head squashing to [-1,1].
inline CurveStack estimate_curves(const EnhancerParams& params, const ImageTensor& img,
                                  EnhancerTrace* trace = nullptr) {
  if (!img.valid()) throw ShapeError("estimate_curves: invalid input image");
  if (img.height < 8 || img.width < 8 || img.height % 4 != 0 || img.width % 4 != 0)
    throw ShapeError("estimate_curves: H and W must be >= 8 and divisible by 4, got " +
                     std::to_string(img.height) + "x" + std::to_string(img.width));
  validate_enhancer_params(params);

  auto conv = [&params](const Tensor& in, int i, Tensor& out) {
    std::string name = "conv" + std::to_string(i);
    conv2d_forward(in, params.arrays.at(name + ".weight"), params.arrays.at(name + ".bias"), 1,
                   1, out);
  };

  Tensor x0 = img.as_tensor();
  std::array<Tensor, 6> h;
  Tensor t;
  conv(x0, 1, t);
  relu_inplace(t);
  h[0] = std::move(t);
  conv(h[0], 2, t);
  relu_inplace(t);
  h[1] = std::move(t);
  conv(h[1], 3, t);
  relu_inplace(t);
  h[2] = std::move(t);
  conv(h[2], 4, t);
  relu_inplace(t);
  h[3] = std::move(t);
  conv(concat_channels(h[2], h[3]), 5, t);
  relu_inplace(t);
  h[4] = std::move(t);
  conv(concat_channels(h[1], h[4]), 6, t);
  relu_inplace(t);
  h[5] = std::move(t);
  conv(concat_channels(h[0], h[5]), 7, t);
  tanh_inplace(t);

  CurveStack out(params.cfg.iterations, img.height, img.width);
  out.maps.v = t.v;
  if (trace) {
    trace->x0 = std::move(x0);
    trace->h = std::move(h);
    trace->curves_flat = std::move(t);
  }
  return out;
}

// Accumulates parameter gradients into dparams; optionally returns the input
// image gradient.
inline void estimate_curves_backward(const EnhancerParams& params, const EnhancerTrace& trace,
                                     const Tensor& dcurves,
                                     std::map<std::string, Tensor>& dparams,
                                     Tensor* dimg = nullptr) {
  const std::size_t w = std::size_t(params.cfg.width);
  auto back = [&](const Tensor& in, int i, const Tensor& dout, Tensor* din) {
    std::string name = "conv" + std::to_string(i);
    conv2d_backward(in, params.arrays.at(name + ".weight"), 1, 1, dout,
                    din, &dparams[name + ".weight"], &dparams[name + ".bias"]);
  };
  auto split = [w](const Tensor& dcat, Tensor& da, Tensor& db) {
    da = Tensor({w, dcat.shape[1], dcat.shape[2]});
    db = Tensor({w, dcat.shape[1], dcat.shape[2]});
    std::copy(dcat.v.begin(), dcat.v.begin() + long(da.size()), da.v.begin());
    std::copy(dcat.v.begin() + long(da.size()), dcat.v.end(), db.v.begin());
  };

  Tensor dflat = dcurves;
  if (dflat.shape.size() == 4)  // accept M×3×H×W as well as (3M)×H×W
    dflat.shape = {dflat.shape[0] * dflat.shape[1], dflat.shape[2], dflat.shape[3]};

  Tensor d7 = tanh_backward(trace.curves_flat, dflat);
  Tensor dcat7;
  back(concat_channels(trace.h[0], trace.h[5]), 7, d7, &dcat7);
  Tensor dh1, dh6;
  split(dcat7, dh1, dh6);

  Tensor d6 = relu_backward(trace.h[5], dh6);
  Tensor dcat6;
  back(concat_channels(trace.h[1], trace.h[4]), 6, d6, &dcat6);
  Tensor dh2, dh5;
  split(dcat6, dh2, dh5);

  Tensor d5 = relu_backward(trace.h[4], dh5);
  Tensor dcat5;
  back(concat_channels(trace.h[2], trace.h[3]), 5, d5, &dcat5);
  Tensor dh3, dh4;
  split(dcat5, dh3, dh4);

  Tensor d4 = relu_backward(trace.h[3], dh4);
  Tensor dh3b;
  back(trace.h[2], 4, d4, &dh3b);
  axpy(1.0, dh3b, dh3);

  Tensor d3 = relu_backward(trace.h[2], dh3);
  Tensor dh2b;
  back(trace.h[1], 3, d3, &dh2b);
  axpy(1.0, dh2b, dh2);

  Tensor d2 = relu_backward(trace.h[1], dh2);
  Tensor dh1b;
  back(trace.h[0], 2, d2, &dh1b);
  axpy(1.0, dh1b, dh1);

  Tensor d1 = relu_backward(trace.h[0], dh1);
  back(trace.x0, 1, d1, dimg);
}

// One curve step: x -> x + a·x·(1-x). Closed on [0,1] for a in [-1,1].
inline double curve_step(double x, double a) { return x + a * x * (1.0 - x); }

inline ImageTensor apply_curves(const ImageTensor& img, const CurveStack& curves) {
  if (curves.height != img.height || curves.width != img.width)
    throw ShapeError("apply_curves: curve maps are " + std::to_string(curves.height) + "x" +
                     std::to_string(curves.width) + " but image is " +
                     std::to_string(img.height) + "x" + std::to_string(img.width));
  if (!curves.valid()) throw ShapeError("apply_curves: invalid curve stack");
  const std::size_t n = img.pixels();
  ImageTensor out = img;
  for (int m = 0; m < curves.iterations; ++m) {
    for (int c = 0; c < 3; ++c) {
      const double* a = curves.maps.data() + (std::size_t(m) * 3 + c) * n;
      double* le = out.data.data() + std::size_t(c) * n;
      for (std::size_t i = 0; i < n; ++i) {
        double v = curve_step(le[i], a[i]);
        // guard against last-ulp excursions; mathematically v stays in [0,1]
        le[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      }
    }
  }
  return out;
}

// dout is 3×H×W; dimg/dcurves are overwritten when non-null.
inline void apply_curves_backward(const ImageTensor& img, const CurveStack& curves,
                                  const Tensor& dout, Tensor* dimg, Tensor* dcurves) {
  const std::size_t n = img.pixels();
  const int M = curves.iterations;
  // recompute the intermediate states LE_0 .. LE_{M-1}
  std::vector<std::vector<double>> le(M, std::vector<double>(3 * n));
  {
    std::vector<double> cur = img.data;
    for (int m = 0; m < M; ++m) {
      le[m] = cur;
      for (int c = 0; c < 3; ++c) {
        const double* a = curves.maps.data() + (std::size_t(m) * 3 + c) * n;
        double* x = cur.data() + std::size_t(c) * n;
        for (std::size_t i = 0; i < n; ++i) x[i] = curve_step(x[i], a[i]);
      }
    }
  }
  if (dimg) *dimg = Tensor({3, std::size_t(img.height), std::size_t(img.width)});
  if (dcurves) *dcurves = Tensor(curves.maps.shape);
  std::vector<double> g(dout.v.begin(), dout.v.end());
  for (int m = M; m-- > 0;) {
    for (int c = 0; c < 3; ++c) {
      const double* a = curves.maps.data() + (std::size_t(m) * 3 + c) * n;
      const double* x = le[m].data() + std::size_t(c) * n;
      double* gc = g.data() + std::size_t(c) * n;
      double* da = dcurves ? dcurves->data() + (std::size_t(m) * 3 + c) * n : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        if (da) da[i] = gc[i] * x[i] * (1.0 - x[i]);
        gc[i] = gc[i] * (1.0 + a[i] * (1.0 - 2.0 * x[i]));
      }
    }
  }
  if (dimg) dimg->v.assign(g.begin(), g.end());
}

inline std::pair<ImageTensor, CurveStack> enhance(const EnhancerParams& params,
                                                  const ImageTensor& img,
                                                  EnhancerTrace* trace = nullptr) {
  CurveStack curves = estimate_curves(params, img, trace);
  return {apply_curves(img, curves), std::move(curves)};
}

// --------------------------------------------------------------------------
// Checkpoint round-trip (parameters as f4 per the documented format; callers
// may attach extra arrays, e.g. optimizer state, under reserved prefixes).
// --------------------------------------------------------------------------

inline Archive enhancer_to_archive(const EnhancerParams& p) {
  Archive a;
  a.meta = {{"kind", "enhancer"},
            {"architecture", {{"width", p.cfg.width}, {"iterations", p.cfg.iterations}}},
            {"brightness_mode", p.brightness_mode},
            {"seed", p.seed},
            {"train_steps", p.train_steps}};
  for (const auto& [name, t] : p.arrays) a.arrays[name] = ArchiveArray{t, Dtype::F32};
  return a;
}

inline EnhancerParams enhancer_from_archive(const Archive& a) {
  if (a.meta.value("kind", "") != "enhancer")
    throw FormatError("checkpoint is not an enhancer archive (kind='" +
                      a.meta.value("kind", std::string("?")) + "')");
  EnhancerParams p;
  p.cfg.width = a.meta.at("architecture").at("width").get<int>();
  p.cfg.iterations = a.meta.at("architecture").at("iterations").get<int>();
  p.brightness_mode = a.meta.value("brightness_mode", "mean");
  p.seed = a.meta.value("seed", std::uint64_t(0));
  p.train_steps = a.meta.value("train_steps", std::uint64_t(0));
  for (const auto& [name, arr] : a.arrays) {
    if (name.rfind("conv", 0) == 0) p.arrays[name] = arr.t;
  }
  validate_enhancer_params(p);
  return p;
}

inline void save_enhancer(const EnhancerParams& p, const std::filesystem::path& path) {
  save_archive(enhancer_to_archive(p), path);
}

inline EnhancerParams load_enhancer(const std::filesystem::path& path) {
  return enhancer_from_archive(load_archive(path));
}

}  // namespace scl_lle
