#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "scl_lle/common.hpp"
#include "scl_lle/rng.hpp"
#include "scl_lle/tensor.hpp"

namespace scl_lle {

// Plain-loop convolution / activation kernels with hand-written backward
// passes. Double precision throughout so finite-difference checks resolve at
// 1e-4 relative tolerance.

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, int stride, int pad) {
  return (in + 2 * std::size_t(pad) - k) / std::size_t(stride) + 1;
}

// in: IC×H×W, w: OC×IC×KH×KW, b: OC -> out: OC×H'×W'
inline void conv2d_forward(const Tensor& in, const Tensor& w, const Tensor& b, int stride,
                           int pad, Tensor& out) {
  const std::size_t ic_n = in.shape[0], h = in.shape[1], wd = in.shape[2];
  const std::size_t oc_n = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  if (w.shape[1] != ic_n)
    throw ShapeError("conv2d: weight expects " + std::to_string(w.shape[1]) +
                     " input channels, image has " + std::to_string(ic_n));
  const std::size_t oh = conv_out_dim(h, kh, stride, pad);
  const std::size_t ow = conv_out_dim(wd, kw, stride, pad);
  out = Tensor({oc_n, oh, ow});
  for (std::size_t oc = 0; oc < oc_n; ++oc) {
    double* outp = out.data() + oc * oh * ow;
    const double bias = b.size() ? b[oc] : 0.0;
    for (std::size_t i = 0; i < oh * ow; ++i) outp[i] = bias;
    for (std::size_t ic = 0; ic < ic_n; ++ic) {
      const double* inp = in.data() + ic * h * wd;
      const double* wp = w.data() + ((oc * ic_n + ic) * kh) * kw;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = wp[ky * kw + kx];
          if (wv == 0.0) continue;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = long(oy) * stride - pad + long(ky);
            if (iy < 0 || iy >= long(h)) continue;
            const double* in_row = inp + std::size_t(iy) * wd;
            double* out_row = outp + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long ix = long(ox) * stride - pad + long(kx);
              if (ix < 0 || ix >= long(wd)) continue;
              out_row[ox] += wv * in_row[ix];
            }
          }
        }
      }
    }
  }
}

// Gradients w.r.t. input, weights and bias; any of the outputs may be null.
// dw/db are accumulated into (callers zero them when starting a batch).
inline void conv2d_backward(const Tensor& in, const Tensor& w, int stride, int pad,
                            const Tensor& dout, Tensor* din, Tensor* dw, Tensor* db) {
  const std::size_t ic_n = in.shape[0], h = in.shape[1], wd = in.shape[2];
  const std::size_t oc_n = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  const std::size_t oh = dout.shape[1], ow = dout.shape[2];
  if (din) {
    if (din->shape != in.shape) *din = Tensor(in.shape);
  }
  if (dw && dw->shape != w.shape) *dw = Tensor(w.shape);
  if (db && db->shape != std::vector<std::size_t>{oc_n}) *db = Tensor({oc_n});
  for (std::size_t oc = 0; oc < oc_n; ++oc) {
    const double* doutp = dout.data() + oc * oh * ow;
    if (db) {
      double s = 0.0;
      for (std::size_t i = 0; i < oh * ow; ++i) s += doutp[i];
      db->v[oc] += s;
    }
    for (std::size_t ic = 0; ic < ic_n; ++ic) {
      const double* inp = in.data() + ic * h * wd;
      double* dinp = din ? din->data() + ic * h * wd : nullptr;
      const double* wp = w.data() + ((oc * ic_n + ic) * kh) * kw;
      double* dwp = dw ? dw->data() + ((oc * ic_n + ic) * kh) * kw : nullptr;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = wp[ky * kw + kx];
          double grad_w = 0.0;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = long(oy) * stride - pad + long(ky);
            if (iy < 0 || iy >= long(h)) continue;
            const double* in_row = inp + std::size_t(iy) * wd;
            double* din_row = dinp ? dinp + std::size_t(iy) * wd : nullptr;
            const double* dout_row = doutp + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long ix = long(ox) * stride - pad + long(kx);
              if (ix < 0 || ix >= long(wd)) continue;
              const double g = dout_row[ox];
              if (dwp) grad_w += g * in_row[ix];
              if (din_row) din_row[ix] += g * wv;
            }
          }
          if (dwp) dwp[ky * kw + kx] += grad_w;
        }
      }
    }
  }
}

inline void relu_inplace(Tensor& t) {
  for (double& x : t.v)
    if (x < 0.0) x = 0.0;
}

// dpre = dout where pre > 0 (accumulating variant not needed; overwrite)
inline Tensor relu_backward(const Tensor& pre, const Tensor& dout) {
  Tensor dpre(pre.shape);
  for (std::size_t i = 0; i < pre.size(); ++i) dpre.v[i] = pre.v[i] > 0.0 ? dout.v[i] : 0.0;
  return dpre;
}

inline void tanh_inplace(Tensor& t) {
  for (double& x : t.v) x = std::tanh(x);
}

// post is tanh(pre); dpre = dout * (1 - post^2)
inline Tensor tanh_backward(const Tensor& post, const Tensor& dout) {
  Tensor dpre(post.shape);
  for (std::size_t i = 0; i < post.size(); ++i)
    dpre.v[i] = dout.v[i] * (1.0 - post.v[i] * post.v[i]);
  return dpre;
}

// 2×2 max pooling, stride 2, odd trailing row/col dropped (VGG convention).
inline Tensor maxpool2_forward(const Tensor& in, std::vector<std::uint32_t>* argmax) {
  const std::size_t c_n = in.shape[0], h = in.shape[1], w = in.shape[2];
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("maxpool2: input too small " + in.shape_str());
  Tensor out({c_n, oh, ow});
  if (argmax) argmax->assign(out.size(), 0);
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double best = -1e300;
        std::uint32_t best_idx = 0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            std::size_t iy = 2 * oy + dy, ix = 2 * ox + dx;
            double v = in.at3(c, iy, ix);
            if (v > best) {
              best = v;
              best_idx = std::uint32_t((c * h + iy) * w + ix);
            }
          }
        }
        out.at3(c, oy, ox) = best;
        if (argmax) (*argmax)[(c * oh + oy) * ow + ox] = best_idx;
      }
    }
  }
  return out;
}

inline Tensor maxpool2_backward(const std::vector<std::size_t>& in_shape,
                                const std::vector<std::uint32_t>& argmax, const Tensor& dout) {
  Tensor din(in_shape);
  for (std::size_t i = 0; i < dout.size(); ++i) din.v[argmax[i]] += dout.v[i];
  return din;
}

inline Tensor upsample_nearest(const Tensor& in, int factor) {
  const std::size_t c_n = in.shape[0], h = in.shape[1], w = in.shape[2];
  Tensor out({c_n, h * factor, w * factor});
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t y = 0; y < h * factor; ++y)
      for (std::size_t x = 0; x < w * factor; ++x)
        out.at3(c, y, x) = in.at3(c, y / factor, x / factor);
  return out;
}

inline Tensor upsample_nearest_backward(const std::vector<std::size_t>& in_shape, int factor,
                                        const Tensor& dout) {
  Tensor din(in_shape);
  for (std::size_t c = 0; c < dout.shape[0]; ++c)
    for (std::size_t y = 0; y < dout.shape[1]; ++y)
      for (std::size_t x = 0; x < dout.shape[2]; ++x)
        din.at3(c, y / factor, x / factor) += dout.at3(c, y, x);
  return din;
}

// Channel-wise softmax per pixel (S×H×W).
inline Tensor softmax_channels(const Tensor& logits) {
  const std::size_t s_n = logits.shape[0], h = logits.shape[1], w = logits.shape[2];
  Tensor out(logits.shape);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double mx = -1e300;
      for (std::size_t s = 0; s < s_n; ++s) mx = std::max(mx, logits.at3(s, y, x));
      double z = 0.0;
      for (std::size_t s = 0; s < s_n; ++s) z += std::exp(logits.at3(s, y, x) - mx);
      for (std::size_t s = 0; s < s_n; ++s) out.at3(s, y, x) = std::exp(logits.at3(s, y, x) - mx) / z;
    }
  }
  return out;
}

// dlogit_c = q_c (dout_c - sum_k dout_k q_k)
inline Tensor softmax_channels_backward(const Tensor& post, const Tensor& dout) {
  const std::size_t s_n = post.shape[0], h = post.shape[1], w = post.shape[2];
  Tensor din(post.shape);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::size_t s = 0; s < s_n; ++s) acc += dout.at3(s, y, x) * post.at3(s, y, x);
      for (std::size_t s = 0; s < s_n; ++s)
        din.at3(s, y, x) = post.at3(s, y, x) * (dout.at3(s, y, x) - acc);
    }
  }
  return din;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape[1] != b.shape[1] || a.shape[2] != b.shape[2])
    throw ShapeError("concat: spatial mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor out({a.shape[0] + b.shape[0], a.shape[1], a.shape[2]});
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + long(a.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Sequential conv-net executor. Used by the frozen backends (feature
// extractor variants, segmenter variants); the enhancement network is
// hand-wired because of its skip concatenations.
// ---------------------------------------------------------------------------

struct SeqLayer {
  enum class Kind { Conv, Relu, MaxPool2, UpsampleNearest, Softmax };
  Kind kind = Kind::Conv;
  std::string param;  // Conv: arrays "<param>.weight" / "<param>.bias"
  std::string tap;    // non-empty: output exposed under this id
  int stride = 1;
  int pad = 1;
  int factor = 2;
};

struct SeqNet {
  std::vector<SeqLayer> layers;
  std::map<std::string, Tensor> params;

  std::vector<std::string> taps() const {
    std::vector<std::string> out;
    for (const auto& l : layers)
      if (!l.tap.empty()) out.push_back(l.tap);
    return out;
  }

  bool has_tap(const std::string& id) const {
    for (const auto& l : layers)
      if (l.tap == id) return true;
    return false;
  }
};

struct SeqTrace {
  std::vector<Tensor> acts;  // acts[0] = input, acts[i+1] = output of layer i
  std::vector<std::vector<std::uint32_t>> pool_argmax;  // per layer (empty unless pool)
};

inline Tensor seq_forward(const SeqNet& net, const Tensor& input, SeqTrace* trace) {
  Tensor cur = input;
  if (trace) {
    trace->acts.clear();
    trace->pool_argmax.assign(net.layers.size(), {});
    trace->acts.push_back(cur);
  }
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const SeqLayer& l = net.layers[i];
    Tensor next;
    switch (l.kind) {
      case SeqLayer::Kind::Conv: {
        auto wi = net.params.find(l.param + ".weight");
        auto bi = net.params.find(l.param + ".bias");
        if (wi == net.params.end() || bi == net.params.end())
          throw FormatError("seq net: missing parameters for layer '" + l.param + "'");
        conv2d_forward(cur, wi->second, bi->second, l.stride, l.pad, next);
        break;
      }
      case SeqLayer::Kind::Relu:
        next = cur;
        relu_inplace(next);
        break;
      case SeqLayer::Kind::MaxPool2:
        next = maxpool2_forward(cur, trace ? &trace->pool_argmax[i] : nullptr);
        break;
      case SeqLayer::Kind::UpsampleNearest:
        next = upsample_nearest(cur, l.factor);
        break;
      case SeqLayer::Kind::Softmax:
        next = softmax_channels(cur);
        break;
    }
    cur = std::move(next);
    if (trace) trace->acts.push_back(cur);
  }
  return cur;
}

// Backward to the input, seeding gradients at arbitrary taps. Parameters are
// frozen by contract, so no parameter gradients are produced here.
inline Tensor seq_backward(const SeqNet& net, const SeqTrace& trace,
                           const std::map<std::string, Tensor>& dtaps) {
  Tensor grad(trace.acts.back().shape);  // zero
  bool grad_live = false;
  for (std::size_t ri = net.layers.size(); ri-- > 0;) {
    const SeqLayer& l = net.layers[ri];
    const Tensor& in = trace.acts[ri];
    const Tensor& out = trace.acts[ri + 1];
    if (!grad_live) grad = Tensor(out.shape);
    if (!l.tap.empty()) {
      auto it = dtaps.find(l.tap);
      if (it != dtaps.end()) {
        require_same_shape(it->second, out, "seq_backward tap");
        axpy(1.0, it->second, grad);
        grad_live = true;
      }
    }
    if (!grad_live) {
      grad = Tensor(in.shape);
      continue;
    }
    Tensor next;
    switch (l.kind) {
      case SeqLayer::Kind::Conv: {
        const Tensor& w = net.params.at(l.param + ".weight");
        conv2d_backward(in, w, l.stride, l.pad, grad, &next, nullptr, nullptr);
        break;
      }
      case SeqLayer::Kind::Relu:
        next = relu_backward(in, grad);
        break;
      case SeqLayer::Kind::MaxPool2:
        next = maxpool2_backward(in.shape, trace.pool_argmax[ri], grad);
        break;
      case SeqLayer::Kind::UpsampleNearest:
        next = upsample_nearest_backward(in.shape, l.factor, grad);
        break;
      case SeqLayer::Kind::Softmax:
        next = softmax_channels_backward(out, grad);
        break;
    }
    grad = std::move(next);
  }
  return grad;
}

// Seeded He-style initialization used by the deterministic reference
// backends; `gain` rescales activations so Gram statistics land in the range
// the contrastive margins were tuned for.
inline void init_conv(std::map<std::string, Tensor>& params, const std::string& name,
                      std::size_t out_ch, std::size_t in_ch, std::size_t k, Rng rng,
                      double gain = 1.0) {
  Tensor w({out_ch, in_ch, k, k});
  const double stddev = gain * std::sqrt(2.0 / double(in_ch * k * k));
  for (double& x : w.v) x = rng.normal(0.0, stddev);
  params[name + ".weight"] = std::move(w);
  params[name + ".bias"] = Tensor({out_ch});
}

inline std::string params_fingerprint(const std::map<std::string, Tensor>& params) {
  Sha1 h;
  for (const auto& [name, t] : params) {
    h.update(name.data(), name.size());
    h.update(t.v.data(), t.v.size() * sizeof(double));
  }
  return h.hex_digest();
}

}  // namespace scl_lle
