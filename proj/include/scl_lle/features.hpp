#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "scl_lle/checkpoint.hpp"
#include "scl_lle/image.hpp"
#include "scl_lle/nn.hpp"

namespace scl_lle {

// Ordered per-layer activations f^l (C×H×W each).
struct FeatureMaps {
  std::vector<std::pair<std::string, Tensor>> layers;

  const Tensor& at(const std::string& id) const {
    for (const auto& [name, t] : layers)
      if (name == id) return t;
    throw ConfigError("feature maps: no layer '" + id + "'");
  }
};

// Per-layer Gram matrices, same ordering as the FeatureMaps they came from.
struct GramSet {
  std::vector<std::pair<std::string, Tensor>> grams;
};

// G_ij = sum_k f_ik f_jk over flattened spatial positions, scaled by
// 1/(C·H·W) so entries stay order-1 across layer widths.
inline Tensor gram_matrix(const Tensor& f) {
  if (f.shape.size() != 3) throw ShapeError("gram_matrix: want C×H×W, got " + f.shape_str());
  const std::size_t c_n = f.shape[0], hw = f.shape[1] * f.shape[2];
  const double norm = 1.0 / double(c_n * hw);
  Tensor g({c_n, c_n});
  for (std::size_t i = 0; i < c_n; ++i) {
    const double* fi = f.data() + i * hw;
    for (std::size_t j = i; j < c_n; ++j) {
      const double* fj = f.data() + j * hw;
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += fi[k] * fj[k];
      g.v[i * c_n + j] = s * norm;
      g.v[j * c_n + i] = s * norm;
    }
  }
  return g;
}

// df = (dG + dGᵀ)·F / (C·H·W)
inline Tensor gram_backward(const Tensor& f, const Tensor& dg) {
  const std::size_t c_n = f.shape[0], hw = f.shape[1] * f.shape[2];
  const double norm = 1.0 / double(c_n * hw);
  Tensor df(f.shape);
  for (std::size_t i = 0; i < c_n; ++i) {
    double* dfi = df.data() + i * hw;
    for (std::size_t j = 0; j < c_n; ++j) {
      const double w = (dg.v[i * c_n + j] + dg.v[j * c_n + i]) * norm;
      if (w == 0.0) continue;
      const double* fj = f.data() + j * hw;
      for (std::size_t k = 0; k < hw; ++k) dfi[k] += w * fj[k];
    }
  }
  return df;
}

inline GramSet gram_set(const FeatureMaps& maps) {
  GramSet g;
  g.grams.reserve(maps.layers.size());
  for (const auto& [name, f] : maps.layers) g.grams.emplace_back(name, gram_matrix(f));
  return g;
}

// Mean over layers of the mean squared element difference. Symmetric,
// non-negative, zero iff all layer matrices agree.
inline double gram_distance(const GramSet& a, const GramSet& b) {
  if (a.grams.size() != b.grams.size() || a.grams.empty())
    throw ShapeError("gram_distance: layer lists differ");
  double total = 0.0;
  for (std::size_t l = 0; l < a.grams.size(); ++l) {
    const auto& [na, ga] = a.grams[l];
    const auto& [nb, gb] = b.grams[l];
    if (na != nb) throw ShapeError("gram_distance: layer order mismatch: " + na + " vs " + nb);
    require_same_shape(ga, gb, "gram_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      double d = ga.v[i] - gb.v[i];
      s += d * d;
    }
    total += s / double(ga.size());
  }
  return total / double(a.grams.size());
}

// d(gram_distance)/dGa, scaled by `upstream`.
inline std::map<std::string, Tensor> gram_distance_backward(const GramSet& a, const GramSet& b,
                                                            double upstream) {
  std::map<std::string, Tensor> out;
  const double layer_norm = 1.0 / double(a.grams.size());
  for (std::size_t l = 0; l < a.grams.size(); ++l) {
    const auto& [name, ga] = a.grams[l];
    const Tensor& gb = b.grams[l].second;
    Tensor dg(ga.shape);
    const double scale = upstream * layer_norm * 2.0 / double(ga.size());
    for (std::size_t i = 0; i < ga.size(); ++i) dg.v[i] = scale * (ga.v[i] - gb.v[i]);
    auto [it, fresh] = out.emplace(name, std::move(dg));
    if (!fresh) throw ShapeError("gram_distance_backward: duplicate layer id " + name);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frozen feature extraction backends.
// ---------------------------------------------------------------------------

class FeatureBackend {
 public:
  virtual ~FeatureBackend() = default;
  virtual std::string kind() const = 0;
  virtual std::vector<std::string> layer_ids() const = 0;
  virtual std::string default_retention_layer() const = 0;
  virtual FeatureMaps extract(const ImageTensor& img, const std::vector<std::string>& layers,
                              SeqTrace* trace = nullptr) const = 0;
  // Gradient of a scalar w.r.t. the input image given gradients at taps.
  virtual Tensor input_gradient(const SeqTrace& trace,
                                const std::map<std::string, Tensor>& dtaps) const = 0;
  virtual std::string fingerprint() const = 0;
};

namespace detail {

inline FeatureMaps taps_from_trace(const SeqNet& net, const SeqTrace& trace,
                                   const std::vector<std::string>& layers) {
  FeatureMaps out;
  for (const auto& id : layers) {
    bool found = false;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      if (net.layers[i].tap == id) {
        out.layers.emplace_back(id, trace.acts[i + 1]);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("feature backend: unknown layer id '" + id + "'");
  }
  return out;
}

}  // namespace detail

inline constexpr std::uint64_t kReferenceFeatureSeed = 20177;
// He-init gain for the reference CNN; chosen so Gram distances between
// dissimilar desk-scale images land on the same order as the contrastive
// margin.
inline constexpr double kReferenceFeatureGain = 2.0;

// Seeded random-weight CNN: 3→16→32→64→128 channels, stride 2 each, ReLU
// taps relu1..relu4. Deterministic and self-contained; the workhorse for
// every desk-scale test.
class ReferenceFeatureBackend : public FeatureBackend {
 public:
  explicit ReferenceFeatureBackend(std::uint64_t seed = kReferenceFeatureSeed) : seed_(seed) {
    Rng root(seed, "features.reference");
    const std::size_t chans[5] = {3, 16, 32, 64, 128};
    for (int i = 0; i < 4; ++i) {
      std::string name = "conv" + std::to_string(i + 1);
      init_conv(net_.params, name, chans[i + 1], chans[i], 3, root.fork(name),
                kReferenceFeatureGain);
      net_.layers.push_back({SeqLayer::Kind::Conv, name, "", 2, 1, 2});
      net_.layers.push_back({SeqLayer::Kind::Relu, "", "relu" + std::to_string(i + 1), 1, 1, 2});
    }
  }

  std::string kind() const override { return "reference"; }

  std::vector<std::string> layer_ids() const override { return net_.taps(); }

  std::string default_retention_layer() const override { return "relu4"; }

  FeatureMaps extract(const ImageTensor& img, const std::vector<std::string>& layers,
                      SeqTrace* trace = nullptr) const override {
    SeqTrace local;
    SeqTrace* tr = trace ? trace : &local;
    seq_forward(net_, img.as_tensor(), tr);
    return detail::taps_from_trace(net_, *tr, layers);
  }

  Tensor input_gradient(const SeqTrace& trace,
                        const std::map<std::string, Tensor>& dtaps) const override {
    return seq_backward(net_, trace, dtaps);
  }

  std::string fingerprint() const override { return params_fingerprint(net_.params); }

  const SeqNet& net() const { return net_; }

 private:
  SeqNet net_;
  std::uint64_t seed_;
};

// Adapter for externally converted VGG-16 weights (archive kind "features",
// arrays conv{block}_{idx}.weight/.bias). Taps relu1_2, relu2_2, relu3_3,
// relu4_3; input standardized with the mean/std recorded in the manifest.
class Vgg16Backend : public FeatureBackend {
 public:
  explicit Vgg16Backend(const std::filesystem::path& weights_path) {
    Archive a = load_archive(weights_path);
    if (a.meta.value("kind", "") != "features")
      throw FormatError("vgg16 backend: archive kind is '" + a.meta.value("kind", std::string("?")) +
                        "', want 'features'");
    mean_ = a.meta.value("input_mean", std::vector<double>{0.485, 0.456, 0.406});
    std_ = a.meta.value("input_std", std::vector<double>{0.229, 0.224, 0.225});
    if (mean_.size() != 3 || std_.size() != 3)
      throw FormatError("vgg16 backend: input_mean/input_std must have 3 entries");

    // conv stack through relu4_3; later blocks are not needed by any loss
    struct Block { int convs; const char* tap; };
    const Block blocks[4] = {{2, "relu1_2"}, {2, "relu2_2"}, {3, "relu3_3"}, {3, "relu4_3"}};
    for (int bi = 0; bi < 4; ++bi) {
      for (int ci = 0; ci < blocks[bi].convs; ++ci) {
        std::string name = "conv" + std::to_string(bi + 1) + "_" + std::to_string(ci + 1);
        Tensor w = a.require(name + ".weight");
        Tensor b = a.require(name + ".bias");
        net_.params[name + ".weight"] = std::move(w);
        net_.params[name + ".bias"] = std::move(b);
        net_.layers.push_back({SeqLayer::Kind::Conv, name, "", 1, 1, 2});
        bool last = ci == blocks[bi].convs - 1;
        net_.layers.push_back(
            {SeqLayer::Kind::Relu, "", last ? std::string(blocks[bi].tap) : std::string(), 1, 1, 2});
      }
      if (bi != 3) net_.layers.push_back({SeqLayer::Kind::MaxPool2, "", "", 2, 0, 2});
    }
  }

  std::string kind() const override { return "vgg16"; }

  std::vector<std::string> layer_ids() const override { return net_.taps(); }

  std::string default_retention_layer() const override { return "relu4_3"; }

  FeatureMaps extract(const ImageTensor& img, const std::vector<std::string>& layers,
                      SeqTrace* trace = nullptr) const override {
    SeqTrace local;
    SeqTrace* tr = trace ? trace : &local;
    seq_forward(net_, standardize(img), tr);
    return detail::taps_from_trace(net_, *tr, layers);
  }

  Tensor input_gradient(const SeqTrace& trace,
                        const std::map<std::string, Tensor>& dtaps) const override {
    Tensor d = seq_backward(net_, trace, dtaps);
    const std::size_t n = d.shape[1] * d.shape[2];
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < n; ++i) d.v[c * n + i] /= std_[c];
    return d;
  }

  std::string fingerprint() const override { return params_fingerprint(net_.params); }

 private:
  Tensor standardize(const ImageTensor& img) const {
    Tensor t = img.as_tensor();
    const std::size_t n = img.pixels();
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < n; ++i) t.v[c * n + i] = (t.v[c * n + i] - mean_[c]) / std_[c];
    return t;
  }

  SeqNet net_;
  std::vector<double> mean_, std_;
};

struct FeatureBackendConfig {
  std::string kind = "reference";  // reference | vgg16
  std::string weights;             // vgg16 archive path
  std::uint64_t seed = kReferenceFeatureSeed;
};

inline std::unique_ptr<FeatureBackend> make_feature_backend(const FeatureBackendConfig& cfg) {
  if (cfg.kind == "reference") return std::make_unique<ReferenceFeatureBackend>(cfg.seed);
  if (cfg.kind == "vgg16") {
    if (cfg.weights.empty()) throw ConfigError("vgg16 feature backend needs a weights path");
    return std::make_unique<Vgg16Backend>(cfg.weights);
  }
  throw ConfigError("unknown feature backend '" + cfg.kind + "' (want reference|vgg16)");
}

}  // namespace scl_lle
