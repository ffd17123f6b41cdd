#pragma once

#include <memory>
#include <string>
#include <vector>

#include "scl_lle/checkpoint.hpp"
#include "scl_lle/image.hpp"
#include "scl_lle/nn.hpp"

namespace scl_lle {

inline constexpr int kIgnoreIndex = 255;

// H×W integer class labels, Cityscapes labelTrainIds convention (255 = ignore).
struct LabelMap {
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<std::uint16_t> labels;

  LabelMap() = default;
  LabelMap(int h, int w, int s)
      : height(h), width(w), classes(s), labels(std::size_t(h) * w, 0) {}

  std::uint16_t at(int y, int x) const { return labels[std::size_t(y) * width + x]; }
  std::uint16_t& at(int y, int x) { return labels[std::size_t(y) * width + x]; }

  bool valid() const {
    if (height <= 0 || width <= 0 || classes <= 0) return false;
    if (labels.size() != std::size_t(height) * width) return false;
    for (auto l : labels)
      if (l >= classes && l != kIgnoreIndex) return false;
    return true;
  }
};

inline LabelMap load_label(const std::filesystem::path& path, int classes) {
  int h = 0, w = 0;
  std::vector<std::uint8_t> raw = load_gray8(path, &h, &w);
  LabelMap m(h, w, classes);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] >= classes && raw[i] != kIgnoreIndex)
      throw FormatError("label " + path.string() + ": value " + std::to_string(int(raw[i])) +
                        " out of range for " + std::to_string(classes) + " classes");
    m.labels[i] = raw[i];
  }
  return m;
}

inline void save_label(const LabelMap& m, const std::filesystem::path& path) {
  std::vector<std::uint8_t> raw(m.labels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = std::uint8_t(m.labels[i]);
  save_gray8(raw, m.height, m.width, path);
}

// Nearest-neighbor label resize (half-pixel centers); never invents classes.
inline LabelMap resize_labels(const LabelMap& m, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_labels: output dims must be positive");
  LabelMap out(out_h, out_w, m.classes);
  const double sy = double(m.height) / out_h;
  const double sx = double(m.width) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    int iy = std::clamp(int(std::floor((oy + 0.5) * sy)), 0, m.height - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      int ix = std::clamp(int(std::floor((ox + 0.5) * sx)), 0, m.width - 1);
      out.at(oy, ox) = m.at(iy, ix);
    }
  }
  return out;
}

// S×H×W per-pixel class probabilities; sums to 1 per pixel within 1e-5.
struct ProbMap {
  int classes = 0;
  int height = 0;
  int width = 0;
  Tensor probs;

  ProbMap() = default;
  ProbMap(int s, int h, int w)
      : classes(s), height(h), width(w), probs({std::size_t(s), std::size_t(h), std::size_t(w)}) {}

  double at(int s, int y, int x) const { return probs.at3(s, y, x); }
  double& at(int s, int y, int x) { return probs.at3(s, y, x); }

  bool valid() const {
    if (classes <= 0 || height <= 0 || width <= 0) return false;
    if (probs.size() != std::size_t(classes) * height * width) return false;
    for (double v : probs.v)
      if (!(v >= 0.0 && v <= 1.0)) return false;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        double s = 0.0;
        for (int c = 0; c < classes; ++c) s += at(c, y, x);
        if (std::abs(s - 1.0) > 1e-5) return false;
      }
    }
    return true;
  }

  LabelMap argmax() const {
    LabelMap out(height, width, classes);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        int best = 0;
        for (int c = 1; c < classes; ++c)
          if (at(c, y, x) > at(best, y, x)) best = c;
        out.at(y, x) = std::uint16_t(best);
      }
    }
    return out;
  }
};

// Exact one-hot encoding; ignore pixels get the uniform distribution and are
// flagged in the optional mask (1 = ignored).
inline ProbMap one_hot(const LabelMap& labels, int s_count,
                       std::vector<std::uint8_t>* ignore_mask = nullptr) {
  ProbMap p(s_count, labels.height, labels.width);
  if (ignore_mask) ignore_mask->assign(labels.labels.size(), 0);
  for (int y = 0; y < labels.height; ++y) {
    for (int x = 0; x < labels.width; ++x) {
      std::uint16_t l = labels.at(y, x);
      if (l == kIgnoreIndex) {
        for (int c = 0; c < s_count; ++c) p.at(c, y, x) = 1.0 / s_count;
        if (ignore_mask) (*ignore_mask)[std::size_t(y) * labels.width + x] = 1;
      } else if (l < s_count) {
        p.at(l, y, x) = 1.0;
      } else {
        throw FormatError("one_hot: label " + std::to_string(int(l)) + " >= class count " +
                          std::to_string(s_count));
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Frozen segmentation backends.
// ---------------------------------------------------------------------------

class SegBackend {
 public:
  virtual ~SegBackend() = default;
  virtual std::string kind() const = 0;
  virtual int num_classes() const = 0;
  // true if segment() depends on the image (so gradients flow through it)
  virtual bool differentiable() const = 0;
  // ground_truth is consulted only by the oracle backend; may be null otherwise
  virtual ProbMap segment(const ImageTensor& img, const LabelMap* ground_truth,
                          SeqTrace* trace = nullptr) const = 0;
  virtual Tensor input_gradient(const SeqTrace& trace, const Tensor& dprobs) const = 0;
  virtual std::string fingerprint() const = 0;
};

// Returns one_hot(ground truth): the cross-entropy term becomes a constant,
// isolating the brightness-variance term in tests.
class OracleSegBackend : public SegBackend {
 public:
  explicit OracleSegBackend(int classes) : classes_(classes) {}

  std::string kind() const override { return "oracle"; }
  int num_classes() const override { return classes_; }
  bool differentiable() const override { return false; }

  ProbMap segment(const ImageTensor& img, const LabelMap* ground_truth,
                  SeqTrace* trace = nullptr) const override {
    (void)trace;
    if (!ground_truth) throw ConfigError("oracle segmenter needs ground-truth labels");
    if (ground_truth->height != img.height || ground_truth->width != img.width)
      throw ShapeError("oracle segmenter: label/image size mismatch");
    return one_hot(*ground_truth, classes_);
  }

  Tensor input_gradient(const SeqTrace&, const Tensor& dprobs) const override {
    Tensor zero({3, dprobs.shape[1], dprobs.shape[2]});
    return zero;
  }

  std::string fingerprint() const override { return Sha1::hex("oracle"); }

 private:
  int classes_;
};

inline constexpr std::uint64_t kTinyCnnSeed = 31337;

// Seeded 3-layer fully convolutional net with a softmax head; differentiable
// w.r.t. the image, used for end-to-end gradient tests of the CE term.
class TinyCnnSegBackend : public SegBackend {
 public:
  explicit TinyCnnSegBackend(int classes, std::uint64_t seed = kTinyCnnSeed) : classes_(classes) {
    Rng root(seed, "segmenter.tinycnn");
    const std::size_t chans[4] = {3, 8, 8, std::size_t(classes)};
    for (int i = 0; i < 3; ++i) {
      std::string name = "conv" + std::to_string(i + 1);
      init_conv(net_.params, name, chans[i + 1], chans[i], 3, root.fork(name));
      net_.layers.push_back({SeqLayer::Kind::Conv, name, "", 1, 1, 2});
      if (i != 2) net_.layers.push_back({SeqLayer::Kind::Relu, "", "", 1, 1, 2});
    }
    net_.layers.push_back({SeqLayer::Kind::Softmax, "", "probs", 1, 1, 2});
  }

  std::string kind() const override { return "tinycnn"; }
  int num_classes() const override { return classes_; }
  bool differentiable() const override { return true; }

  ProbMap segment(const ImageTensor& img, const LabelMap*,
                  SeqTrace* trace = nullptr) const override {
    SeqTrace local;
    SeqTrace* tr = trace ? trace : &local;
    Tensor out = seq_forward(net_, img.as_tensor(), tr);
    ProbMap p(classes_, img.height, img.width);
    p.probs = std::move(out);
    return p;
  }

  Tensor input_gradient(const SeqTrace& trace, const Tensor& dprobs) const override {
    return seq_backward(net_, trace, {{"probs", dprobs}});
  }

  std::string fingerprint() const override { return params_fingerprint(net_.params); }

 private:
  SeqNet net_;
  int classes_;
};

// Weight-file adapter for externally converted frozen segmentation networks.
// The archive manifest declares a sequential layer list (conv / relu /
// maxpool2 / upsample / softmax); reproducing any particular pretrained
// architecture beyond that is out of scope.
class FcnSegBackend : public SegBackend {
 public:
  explicit FcnSegBackend(const std::filesystem::path& weights_path) {
    Archive a = load_archive(weights_path);
    if (a.meta.value("kind", "") != "segmenter")
      throw FormatError("segmenter adapter: archive kind is '" +
                        a.meta.value("kind", std::string("?")) + "', want 'segmenter'");
    classes_ = a.meta.at("classes").get<int>();
    for (const auto& le : a.meta.at("layers")) {
      std::string op = le.at("op").get<std::string>();
      SeqLayer l;
      if (op == "conv") {
        l.kind = SeqLayer::Kind::Conv;
        l.param = le.at("name").get<std::string>();
        l.stride = le.value("stride", 1);
        l.pad = le.value("pad", 1);
        net_.params[l.param + ".weight"] = a.require(l.param + ".weight");
        net_.params[l.param + ".bias"] = a.require(l.param + ".bias");
      } else if (op == "relu") {
        l.kind = SeqLayer::Kind::Relu;
      } else if (op == "maxpool2") {
        l.kind = SeqLayer::Kind::MaxPool2;
      } else if (op == "upsample") {
        l.kind = SeqLayer::Kind::UpsampleNearest;
        l.factor = le.value("factor", 2);
      } else if (op == "softmax") {
        l.kind = SeqLayer::Kind::Softmax;
        l.tap = "probs";
      } else {
        throw FormatError("segmenter adapter: unknown layer op '" + op + "'");
      }
      net_.layers.push_back(std::move(l));
    }
    if (net_.layers.empty() || net_.layers.back().kind != SeqLayer::Kind::Softmax)
      throw FormatError("segmenter adapter: layer list must end with softmax");
  }

  std::string kind() const override { return "deeplab"; }
  int num_classes() const override { return classes_; }
  bool differentiable() const override { return true; }

  ProbMap segment(const ImageTensor& img, const LabelMap*,
                  SeqTrace* trace = nullptr) const override {
    SeqTrace local;
    SeqTrace* tr = trace ? trace : &local;
    Tensor out = seq_forward(net_, img.as_tensor(), tr);
    if (out.shape[1] != std::size_t(img.height) || out.shape[2] != std::size_t(img.width))
      throw ShapeError("segmenter adapter: output " + out.shape_str() +
                       " does not match input resolution; add upsample layers");
    ProbMap p(classes_, img.height, img.width);
    p.probs = std::move(out);
    return p;
  }

  Tensor input_gradient(const SeqTrace& trace, const Tensor& dprobs) const override {
    return seq_backward(net_, trace, {{"probs", dprobs}});
  }

  std::string fingerprint() const override { return params_fingerprint(net_.params); }

 private:
  SeqNet net_;
  int classes_ = 0;
};

struct SegBackendConfig {
  std::string kind = "oracle";  // oracle | tinycnn | deeplab
  std::string weights;          // deeplab adapter archive
  int classes = 19;             // Cityscapes train classes
  std::uint64_t seed = kTinyCnnSeed;
};

inline std::unique_ptr<SegBackend> make_seg_backend(const SegBackendConfig& cfg) {
  if (cfg.classes < 1) throw ConfigError("segmenter: class count must be positive");
  if (cfg.kind == "oracle") return std::make_unique<OracleSegBackend>(cfg.classes);
  if (cfg.kind == "tinycnn") return std::make_unique<TinyCnnSegBackend>(cfg.classes, cfg.seed);
  if (cfg.kind == "deeplab") {
    if (cfg.weights.empty()) throw ConfigError("deeplab segmenter needs a weights path");
    return std::make_unique<FcnSegBackend>(cfg.weights);
  }
  throw ConfigError("unknown segmenter backend '" + cfg.kind + "' (want oracle|tinycnn|deeplab)");
}

}  // namespace scl_lle
