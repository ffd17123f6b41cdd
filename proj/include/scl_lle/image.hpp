#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "scl_lle/common.hpp"
#include "scl_lle/tensor.hpp"

namespace scl_lle {

// RGB float image in [0,1], channel-major (3×H×W). The universal pixel
// currency of the toolkit.
struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // 3*H*W, [c][y][x]

  ImageTensor() = default;
  ImageTensor(int h, int w) : height(h), width(w), data(std::size_t(3) * h * w, 0.0) {}

  std::size_t idx(int c, int y, int x) const {
    return (std::size_t(c) * height + y) * width + x;
  }
  double& at(int c, int y, int x) { return data[idx(c, y, x)]; }
  double at(int c, int y, int x) const { return data[idx(c, y, x)]; }

  std::size_t pixels() const { return std::size_t(height) * width; }
  std::size_t size() const { return data.size(); }

  bool valid() const {
    if (height <= 0 || width <= 0 || data.size() != std::size_t(3) * height * width) return false;
    for (double v : data)
      if (!(v >= 0.0 && v <= 1.0)) return false;  // also rejects NaN
    return true;
  }

  Tensor as_tensor() const {
    Tensor t({3, std::size_t(height), std::size_t(width)});
    t.v = data;
    return t;
  }

  static ImageTensor from_tensor(const Tensor& t) {
    if (t.shape.size() != 3 || t.shape[0] != 3)
      throw ShapeError("ImageTensor::from_tensor: want 3×H×W, got " + t.shape_str());
    ImageTensor img(int(t.shape[1]), int(t.shape[2]));
    img.data = t.v;
    return img;
  }
};

enum class BrightnessMode { ChannelMean, Luma601 };

inline BrightnessMode brightness_mode_from_string(const std::string& s) {
  if (s == "mean") return BrightnessMode::ChannelMean;
  if (s == "luma601") return BrightnessMode::Luma601;
  throw ConfigError("unknown brightness_mode '" + s + "' (want mean|luma601)");
}

inline std::string to_string(BrightnessMode m) {
  return m == BrightnessMode::ChannelMean ? "mean" : "luma601";
}

struct HistogramStats {
  std::array<std::array<std::uint64_t, 256>, 3> bins{};
  double mean_brightness = 0.0;
};

// round-half-up 8-bit quantization, shared by save_image and histogram
inline int quantize8(double v) {
  int q = int(std::floor(v * 255.0 + 0.5));
  return q < 0 ? 0 : (q > 255 ? 255 : q);
}

// --------------------------------------------------------------------------
// Decoding / encoding (OpenCV imgcodecs behind the module contract).
// --------------------------------------------------------------------------

inline ImageTensor load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("load_image: no such file: " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw FormatError("load_image: cannot decode " + path.string());
  int depth = m.depth();
  if (depth != CV_8U && depth != CV_16U)
    throw FormatError("load_image: unsupported bit depth in " + path.string() +
                      " (want 8- or 16-bit integer samples)");
  if (m.channels() != 1 && m.channels() != 3 && m.channels() != 4)
    throw FormatError("load_image: unsupported channel count " + std::to_string(m.channels()) +
                      " in " + path.string());
  const double scale = depth == CV_8U ? 1.0 / 255.0 : 1.0 / 65535.0;
  ImageTensor img(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    for (int x = 0; x < m.cols; ++x) {
      double r, g, b;
      if (m.channels() == 1) {
        double v = depth == CV_8U ? m.at<std::uint8_t>(y, x) : m.at<std::uint16_t>(y, x);
        r = g = b = v * scale;
      } else if (m.channels() == 3) {
        // OpenCV stores BGR
        if (depth == CV_8U) {
          auto px = m.at<cv::Vec3b>(y, x);
          b = px[0] * scale; g = px[1] * scale; r = px[2] * scale;
        } else {
          auto px = m.at<cv::Vec3w>(y, x);
          b = px[0] * scale; g = px[1] * scale; r = px[2] * scale;
        }
      } else {  // BGRA: alpha dropped
        if (depth == CV_8U) {
          auto px = m.at<cv::Vec4b>(y, x);
          b = px[0] * scale; g = px[1] * scale; r = px[2] * scale;
        } else {
          auto px = m.at<cv::Vec<std::uint16_t, 4>>(y, x);
          b = px[0] * scale; g = px[1] * scale; r = px[2] * scale;
        }
      }
      img.at(0, y, x) = r;
      img.at(1, y, x) = g;
      img.at(2, y, x) = b;
    }
  }
  return img;
}

inline void save_image(const ImageTensor& img, const std::filesystem::path& path) {
  if (!img.valid()) throw ShapeError("save_image: invalid image");
  cv::Mat m(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      m.at<cv::Vec3b>(y, x) = cv::Vec3b(std::uint8_t(quantize8(img.at(2, y, x))),
                                        std::uint8_t(quantize8(img.at(1, y, x))),
                                        std::uint8_t(quantize8(img.at(0, y, x))));
    }
  }
  std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 6};
  if (!cv::imwrite(path.string(), m, params))
    throw IoError("save_image: cannot write " + path.string());
}

// Single-channel 8-bit I/O for semantic label maps (values are class ids,
// never rescaled).
inline std::vector<std::uint8_t> load_gray8(const std::filesystem::path& path, int* h, int* w) {
  if (!std::filesystem::exists(path)) throw IoError("load_gray8: no such file: " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw FormatError("load_gray8: cannot decode " + path.string());
  if (m.type() != CV_8UC1)
    throw FormatError("load_gray8: " + path.string() + " must be single-channel 8-bit");
  std::vector<std::uint8_t> out(std::size_t(m.rows) * m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) out[std::size_t(y) * m.cols + x] = m.at<std::uint8_t>(y, x);
  *h = m.rows;
  *w = m.cols;
  return out;
}

inline void save_gray8(const std::vector<std::uint8_t>& labels, int h, int w,
                       const std::filesystem::path& path) {
  if (labels.size() != std::size_t(h) * w) throw ShapeError("save_gray8: size mismatch");
  cv::Mat m(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at<std::uint8_t>(y, x) = labels[std::size_t(y) * w + x];
  if (!cv::imwrite(path.string(), m)) throw IoError("save_gray8: cannot write " + path.string());
}

// --------------------------------------------------------------------------
// Pixel operations
// --------------------------------------------------------------------------

// Bilinear, half-pixel-center (align-corners-false) sampling.
inline ImageTensor resize(const ImageTensor& img, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize: output dims must be positive");
  ImageTensor out(out_h, out_w);
  const double sy = double(img.height) / out_h;
  const double sx = double(img.width) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    int y0 = int(std::floor(fy));
    double ty = fy - y0;
    int y0c = std::clamp(y0, 0, img.height - 1);
    int y1c = std::clamp(y0 + 1, 0, img.height - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      int x0 = int(std::floor(fx));
      double tx = fx - x0;
      int x0c = std::clamp(x0, 0, img.width - 1);
      int x1c = std::clamp(x0 + 1, 0, img.width - 1);
      for (int c = 0; c < 3; ++c) {
        double top = img.at(c, y0c, x0c) * (1 - tx) + img.at(c, y0c, x1c) * tx;
        double bot = img.at(c, y1c, x0c) * (1 - tx) + img.at(c, y1c, x1c) * tx;
        double v = top * (1 - ty) + bot * ty;
        out.at(c, oy, ox) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

// Darkening-only gamma transform: out = in^gamma, gamma >= 1.
inline ImageTensor gamma_darken(const ImageTensor& img, double gamma) {
  if (!(gamma >= 1.0)) throw ConfigError("gamma_darken: gamma must be >= 1 (got " +
                                         std::to_string(gamma) + ")");
  ImageTensor out = img;
  if (gamma == 1.0) return out;
  for (double& v : out.data) v = std::pow(v, gamma);
  return out;
}

// Per-pixel brightness in [0,1]; channel mean by default, Rec.601 luma as the
// configurable alternative.
inline Tensor brightness_map(const ImageTensor& img, BrightnessMode mode = BrightnessMode::ChannelMean) {
  Tensor b({std::size_t(img.height), std::size_t(img.width)});
  const std::size_t n = img.pixels();
  const double* r = img.data.data();
  const double* g = r + n;
  const double* bl = g + n;
  if (mode == BrightnessMode::ChannelMean) {
    for (std::size_t i = 0; i < n; ++i) b.v[i] = (r[i] + g[i] + bl[i]) / 3.0;
  } else {
    for (std::size_t i = 0; i < n; ++i) b.v[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * bl[i];
  }
  return b;
}

inline HistogramStats histogram(const ImageTensor& img, BrightnessMode mode = BrightnessMode::ChannelMean) {
  HistogramStats h{};
  const std::size_t n = img.pixels();
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) h.bins[c][quantize8(img.data[c * n + i])]++;
  Tensor b = brightness_map(img, mode);
  h.mean_brightness = mean(b);
  return h;
}

// Scalar mean intensity over all channels and pixels (the expectation E(·)
// used by the contrastive brightness hinge).
inline double expectation(const ImageTensor& img) {
  double s = 0.0;
  for (double v : img.data) s += v;
  return img.data.empty() ? 0.0 : s / double(img.data.size());
}

}  // namespace scl_lle
