#pragma once

#include <string>
#include <vector>

#include "sflow/census.hpp"
#include "sflow/segmentation.hpp"

namespace sflow {

/// Per-pixel 2D flow with validity.
struct FlowMap {
  int width = 0, height = 0;
  std::vector<double> u, v;
  std::vector<uint8_t> valid_mask;

  FlowMap() = default;
  FlowMap(int w, int h)
      : width(w), height(h), u(size_t(w) * h, 0.0), v(size_t(w) * h, 0.0),
        valid_mask(size_t(w) * h, 0) {}

  bool valid(int x, int y) const { return valid_mask[size_t(y) * width + x] != 0; }
  Vec2 at(int x, int y) const {
    return Vec2(u[size_t(y) * width + x], v[size_t(y) * width + x]);
  }
  void set(int x, int y, const Vec2& f) {
    u[size_t(y) * width + x] = f.x();
    v[size_t(y) * width + x] = f.y();
    valid_mask[size_t(y) * width + x] = 1;
  }
};

struct MaskImage {
  int width = 0, height = 0;
  std::vector<uint8_t> on;

  bool at(int x, int y) const { return on[size_t(y) * width + x] != 0; }
};

struct RgbImage {
  int width = 0, height = 0;
  std::vector<uint8_t> rgb;   // interleaved, 3 bytes per pixel

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), rgb(size_t(w) * h * 3, 0) {}
};

/// 16-bit single-channel PNG, stored value = disparity * 256, 0 = invalid.
DisparityMap read_disparity_png(const std::string& path);
void write_disparity_png(const std::string& path, const DisparityMap& map);

/// 16-bit RGB PNG: u = (ch1 - 2^15)/64, v = (ch2 - 2^15)/64, valid = ch3 != 0.
FlowMap read_flow_png(const std::string& path);
void write_flow_png(const std::string& path, const FlowMap& map);

/// Grayscale intensities in [0,1]; accepts 8/16-bit gray and 8-bit RGB(A)
/// input (converted by luminance).
GrayImage read_gray_png(const std::string& path);
void write_gray_png(const std::string& path, const GrayImage& img);

/// Nonzero pixels are set.
MaskImage read_mask_png(const std::string& path);
void write_mask_png(const std::string& path, const MaskImage& mask);

/// 16-bit single-channel label images for superpixel maps.
std::vector<int32_t> read_label_png(const std::string& path, int* width, int* height);
void write_label_png(const std::string& path, int width, int height,
                     const std::vector<int32_t>& labels);

void write_rgb_png(const std::string& path, const RgbImage& img);

struct EvalMaps {
  DisparityMap d1, d2;
  FlowMap flow;
};

struct EvalCell {
  long long outliers = 0;
  long long total = 0;
  double percent() const { return total == 0 ? 0.0 : 100.0 * double(outliers) / double(total); }
};

/// Outlier rates in the all/bg/fg split (index 0/1/2). A pixel is an outlier
/// when its error exceeds 3 px AND 5% of the true value; SF counts a pixel
/// when any of the three estimates is an outlier.
struct EvalReport {
  EvalCell d1[3], d2[3], fl[3], sf[3];
};

/// Throws DimensionMismatch on differently-sized inputs. Estimates missing at
/// supported ground-truth pixels count as outliers.
EvalReport evaluate(const EvalMaps& est, const EvalMaps& gt, const MaskImage* fg_mask = nullptr,
                    const MaskImage* noc_mask = nullptr);

/// Flow-wheel rendering with hue = direction and saturation = magnitude over
/// max_magnitude; invalid pixels are black, zero flow is white.
RgbImage colorize_flow(const FlowMap& flow, double max_magnitude);

}  // namespace sflow
