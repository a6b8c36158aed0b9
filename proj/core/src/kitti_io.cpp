#include "sflow/kitti_io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <memory>

namespace sflow {

namespace {

struct PngBuffer {
  int width = 0, height = 0;
  int bit_depth = 0, channels = 0;
  std::vector<uint16_t> data;   // host-endian samples, 8-bit widened

  uint16_t at(int x, int y, int c) const {
    return data[(size_t(y) * width + x) * channels + c];
  }
};

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};

PngBuffer read_png(const std::string& path) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw FormatError("png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png: allocation failure reading " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("png: decode failure in " + path);
  }
  png_init_io(png, fp.get());
  int transforms = PNG_TRANSFORM_PACKING | PNG_TRANSFORM_EXPAND;
  if constexpr (std::endian::native == std::endian::little) {
    transforms |= PNG_TRANSFORM_SWAP_ENDIAN;
  }
  png_read_png(png, info, transforms, nullptr);

  PngBuffer out;
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  out.channels = png_get_channels(png, info);
  out.data.resize(size_t(out.width) * out.height * out.channels);

  png_bytepp rows = png_get_rows(png, info);
  for (int y = 0; y < out.height; ++y) {
    if (out.bit_depth == 16) {
      const uint16_t* row = reinterpret_cast<const uint16_t*>(rows[y]);
      for (int i = 0; i < out.width * out.channels; ++i) {
        out.data[size_t(y) * out.width * out.channels + i] = row[i];
      }
    } else {
      const uint8_t* row = rows[y];
      for (int i = 0; i < out.width * out.channels; ++i) {
        out.data[size_t(y) * out.width * out.channels + i] = row[i];
      }
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png(const std::string& path, int width, int height, int bit_depth, int channels,
               const std::vector<uint16_t>& data) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw FormatError("png: cannot open " + path + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("png: allocation failure writing " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("png: encode failure in " + path);
  }
  png_init_io(png, fp.get());

  int color_type = PNG_COLOR_TYPE_GRAY;
  if (channels == 3) color_type = PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);

  std::vector<uint8_t> bytes;
  std::vector<png_bytep> rows(height);
  const size_t row_samples = size_t(width) * channels;
  if (bit_depth == 16) {
    bytes.resize(size_t(height) * row_samples * 2);
    for (int y = 0; y < height; ++y) {
      uint8_t* row = bytes.data() + size_t(y) * row_samples * 2;
      for (size_t i = 0; i < row_samples; ++i) {
        const uint16_t s = data[size_t(y) * row_samples + i];
        row[2 * i] = uint8_t(s >> 8);       // PNG is big-endian
        row[2 * i + 1] = uint8_t(s & 0xff);
      }
      rows[y] = row;
    }
  } else {
    bytes.resize(size_t(height) * row_samples);
    for (int y = 0; y < height; ++y) {
      uint8_t* row = bytes.data() + size_t(y) * row_samples;
      for (size_t i = 0; i < row_samples; ++i) {
        row[i] = uint8_t(data[size_t(y) * row_samples + i]);
      }
      rows[y] = row;
    }
  }
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

DisparityMap read_disparity_png(const std::string& path) {
  const PngBuffer buf = read_png(path);
  if (buf.bit_depth != 16 || buf.channels != 1) {
    throw FormatError("read_disparity_png: expected 16-bit single-channel PNG: " + path);
  }
  DisparityMap out(buf.width, buf.height);
  for (int y = 0; y < buf.height; ++y) {
    for (int x = 0; x < buf.width; ++x) {
      const uint16_t s = buf.at(x, y, 0);
      if (s != 0) out.at(x, y) = double(s) / 256.0;
    }
  }
  return out;
}

void write_disparity_png(const std::string& path, const DisparityMap& map) {
  std::vector<uint16_t> data(size_t(map.width) * map.height, 0);
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      if (!map.valid(x, y)) continue;
      const double s = std::floor(map.at(x, y) * 256.0 + 0.5);   // round half up
      data[size_t(y) * map.width + x] = uint16_t(std::clamp(s, 0.0, 65535.0));
    }
  }
  write_png(path, map.width, map.height, 16, 1, data);
}

FlowMap read_flow_png(const std::string& path) {
  const PngBuffer buf = read_png(path);
  if (buf.bit_depth != 16 || buf.channels != 3) {
    throw FormatError("read_flow_png: expected 16-bit 3-channel PNG: " + path);
  }
  FlowMap out(buf.width, buf.height);
  for (int y = 0; y < buf.height; ++y) {
    for (int x = 0; x < buf.width; ++x) {
      if (buf.at(x, y, 2) == 0) continue;
      out.set(x, y, Vec2((double(buf.at(x, y, 0)) - 32768.0) / 64.0,
                         (double(buf.at(x, y, 1)) - 32768.0) / 64.0));
    }
  }
  return out;
}

void write_flow_png(const std::string& path, const FlowMap& map) {
  std::vector<uint16_t> data(size_t(map.width) * map.height * 3, 0);
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      if (!map.valid(x, y)) continue;
      const Vec2 f = map.at(x, y);
      const double ue = std::floor(f.x() * 64.0 + 32768.0 + 0.5);
      const double ve = std::floor(f.y() * 64.0 + 32768.0 + 0.5);
      uint16_t* px = &data[(size_t(y) * map.width + x) * 3];
      px[0] = uint16_t(std::clamp(ue, 0.0, 65535.0));
      px[1] = uint16_t(std::clamp(ve, 0.0, 65535.0));
      px[2] = 1;
    }
  }
  write_png(path, map.width, map.height, 16, 3, data);
}

GrayImage read_gray_png(const std::string& path) {
  const PngBuffer buf = read_png(path);
  GrayImage out(buf.width, buf.height);
  const double scale = buf.bit_depth == 16 ? 1.0 / 65535.0 : 1.0 / 255.0;
  for (int y = 0; y < buf.height; ++y) {
    for (int x = 0; x < buf.width; ++x) {
      double v;
      if (buf.channels == 1 || buf.channels == 2) {
        v = buf.at(x, y, 0) * scale;
      } else {
        v = (0.299 * buf.at(x, y, 0) + 0.587 * buf.at(x, y, 1) + 0.114 * buf.at(x, y, 2)) * scale;
      }
      out.at(x, y) = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

void write_gray_png(const std::string& path, const GrayImage& img) {
  std::vector<uint16_t> data(size_t(img.width) * img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      data[size_t(y) * img.width + x] =
          uint16_t(std::clamp(std::floor(img.at(x, y) * 255.0 + 0.5), 0.0, 255.0));
    }
  }
  write_png(path, img.width, img.height, 8, 1, data);
}

MaskImage read_mask_png(const std::string& path) {
  const PngBuffer buf = read_png(path);
  MaskImage out;
  out.width = buf.width;
  out.height = buf.height;
  out.on.assign(size_t(buf.width) * buf.height, 0);
  for (int y = 0; y < buf.height; ++y) {
    for (int x = 0; x < buf.width; ++x) {
      for (int c = 0; c < buf.channels; ++c) {
        if (buf.at(x, y, c) != 0) {
          out.on[size_t(y) * buf.width + x] = 1;
          break;
        }
      }
    }
  }
  return out;
}

void write_mask_png(const std::string& path, const MaskImage& mask) {
  std::vector<uint16_t> data(mask.on.begin(), mask.on.end());
  for (auto& v : data) v = v ? 255 : 0;
  write_png(path, mask.width, mask.height, 8, 1, data);
}

std::vector<int32_t> read_label_png(const std::string& path, int* width, int* height) {
  const PngBuffer buf = read_png(path);
  if (buf.channels != 1) {
    throw FormatError("read_label_png: expected single-channel PNG: " + path);
  }
  *width = buf.width;
  *height = buf.height;
  std::vector<int32_t> labels(size_t(buf.width) * buf.height);
  for (size_t i = 0; i < labels.size(); ++i) labels[i] = buf.data[i];
  return labels;
}

void write_label_png(const std::string& path, int width, int height,
                     const std::vector<int32_t>& labels) {
  std::vector<uint16_t> data(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    data[i] = uint16_t(std::clamp(labels[i], 0, 65535));
  }
  write_png(path, width, height, 16, 1, data);
}

void write_rgb_png(const std::string& path, const RgbImage& img) {
  std::vector<uint16_t> data(img.rgb.begin(), img.rgb.end());
  write_png(path, img.width, img.height, 8, 3, data);
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

bool is_outlier(double err, double gt_magnitude) {
  return err > 3.0 && err > 0.05 * std::abs(gt_magnitude);
}

void tally(EvalCell cells[3], bool fg, bool outlier) {
  ++cells[0].total;
  cells[0].outliers += outlier;
  EvalCell& split = cells[fg ? 2 : 1];
  ++split.total;
  split.outliers += outlier;
}

}  // namespace

EvalReport evaluate(const EvalMaps& est, const EvalMaps& gt, const MaskImage* fg_mask,
                    const MaskImage* noc_mask) {
  const int w = gt.d1.width, h = gt.d1.height;
  auto check = [&](int mw, int mh, const char* what) {
    if (mw != w || mh != h) {
      throw DimensionMismatch(std::string("evaluate: dimension mismatch in ") + what);
    }
  };
  check(gt.d2.width, gt.d2.height, "gt d2");
  check(gt.flow.width, gt.flow.height, "gt flow");
  check(est.d1.width, est.d1.height, "est d1");
  check(est.d2.width, est.d2.height, "est d2");
  check(est.flow.width, est.flow.height, "est flow");
  if (fg_mask) check(fg_mask->width, fg_mask->height, "fg mask");
  if (noc_mask) check(noc_mask->width, noc_mask->height, "noc mask");

  EvalReport rep;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (noc_mask && !noc_mask->at(x, y)) continue;
      const bool fg = fg_mask && fg_mask->at(x, y);

      const bool has_d1 = gt.d1.valid(x, y);
      const bool has_d2 = gt.d2.valid(x, y);
      const bool has_fl = gt.flow.valid(x, y);

      bool out_d1 = false, out_d2 = false, out_fl = false;
      if (has_d1) {
        out_d1 = !est.d1.valid(x, y) ||
                 is_outlier(std::abs(est.d1.at(x, y) - gt.d1.at(x, y)), gt.d1.at(x, y));
        tally(rep.d1, fg, out_d1);
      }
      if (has_d2) {
        out_d2 = !est.d2.valid(x, y) ||
                 is_outlier(std::abs(est.d2.at(x, y) - gt.d2.at(x, y)), gt.d2.at(x, y));
        tally(rep.d2, fg, out_d2);
      }
      if (has_fl) {
        out_fl = !est.flow.valid(x, y) ||
                 is_outlier((est.flow.at(x, y) - gt.flow.at(x, y)).norm(), gt.flow.at(x, y).norm());
        tally(rep.fl, fg, out_fl);
      }
      if (has_d1 && has_d2 && has_fl) {
        tally(rep.sf, fg, out_d1 || out_d2 || out_fl);
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Flow coloring

namespace {

// Middlebury-style color wheel: 55 hues over 6 ramps.
std::vector<std::array<double, 3>> make_color_wheel() {
  const int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  std::vector<std::array<double, 3>> wheel;
  auto ramp = [&](int n, int hold, int rise, bool falling) {
    for (int i = 0; i < n; ++i) {
      std::array<double, 3> c = {0, 0, 0};
      c[hold] = 1.0;
      c[rise] = falling ? 1.0 - double(i) / n : double(i) / n;
      wheel.push_back(c);
    }
  };
  ramp(RY, 0, 1, false);   // red -> yellow
  ramp(YG, 1, 0, true);    // yellow -> green
  ramp(GC, 1, 2, false);   // green -> cyan
  ramp(CB, 2, 1, true);    // cyan -> blue
  ramp(BM, 2, 0, false);   // blue -> magenta
  ramp(MR, 0, 2, true);    // magenta -> red
  return wheel;
}

}  // namespace

RgbImage colorize_flow(const FlowMap& flow, double max_magnitude) {
  static const std::vector<std::array<double, 3>> wheel = make_color_wheel();
  const int n = static_cast<int>(wheel.size());
  const double norm = max_magnitude > 0 ? max_magnitude : 1.0;

  RgbImage img(flow.width, flow.height);
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) {
      uint8_t* px = &img.rgb[(size_t(y) * flow.width + x) * 3];
      if (!flow.valid(x, y)) {
        px[0] = px[1] = px[2] = 0;
        continue;
      }
      const Vec2 f = flow.at(x, y) / norm;
      const double rad = std::min(f.norm(), 1.0);
      const double angle = std::atan2(-f.y(), -f.x()) / M_PI;   // [-1, 1]
      const double fk = (angle + 1.0) / 2.0 * (n - 1);
      const int k0 = std::min(static_cast<int>(fk), n - 1);
      const int k1 = (k0 + 1) % n;
      const double frac = fk - k0;
      for (int c = 0; c < 3; ++c) {
        double col = (1.0 - frac) * wheel[k0][c] + frac * wheel[k1][c];
        col = 1.0 - rad * (1.0 - col);   // radius 0 -> white
        px[c] = uint8_t(std::lround(255.0 * std::clamp(col, 0.0, 1.0)));
      }
    }
  }
  return img;
}

}  // namespace sflow
