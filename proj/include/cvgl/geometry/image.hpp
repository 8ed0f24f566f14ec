#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cvgl/core.hpp"
#include "cvgl/io.hpp"

namespace cvgl {

// Row-major H x W x C intensity grid, intensities in [0, 1].
class ImageBuffer {
 public:
  ImageBuffer() = default;

  ImageBuffer(std::size_t width, std::size_t height, std::size_t channels, float fill = 0.0f)
      : width_(width), height_(height), channels_(channels),
        data_(width * height * channels, fill) {
    require(channels == 1 || channels == 3, "ImageBuffer: channels must be 1 or 3");
    require(fill >= 0.0f && fill <= 1.0f, "ImageBuffer: fill outside [0,1]");
  }

  ImageBuffer(std::size_t width, std::size_t height, std::size_t channels, std::vector<float> data)
      : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
    require(channels == 1 || channels == 3, "ImageBuffer: channels must be 1 or 3");
    require(data_.size() == width * height * channels, "ImageBuffer: data length mismatch");
    for (float v : data_) require(v >= 0.0f && v <= 1.0f, "ImageBuffer: intensity outside [0,1]");
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(std::size_t x, std::size_t y, std::size_t c) {
    return data_[(y * width_ + x) * channels_ + c];
  }
  float at(std::size_t x, std::size_t y, std::size_t c) const {
    return data_[(y * width_ + x) * channels_ + c];
  }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  void clamp() {
    for (float& v : data_) v = std::clamp(v, 0.0f, 1.0f);
  }

  bool same_shape(const ImageBuffer& o) const {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::size_t channels_ = 0;
  std::vector<float> data_;
};

// One flag per pixel of an associated ImageBuffer.
class ValidMask {
 public:
  ValidMask() = default;
  ValidMask(std::size_t width, std::size_t height)
      : width_(width), height_(height), bits_(width * height, 0) {}

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  bool operator()(std::size_t x, std::size_t y) const { return bits_[y * width_ + x] != 0; }
  void set(std::size_t x, std::size_t y, bool v) { bits_[y * width_ + x] = v ? 1 : 0; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<std::uint8_t> bits_;
};

// ---------------------------------------------------------------------------
// CVIM container: "CVIM", u32 version=1, u64 width, u64 height, u64 channels,
// then width*height*channels row-major bytes. Little-endian.

inline constexpr std::uint32_t kCvimVersion = 1;

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline std::vector<char> encode_cvim(const ImageBuffer& img) {
  io::ByteWriter w;
  w.magic("CVIM");
  w.put<std::uint32_t>(kCvimVersion);
  w.put<std::uint64_t>(img.width());
  w.put<std::uint64_t>(img.height());
  w.put<std::uint64_t>(img.channels());
  std::vector<std::uint8_t> bytes(img.size());
  std::transform(img.data().begin(), img.data().end(), bytes.begin(), quantize);
  w.raw(bytes.data(), bytes.size());
  return w.bytes();
}

inline ImageBuffer decode_cvim(io::ByteReader& r) {
  r.expect_magic("CVIM");
  const auto version = r.get<std::uint32_t>();
  if (version != kCvimVersion) throw ContractError(r.name() + ": unsupported CVIM version");
  const auto width = r.get<std::uint64_t>();
  const auto height = r.get<std::uint64_t>();
  const auto channels = r.get<std::uint64_t>();
  if (channels != 1 && channels != 3) throw ContractError(r.name() + ": bad channel count");
  const std::size_t n = width * height * channels;
  const char* p = r.take(n);
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i)
    data[i] = static_cast<float>(static_cast<unsigned char>(p[i])) / 255.0f;
  if (!r.at_end()) throw ContractError(r.name() + ": trailing bytes after CVIM payload");
  return ImageBuffer(width, height, channels, std::move(data));
}

inline void write_cvim(const std::filesystem::path& path, const ImageBuffer& img) {
  io::write_bytes(path, encode_cvim(img));
}

inline ImageBuffer read_cvim(const std::filesystem::path& path) {
  auto r = io::ByteReader::load(path);
  return decode_cvim(r);
}

// Rounds every intensity to the 8-bit grid used by CVIM.
inline ImageBuffer quantized(const ImageBuffer& img) {
  ImageBuffer out = img;
  for (float& v : out.data()) v = static_cast<float>(quantize(v)) / 255.0f;
  return out;
}

}  // namespace cvgl
