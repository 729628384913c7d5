#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dinp {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit grayscale raster, the on-disk and wire representation.
struct Gray8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Gray8() = default;
  Gray8(int h, int w, std::uint8_t fill = 0) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  bool operator==(const Gray8&) const = default;
};

/// Grayscale slice with intensities in [0, 1].
struct SliceImage {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  SliceImage() = default;
  SliceImage(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  float& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return pixels.size(); }

  static SliceImage from_gray8(const Gray8& g);
  /// Quantizes round(v * 255) after clamping to [0, 1].
  Gray8 to_gray8() const;
  bool operator==(const SliceImage&) const = default;
};

/// Binary H×W raster (values 0/1).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int r, int c) { return bits[static_cast<std::size_t>(r) * width + c]; }
  bool at(int r, int c) const { return bits[static_cast<std::size_t>(r) * width + c] != 0; }
  std::size_t size() const { return bits.size(); }
  bool any() const;
  bool none() const { return !any(); }
  std::size_t count() const;
  bool same_size(const Mask& o) const { return height == o.height && width == o.width; }
  bool intersects(const Mask& o) const;
  Mask& operator|=(const Mask& o);
  bool operator==(const Mask&) const = default;

  /// 0 → 0, anything else → 1 (so 0/255 mask PNGs decode directly).
  static Mask from_gray8(const Gray8& g);
  /// 0/255 encoding.
  Gray8 to_gray8() const;
};

/// Tumor label raster: 0 background/normal, 1 necrotic core, 2 edema,
/// 4 enhancement.
struct LabelMask {
  static constexpr std::uint8_t kNormal = 0;
  static constexpr std::uint8_t kCore = 1;
  static constexpr std::uint8_t kEdema = 2;
  static constexpr std::uint8_t kEnhancement = 4;

  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  LabelMask() = default;
  LabelMask(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }

  static bool valid_value(std::uint8_t v) { return v == 0 || v == 1 || v == 2 || v == 4; }
  /// Throws ImageError naming `source` if a value outside {0,1,2,4} occurs.
  void validate(std::string_view source = "label") const;
  Mask indicator(std::uint8_t value) const;
  Mask tumor() const;
  std::size_t tumor_area() const;
  bool has_tumor() const { return tumor_area() > 0; }
  bool operator==(const LabelMask&) const = default;

  static LabelMask from_gray8(const Gray8& g, std::string_view source = "label");
  Gray8 to_gray8() const;
};

std::vector<std::uint8_t> encode_png(const Gray8& image);
Gray8 decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::filesystem::path& path, const Gray8& image);
Gray8 read_png(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Accepts an optional `data:...;base64,` prefix.
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace dinp
