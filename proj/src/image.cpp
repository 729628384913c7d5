#include "dinp/image.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dinp {

SliceImage SliceImage::from_gray8(const Gray8& g) {
  SliceImage out(g.height, g.width);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) out.pixels[i] = static_cast<float>(g.pixels[i]) / 255.0f;
  return out;
}

Gray8 SliceImage::to_gray8() const {
  Gray8 out(height, width);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const float v = std::clamp(pixels[i], 0.0f, 1.0f);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

bool Mask::any() const {
  return std::any_of(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; });
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

bool Mask::intersects(const Mask& o) const {
  if (!same_size(o)) throw std::invalid_argument("mask size mismatch");
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i] && o.bits[i]) return true;
  return false;
}

Mask& Mask::operator|=(const Mask& o) {
  if (!same_size(o)) throw std::invalid_argument("mask size mismatch");
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = (bits[i] || o.bits[i]) ? 1 : 0;
  return *this;
}

Mask Mask::from_gray8(const Gray8& g) {
  Mask m(g.height, g.width);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) m.bits[i] = g.pixels[i] ? 1 : 0;
  return m;
}

Gray8 Mask::to_gray8() const {
  Gray8 g(height, width);
  for (std::size_t i = 0; i < bits.size(); ++i) g.pixels[i] = bits[i] ? 255 : 0;
  return g;
}

void LabelMask::validate(std::string_view source) const {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!valid_value(values[i]))
      throw ImageError(std::string(source) + ": label value " + std::to_string(values[i]) + " at pixel " +
                       std::to_string(i) + " is not one of {0,1,2,4}");
  }
}

Mask LabelMask::indicator(std::uint8_t value) const {
  Mask m(height, width);
  for (std::size_t i = 0; i < values.size(); ++i) m.bits[i] = values[i] == value ? 1 : 0;
  return m;
}

Mask LabelMask::tumor() const {
  Mask m(height, width);
  for (std::size_t i = 0; i < values.size(); ++i) m.bits[i] = values[i] != 0 ? 1 : 0;
  return m;
}

std::size_t LabelMask::tumor_area() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](std::uint8_t v) { return v != 0; }));
}

LabelMask LabelMask::from_gray8(const Gray8& g, std::string_view source) {
  LabelMask l(g.height, g.width);
  l.values = g.pixels;
  l.validate(source);
  return l;
}

Gray8 LabelMask::to_gray8() const {
  Gray8 g(height, width);
  g.pixels = values;
  return g;
}

std::vector<std::uint8_t> encode_png(const Gray8& image) {
  if (image.height <= 0 || image.width <= 0) throw ImageError("cannot encode an empty image");
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr))
    throw ImageError(std::string("png encode failed: ") + img.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr))
    throw ImageError(std::string("png encode failed: ") + img.message);
  out.resize(size);
  return out;
}

Gray8 decode_png(std::span<const std::uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw ImageError(std::string("png decode failed: ") + img.message);
  img.format = PNG_FORMAT_GRAY;
  Gray8 out(static_cast<int>(img.height), static_cast<int>(img.width));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ImageError(std::string("png decode failed: ") + img.message);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Gray8& image) {
  const auto bytes = encode_png(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ImageError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ImageError("write failed: " + path.string());
}

Gray8 read_png(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageError("missing file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.starts_with("data:")) {
    const auto comma = text.find(',');
    if (comma == std::string_view::npos) throw ImageError("malformed data URL");
    text.remove_prefix(comma + 1);
  }
  std::string clean;
  clean.reserve(text.size());
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
  if (clean.size() % 4 != 0) throw ImageError("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out(clean.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw ImageError("invalid base64 data");
  std::size_t padding = 0;
  if (!clean.empty() && clean.back() == '=') ++padding;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++padding;
  out.resize(static_cast<std::size_t>(n) - padding);
  return out;
}

}  // namespace dinp
