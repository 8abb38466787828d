#include "lcbm/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lcbm/errors.hpp"

namespace lcbm {

Image::Image(Tensor chw) : pixels_(std::move(chw)) {
  if (pixels_.rank() != 3) throw PreconditionError("image tensor must be CHW");
}

Image Image::crop(const PixelBox& box) const {
  if (box.x1 < 0 || box.y1 < 0 || box.x2 > static_cast<int>(width()) ||
      box.y2 > static_cast<int>(height()) || box.width() <= 0 ||
      box.height() <= 0)
    throw PreconditionError("crop box outside image");
  Image out(channels(), box.height(), box.width());
  for (std::size_t c = 0; c < channels(); ++c)
    for (int y = 0; y < box.height(); ++y)
      for (int x = 0; x < box.width(); ++x)
        out.at(c, y, x) = at(c, box.y1 + y, box.x1 + x);
  return out;
}

Image Image::with_box_zeroed(const PixelBox& box) const {
  Image out = *this;
  const int x1 = std::max(box.x1, 0), y1 = std::max(box.y1, 0);
  const int x2 = std::min<int>(box.x2, width()), y2 = std::min<int>(box.y2, height());
  for (std::size_t c = 0; c < channels(); ++c)
    for (int y = y1; y < y2; ++y)
      for (int x = x1; x < x2; ++x) out.at(c, y, x) = 0.0;
  return out;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;
};

std::vector<Tap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 >= in - 1) {
      taps[o] = {in - 1, in - 1, 0.0};
    } else {
      taps[o] = {i0, i0 + 1, src - static_cast<double>(i0)};
    }
  }
  return taps;
}

}  // namespace

Tensor resize_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w) {
  if (map.rank() != 2 || map.empty())
    throw PreconditionError("resize_bilinear expects a non-empty 2-D map");
  const auto ty = linear_taps(map.rows(), out_h);
  const auto tx = linear_taps(map.cols(), out_w);
  Tensor out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& a = ty[y];
      const auto& b = tx[x];
      const double top = map(a.i0, b.i0) * (1 - b.w1) + map(a.i0, b.i1) * b.w1;
      const double bot = map(a.i1, b.i0) * (1 - b.w1) + map(a.i1, b.i1) * b.w1;
      out(y, x) = top * (1 - a.w1) + bot * a.w1;
    }
  return out;
}

Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (img.height() == out_h && img.width() == out_w) return img;
  Image out(img.channels(), out_h, out_w);
  for (std::size_t c = 0; c < img.channels(); ++c) {
    Tensor plane({img.height(), img.width()});
    for (std::size_t y = 0; y < img.height(); ++y)
      for (std::size_t x = 0; x < img.width(); ++x) plane(y, x) = img.at(c, y, x);
    Tensor r = resize_bilinear(plane, out_h, out_w);
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) out.at(c, y, x) = r(y, x);
  }
  return out;
}

Image resize_center_crop(const Image& img, std::size_t size) {
  const std::size_t h = img.height(), w = img.width();
  if (h == 0 || w == 0) throw PreconditionError("empty image");
  std::size_t nh, nw;
  if (h <= w) {
    nh = size;
    nw = std::max<std::size_t>(size, (w * size + h / 2) / h);
  } else {
    nw = size;
    nh = std::max<std::size_t>(size, (h * size + w / 2) / w);
  }
  Image resized = resize_bilinear(img, nh, nw);
  const int y0 = static_cast<int>((nh - size) / 2);
  const int x0 = static_cast<int>((nw - size) / 2);
  return resized.crop({x0, y0, x0 + static_cast<int>(size),
                       y0 + static_cast<int>(size)});
}

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  const std::string magic = next_token(in);
  std::size_t channels;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw ParseError("unsupported image format in " + path.string() +
                     " (expected binary PGM/PPM)");
  }
  std::size_t w, h, maxval;
  try {
    w = std::stoul(next_token(in));
    h = std::stoul(next_token(in));
    maxval = std::stoul(next_token(in));
  } catch (const std::exception&) {
    throw ParseError("malformed PNM header in " + path.string());
  }
  if (maxval != 255) throw ParseError("only 8-bit PNM images are supported");
  std::vector<unsigned char> raw(w * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw ParseError("truncated image data in " + path.string());
  Image img(channels, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        img.at(c, y, x) = raw[(y * w + x) * channels + c] / 255.0;
  return img;
}

void write_pnm(const Image& img, const std::filesystem::path& path) {
  if (img.channels() != 1 && img.channels() != 3)
    throw PreconditionError("PNM output needs 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (img.channels() == 1 ? "P5" : "P6") << '\n'
      << img.width() << ' ' << img.height() << "\n255\n";
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x)
      for (std::size_t c = 0; c < img.channels(); ++c)
        out.put(static_cast<char>(to_byte(img.at(c, y, x))));
}

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v >> 24));
  s.push_back(static_cast<char>(v >> 16));
  s.push_back(static_cast<char>(v >> 8));
  s.push_back(static_cast<char>(v));
}

void put_chunk(std::string& png, const char* type, const std::string& data) {
  put_u32(png, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  png += body;
  put_u32(png, static_cast<std::uint32_t>(
                   crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                         static_cast<uInt>(body.size()))));
}

}  // namespace

std::string encode_png(const Image& img) {
  const std::size_t ch = img.channels();
  if (ch != 1 && ch != 3) throw PreconditionError("PNG output needs 1 or 3 channels");
  std::string raw;
  raw.reserve(img.height() * (1 + img.width() * ch));
  for (std::size_t y = 0; y < img.height(); ++y) {
    raw.push_back(0);  // filter: none
    for (std::size_t x = 0; x < img.width(); ++x)
      for (std::size_t c = 0; c < ch; ++c)
        raw.push_back(static_cast<char>(to_byte(img.at(c, y, x))));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string deflated(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(deflated.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw IoError("zlib compression failed");
  deflated.resize(bound);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.width()));
  put_u32(ihdr, static_cast<std::uint32_t>(img.height()));
  ihdr.push_back(8);                       // bit depth
  ihdr.push_back(ch == 1 ? 0 : 2);         // gray / truecolor
  ihdr.append("\0\0\0", 3);                // compression, filter, interlace
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", deflated);
  put_chunk(png, "IEND", "");
  return png;
}

void write_png(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::string bytes = encode_png(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Image heatmap_overlay(const Image& img, const Tensor& heat,
                      const std::vector<bool>& mask) {
  const std::size_t h = img.height(), w = img.width();
  require_shape(heat, {h, w}, "heatmap_overlay");
  Image out(3, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double gray = 0.0;
      for (std::size_t c = 0; c < img.channels(); ++c) gray += img.at(c, y, x);
      gray /= static_cast<double>(img.channels());
      const double v = std::clamp(heat(y, x), 0.0, 1.0);
      // jet-like ramp: blue -> red
      const double r = std::clamp(1.5 - std::abs(4.0 * v - 3.0), 0.0, 1.0);
      const double g = std::clamp(1.5 - std::abs(4.0 * v - 2.0), 0.0, 1.0);
      const double b = std::clamp(1.5 - std::abs(4.0 * v - 1.0), 0.0, 1.0);
      out.at(0, y, x) = 0.5 * gray + 0.5 * r;
      out.at(1, y, x) = 0.5 * gray + 0.5 * g;
      out.at(2, y, x) = 0.5 * gray + 0.5 * b;
    }
  if (mask.size() == h * w) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (!mask[y * w + x]) continue;
        const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w ||
                          !mask[(y - 1) * w + x] || !mask[(y + 1) * w + x] ||
                          !mask[y * w + x - 1] || !mask[y * w + x + 1];
        if (edge) {
          out.at(0, y, x) = 1.0;
          out.at(1, y, x) = 1.0;
          out.at(2, y, x) = 1.0;
        }
      }
  }
  return out;
}

}  // namespace lcbm
