#include "geomattn/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "geomattn/error.hpp"

namespace geomattn {

namespace {

void require_image(const Tensor& t, const char* op) {
  if (t.rank() != 3) throw ShapeError(std::string(op) + ": expected [c,h,w], got " + to_string(t.shape()));
}

std::size_t read_header_int(std::istream& in, const std::filesystem::path& path) {
  in >> std::ws;
  while (in.peek() == '#') {
    std::string comment;
    std::getline(in, comment);
    in >> std::ws;
  }
  long long v = -1;
  in >> v;
  if (!in || v <= 0) throw DataError("malformed PNM header in " + path.string());
  return static_cast<std::size_t>(v);
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t channels,
               std::size_t h, std::size_t w, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  std::string bytes(channels * h * w, '\0');
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < channels; ++ch)
        bytes[(y * w + x) * channels + ch] = static_cast<char>(to_byte(values[(ch * h + y) * w + x]));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace

Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  std::size_t channels = 0;
  if (magic == "P6") {
    channels = 3;
  } else if (magic == "P5") {
    channels = 1;
  } else {
    throw DataError("unsupported image magic '" + magic + "' in " + path.string() +
                    " (expected P5 or P6)");
  }
  const std::size_t w = read_header_int(in, path);
  const std::size_t h = read_header_int(in, path);
  const std::size_t maxval = read_header_int(in, path);
  if (maxval > 255) throw DataError("16-bit PNM not supported: " + path.string());
  in.get();
  std::string bytes(channels * h * w, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw DataError("truncated pixel data in " + path.string());
  std::vector<double> values(bytes.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < channels; ++ch)
        values[(ch * h + y) * w + x] =
            static_cast<unsigned char>(bytes[(y * w + x) * channels + ch]) / static_cast<double>(maxval);
  return Tensor({channels, h, w}, std::move(values));
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  require_image(image, "write_ppm");
  if (image.dim(0) != 3) throw ShapeError("write_ppm: expected 3 channels");
  write_pnm(path, "P6", 3, image.dim(1), image.dim(2), image.data());
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() == 2) {
    write_pnm(path, "P5", 1, image.dim(0), image.dim(1), image.data());
    return;
  }
  require_image(image, "write_pgm");
  if (image.dim(0) != 1) throw ShapeError("write_pgm: expected 1 channel");
  write_pnm(path, "P5", 1, image.dim(1), image.dim(2), image.data());
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  require_image(image, "resize_bilinear");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == height && w == width) return image.detach();
  auto in = image.data();
  std::vector<double> out(c * height * width);
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = in.data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        const double bottom = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        out[(ch * height + y) * width + x] = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return Tensor({c, height, width}, std::move(out));
}

Tensor rotate90(const Tensor& image, int k) {
  require_image(image, "rotate90");
  const std::size_t c = image.dim(0), n = image.dim(1);
  if (image.dim(2) != n) throw ShapeError("rotate90: image must be square, got " + to_string(image.shape()));
  k = ((k % 4) + 4) % 4;
  auto in = image.data();
  std::vector<double> out(in.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = in.data() + ch * n * n;
    double* dst = out.data() + ch * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        // Counter-clockwise: output(i,j) pulls from the source pixel that rotates onto it.
        std::size_t si = i, sj = j;
        switch (k) {
          case 1: si = j; sj = n - 1 - i; break;
          case 2: si = n - 1 - i; sj = n - 1 - j; break;
          case 3: si = n - 1 - j; sj = i; break;
          default: break;
        }
        dst[i * n + j] = src[si * n + sj];
      }
    }
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor flip_horizontal(const Tensor& image) {
  require_image(image, "flip_horizontal");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  auto in = image.data();
  std::vector<double> out(in.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(ch * h + y) * w + x] = in[(ch * h + y) * w + (w - 1 - x)];
  return Tensor(image.shape(), std::move(out));
}

Tensor pad_reflect_crop(const Tensor& image, std::size_t pad, std::size_t top, std::size_t left) {
  require_image(image, "pad_reflect_crop");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (pad >= h || pad >= w) throw ShapeError("pad_reflect_crop: padding must be smaller than the image");
  if (top > 2 * pad || left > 2 * pad) throw ShapeError("pad_reflect_crop: crop window outside padded image");
  auto reflect = [](std::ptrdiff_t i, std::size_t n) {
    const auto len = static_cast<std::ptrdiff_t>(n);
    if (i < 0) i = -i;
    if (i >= len) i = 2 * (len - 1) - i;
    return static_cast<std::size_t>(i);
  };
  auto in = image.data();
  std::vector<double> out(in.size());
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = reflect(static_cast<std::ptrdiff_t>(y + top) - static_cast<std::ptrdiff_t>(pad), h);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = reflect(static_cast<std::ptrdiff_t>(x + left) - static_cast<std::ptrdiff_t>(pad), w);
      for (std::size_t ch = 0; ch < c; ++ch) out[(ch * h + y) * w + x] = in[(ch * h + sy) * w + sx];
    }
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor erase_rect(const Tensor& image, const Rect& rect, std::span<const double> fill) {
  require_image(image, "erase_rect");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (fill.size() != c) throw ShapeError("erase_rect: fill needs one value per channel");
  std::vector<double> out(image.data().begin(), image.data().end());
  const std::size_t y1 = std::min(h, rect.top + rect.height);
  const std::size_t x1 = std::min(w, rect.left + rect.width);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = rect.top; y < y1; ++y)
      for (std::size_t x = rect.left; x < x1; ++x) out[(ch * h + y) * w + x] = fill[ch];
  return Tensor(image.shape(), std::move(out));
}

Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw ShapeError("stack_images: no images");
  const Shape& s = images.front().shape();
  std::vector<double> out;
  out.reserve(images.size() * numel(s));
  for (const Tensor& img : images) {
    if (img.shape() != s) throw ShapeError("stack_images: images differ in shape");
    out.insert(out.end(), img.data().begin(), img.data().end());
  }
  Shape shape{images.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  return Tensor(std::move(shape), std::move(out));
}

}  // namespace geomattn
