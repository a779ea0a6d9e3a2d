#include "stclip/image.hpp"

#include <cctype>
#include <fstream>
#include <iterator>
#include <string>

#include "stclip/errors.hpp"

namespace stclip {

Tensor image_to_tensor(const Image& img) {
  std::vector<float> v(img.rgb.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(img.rgb[i]) / 127.5f - 1.0f;
  return Tensor({img.height, img.width, 3}, std::move(v));
}

namespace {

void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t w, std::size_t h,
               const std::vector<std::uint8_t>& bytes) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write " + path.string());
  f << magic << '\n' << w << ' ' << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InputError("failed writing " + path.string());
}

// Reads one header integer, skipping whitespace and '#' comments.
std::size_t header_int(const std::vector<std::uint8_t>& b, std::size_t& pos) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + (b[pos] - '0');
    if (v > (1u << 24)) throw FormatError("image header value too large", start);
    ++pos;
  }
  if (pos == start) throw FormatError("malformed image header", start);
  return v;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& img) {
  write_pnm(path, "P6", img.width, img.height, img.rgb);
}

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& gray) {
  if (gray.size() != width * height) throw DimensionError("graymap size does not match its extent");
  write_pnm(path, "P5", width, height, gray);
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read image " + path.string());
  const std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (b.size() < 2 || b[0] != 'P' || b[1] != '6')
    throw FormatError(path.string() + ": not a binary PPM (P6)", 0);
  std::size_t pos = 2;
  const std::size_t w = header_int(b, pos), h = header_int(b, pos), maxval = header_int(b, pos);
  if (maxval != 255) throw FormatError(path.string() + ": only 8-bit PPM is supported", pos);
  if (w == 0 || h == 0) throw FormatError(path.string() + ": empty image", pos);
  ++pos;  // single whitespace byte before the raster
  if (b.size() < pos + w * h * 3) throw FormatError(path.string() + ": truncated raster", b.size());
  Image img(w, h);
  std::copy(b.begin() + static_cast<std::ptrdiff_t>(pos),
            b.begin() + static_cast<std::ptrdiff_t>(pos + w * h * 3), img.rgb.begin());
  return img;
}

}  // namespace stclip
