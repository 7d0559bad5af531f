#include "mmc/io.hpp"

#include <array>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mmc/errors.hpp"

namespace mmc::io {

void write_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 4);
}

std::uint32_t read_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (!is) throw IoError("truncated stream while reading u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, 8);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

double read_f64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), 8);
  if (!is) throw IoError("truncated stream while reading f64");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v = 0;
  std::memcpy(&v, &bits, 8);
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw IoError("truncated stream while reading string");
  return s;
}

static constexpr char kTensorMagic[4] = {'N', 'D', 'T', '1'};

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 4);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int e : t.shape()) write_u32(os, static_cast<std::uint32_t>(e));
  for (double v : t.values()) write_f64(os, v);
  if (!os) throw IoError("failed writing tensor record");
}

Tensor read_tensor(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTensorMagic, 4) != 0)
    throw IoError("bad tensor record magic");
  std::uint32_t rank = read_u32(is);
  if (rank > 8) throw IoError("tensor record rank " + std::to_string(rank) + " out of range");
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t e = read_u32(is);
    if (e == 0 || e > (1u << 28)) throw IoError("tensor record extent out of range");
    shape[i] = static_cast<int>(e);
  }
  Tensor t(shape);
  for (double& v : t.values()) v = read_f64(is);
  return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor(is);
}

// Skips netpbm whitespace and '#' comments, then reads one unsigned value.
static int read_pnm_value(std::istream& is, const std::string& what) {
  int c = is.get();
  while (is) {
    if (c == '#') {
      while (is && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  if (!is || !std::isdigit(c)) throw IoError("malformed netpbm header near " + what);
  long v = 0;
  while (is && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > (1 << 30)) throw IoError("netpbm value out of range in " + what);
    c = is.get();
  }
  if (!std::isspace(c)) throw IoError("malformed netpbm header near " + what);
  return static_cast<int>(v);
}

static void check_image8(const Image8& img, int channels, const char* fmt) {
  if (img.width <= 0 || img.height <= 0)
    throw ValueError(std::string(fmt) + " image has empty extent");
  if (img.channels != channels)
    throw ValueError(std::string(fmt) + " expects " + std::to_string(channels) +
                     " channels, got " + std::to_string(img.channels));
  std::size_t want = static_cast<std::size_t>(img.width) * img.height * channels;
  if (img.pixels.size() != want)
    throw ValueError(std::string(fmt) + " pixel buffer size mismatch");
}

void write_ppm(const std::filesystem::path& path, const Image8& img) {
  check_image8(img, 3, "ppm");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

static Image8 read_pnm_raster(const std::filesystem::path& path, const char* magic, int channels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char m[2] = {};
  is.read(m, 2);
  if (!is || m[0] != magic[0] || m[1] != magic[1])
    throw IoError(path.string() + ": expected " + magic + " image");
  Image8 img;
  img.width = read_pnm_value(is, path.string());
  img.height = read_pnm_value(is, path.string());
  int maxval = read_pnm_value(is, path.string());
  if (maxval != 255) throw IoError(path.string() + ": unsupported maxval " + std::to_string(maxval));
  img.channels = channels;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * channels);
  is.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw IoError(path.string() + ": truncated pixel data");
  return img;
}

Image8 read_ppm(const std::filesystem::path& path) { return read_pnm_raster(path, "P6", 3); }

void write_pgm8(const std::filesystem::path& path, const Image8& img) {
  check_image8(img, 1, "pgm");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

Image8 read_pgm8(const std::filesystem::path& path) { return read_pnm_raster(path, "P5", 1); }

void write_pgm16(const std::filesystem::path& path, int width, int height,
                 const std::vector<std::uint16_t>& samples) {
  if (width <= 0 || height <= 0) throw ValueError("pgm16 image has empty extent");
  if (samples.size() != static_cast<std::size_t>(width) * height)
    throw ValueError("pgm16 sample buffer size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << width << " " << height << "\n65535\n";
  std::vector<char> buf(samples.size() * 2);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    buf[2 * i] = static_cast<char>(samples[i] >> 8);
    buf[2 * i + 1] = static_cast<char>(samples[i] & 0xff);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<std::uint16_t> read_pgm16(const std::filesystem::path& path, int& width, int& height) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char m[2] = {};
  is.read(m, 2);
  if (!is || m[0] != 'P' || m[1] != '5') throw IoError(path.string() + ": expected P5 image");
  width = read_pnm_value(is, path.string());
  height = read_pnm_value(is, path.string());
  int maxval = read_pnm_value(is, path.string());
  if (maxval != 65535)
    throw IoError(path.string() + ": expected 16-bit samples, maxval " + std::to_string(maxval));
  std::size_t n = static_cast<std::size_t>(width) * height;
  std::vector<char> buf(n * 2);
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!is) throw IoError(path.string() + ": truncated pixel data");
  std::vector<std::uint16_t> samples(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto hi = static_cast<unsigned char>(buf[2 * i]);
    auto lo = static_cast<unsigned char>(buf[2 * i + 1]);
    samples[i] = static_cast<std::uint16_t>((hi << 8) | lo);
  }
  return samples;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace mmc::io
