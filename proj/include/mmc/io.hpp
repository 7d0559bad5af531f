#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "mmc/tensor.hpp"

namespace mmc::io {

// Little-endian scalar codecs shared by the NDT1 and checkpoint formats.
void write_u32(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32(std::istream& is);
void write_f64(std::ostream& os, double v);
double read_f64(std::istream& is);
void write_string(std::ostream& os, const std::string& s);
std::string read_string(std::istream& is);

// NDT1 tensor record: magic "NDT1", u32 rank, u32 extents, f64 values
// row-major, everything little-endian.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// 8-bit interleaved raster (1 = gray, 3 = RGB).
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

void write_ppm(const std::filesystem::path& path, const Image8& img);   // P6
Image8 read_ppm(const std::filesystem::path& path);
void write_pgm8(const std::filesystem::path& path, const Image8& img);  // P5, maxval 255
Image8 read_pgm8(const std::filesystem::path& path);

// 16-bit PGM (P5, maxval 65535, big-endian samples per netpbm).
void write_pgm16(const std::filesystem::path& path, int width, int height,
                 const std::vector<std::uint16_t>& samples);
std::vector<std::uint16_t> read_pgm16(const std::filesystem::path& path, int& width, int& height);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace mmc::io
