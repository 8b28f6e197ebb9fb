#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "gppvae/tensor.hpp"

namespace gppvae {

// Binary tensor container (.gpt): magic "GPT1", u8 dtype (0 = f32, 1 = f64),
// u8 ndim, ndim little-endian u64 extents, then raw little-endian values.
enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

void write_gpt(const std::string& path, const Tensor& t, DType dtype = DType::f64);
Tensor read_gpt(const std::string& path);

// Seekable reader for streaming row ranges without loading the whole tensor.
class GptReader {
 public:
  explicit GptReader(const std::string& path);
  const Shape& shape() const { return shape_; }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  // rows [first, first + count) along axis 0
  Tensor read_rows(std::size_t first, std::size_t count);
  Tensor read_all();

 private:
  std::ifstream in_;
  std::string path_;
  Shape shape_;
  DType dtype_ = DType::f64;
  std::size_t row_elems_ = 0;
  std::size_t data_offset_ = 0;
};

}  // namespace gppvae
