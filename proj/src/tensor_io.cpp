#include "gppvae/tensor_io.hpp"

#include <cstring>
#include <stdexcept>
#include <vector>

namespace gppvae {

static const char kMagic[4] = {'G', 'P', 'T', '1'};

void write_gpt(const std::string& path, const Tensor& t, DType dtype) {
  if (!t.defined()) throw std::invalid_argument("write_gpt: undefined tensor");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_gpt: cannot open " + path);
  out.write(kMagic, 4);
  std::uint8_t dt = static_cast<std::uint8_t>(dtype);
  std::uint8_t nd = static_cast<std::uint8_t>(t.ndim());
  out.write(reinterpret_cast<const char*>(&dt), 1);
  out.write(reinterpret_cast<const char*>(&nd), 1);
  for (auto e : t.shape()) {
    std::uint64_t v = e;
    out.write(reinterpret_cast<const char*>(&v), 8);
  }
  const double* d = t.data();
  if (dtype == DType::f64) {
    out.write(reinterpret_cast<const char*>(d), static_cast<std::streamsize>(t.size() * 8));
  } else {
    std::vector<float> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(d[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * 4));
  }
  if (!out) throw std::runtime_error("write_gpt: write failed for " + path);
}

GptReader::GptReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw std::runtime_error("GptReader: cannot open " + path);
  char magic[4];
  in_.read(magic, 4);
  if (!in_ || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("GptReader: bad magic in " + path);
  std::uint8_t dt = 0, nd = 0;
  in_.read(reinterpret_cast<char*>(&dt), 1);
  in_.read(reinterpret_cast<char*>(&nd), 1);
  if (dt > 1) throw std::runtime_error("GptReader: unknown dtype code in " + path);
  dtype_ = static_cast<DType>(dt);
  shape_.resize(nd);
  for (auto& e : shape_) {
    std::uint64_t v = 0;
    in_.read(reinterpret_cast<char*>(&v), 8);
    e = static_cast<std::size_t>(v);
  }
  if (!in_) throw std::runtime_error("GptReader: truncated header in " + path);
  row_elems_ = shape_.empty() ? 0 : shape_numel(shape_) / std::max<std::size_t>(shape_[0], 1);
  data_offset_ = 4 + 1 + 1 + 8 * static_cast<std::size_t>(nd);
}

Tensor GptReader::read_rows(std::size_t first, std::size_t count) {
  if (shape_.empty()) throw std::runtime_error("GptReader: scalar container has no rows");
  if (first + count > shape_[0])
    throw std::out_of_range("GptReader: rows [" + std::to_string(first) + "," +
                            std::to_string(first + count) + ") out of " +
                            std::to_string(shape_[0]) + " in " + path_);
  Shape s = shape_;
  s[0] = count;
  Tensor t = Tensor::zeros(s);
  std::size_t esize = dtype_ == DType::f64 ? 8 : 4;
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(data_offset_ + first * row_elems_ * esize));
  std::size_t n = count * row_elems_;
  if (dtype_ == DType::f64) {
    in_.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(n * 8));
  } else {
    std::vector<float> buf(n);
    in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    for (std::size_t i = 0; i < n; ++i) t.data()[i] = buf[i];
  }
  if (!in_) throw std::runtime_error("GptReader: truncated data in " + path_);
  return t;
}

Tensor GptReader::read_all() {
  if (shape_.empty()) {
    // 0-d container: single value
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(data_offset_));
    Tensor t = Tensor::zeros({1});
    if (dtype_ == DType::f64) {
      in_.read(reinterpret_cast<char*>(t.data()), 8);
    } else {
      float v = 0;
      in_.read(reinterpret_cast<char*>(&v), 4);
      t.data()[0] = v;
    }
    return t;
  }
  return read_rows(0, shape_[0]);
}

Tensor read_gpt(const std::string& path) { return GptReader(path).read_all(); }

}  // namespace gppvae
