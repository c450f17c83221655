#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "coc/common.hpp"

namespace coc {

// Little-endian byte buffer used by the dataset and checkpoint containers.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void i16(std::int16_t v) { raw(&v, 2); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    raw(s.data(), s.size());
  }
  void f64s(const std::vector<double>& v) {
    u32(std::uint32_t(v.size()));
    raw(v.data(), v.size() * 8);
  }
  void f32s(const std::vector<float>& v) {
    u32(std::uint32_t(v.size()));
    raw(v.data(), v.size() * 4);
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t n) : p_(data), n_(n) {}
  explicit ByteReader(const std::vector<std::uint8_t>& v)
      : ByteReader(v.data(), v.size()) {}

  std::uint8_t u8() { return take<std::uint8_t>(); }
  std::uint16_t u16() { return take<std::uint16_t>(); }
  std::uint32_t u32() { return take<std::uint32_t>(); }
  std::uint64_t u64() { return take<std::uint64_t>(); }
  std::int16_t i16() { return take<std::int16_t>(); }
  float f32() { return take<float>(); }
  double f64() { return take<double>(); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_ + off_), n);
    off_ += n;
    return s;
  }
  std::vector<double> f64s() {
    const std::uint32_t n = u32();
    std::vector<double> v(n);
    need(std::size_t(n) * 8);
    std::memcpy(v.data(), p_ + off_, std::size_t(n) * 8);
    off_ += std::size_t(n) * 8;
    return v;
  }
  std::vector<float> f32s() {
    const std::uint32_t n = u32();
    std::vector<float> v(n);
    need(std::size_t(n) * 4);
    std::memcpy(v.data(), p_ + off_, std::size_t(n) * 4);
    off_ += std::size_t(n) * 4;
    return v;
  }
  bool exhausted() const { return off_ == n_; }
  std::size_t offset() const { return off_; }

 private:
  template <typename T>
  T take() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p_ + off_, sizeof(T));
    off_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (off_ + n > n_) throw io_error("container truncated");
  }
  const std::uint8_t* p_;
  std::size_t n_ = 0;
  std::size_t off_ = 0;
};

// Writes magic + payload + crc32(payload); refuses partial writes.
void write_container(const std::string& path, const char magic[8],
                     const std::vector<std::uint8_t>& payload);

// Reads and verifies a container; returns the payload bytes. Checksum and
// magic failures throw before any payload is interpreted.
std::vector<std::uint8_t> read_container(const std::string& path,
                                         const char magic[8]);

}  // namespace coc
