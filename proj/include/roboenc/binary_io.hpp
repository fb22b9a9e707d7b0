#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace roboenc::io {

// Little-endian byte buffer writer.
class Writer {
 public:
  void bytes(std::string_view raw);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> values);
  // u64 length prefix followed by the raw bytes.
  void string(std::string_view s);

  const std::string& buffer() const noexcept { return buf_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::string buf_;
};

// Little-endian reader over an in-memory file. Reading past the end throws
// FormatError.
class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  static Reader open(const std::filesystem::path& path);

  void expect_magic(std::string_view magic);
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::vector<double> f64s(std::size_t count);
  std::string string();
  bool at_end() const noexcept { return pos_ == data_.size(); }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  std::string_view take(std::size_t n);
  std::string data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace roboenc::io
