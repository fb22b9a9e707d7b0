#include "roboenc/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "roboenc/errors.hpp"

namespace roboenc::io {

namespace {

template <typename T>
void put_le(std::string& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf.push_back(static_cast<char>(static_cast<unsigned char>((v >> (8 * i)) & 0xff)));
  }
}

template <typename T>
T get_le(std::string_view bytes) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  }
  return v;
}

}  // namespace

void Writer::bytes(std::string_view raw) { buf_.append(raw); }
void Writer::u16(std::uint16_t v) { put_le(buf_, v); }
void Writer::u32(std::uint32_t v) { put_le(buf_, v); }
void Writer::u64(std::uint64_t v) { put_le(buf_, v); }
void Writer::f64(double v) { put_le(buf_, std::bit_cast<std::uint64_t>(v)); }

void Writer::f64s(std::span<const double> values) {
  buf_.reserve(buf_.size() + 8 * values.size());
  for (double v : values) f64(v);
}

void Writer::string(std::string_view s) {
  u64(s.size());
  buf_.append(s);
}

void Writer::save(const std::filesystem::path& path) const { write_file(path, buf_); }

Reader Reader::open(const std::filesystem::path& path) { return Reader(read_file(path)); }

std::string_view Reader::take(std::size_t n) {
  if (n > data_.size() - pos_) throw FormatError("unexpected end of file");
  std::string_view out(data_.data() + pos_, n);
  pos_ += n;
  return out;
}

void Reader::expect_magic(std::string_view magic) {
  if (remaining() < magic.size() || take(magic.size()) != magic) {
    throw FormatError("bad magic, expected \"" + std::string(magic) + "\"");
  }
}

std::uint16_t Reader::u16() { return get_le<std::uint16_t>(take(2)); }
std::uint32_t Reader::u32() { return get_le<std::uint32_t>(take(4)); }
std::uint64_t Reader::u64() { return get_le<std::uint64_t>(take(8)); }
double Reader::f64() { return std::bit_cast<double>(u64()); }

std::vector<double> Reader::f64s(std::size_t count) {
  if (count > remaining() / 8) throw FormatError("unexpected end of file");
  std::vector<double> out(count);
  for (double& v : out) v = f64();
  return out;
}

std::string Reader::string() {
  const std::uint64_t n = u64();
  if (n > remaining()) throw FormatError("string length exceeds file");
  return std::string(take(static_cast<std::size_t>(n)));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace roboenc::io
