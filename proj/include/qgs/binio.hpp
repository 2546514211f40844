#pragma once

// Little-endian byte encoding shared by the dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <type_traits>
#include <vector>

#include "qgs/error.hpp"

namespace qgs::binio {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

class Writer {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_arithmetic_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string16(const std::string& s) {
    if (s.size() > 0xFFFF) throw Error("string too long for u16 length prefix");
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  template <class T>
  void put_array(const std::vector<T>& v) {
    put_bytes(v.data(), v.size() * sizeof(T));
  }
  // Overwrites a previously written u32 at `pos`.
  void patch_u32(std::size_t pos, std::uint32_t v) { std::memcpy(&bytes_[pos], &v, 4); }

  std::size_t size() const { return bytes_.size(); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void section(std::string name) { section_ = std::move(name); }
  const std::string& section() const { return section_; }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  [[noreturn]] void fail(const std::string& what) const { throw ParseError(section_, pos_, what); }

  void need(std::size_t n) const {
    if (remaining() < n) {
      fail("truncated: need " + std::to_string(n) + " bytes, have " + std::to_string(remaining()));
    }
  }

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string16() {
    const auto n = get<std::uint16_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  template <class T>
  std::vector<T> get_array(std::size_t count) {
    if (count > remaining() / sizeof(T)) fail("array of " + std::to_string(count) + " elements overruns input");
    std::vector<T> v(count);
    std::memcpy(v.data(), bytes_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
    return v;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
  std::string section_ = "file";
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace qgs::binio
