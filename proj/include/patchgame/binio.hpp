#pragma once

// Little-endian binary streams shared by the corpus and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace patchgame {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path);
  }

  template <class U>
    requires std::is_arithmetic_v<U>
  void put(U v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  template <class U>
  void put_array(const std::vector<U>& v) {
    put_bytes(v.data(), v.size() * sizeof(U));
  }

  void close() {
    out_.flush();
    out_.close();
    if (out_.fail()) throw std::runtime_error("write failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open for reading: " + path);
  }

  template <class U>
    requires std::is_arithmetic_v<U>
  U get() {
    U v{};
    get_bytes(&v, sizeof(U));
    return v;
  }
  void get_bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_ + ": truncated file");
  }
  std::string get_string(std::size_t max_len = 1 << 20) {
    const auto n = get<std::uint32_t>();
    if (n > max_len) throw FormatError(path_ + ": implausible string length " + std::to_string(n));
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }
  template <class U>
  std::vector<U> get_array(std::size_t n) {
    std::vector<U> v(n);
    get_bytes(v.data(), n * sizeof(U));
    return v;
  }

  void expect_magic(const char (&magic)[9]) {
    char found[8];
    get_bytes(found, 8);
    if (std::memcmp(found, magic, 8) != 0)
      throw FormatError(path_ + ": bad magic, expected '" + std::string(magic, 8) + "', found '" +
                        std::string(found, 8) + "'");
  }
  void expect_version(std::uint32_t expected) {
    const auto v = get<std::uint32_t>();
    if (v != expected)
      throw FormatError(path_ + ": unsupported version, expected " + std::to_string(expected) + ", found " +
                        std::to_string(v));
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
};

}  // namespace patchgame
