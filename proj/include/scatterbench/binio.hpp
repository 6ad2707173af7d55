#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "scatterbench/core.hpp"

// Little-endian binary streams for the on-disk containers.
namespace scatterbench::binio {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    os_.open(path, std::ios::binary);
    if (!os_) throw IoError("cannot open for writing: " + path.string());
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), n); }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  void close() {
    os_.close();
    if (!os_) throw IoError("write failed: " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path) {
    is_.open(path, std::ios::binary);
    if (!is_) throw IoError("cannot open for reading: " + path.string());
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v{};
    get_bytes(&v, sizeof(T));
    return v;
  }
  void get_bytes(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError("truncated file: " + path_.string());
    }
  }
  std::string get_string(std::size_t max_len = 1 << 20) {
    const auto n = get<std::uint32_t>();
    if (n > max_len) throw FormatError("string field too long in " + path_.string());
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ifstream is_;
};

}  // namespace scatterbench::binio
