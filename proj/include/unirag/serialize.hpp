#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "unirag/errors.hpp"
#include "unirag/hashing.hpp"

namespace unirag {

// On-disk artifacts are directories: a JSON manifest next to raw data files.
// Numeric blobs are little-endian IEEE-754 doubles, checksummed with CRC-32.

inline void write_f64_blob(const std::filesystem::path& path,
                           const std::vector<double>& values) {
  static_assert(std::endian::native == std::endian::little,
                "blob writer assumes a little-endian host");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::IoFailure, "cannot open for write: " + path.string());
  }
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) {
    throw Error(ErrorKind::IoFailure, "short write: " + path.string());
  }
}

inline std::vector<double> read_f64_blob(const std::filesystem::path& path,
                                         std::size_t expected_count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) {
    throw Error(ErrorKind::IoFailure, "cannot open for read: " + path.string());
  }
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected_count * sizeof(double)) {
    throw Error(ErrorKind::ChecksumMismatch,
                "blob size " + std::to_string(bytes) + " does not match " +
                    std::to_string(expected_count) + " doubles: " +
                    path.string());
  }
  in.seekg(0);
  std::vector<double> values(expected_count);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(bytes));
  if (!in) {
    throw Error(ErrorKind::IoFailure, "short read: " + path.string());
  }
  return values;
}

inline std::uint32_t crc32_of_doubles(const std::vector<double>& values) {
  return Crc32::of(values.data(), values.size() * sizeof(double));
}

inline std::uint32_t crc32_of_bytes(const std::string& bytes) {
  return Crc32::of(bytes.data(), bytes.size());
}

inline std::uint32_t crc32_of_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorKind::IoFailure, "cannot open for read: " + path.string());
  }
  Crc32 crc;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    crc.update(buf, static_cast<std::size_t>(in.gcount()));
    if (in.eof()) break;
  }
  return crc.value();
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::IoFailure, "cannot open for write: " + path.string());
  }
  out << text;
  if (!out) {
    throw Error(ErrorKind::IoFailure, "short write: " + path.string());
  }
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorKind::IoFailure, "cannot open for read: " + path.string());
  }
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return text;
}

inline nlohmann::json read_manifest(const std::filesystem::path& path,
                                    const std::string& expect_format,
                                    int expect_version) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ChecksumMismatch,
                "manifest is not valid JSON (" + std::string(e.what()) + "): " +
                    path.string());
  }
  std::string format;
  int version = -1;
  try {
    format = doc.at("format").get<std::string>();
    version = doc.at("version").get<int>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::ChecksumMismatch,
                "manifest missing format/version: " + path.string());
  }
  if (format != expect_format) {
    throw Error(ErrorKind::VersionMismatch,
                "manifest format '" + format + "', expected '" + expect_format +
                    "': " + path.string());
  }
  if (version != expect_version) {
    throw Error(ErrorKind::VersionMismatch,
                "manifest version " + std::to_string(version) + ", expected " +
                    std::to_string(expect_version) + ": " + path.string());
  }
  return doc;
}

}  // namespace unirag
