#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dowser {

// One magic-tagged binary container backs every artifact format:
//
//   magic[8]                      "DWSRMODL" / "DWSRSENS" / "DWSRSCOR" / "DWSRMASK"
//   u32 version
//   u32 meta_len, meta bytes      format-specific provenance (JSON text)
//   u32 entry_count
//   per entry: u32 name_len, name bytes, u8 dtype, u32 ndim, u64 dims[ndim],
//              u64 byte_offset, u64 byte_size
//   u64 data_section_bytes
//   raw data (f64 values or LSB-first packed bits, per entry dtype)
//
// Everything is little-endian. Round-trips are bit-exact.

enum class blob_dtype : std::uint8_t { f64 = 0, bits = 1 };

struct blob_entry {
  std::string name;
  blob_dtype dtype = blob_dtype::f64;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;
};

struct blob_file {
  std::string magic;  // exactly 8 characters
  std::uint32_t version = 1;
  std::string meta;
  std::vector<blob_entry> entries;
};

void write_blob(const std::filesystem::path& path, const blob_file& file);
blob_file read_blob(const std::filesystem::path& path, const std::string& expected_magic);

// Write-temp-then-rename, so readers never observe a partial file.
void atomic_write(const std::filesystem::path& path, const std::string& contents);

std::uint64_t fnv1a64(const void* data, std::size_t size);
std::uint64_t fnv1a64(const std::string& text);
std::uint64_t file_hash(const std::filesystem::path& path);

std::vector<std::uint8_t> pack_f64(const std::vector<double>& values);
std::vector<double> unpack_f64(const std::vector<std::uint8_t>& bytes);

}  // namespace dowser
