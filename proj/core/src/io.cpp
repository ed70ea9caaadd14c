#include "dowser/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dowser/errors.hpp"
#include "dowser/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "artifact formats are little-endian; big-endian hosts are unsupported");

namespace dowser {

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw config_error("blob: truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::string take_str(const std::string& in, std::size_t& pos, std::size_t len) {
  if (pos + len > in.size()) throw config_error("blob: truncated file");
  std::string s = in.substr(pos, len);
  pos += len;
  return s;
}

}  // namespace

void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw config_error("cannot open for writing: " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw config_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_blob(const std::filesystem::path& path, const blob_file& file) {
  if (file.magic.size() != 8) throw config_error("blob: magic must be 8 bytes");
  std::string out;
  out.append(file.magic);
  put<std::uint32_t>(out, file.version);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.meta.size()));
  out.append(file.meta);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.entries.size()));

  std::uint64_t offset = 0;
  for (const blob_entry& e : file.entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.append(e.name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::int64_t d : e.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    put<std::uint64_t>(out, offset);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(e.bytes.size()));
    offset += e.bytes.size();
  }
  put<std::uint64_t>(out, offset);
  for (const blob_entry& e : file.entries) {
    out.append(reinterpret_cast<const char*>(e.bytes.data()), e.bytes.size());
  }
  atomic_write(path, out);
}

blob_file read_blob(const std::filesystem::path& path, const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open: " + path.string());
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  blob_file file;
  file.magic = take_str(raw, pos, 8);
  if (file.magic != expected_magic) {
    throw config_error("blob: expected magic " + expected_magic + ", found " + file.magic + " in " +
                       path.string());
  }
  file.version = take<std::uint32_t>(raw, pos);
  const auto meta_len = take<std::uint32_t>(raw, pos);
  file.meta = take_str(raw, pos, meta_len);
  const auto count = take<std::uint32_t>(raw, pos);

  struct pending {
    std::uint64_t offset;
    std::uint64_t size;
  };
  std::vector<pending> spans;
  file.entries.resize(count);
  spans.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    blob_entry& e = file.entries[i];
    const auto name_len = take<std::uint32_t>(raw, pos);
    e.name = take_str(raw, pos, name_len);
    e.dtype = static_cast<blob_dtype>(take<std::uint8_t>(raw, pos));
    const auto ndim = take<std::uint32_t>(raw, pos);
    e.shape.resize(ndim);
    for (std::uint32_t d = 0; d < ndim; ++d)
      e.shape[d] = static_cast<std::int64_t>(take<std::uint64_t>(raw, pos));
    spans[i].offset = take<std::uint64_t>(raw, pos);
    spans[i].size = take<std::uint64_t>(raw, pos);
  }
  const auto data_bytes = take<std::uint64_t>(raw, pos);
  if (pos + data_bytes != raw.size()) throw config_error("blob: data section size mismatch");
  for (std::uint32_t i = 0; i < count; ++i) {
    if (spans[i].offset + spans[i].size > data_bytes) throw config_error("blob: entry out of bounds");
    const char* base = raw.data() + pos + spans[i].offset;
    file.entries[i].bytes.assign(base, base + spans[i].size);
  }
  return file;
}

std::uint64_t fnv1a64(const void* data, std::size_t size) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& text) { return fnv1a64(text.data(), text.size()); }

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open for hashing: " + path.string());
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(raw.data(), raw.size());
}

std::vector<std::uint8_t> pack_f64(const std::vector<double>& values) {
  std::vector<std::uint8_t> bytes(values.size() * sizeof(double));
  std::memcpy(bytes.data(), values.data(), bytes.size());
  return bytes;
}

std::vector<double> unpack_f64(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % sizeof(double) != 0) throw config_error("blob: f64 payload not a multiple of 8");
  std::vector<double> values(bytes.size() / sizeof(double));
  std::memcpy(values.data(), bytes.data(), bytes.size());
  return values;
}

}  // namespace dowser
