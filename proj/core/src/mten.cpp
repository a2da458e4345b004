#include "rvit/mten.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace rvit {

namespace {

constexpr char kMtenMagic[5] = {'M', 'T', 'E', 'N', '1'};
constexpr char kArchiveMagic[5] = {'M', 'A', 'R', 'C', '1'};

void write_u32le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32le(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError(cat("mten: truncated u32 in ", what));
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32le(std::ostream& os, const float* p, int64_t n) {
  // Little-endian host assumed; asserted once at startup would be overkill
  // for the platforms this targets.
  os.write(reinterpret_cast<const char*>(p), n * 4);
}

}  // namespace

void write_mten(std::ostream& os, const Tensor& t) {
  if (!t.defined()) throw ValueError("mten: undefined tensor");
  if (t.ndim() > 255) throw ValueError("mten: rank exceeds u8");
  os.write(kMtenMagic, 5);
  const unsigned char rank = static_cast<unsigned char>(t.ndim());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int i = 0; i < t.ndim(); ++i) write_u32le(os, static_cast<uint32_t>(t.dim(i)));
  write_f32le(os, t.data(), t.numel());
  if (!os) throw IoError("mten: write failed");
}

Tensor read_mten(std::istream& is, const std::string& what) {
  char magic[5];
  if (!is.read(magic, 5) || std::memcmp(magic, kMtenMagic, 5) != 0) {
    throw IoError(cat("mten: bad magic bytes for ", what));
  }
  unsigned char rank = 0;
  if (!is.read(reinterpret_cast<char*>(&rank), 1)) throw IoError(cat("mten: truncated rank for ", what));
  Shape shape(rank);
  for (int i = 0; i < rank; ++i) shape[static_cast<size_t>(i)] = static_cast<int>(read_u32le(is, what));
  const int64_t n = shape_numel(shape);
  std::vector<float> data(static_cast<size_t>(n));
  if (!is.read(reinterpret_cast<char*>(data.data()), n * 4)) {
    throw IoError(cat("mten: truncated payload for ", what, " ", shape_str(shape)));
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(cat("mten: cannot open ", path, " for writing"));
  write_mten(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(cat("mten: cannot open ", path));
  return read_mten(is, path);
}

bool Archive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const Tensor& Archive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw IoError(cat("archive: missing tensor '", name, "'"));
}

void Archive::put(const std::string& name, Tensor t) {
  if (has(name)) throw ValueError(cat("archive: duplicate tensor name '", name, "'"));
  tensors.emplace_back(name, std::move(t));
}

int64_t Archive::total_params() const {
  int64_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

void save_archive(const std::string& path, const Archive& a) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(cat("archive: cannot open ", path, " for writing"));
  os.write(kArchiveMagic, 5);
  const unsigned char version = 1;
  os.write(reinterpret_cast<const char*>(&version), 1);
  write_u32le(os, static_cast<uint32_t>(a.meta_json.size()));
  os.write(a.meta_json.data(), static_cast<std::streamsize>(a.meta_json.size()));
  write_u32le(os, static_cast<uint32_t>(a.tensors.size()));
  for (const auto& [name, t] : a.tensors) {
    write_u32le(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_mten(os, t);
  }
  if (!os) throw IoError(cat("archive: write failed for ", path));
}

Archive load_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(cat("archive: cannot open ", path));
  char magic[5];
  if (!is.read(magic, 5) || std::memcmp(magic, kArchiveMagic, 5) != 0) {
    throw IoError(cat("archive: bad magic bytes in ", path));
  }
  unsigned char version = 0;
  if (!is.read(reinterpret_cast<char*>(&version), 1) || version != 1) {
    throw IoError(cat("archive: unsupported version in ", path));
  }
  Archive a;
  const uint32_t jlen = read_u32le(is, path);
  a.meta_json.resize(jlen);
  if (jlen > 0 && !is.read(a.meta_json.data(), jlen)) throw IoError(cat("archive: truncated header in ", path));
  const uint32_t count = read_u32le(is, path);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t nlen = read_u32le(is, path);
    std::string name(nlen, '\0');
    if (nlen > 0 && !is.read(name.data(), nlen)) throw IoError(cat("archive: truncated name in ", path));
    Tensor t = read_mten(is, name);
    if (a.has(name)) throw IoError(cat("archive: duplicate tensor '", name, "' in ", path));
    a.tensors.emplace_back(std::move(name), std::move(t));
  }
  return a;
}

}  // namespace rvit
