#include "arbor/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>

namespace arbor {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

bool all_finite(const Tensor<float>& t) {
  for (float x : t.v)
    if (!std::isfinite(x)) return false;
  return true;
}

bool all_finite(const Tensor<double>& t) {
  for (double x : t.v)
    if (!std::isfinite(x)) return false;
  return true;
}

namespace {

constexpr char kMagic[4] = {'A', 'R', 'B', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& x) {
  os.write(reinterpret_cast<const char*>(&x), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T x{};
  is.read(reinterpret_cast<char*>(&x), sizeof(T));
  if (!is) throw IoError("tensor container: truncated stream");
  return x;
}

size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F32: return 4;
    case Dtype::F64: return 8;
    case Dtype::I64: return 8;
    case Dtype::U8: return 1;
  }
  throw IoError("tensor container: unknown dtype");
}

}  // namespace

void write_tensor_map(std::ostream& os, const TensorMap& m) {
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, static_cast<uint64_t>(m.size()));
  for (const auto& [name, t] : m) {
    write_pod(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<uint8_t>(t.dtype));
    write_pod(os, static_cast<uint8_t>(t.shape.size()));
    for (int64_t d : t.shape) write_pod(os, static_cast<uint64_t>(d));
    const int64_t n = t.numel();
    const char* raw = nullptr;
    switch (t.dtype) {
      case Dtype::F32: raw = reinterpret_cast<const char*>(t.f32.data()); break;
      case Dtype::F64: raw = reinterpret_cast<const char*>(t.f64.data()); break;
      case Dtype::I64: raw = reinterpret_cast<const char*>(t.i64.data()); break;
      case Dtype::U8: raw = reinterpret_cast<const char*>(t.u8.data()); break;
    }
    os.write(raw, static_cast<std::streamsize>(n * dtype_size(t.dtype)));
  }
  if (!os) throw IoError("tensor container: write failed");
}

TensorMap read_tensor_map(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("tensor container: bad magic");
  uint32_t version = read_pod<uint32_t>(is);
  if (version != kVersion)
    throw IoError("tensor container: unsupported version " + std::to_string(version));
  uint64_t count = read_pod<uint64_t>(is);
  TensorMap m;
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = read_pod<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    NamedTensor t;
    t.dtype = static_cast<Dtype>(read_pod<uint8_t>(is));
    uint8_t rank = read_pod<uint8_t>(is);
    t.shape.resize(rank);
    for (int r = 0; r < rank; ++r) t.shape[r] = static_cast<int64_t>(read_pod<uint64_t>(is));
    const int64_t n = t.numel();
    char* raw = nullptr;
    switch (t.dtype) {
      case Dtype::F32: t.f32.resize(n); raw = reinterpret_cast<char*>(t.f32.data()); break;
      case Dtype::F64: t.f64.resize(n); raw = reinterpret_cast<char*>(t.f64.data()); break;
      case Dtype::I64: t.i64.resize(n); raw = reinterpret_cast<char*>(t.i64.data()); break;
      case Dtype::U8: t.u8.resize(n); raw = reinterpret_cast<char*>(t.u8.data()); break;
    }
    is.read(raw, static_cast<std::streamsize>(n * dtype_size(t.dtype)));
    if (!is) throw IoError("tensor container: truncated entry " + name);
    m.emplace(std::move(name), std::move(t));
  }
  return m;
}

void save_tensor_map(const std::string& path, const TensorMap& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  write_tensor_map(os, m);
}

TensorMap load_tensor_map(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  return read_tensor_map(is);
}

}  // namespace arbor
