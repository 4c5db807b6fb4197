#ifndef ARBOR_TENSOR_HPP_
#define ARBOR_TENSOR_HPP_

#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "arbor/errors.hpp"

namespace arbor {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor. The numerics stack is templated on the scalar so
// the same model code runs in float (training) and double (verification).
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), v(shape_numel(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<int64_t>(v.size()) != shape_numel(shape))
      throw ContractViolation("tensor data size does not match shape " + shape_str(shape));
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int64_t dim(int i) const { return shape[i >= 0 ? i : static_cast<int>(shape.size()) + i]; }
  int rank() const { return static_cast<int>(shape.size()); }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }
  T& operator[](int64_t i) { return v[i]; }
  const T& operator[](int64_t i) const { return v[i]; }

  void fill(T x) { std::fill(v.begin(), v.end(), x); }
  void zero() { fill(T(0)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (int64_t i = 0; i < numel(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }

  static Tensor full(Shape s, T x) {
    Tensor t(std::move(s));
    t.fill(x);
    return t;
  }
};

bool all_finite(const Tensor<float>& t);
bool all_finite(const Tensor<double>& t);

// ---------------------------------------------------------------------------
// Named-tensor container: the on-disk format shared by model checkpoints,
// optimizer state and block archives.
//
//   magic "ARBT" | u32 version=1 | u64 entry count
//   per entry: u32 name_len | name | u8 dtype | u8 rank | u64 dims[rank] |
//              raw little-endian values
//
// dtype: 0 = f32, 1 = f64, 2 = i64, 3 = u8. Round-trips are bit-exact.
// ---------------------------------------------------------------------------

enum class Dtype : uint8_t { F32 = 0, F64 = 1, I64 = 2, U8 = 3 };

struct NamedTensor {
  Dtype dtype = Dtype::F64;
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<int64_t> i64;
  std::vector<uint8_t> u8;

  static NamedTensor from(const Tensor<float>& t) {
    NamedTensor n;
    n.dtype = Dtype::F32;
    n.shape = t.shape;
    n.f32 = t.v;
    return n;
  }
  static NamedTensor from(const Tensor<double>& t) {
    NamedTensor n;
    n.dtype = Dtype::F64;
    n.shape = t.shape;
    n.f64 = t.v;
    return n;
  }
  static NamedTensor scalar_i64(int64_t x) {
    NamedTensor n;
    n.dtype = Dtype::I64;
    n.shape = {1};
    n.i64 = {x};
    return n;
  }
  int64_t numel() const { return shape_numel(shape); }
};

using TensorMap = std::map<std::string, NamedTensor>;

void write_tensor_map(std::ostream& os, const TensorMap& m);
TensorMap read_tensor_map(std::istream& is);

void save_tensor_map(const std::string& path, const TensorMap& m);
TensorMap load_tensor_map(const std::string& path);

}  // namespace arbor

#endif  // ARBOR_TENSOR_HPP_
