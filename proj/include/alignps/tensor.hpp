#pragma once

#include <cstdint>
#include <new>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace alignps {

[[noreturn]] inline void fail(const std::string &msg) {
  throw std::runtime_error(msg);
}

#define APS_CHECK(cond, msg)                                              \
  do {                                                                    \
    if (!(cond)) ::alignps::fail(std::string("check failed: ") + (msg));  \
  } while (0)

/// 64-byte-aligned storage for tensor payloads. The matrix kernels pick
/// vectorized code paths based on pointer alignment, so buffers at arbitrary
/// heap offsets can sum in different orders and smear the low-order bits
/// from run to run; pinning every tensor to one alignment keeps training
/// bit-reproducible.
template <typename T>
struct TensorAlloc {
  using value_type = T;
  TensorAlloc() = default;
  template <typename U>
  TensorAlloc(const TensorAlloc<U> &) {}
  T *allocate(size_t n) {
    return static_cast<T *>(::operator new(n * sizeof(T), std::align_val_t(64)));
  }
  void deallocate(T *p, size_t) noexcept { ::operator delete(p, std::align_val_t(64)); }
  bool operator==(const TensorAlloc &) const { return true; }
  bool operator!=(const TensorAlloc &) const { return false; }
};

/// Dense row-major tensor. Feature maps use NCHW layout by convention.
template <typename T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), T(0));
  }
  TensorT(std::vector<int> shape, const std::vector<T> &data) : shape_(std::move(shape)) {
    APS_CHECK(static_cast<std::int64_t>(data.size()) == numel_of(shape_),
              "tensor data size does not match shape");
    data_.assign(data.begin(), data.end());
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }
  static TensorT full(std::vector<int> shape, T v) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  const std::vector<int> &shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T *data() { return data_.data(); }
  const T *data() const { return data_.data(); }
  T &operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T &operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW element access.
  T &at4(int n, int c, int y, int x) {
    return data_[static_cast<size_t>(((static_cast<std::int64_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x)];
  }
  const T &at4(int n, int c, int y, int x) const {
    return data_[static_cast<size_t>(((static_cast<std::int64_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x)];
  }
  T &at3(int c, int y, int x) {
    return data_[static_cast<size_t>((static_cast<std::int64_t>(c) * dim(1) + y) * dim(2) + x)];
  }
  const T &at3(int c, int y, int x) const {
    return data_[static_cast<size_t>((static_cast<std::int64_t>(c) * dim(1) + y) * dim(2) + x)];
  }
  T &at2(int r, int c) { return data_[static_cast<size_t>(static_cast<std::int64_t>(r) * dim(1) + c)]; }
  const T &at2(int r, int c) const {
    return data_[static_cast<size_t>(static_cast<std::int64_t>(r) * dim(1) + c)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const TensorT &o) const { return shape_ == o.shape_; }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return TensorT<U>(shape_, std::move(out));
  }

  static std::int64_t numel_of(const std::vector<int> &shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      APS_CHECK(d >= 0, "negative tensor dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<T, TensorAlloc<T>> data_;
};

using Tensor = TensorT<float>;

inline std::string shape_str(const std::vector<int> &s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

}  // namespace alignps
