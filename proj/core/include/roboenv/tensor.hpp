#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace roboenv {

// Dense row-major double tensor. Value semantics; all indexing is bounds-unchecked
// in release builds except where noted.
struct Tensor {
  std::vector<long> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<long> s) : shape(std::move(s)), v(count(shape), 0.0) {}
  Tensor(std::vector<long> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<long>(v.size()) != count(shape)) throw std::invalid_argument("Tensor: data/shape mismatch");
  }

  static long count(const std::vector<long>& s) {
    long n = 1;
    for (long d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dim");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<long> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<long> s, double x) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }
  static Tensor scalar(double x) { return Tensor({1}, {x}); }

  long numel() const { return static_cast<long>(v.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  long dim(int i) const {
    if (i < 0) i += ndim();
    return shape.at(static_cast<size_t>(i));
  }

  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  double& operator[](long i) { return v[static_cast<size_t>(i)]; }
  double operator[](long i) const { return v[static_cast<size_t>(i)]; }

  // flat offset helpers for the common ranks
  double& at(long i, long j) { return v[static_cast<size_t>(i * shape[1] + j)]; }
  double at(long i, long j) const { return v[static_cast<size_t>(i * shape[1] + j)]; }
  double& at(long i, long j, long k) { return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)]; }
  double at(long i, long j, long k) const { return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)]; }
  double& at(long i, long j, long k, long l) {
    return v[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }
  double at(long i, long j, long k, long l) const {
    return v[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }

  Tensor reshaped(std::vector<long> s) const {
    if (count(s) != numel()) throw std::invalid_argument("reshape: element count mismatch");
    Tensor t;
    t.shape = std::move(s);
    t.v = v;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

// ===== deterministic RNG =====
//
// All randomness in the project flows through Rng so runs are reproducible
// across platforms and standard libraries (std distributions are not
// implementation-defined-free). Gaussian draws use Box-Muller.
class Rng {
 public:
  explicit Rng(uint64_t seed) { seed_state(seed); }

  uint64_t next_u64() {
    // xoshiro256++
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  long uniform_int(long n) {  // [0, n)
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    return static_cast<long>(next_u64() % static_cast<uint64_t>(n));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  void fill_normal(Tensor& t) {
    for (auto& x : t.v) x = normal();
  }
  Tensor normal_tensor(std::vector<long> shape) {
    Tensor t(std::move(shape));
    fill_normal(t);
    return t;
  }

  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (long i = static_cast<long>(xs.size()) - 1; i > 0; --i) {
      long j = uniform_int(i + 1);
      std::swap(xs[static_cast<size_t>(i)], xs[static_cast<size_t>(j)]);
    }
  }

  // Stable derivation of independent streams, e.g. per-gap sampler seeds.
  static uint64_t derive(uint64_t seed, uint64_t stream) {
    uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    x = splitmix_step(x);
    x = splitmix_step(x);
    return x;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix_step(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t splitmix_step(uint64_t&& x) {
    uint64_t y = x;
    return splitmix_step(y);
  }

  void seed_state(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : s_) s = splitmix_step(x);
    have_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t s_[4]{};
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace roboenv
