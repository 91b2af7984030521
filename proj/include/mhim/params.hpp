#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mhim/tensor.hpp"

namespace mhim {

// Named trainable tensors. std::map gives the deterministic lexicographic
// iteration order the checkpoint format and the optimizer rely on.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (params_.count(name)) throw std::invalid_argument("ParameterStore: duplicate name " + name);
    t.set_requires_grad(true);
    return params_.emplace(name, std::move(t)).first->second;
  }

  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParameterStore: unknown parameter " + name);
    return it->second;
  }

  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParameterStore: unknown parameter " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  // Deep copy (fresh buffers, same names/shapes/values).
  ParameterStore clone() const {
    ParameterStore out;
    for (const auto& [name, t] : params_) out.add(name, t.clone().detach());
    return out;
  }

  // Copies values from another store with identical names and shapes.
  void copy_values_from(const ParameterStore& other) {
    if (other.size() != size()) throw std::invalid_argument("ParameterStore: size mismatch");
    auto it = params_.begin();
    auto jt = other.params_.begin();
    for (; it != params_.end(); ++it, ++jt) {
      if (it->first != jt->first || !it->second.same_shape(jt->second)) {
        throw std::invalid_argument("ParameterStore: layout mismatch at " + it->first);
      }
      *it->second.data = *jt->second.data;
    }
  }

 private:
  std::map<std::string, Tensor> params_;
};

// ---------------------------------------------------------------------------
// Checkpoint format
//
// magic "MHIM", u32 version=1, u32 tensor count; per tensor: u32 name length,
// UTF-8 name, u8 dtype (0=f32, 1=f64), u8 rank, u64 dims[rank], row-major
// little-endian payload. Tensors are written in lexicographic name order.
// ---------------------------------------------------------------------------

enum class CheckpointDtype : uint8_t { f32 = 0, f64 = 1 };

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n) throw std::runtime_error("checkpoint: truncated file");
}

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) {
    buf[i] = static_cast<unsigned char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff);
  }
  write_bytes(os, buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  read_bytes(is, buf, sizeof(T));
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

inline void write_f64_le(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_le<uint64_t>(os, bits);
}

inline double read_f64_le(std::istream& is) {
  const uint64_t bits = read_le<uint64_t>(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline void write_f32_le(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_le<uint32_t>(os, bits);
}

inline float read_f32_le(std::istream& is) {
  const uint32_t bits = read_le<uint32_t>(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const ParameterStore& store, const std::string& path,
                            CheckpointDtype dtype = CheckpointDtype::f64) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  detail::write_bytes(os, "MHIM", 4);
  detail::write_le<uint32_t>(os, 1);  // version
  detail::write_le<uint32_t>(os, static_cast<uint32_t>(store.size()));
  for (const auto& [name, t] : store) {
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(name.size()));
    detail::write_bytes(os, name.data(), name.size());
    detail::write_le<uint8_t>(os, static_cast<uint8_t>(dtype));
    detail::write_le<uint8_t>(os, static_cast<uint8_t>(t.rank()));
    for (int d : t.shape) detail::write_le<uint64_t>(os, static_cast<uint64_t>(d));
    if (dtype == CheckpointDtype::f64) {
      for (Real v : *t.data) detail::write_f64_le(os, v);
    } else {
      for (Real v : *t.data) detail::write_f32_le(os, static_cast<float>(v));
    }
  }
}

inline ParameterStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open for reading: " + path);
  char magic[4];
  detail::read_bytes(is, magic, 4);
  if (std::memcmp(magic, "MHIM", 4) != 0) throw std::runtime_error("checkpoint: bad magic");
  const uint32_t version = detail::read_le<uint32_t>(is);
  if (version != 1) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const uint32_t count = detail::read_le<uint32_t>(is);
  ParameterStore store;
  for (uint32_t k = 0; k < count; ++k) {
    const uint32_t name_len = detail::read_le<uint32_t>(is);
    if (name_len > (1u << 20)) throw std::runtime_error("checkpoint: implausible name length");
    std::string name(name_len, '\0');
    detail::read_bytes(is, name.data(), name_len);
    const uint8_t dtype = detail::read_le<uint8_t>(is);
    if (dtype > 1) throw std::runtime_error("checkpoint: unknown dtype code");
    const uint8_t rank = detail::read_le<uint8_t>(is);
    if (rank > 8) throw std::runtime_error("checkpoint: implausible rank");
    std::vector<int> dims(rank);
    size_t n = 1;
    for (auto& d : dims) {
      const uint64_t dim = detail::read_le<uint64_t>(is);
      if (dim == 0 || dim > (1u << 28)) throw std::runtime_error("checkpoint: implausible dim");
      d = static_cast<int>(dim);
      n *= static_cast<size_t>(dim);
    }
    std::vector<Real> values(n);
    if (dtype == static_cast<uint8_t>(CheckpointDtype::f64)) {
      for (auto& v : values) v = detail::read_f64_le(is);
    } else {
      for (auto& v : values) v = static_cast<Real>(detail::read_f32_le(is));
    }
    store.add(name, Tensor::from_vector(std::move(dims), std::move(values)));
  }
  return store;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  Real lr = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 0.0;
  int64_t t = 0;
  std::map<std::string, std::vector<Real>> m;  // first moments, keyed like the store
  std::map<std::string, std::vector<Real>> v;  // second moments
};

// One Adam update over every parameter in the store. Grads are left untouched;
// the caller resets them between steps. `lr_scale` supports warm-up schedules.
inline void adam_step(ParameterStore& store, AdamState& state, Real lr_scale = 1.0) {
  state.t += 1;
  const Real bc1 = Real(1) - std::pow(state.beta1, static_cast<Real>(state.t));
  const Real bc2 = Real(1) - std::pow(state.beta2, static_cast<Real>(state.t));
  const Real lr = state.lr * lr_scale;
  for (auto& [name, p] : store) {
    if (!p.grad) throw std::logic_error("adam_step: parameter without grad slot: " + name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(p.numel(), Real(0));
    if (v.empty()) v.assign(p.numel(), Real(0));
    if (m.size() != p.numel() || v.size() != p.numel()) {
      throw std::logic_error("adam_step: moment shape drift for " + name);
    }
    for (size_t i = 0; i < p.numel(); ++i) {
      Real g = (*p.grad)[i];
      if (!std::isfinite(g)) throw std::runtime_error("adam_step: non-finite gradient in " + name);
      if (state.weight_decay != 0) g += state.weight_decay * (*p.data)[i];
      m[i] = state.beta1 * m[i] + (Real(1) - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (Real(1) - state.beta2) * g * g;
      const Real mhat = m[i] / bc1;
      const Real vhat = v[i] / bc2;
      (*p.data)[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace mhim
