#pragma once

#include "m2v/common.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace m2v {

/// Named parameter tensors with matching gradient buffers, in insertion order.
class ParamStore {
 public:
  void add(const std::string& name, Matrix value);
  bool contains(const std::string& name) const { return index_.contains(name); }

  Matrix& value(const std::string& name);
  const Matrix& value(const std::string& name) const;
  Matrix& grad(const std::string& name);
  const Matrix& grad(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  /// Total over every scalar, handy for equality checks in tests.
  std::uint64_t hash() const;

 private:
  struct Entry {
    Matrix value;
    Matrix grad;
  };
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::vector<std::string> names_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::unordered_map<std::string, Matrix> m;
  std::unordered_map<std::string, Matrix> v;
};

/// Bias-corrected Adam update followed by zeroing every gradient.
/// A non-finite gradient throws NumericalError before anything is modified.
void adam_step(ParamStore& params, AdamState& state);

// Named-tensor archive.
//
// Layout (all integers little-endian):
//   magic "M2VARCH" (7 bytes), version byte (1), u32 entry count, then per entry
//   u8 kind (0 = tensor, 1 = text), u32 name length, name bytes, and
//   tensor: u64 rows, u64 cols, rows*cols f64 row-major values
//   text:   u64 byte length, bytes.
struct Archive {
  std::vector<std::pair<std::string, Matrix>> tensors;
  std::vector<std::pair<std::string, std::string>> texts;

  const Matrix* find_tensor(const std::string& name) const;
  const std::string* find_text(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
/// Throws DataError with the byte offset on truncation or corruption.
Archive read_archive(const std::filesystem::path& path);

}  // namespace m2v
