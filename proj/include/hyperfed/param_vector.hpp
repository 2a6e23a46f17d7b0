// Flat parameter vectors with tensor layout metadata, plus the little-endian
// checkpoint format shared by global and per-client models.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hyperfed {

struct TensorShape {
  std::string name;
  std::vector<std::int64_t> dims;

  std::int64_t size() const;
  bool operator==(const TensorShape&) const = default;
};

using Layout = std::vector<TensorShape>;

std::int64_t layout_size(const Layout& layout);

/// Flattened model parameters. Arithmetic between two ParamVectors requires
/// identical layouts and throws std::invalid_argument otherwise.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(Layout layout);
  ParamVector(Layout layout, Eigen::VectorXd values);

  static ParamVector zeros_like(const ParamVector& other);

  const Layout& layout() const { return layout_; }
  const Eigen::VectorXd& values() const { return values_; }
  Eigen::VectorXd& values() { return values_; }
  Eigen::Index size() const { return values_.size(); }

  bool combinable_with(const ParamVector& other) const { return layout_ == other.layout_; }

  /// Offset of the named tensor inside values().
  std::int64_t offset_of(const std::string& name) const;

  ParamVector& operator+=(const ParamVector& other);
  ParamVector& operator-=(const ParamVector& other);
  ParamVector& operator*=(double scale);

  double dot(const ParamVector& other) const;
  bool all_finite() const { return values_.allFinite(); }

  bool operator==(const ParamVector& other) const;

 private:
  void require_combinable(const ParamVector& other, const char* op) const;

  Layout layout_;
  Eigen::VectorXd values_;
};

ParamVector operator+(ParamVector a, const ParamVector& b);
ParamVector operator-(ParamVector a, const ParamVector& b);
ParamVector operator*(double scale, ParamVector a);

/// Checkpoint: u64 tensor count, then per tensor (u64 name length, name bytes,
/// u64 rank, rank x u64 dims), then every value as a little-endian f64.
std::vector<std::uint8_t> encode_checkpoint(const ParamVector& params);
ParamVector decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const ParamVector& params, const std::filesystem::path& path);
ParamVector load_checkpoint(const std::filesystem::path& path);

}  // namespace hyperfed
