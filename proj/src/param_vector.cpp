#include "hyperfed/param_vector.hpp"

#include "hyperfed/binary_io.hpp"

#include <numeric>
#include <stdexcept>

namespace hyperfed {

std::int64_t TensorShape::size() const {
  return std::accumulate(dims.begin(), dims.end(), std::int64_t{1}, std::multiplies<>());
}

std::int64_t layout_size(const Layout& layout) {
  std::int64_t total = 0;
  for (const auto& t : layout) total += t.size();
  return total;
}

ParamVector::ParamVector(Layout layout)
    : layout_(std::move(layout)), values_(Eigen::VectorXd::Zero(layout_size(layout_))) {}

ParamVector::ParamVector(Layout layout, Eigen::VectorXd values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_size(layout_)) {
    throw std::invalid_argument("ParamVector: " + std::to_string(values_.size()) +
                                " values for a layout of size " +
                                std::to_string(layout_size(layout_)));
  }
}

ParamVector ParamVector::zeros_like(const ParamVector& other) { return ParamVector(other.layout_); }

std::int64_t ParamVector::offset_of(const std::string& name) const {
  std::int64_t offset = 0;
  for (const auto& t : layout_) {
    if (t.name == name) return offset;
    offset += t.size();
  }
  throw std::invalid_argument("ParamVector: no tensor named '" + name + "'");
}

void ParamVector::require_combinable(const ParamVector& other, const char* op) const {
  if (!combinable_with(other)) {
    throw std::invalid_argument(std::string("ParamVector::") + op + ": layout mismatch");
  }
}

ParamVector& ParamVector::operator+=(const ParamVector& other) {
  require_combinable(other, "operator+=");
  values_ += other.values_;
  return *this;
}

ParamVector& ParamVector::operator-=(const ParamVector& other) {
  require_combinable(other, "operator-=");
  values_ -= other.values_;
  return *this;
}

ParamVector& ParamVector::operator*=(double scale) {
  values_ *= scale;
  return *this;
}

double ParamVector::dot(const ParamVector& other) const {
  require_combinable(other, "dot");
  return values_.dot(other.values_);
}

bool ParamVector::operator==(const ParamVector& other) const {
  return layout_ == other.layout_ && values_ == other.values_;
}

ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
ParamVector operator*(double scale, ParamVector a) { return a *= scale; }

std::vector<std::uint8_t> encode_checkpoint(const ParamVector& params) {
  io::ByteWriter w;
  w.u64(params.layout().size());
  for (const auto& t : params.layout()) {
    w.str(t.name);
    w.u64(t.dims.size());
    for (auto d : t.dims) w.u64(static_cast<std::uint64_t>(d));
  }
  for (Eigen::Index i = 0; i < params.size(); ++i) w.f64(params.values()[i]);
  return w.bytes();
}

ParamVector decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  const std::uint64_t count = r.u64();
  if (count > bytes.size()) throw std::runtime_error("checkpoint: implausible tensor count");
  Layout layout;
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorShape t;
    t.name = r.str();
    const std::uint64_t rank = r.u64();
    if (rank > 8) throw std::runtime_error("checkpoint: tensor '" + t.name + "' has rank > 8");
    for (std::uint64_t d = 0; d < rank; ++d) t.dims.push_back(static_cast<std::int64_t>(r.u64()));
    layout.push_back(std::move(t));
  }
  const std::int64_t n = layout_size(layout);
  if (r.remaining() != static_cast<std::size_t>(n) * 8) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(n) + " values, found " +
                             std::to_string(r.remaining()) + " bytes");
  }
  Eigen::VectorXd values(n);
  for (std::int64_t i = 0; i < n; ++i) values[i] = r.f64();
  return ParamVector(std::move(layout), std::move(values));
}

void save_checkpoint(const ParamVector& params, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(params));
}

ParamVector load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace hyperfed
