#pragma once

// Exact probability laws on finite product spaces.
//
// Every law is a dense mass table over the product of named categorical axes,
// stored row-major with the last axis varying fastest. Functions of a subset of
// the axes (CellFunction) are tables over the corresponding sub-product. All
// types are immutable values; operations are free functions.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "localid/error.hpp"

namespace localid {

inline constexpr double kMassTolerance = 1e-12;
inline constexpr std::string_view kMissingLabel = "NA";

class Axis {
 public:
  Axis(std::string name, std::vector<std::string> labels);

  const std::string& name() const { return name_; }
  const std::vector<std::string>& labels() const { return labels_; }
  std::size_t size() const { return labels_.size(); }
  const std::string& label(std::size_t i) const { return labels_.at(i); }

  std::optional<std::size_t> find(std::string_view label) const;
  std::size_t index_of(std::string_view label) const;

  // Labels parsed as numbers; the missing label maps to `missing_value`.
  std::vector<double> numeric_values(double missing_value = 0.0) const;

  bool operator==(const Axis&) const = default;

 private:
  std::string name_;
  std::vector<std::string> labels_;
};

// Axis with labels "0", "1", ..., "n-1".
Axis indexed_axis(std::string name, std::size_t n);
// Axis whose labels are the shortest round-trip decimal strings of `values`.
Axis numeric_axis(std::string name, std::span<const double> values);
std::string format_number(double v);

class ProductSpace {
 public:
  ProductSpace() = default;
  explicit ProductSpace(std::vector<Axis> axes);

  const std::vector<Axis>& axes() const { return axes_; }
  std::size_t rank() const { return axes_.size(); }
  std::size_t size() const { return size_; }
  const Axis& axis(std::size_t k) const { return axes_.at(k); }
  const Axis& axis(std::string_view name) const { return axes_.at(axis_position(name)); }

  std::optional<std::size_t> find_axis(std::string_view name) const;
  std::size_t axis_position(std::string_view name) const;  // throws UnknownAxis
  std::vector<std::string> names() const;

  std::size_t encode(std::span<const std::size_t> coords) const;
  std::vector<std::size_t> decode(std::size_t cell) const;
  std::size_t coordinate(std::size_t cell, std::size_t axis_pos) const {
    return (cell / strides_[axis_pos]) % axes_[axis_pos].size();
  }

  // Sub-space keeping the named axes in this space's order.
  ProductSpace subspace(std::span<const std::string> keep) const;

  bool operator==(const ProductSpace& o) const { return axes_ == o.axes_; }

 private:
  std::vector<Axis> axes_;
  std::vector<std::size_t> strides_;
  std::size_t size_ = 1;
};

// For every cell of `from`, the index of its projection in `onto`. The axes of
// `onto` must appear in `from` with identical labels.
std::vector<std::size_t> projection_map(const ProductSpace& from, const ProductSpace& onto);

class JointLaw {
 public:
  JointLaw(ProductSpace space, std::vector<double> mass);

  // Divides nonnegative weights by their total.
  static JointLaw normalized(ProductSpace space, std::vector<double> weights);
  static JointLaw uniform(ProductSpace space);

  const ProductSpace& space() const { return space_; }
  const std::vector<double>& mass() const { return mass_; }
  double mass(std::size_t cell) const { return mass_[cell]; }
  std::size_t size() const { return mass_.size(); }

 private:
  ProductSpace space_;
  std::vector<double> mass_;
};

// A real function on the cells of a product space (usually a sub-space of
// some law). `flagged` marks cells the producer could not define, such as
// conditioning cells with zero mass.
struct CellFunction {
  ProductSpace space;
  std::vector<double> values;
  std::vector<std::uint8_t> flagged;

  CellFunction() = default;
  CellFunction(ProductSpace s, std::vector<double> v);
  static CellFunction constant(ProductSpace s, double c);

  double operator[](std::size_t i) const { return values[i]; }
  std::size_t size() const { return values.size(); }
  bool is_flagged(std::size_t i) const { return !flagged.empty() && flagged[i] != 0; }
};

// A direction in L2_0(P): one value per cell of the law, mean zero under it.
class ScoreFunction {
 public:
  ScoreFunction(const JointLaw& law, std::vector<double> values);
  // Centers arbitrary values under the law.
  static ScoreFunction centered(const JointLaw& law, std::vector<double> values);

  const std::vector<double>& values() const { return values_; }

 private:
  std::vector<double> values_;
};

using Assignment = std::vector<std::pair<std::string, std::string>>;

JointLaw marginal(const JointLaw& law, std::span<const std::string> keep);
JointLaw condition(const JointLaw& law, const Assignment& given);
double expectation(const JointLaw& law, const CellFunction& f);
// Per-cell values of f lifted to the full space of the law.
std::vector<double> lift(const JointLaw& law, const CellFunction& f);
CellFunction cond_expectation(const JointLaw& law, const CellFunction& f,
                              std::span<const std::string> given);
// Same, for a function already given per cell of the law.
CellFunction cond_expectation(const JointLaw& law, std::span<const double> per_cell,
                              std::span<const std::string> given);
JointLaw perturb(const JointLaw& law, const ScoreFunction& g, double theta);

using CellMap = std::function<std::vector<std::size_t>(std::span<const std::size_t>)>;
JointLaw pushforward(const JointLaw& law, const ProductSpace& target, const CellMap& map);

double total_variation(const JointLaw& a, const JointLaw& b);

// iid records stored as flat cell indices of `space`.
struct Dataset {
  ProductSpace space;
  std::vector<std::uint32_t> cells;

  std::size_t size() const { return cells.size(); }
};

JointLaw empirical_law(const Dataset& data);
Dataset make_dataset(const ProductSpace& space, const std::vector<std::vector<std::string>>& rows);

// Text table: header of axis names followed by "mass", then one row per cell.
std::string law_to_table(const JointLaw& law);
JointLaw law_from_table(std::string_view text);

// CSV with a header naming the axes; one record per row.
std::string dataset_to_csv(const Dataset& data);
Dataset dataset_from_csv(std::string_view text, const ProductSpace& space);

}  // namespace localid
