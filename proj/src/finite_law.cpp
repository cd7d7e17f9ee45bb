#include "localid/finite_law.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "localid/text_util.hpp"

namespace localid {

std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownAxis: return "UnknownAxis";
    case ErrorCode::LabelMismatch: return "LabelMismatch";
    case ErrorCode::InvalidLaw: return "InvalidLaw";
    case ErrorCode::ZeroMassEvent: return "ZeroMassEvent";
    case ErrorCode::PathLeavesSimplex: return "PathLeavesSimplex";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::EmptyTarget: return "EmptyTarget";
    case ErrorCode::DegenerateWeight: return "DegenerateWeight";
    case ErrorCode::NotSymmetric: return "NotSymmetric";
    case ErrorCode::NegativeEigenvalue: return "NegativeEigenvalue";
    case ErrorCode::InfeasiblePoint: return "InfeasiblePoint";
    case ErrorCode::OverlapViolation: return "OverlapViolation";
    case ErrorCode::BridgeViolated: return "BridgeViolated";
    case ErrorCode::MissingOverlap: return "MissingOverlap";
    case ErrorCode::ConstructionInapplicable: return "ConstructionInapplicable";
    case ErrorCode::InvalidSizes: return "InvalidSizes";
    case ErrorCode::NotBijective: return "NotBijective";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::EmptyArm: return "EmptyArm";
    case ErrorCode::GridTooCoarse: return "GridTooCoarse";
    case ErrorCode::BridgeUnsolvable: return "BridgeUnsolvable";
    case ErrorCode::EstimandMismatch: return "EstimandMismatch";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::PerturbationLeavesSimplex: return "PerturbationLeavesSimplex";
    case ErrorCode::ParseError: return "ParseError";
  }
  return "Unknown";
}

// ---------------------------------------------------------------------------
// Axis

Axis::Axis(std::string name, std::vector<std::string> labels)
    : name_(std::move(name)), labels_(std::move(labels)) {
  if (name_.empty()) fail(ErrorCode::InvalidLaw, "axis name must be nonempty");
  if (labels_.empty()) fail(ErrorCode::InvalidLaw, "axis '" + name_ + "' has no labels");
  std::set<std::string> seen(labels_.begin(), labels_.end());
  if (seen.size() != labels_.size()) fail(ErrorCode::InvalidLaw, "axis '" + name_ + "' has duplicate labels");
}

std::optional<std::size_t> Axis::find(std::string_view label) const {
  for (std::size_t i = 0; i < labels_.size(); ++i)
    if (labels_[i] == label) return i;
  return std::nullopt;
}

std::size_t Axis::index_of(std::string_view label) const {
  if (auto i = find(label)) return *i;
  fail(ErrorCode::LabelMismatch, "label '" + std::string(label) + "' not on axis '" + name_ + "'");
}

std::vector<double> Axis::numeric_values(double missing_value) const {
  std::vector<double> out;
  out.reserve(labels_.size());
  for (const auto& l : labels_) {
    if (l == kMissingLabel) {
      out.push_back(missing_value);
      continue;
    }
    auto v = parse_double(l);
    if (!v) fail(ErrorCode::LabelMismatch, "axis '" + name_ + "' label '" + l + "' is not numeric");
    out.push_back(*v);
  }
  return out;
}

Axis indexed_axis(std::string name, std::size_t n) {
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < n; ++i) labels.push_back(std::to_string(i));
  return Axis(std::move(name), std::move(labels));
}

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Axis numeric_axis(std::string name, std::span<const double> values) {
  std::vector<std::string> labels;
  for (double v : values) labels.push_back(format_number(v));
  return Axis(std::move(name), std::move(labels));
}

// ---------------------------------------------------------------------------
// ProductSpace

ProductSpace::ProductSpace(std::vector<Axis> axes) : axes_(std::move(axes)) {
  std::set<std::string> names;
  for (const auto& a : axes_)
    if (!names.insert(a.name()).second) fail(ErrorCode::InvalidLaw, "duplicate axis name '" + a.name() + "'");
  strides_.assign(axes_.size(), 1);
  size_ = 1;
  for (std::size_t k = axes_.size(); k-- > 0;) {
    strides_[k] = size_;
    size_ *= axes_[k].size();
  }
}

std::optional<std::size_t> ProductSpace::find_axis(std::string_view name) const {
  for (std::size_t k = 0; k < axes_.size(); ++k)
    if (axes_[k].name() == name) return k;
  return std::nullopt;
}

std::size_t ProductSpace::axis_position(std::string_view name) const {
  if (auto k = find_axis(name)) return *k;
  fail(ErrorCode::UnknownAxis, "no axis named '" + std::string(name) + "'");
}

std::vector<std::string> ProductSpace::names() const {
  std::vector<std::string> out;
  for (const auto& a : axes_) out.push_back(a.name());
  return out;
}

std::size_t ProductSpace::encode(std::span<const std::size_t> coords) const {
  std::size_t cell = 0;
  for (std::size_t k = 0; k < axes_.size(); ++k) cell += coords[k] * strides_[k];
  return cell;
}

std::vector<std::size_t> ProductSpace::decode(std::size_t cell) const {
  std::vector<std::size_t> coords(axes_.size());
  for (std::size_t k = 0; k < axes_.size(); ++k) coords[k] = coordinate(cell, k);
  return coords;
}

ProductSpace ProductSpace::subspace(std::span<const std::string> keep) const {
  for (const auto& n : keep) axis_position(n);
  std::vector<Axis> kept;
  for (const auto& a : axes_)
    if (std::find(keep.begin(), keep.end(), a.name()) != keep.end()) kept.push_back(a);
  return ProductSpace(std::move(kept));
}

std::vector<std::size_t> projection_map(const ProductSpace& from, const ProductSpace& onto) {
  std::vector<std::size_t> pos(onto.rank());
  for (std::size_t j = 0; j < onto.rank(); ++j) {
    pos[j] = from.axis_position(onto.axis(j).name());
    if (!(from.axis(pos[j]) == onto.axis(j)))
      fail(ErrorCode::LabelMismatch, "axis '" + onto.axis(j).name() + "' has different labels");
  }
  std::vector<std::size_t> out(from.size());
  std::vector<std::size_t> coords(onto.rank());
  for (std::size_t cell = 0; cell < from.size(); ++cell) {
    for (std::size_t j = 0; j < onto.rank(); ++j) coords[j] = from.coordinate(cell, pos[j]);
    out[cell] = onto.encode(coords);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JointLaw

JointLaw::JointLaw(ProductSpace space, std::vector<double> mass) : space_(std::move(space)), mass_(std::move(mass)) {
  if (mass_.size() != space_.size()) fail(ErrorCode::InvalidLaw, "mass table size does not match the product space");
  double total = 0.0;
  for (double m : mass_) {
    if (!(m >= 0.0) || !std::isfinite(m)) fail(ErrorCode::InvalidLaw, "negative or non-finite mass");
    total += m;
  }
  if (std::abs(total - 1.0) > kMassTolerance)
    fail(ErrorCode::InvalidLaw, "masses sum to " + format_number(total) + ", not 1");
}

JointLaw JointLaw::normalized(ProductSpace space, std::vector<double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) fail(ErrorCode::InvalidLaw, "negative or non-finite weight");
    total += w;
  }
  if (!(total > 0.0)) fail(ErrorCode::InvalidLaw, "weights sum to zero");
  for (double& w : weights) w /= total;
  return JointLaw(std::move(space), std::move(weights));
}

JointLaw JointLaw::uniform(ProductSpace space) {
  std::vector<double> w(space.size(), 1.0);
  return normalized(std::move(space), std::move(w));
}

// ---------------------------------------------------------------------------
// CellFunction / ScoreFunction

CellFunction::CellFunction(ProductSpace s, std::vector<double> v) : space(std::move(s)), values(std::move(v)) {
  if (values.size() != space.size()) fail(ErrorCode::InvalidLaw, "cell function size does not match its space");
}

CellFunction CellFunction::constant(ProductSpace s, double c) {
  std::vector<double> v(s.size(), c);
  return CellFunction(std::move(s), std::move(v));
}

ScoreFunction::ScoreFunction(const JointLaw& law, std::vector<double> values) : values_(std::move(values)) {
  if (values_.size() != law.size()) fail(ErrorCode::InvalidLaw, "score size does not match the law");
  double mean = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) mean += law.mass(i) * values_[i];
  if (std::abs(mean) > kMassTolerance) fail(ErrorCode::InvalidLaw, "score is not mean zero");
}

ScoreFunction ScoreFunction::centered(const JointLaw& law, std::vector<double> values) {
  if (values.size() != law.size()) fail(ErrorCode::InvalidLaw, "score size does not match the law");
  double mean = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) mean += law.mass(i) * values[i];
  for (double& v : values) v -= mean;
  return ScoreFunction(law, std::move(values));
}

// ---------------------------------------------------------------------------
// Operations

JointLaw marginal(const JointLaw& law, std::span<const std::string> keep) {
  ProductSpace sub = law.space().subspace(keep);
  auto proj = projection_map(law.space(), sub);
  std::vector<double> m(sub.size(), 0.0);
  for (std::size_t c = 0; c < law.size(); ++c) m[proj[c]] += law.mass(c);
  return JointLaw::normalized(std::move(sub), std::move(m));
}

JointLaw condition(const JointLaw& law, const Assignment& given) {
  const auto& space = law.space();
  std::vector<std::pair<std::size_t, std::size_t>> fixed;
  std::vector<std::string> rest;
  for (const auto& [name, label] : given) {
    auto k = space.axis_position(name);
    fixed.emplace_back(k, space.axis(k).index_of(label));
  }
  for (const auto& a : space.axes()) {
    bool is_fixed = std::any_of(given.begin(), given.end(), [&](const auto& g) { return g.first == a.name(); });
    if (!is_fixed) rest.push_back(a.name());
  }
  ProductSpace sub = space.subspace(rest);
  auto proj = projection_map(space, sub);
  std::vector<double> m(sub.size(), 0.0);
  double event = 0.0;
  for (std::size_t c = 0; c < law.size(); ++c) {
    bool hit = std::all_of(fixed.begin(), fixed.end(),
                           [&](const auto& f) { return space.coordinate(c, f.first) == f.second; });
    if (!hit) continue;
    m[proj[c]] += law.mass(c);
    event += law.mass(c);
  }
  if (!(event > 0.0)) fail(ErrorCode::ZeroMassEvent, "conditioning event has zero mass");
  return JointLaw::normalized(std::move(sub), std::move(m));
}

std::vector<double> lift(const JointLaw& law, const CellFunction& f) {
  auto proj = projection_map(law.space(), f.space);
  std::vector<double> out(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) out[c] = f.values[proj[c]];
  return out;
}

double expectation(const JointLaw& law, const CellFunction& f) {
  auto proj = projection_map(law.space(), f.space);
  double s = 0.0;
  for (std::size_t c = 0; c < law.size(); ++c) s += law.mass(c) * f.values[proj[c]];
  return s;
}

CellFunction cond_expectation(const JointLaw& law, std::span<const double> per_cell,
                              std::span<const std::string> given) {
  ProductSpace sub = law.space().subspace(given);
  auto proj = projection_map(law.space(), sub);
  std::vector<double> num(sub.size(), 0.0), den(sub.size(), 0.0);
  for (std::size_t c = 0; c < law.size(); ++c) {
    num[proj[c]] += law.mass(c) * per_cell[c];
    den[proj[c]] += law.mass(c);
  }
  CellFunction out(std::move(sub), std::vector<double>(num.size(), 0.0));
  out.flagged.assign(num.size(), 0);
  for (std::size_t i = 0; i < num.size(); ++i) {
    if (den[i] > 0.0) {
      out.values[i] = num[i] / den[i];
    } else {
      out.flagged[i] = 1;
    }
  }
  return out;
}

CellFunction cond_expectation(const JointLaw& law, const CellFunction& f, std::span<const std::string> given) {
  auto per_cell = lift(law, f);
  return cond_expectation(law, per_cell, given);
}

JointLaw perturb(const JointLaw& law, const ScoreFunction& g, double theta) {
  const auto& gv = g.values();
  std::vector<double> m(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) {
    m[c] = law.mass(c) * (1.0 + theta * gv[c]);
    if (m[c] < 0.0) fail(ErrorCode::PathLeavesSimplex, "perturbed mass is negative");
  }
  // Mean-zero scores keep the total at one up to rounding.
  return JointLaw(law.space(), std::move(m));
}

JointLaw pushforward(const JointLaw& law, const ProductSpace& target, const CellMap& map) {
  std::vector<double> m(target.size(), 0.0);
  for (std::size_t c = 0; c < law.size(); ++c) {
    if (law.mass(c) == 0.0) continue;
    auto coords = map(law.space().decode(c));
    if (coords.size() != target.rank()) fail(ErrorCode::InvalidLaw, "cell map returned wrong arity");
    for (std::size_t k = 0; k < coords.size(); ++k)
      if (coords[k] >= target.axis(k).size()) fail(ErrorCode::InvalidLaw, "cell map out of range");
    m[target.encode(coords)] += law.mass(c);
  }
  return JointLaw::normalized(target, std::move(m));
}

double total_variation(const JointLaw& a, const JointLaw& b) {
  if (!(a.space() == b.space())) fail(ErrorCode::LabelMismatch, "laws live on different spaces");
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) s += std::abs(a.mass(c) - b.mass(c));
  return 0.5 * s;
}

JointLaw empirical_law(const Dataset& data) {
  if (data.cells.empty()) fail(ErrorCode::EmptyDataset, "dataset has no records");
  std::vector<double> counts(data.space.size(), 0.0);
  for (auto c : data.cells) {
    if (c >= counts.size()) fail(ErrorCode::LabelMismatch, "record outside the product space");
    counts[c] += 1.0;
  }
  return JointLaw::normalized(data.space, std::move(counts));
}

Dataset make_dataset(const ProductSpace& space, const std::vector<std::vector<std::string>>& rows) {
  Dataset d{space, {}};
  d.cells.reserve(rows.size());
  std::vector<std::size_t> coords(space.rank());
  for (const auto& row : rows) {
    if (row.size() != space.rank()) fail(ErrorCode::LabelMismatch, "record has the wrong number of fields");
    for (std::size_t k = 0; k < row.size(); ++k) coords[k] = space.axis(k).index_of(row[k]);
    d.cells.push_back(static_cast<std::uint32_t>(space.encode(coords)));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Serialization

std::string law_to_table(const JointLaw& law) {
  std::ostringstream out;
  const auto& space = law.space();
  for (const auto& a : space.axes()) out << a.name() << ',';
  out << "mass\n";
  for (std::size_t c = 0; c < law.size(); ++c) {
    for (std::size_t k = 0; k < space.rank(); ++k) out << space.axis(k).label(space.coordinate(c, k)) << ',';
    out << format_number(law.mass(c)) << '\n';
  }
  return out.str();
}

JointLaw law_from_table(std::string_view text) {
  auto lines = split_lines(text);
  if (lines.empty()) fail(ErrorCode::ParseError, "empty law table");
  auto header = split_csv(lines[0]);
  if (header.size() < 2 || header.back() != "mass") fail(ErrorCode::ParseError, "law table header must end in 'mass'");
  const std::size_t rank = header.size() - 1;
  std::vector<std::vector<std::string>> labels(rank);
  std::vector<std::pair<std::vector<std::string>, double>> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto fields = split_csv(lines[i]);
    if (fields.size() != rank + 1) fail(ErrorCode::ParseError, "law table row has wrong arity");
    auto m = parse_double(fields.back());
    if (!m) fail(ErrorCode::ParseError, "bad mass '" + fields.back() + "'");
    fields.pop_back();
    for (std::size_t k = 0; k < rank; ++k)
      if (std::find(labels[k].begin(), labels[k].end(), fields[k]) == labels[k].end()) labels[k].push_back(fields[k]);
    rows.emplace_back(std::move(fields), *m);
  }
  std::vector<Axis> axes;
  for (std::size_t k = 0; k < rank; ++k) axes.emplace_back(header[k], labels[k]);
  ProductSpace space(std::move(axes));
  std::vector<double> mass(space.size(), 0.0);
  std::vector<std::size_t> coords(rank);
  for (const auto& [fields, m] : rows) {
    for (std::size_t k = 0; k < rank; ++k) coords[k] = space.axis(k).index_of(fields[k]);
    mass[space.encode(coords)] += m;
  }
  return JointLaw(std::move(space), std::move(mass));
}

std::string dataset_to_csv(const Dataset& data) {
  std::ostringstream out;
  const auto& space = data.space;
  for (std::size_t k = 0; k < space.rank(); ++k) out << (k ? "," : "") << space.axis(k).name();
  out << '\n';
  for (auto c : data.cells) {
    for (std::size_t k = 0; k < space.rank(); ++k) out << (k ? "," : "") << space.axis(k).label(space.coordinate(c, k));
    out << '\n';
  }
  return out.str();
}

Dataset dataset_from_csv(std::string_view text, const ProductSpace& space) {
  auto lines = split_lines(text);
  if (lines.empty()) fail(ErrorCode::EmptyDataset, "empty CSV");
  auto header = split_csv(lines[0]);
  if (header.size() != space.rank()) fail(ErrorCode::LabelMismatch, "CSV header does not match the model axes");
  std::vector<std::size_t> pos(header.size());
  for (std::size_t j = 0; j < header.size(); ++j) pos[j] = space.axis_position(header[j]);
  Dataset d{space, {}};
  std::vector<std::size_t> coords(space.rank());
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto fields = split_csv(lines[i]);
    if (fields.size() != header.size())
      fail(ErrorCode::LabelMismatch, "CSV row " + std::to_string(i) + " has wrong arity");
    for (std::size_t j = 0; j < fields.size(); ++j) coords[pos[j]] = space.axis(pos[j]).index_of(fields[j]);
    d.cells.push_back(static_cast<std::uint32_t>(space.encode(coords)));
  }
  if (d.cells.empty()) fail(ErrorCode::EmptyDataset, "CSV has no records");
  return d;
}

}  // namespace localid
