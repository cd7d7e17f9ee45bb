#include "localid/causal_models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "localid/text_util.hpp"

namespace localid {

double parse_number(const std::string& s);

namespace {

using Names = std::vector<std::string>;

constexpr double kExactTolerance = 1e-10;

// Marginal mass addressed by coordinates listed in a caller-chosen axis order.
class Table {
 public:
  Table(const JointLaw& law, const Names& names) : law_(marginal(law, names)), pos_(names.size()) {
    for (std::size_t i = 0; i < names.size(); ++i) pos_[i] = law_.space().axis_position(names[i]);
  }
  double operator()(std::initializer_list<std::size_t> coords) const {
    std::vector<std::size_t> c(pos_.size());
    std::size_t i = 0;
    for (auto v : coords) c[pos_[i++]] = v;
    return law_.mass(law_.space().encode(c));
  }

 private:
  JointLaw law_;
  std::vector<std::size_t> pos_;
};

// Random weights in [lo, hi), normalised.
std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n, double lo = 0.5, double hi = 1.5) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> w(n);
  for (auto& x : w) x = u(rng);
  double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= s;
  return w;
}

void normalize(std::vector<double>& w) {
  double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= s;
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Draws a conditionally centred perturbation: sum_k p[k] delta[k] = 0, max |delta| = scale.
std::vector<double> centered_noise(std::mt19937_64& rng, const std::vector<double>& p, double scale) {
  std::vector<double> d(p.size());
  for (auto& x : d) x = uniform(rng, -1.0, 1.0);
  double mean = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) mean += p[k] * d[k];
  double top = 0.0;
  for (auto& x : d) {
    x -= mean;
    top = std::max(top, std::abs(x));
  }
  if (top > 0.0)
    for (auto& x : d) x *= scale / top;
  return d;
}

// Couples marginals through a shared uniform: every marginal is read off its own
// quantile function. Returns (index tuple, mass) pairs with positive mass.
std::vector<std::pair<std::vector<std::size_t>, double>> comonotone(const std::vector<std::vector<double>>& margins) {
  const std::size_t k = margins.size();
  std::vector<std::size_t> idx(k, 0);
  std::vector<double> cum(k);
  auto settle = [&](std::size_t j) {
    while (idx[j] + 1 < margins[j].size() && margins[j][idx[j]] <= 0.0) ++idx[j];
  };
  for (std::size_t j = 0; j < k; ++j) {
    settle(j);
    cum[j] = idx[j] + 1 == margins[j].size() ? 1.0 : margins[j][idx[j]];
    if (idx[j] > 0) {
      cum[j] = 0.0;
      for (std::size_t i = 0; i <= idx[j]; ++i) cum[j] += margins[j][i];
      if (idx[j] + 1 == margins[j].size()) cum[j] = 1.0;
    }
  }
  std::vector<std::pair<std::vector<std::size_t>, double>> out;
  double u = 0.0;
  while (u < 1.0) {
    double next = *std::min_element(cum.begin(), cum.end());
    if (next > u) out.emplace_back(idx, next - u);
    u = next;
    if (u >= 1.0) break;
    for (std::size_t j = 0; j < k; ++j) {
      while (cum[j] <= u && idx[j] + 1 < margins[j].size()) {
        ++idx[j];
        cum[j] = idx[j] + 1 == margins[j].size() ? 1.0 : cum[j] + margins[j][idx[j]];
      }
    }
  }
  return out;
}

std::vector<std::size_t> product_coords(const std::vector<std::size_t>& sizes, std::size_t flat) {
  std::vector<std::size_t> c(sizes.size());
  for (std::size_t j = sizes.size(); j-- > 0;) {
    c[j] = flat % sizes[j];
    flat /= sizes[j];
  }
  return c;
}

// Joint law of independent components on the product of their supports.
std::vector<double> independent_coupling(const std::vector<std::vector<double>>& margins) {
  std::size_t total = 1;
  std::vector<std::size_t> sizes;
  for (const auto& m : margins) {
    sizes.push_back(m.size());
    total *= m.size();
  }
  std::vector<double> out(total);
  for (std::size_t f = 0; f < total; ++f) {
    auto c = product_coords(sizes, f);
    double p = 1.0;
    for (std::size_t j = 0; j < margins.size(); ++j) p *= margins[j][c[j]];
    out[f] = p;
  }
  return out;
}

std::vector<double> comonotone_coupling(const std::vector<std::vector<double>>& margins) {
  std::vector<std::size_t> sizes;
  std::size_t total = 1;
  for (const auto& m : margins) {
    sizes.push_back(m.size());
    total *= m.size();
  }
  std::vector<double> out(total, 0.0);
  for (const auto& [c, p] : comonotone(margins)) {
    std::size_t f = 0;
    for (std::size_t j = 0; j < c.size(); ++j) f = f * sizes[j] + c[j];
    out[f] += p;
  }
  return out;
}

std::vector<double> numeric_labels(const Axis& a) {
  std::vector<double> v;
  for (const auto& l : a.labels()) {
    if (l == kMissingLabel) continue;
    auto x = parse_number(l);
    v.push_back(x);
  }
  return v;
}

double max_abs_diff(const JointLaw& a, const JointLaw& b) {
  if (!(a.space() == b.space())) fail(ErrorCode::LabelMismatch, "laws live on different spaces");
  double m = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) m = std::max(m, std::abs(a.mass(c) - b.mass(c)));
  return m;
}

std::vector<double> indicator_values(const JointLaw& law, const std::optional<Event>& ev) {
  std::vector<double> ind(law.size(), 1.0);
  if (!ev) return ind;
  const auto& s = law.space();
  auto k = s.axis_position(ev->axis);
  auto lab = s.axis(k).index_of(ev->label);
  for (std::size_t c = 0; c < law.size(); ++c) ind[c] = s.coordinate(c, k) == lab ? 1.0 : 0.0;
  return ind;
}

std::vector<double> outcome_values(const JointLaw& law) {
  const auto& s = law.space();
  auto k = s.axis_position(ax::Y);
  auto y = s.axis(k).numeric_values(0.0);
  std::vector<double> out(law.size());
  for (std::size_t c = 0; c < law.size(); ++c) out[c] = y[s.coordinate(c, k)];
  return out;
}

// max |K h - b| over active target cells.
double moment_residual(const JointLaw& law, const CondExpOperator& k, const CellFunction& h) {
  auto b = bridge_target(law, k);
  auto kh = k.apply(h);
  double m = 0.0;
  for (std::size_t c = 0; c < kh.size(); ++c)
    if (k.target_active(c)) m = std::max(m, std::abs(kh.values[c] - b.values[c]));
  return m;
}

// Kernel vector of K* normalised to max |phi| = 1, or empty if K* is injective.
std::vector<double> kernel_direction(const CondExpOperator& k) {
  auto d = diagnose_identification(k);
  if (d.adjoint_kernel_basis.empty()) return {};
  auto v = d.adjoint_kernel_basis.front().values;
  double top = 0.0;
  for (double x : v) top = std::max(top, std::abs(x));
  for (double& x : v) x /= top;
  return v;
}

void check_mean(double m, const char* what) {
  if (m < 0.0 || m > 1.0)
    fail(ErrorCode::PerturbationLeavesSimplex, std::string(what) + " pushes an outcome mean outside [0,1]");
}

}  // namespace

// ---------------------------------------------------------------------------
// Outcomes

Axis outcome_axis(std::size_t points, bool with_missing) {
  if (points < 2) fail(ErrorCode::InvalidSizes, "outcome grid needs at least two points");
  std::vector<double> v(points);
  for (std::size_t k = 0; k < points; ++k) v[k] = static_cast<double>(k) / static_cast<double>(points - 1);
  Axis a = numeric_axis(ax::Y, v);
  if (!with_missing) return a;
  auto labels = a.labels();
  labels.emplace_back(kMissingLabel);
  return Axis(ax::Y, labels);
}

std::vector<double> outcome_distribution(double m, double lambda, std::size_t points) {
  if (points < 2) fail(ErrorCode::InvalidSizes, "outcome grid needs at least two points");
  const std::size_t n = points - 1;
  std::vector<double> p(points, 0.0);
  for (std::size_t k = 0; k <= n; ++k) {
    double binom = std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0));
    p[k] = lambda * binom * std::pow(m, static_cast<double>(k)) * std::pow(1.0 - m, static_cast<double>(n - k));
  }
  p[0] += (1.0 - lambda) * (1.0 - m);
  p[n] += (1.0 - lambda) * m;
  return p;
}

// ---------------------------------------------------------------------------
// Independence checks

double ci_discrepancy(const JointLaw& law, const Names& a, const Names& b, const Names& c) {
  Names all = a;
  all.insert(all.end(), b.begin(), b.end());
  all.insert(all.end(), c.begin(), c.end());
  JointLaw abc = marginal(law, all);
  const auto& s = abc.space();
  Names ac = a, bc = b;
  ac.insert(ac.end(), c.begin(), c.end());
  bc.insert(bc.end(), c.begin(), c.end());
  auto sac = s.subspace(ac), sbc = s.subspace(bc), sc = s.subspace(c);
  auto pac = projection_map(s, sac), pbc = projection_map(s, sbc), pc = projection_map(s, sc);
  std::vector<double> mac(sac.size(), 0.0), mbc(sbc.size(), 0.0), mc(sc.size(), 0.0);
  for (std::size_t w = 0; w < abc.size(); ++w) {
    mac[pac[w]] += abc.mass(w);
    mbc[pbc[w]] += abc.mass(w);
    mc[pc[w]] += abc.mass(w);
  }
  double worst = 0.0;
  for (std::size_t w = 0; w < abc.size(); ++w) {
    double z = mc[pc[w]];
    if (!(z > 0.0)) continue;
    double lhs = abc.mass(w) / z;
    double rhs = (mac[pac[w]] / z) * (mbc[pbc[w]] / z);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Unconfounded treatment

UnconfoundedSpec random_unconfounded_spec(std::size_t nx, std::size_t nt, std::size_t ny, std::uint64_t seed,
                                          bool confounded) {
  if (nx < 1 || nt < 2 || ny < 2) fail(ErrorCode::InvalidSizes, "unconfounded design needs |T| >= 2 and |Y| >= 2");
  std::mt19937_64 rng(seed);
  UnconfoundedSpec spec{outcome_axis(ny), indexed_axis(ax::T, nt), indexed_axis(ax::X, nx), {}, {}, {}};
  spec.px = random_simplex(rng, nx);
  auto common = random_simplex(rng, nt);
  for (std::size_t x = 0; x < nx; ++x) spec.pt_given_x.push_back(confounded ? random_simplex(rng, nt) : common);
  spec.py.assign(nt, std::vector<std::vector<double>>(nx));
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t x = 0; x < nx; ++x)
      spec.py[t][x] = outcome_distribution(uniform(rng, 0.15, 0.85), uniform(rng, 0.0, 1.0), ny);
  return spec;
}

namespace {

void validate(const UnconfoundedSpec& s) {
  const auto nx = s.x.size(), nt = s.t.size(), ny = s.y.size();
  if (s.px.size() != nx || s.pt_given_x.size() != nx || s.py.size() != nt)
    fail(ErrorCode::InvalidSizes, "unconfounded tables do not match the axes");
  for (std::size_t x = 0; x < nx; ++x) {
    if (s.pt_given_x[x].size() != nt) fail(ErrorCode::InvalidSizes, "P(T|X) row has the wrong length");
    for (double p : s.pt_given_x[x])
      if (s.px[x] > 0.0 && !(p > 0.0)) fail(ErrorCode::OverlapViolation, "P(T=t|X=x) is zero on a support cell");
  }
  for (std::size_t t = 0; t < nt; ++t) {
    if (s.py[t].size() != nx) fail(ErrorCode::InvalidSizes, "P(Y|T,X) table has the wrong shape");
    for (std::size_t x = 0; x < nx; ++x) {
      if (s.py[t][x].size() != ny) fail(ErrorCode::InvalidSizes, "P(Y|T,X) row has the wrong length");
      double sum = std::accumulate(s.py[t][x].begin(), s.py[t][x].end(), 0.0);
      if (std::abs(sum - 1.0) > 1e-12) fail(ErrorCode::InvalidLaw, "P(Y|T,X) row does not sum to one");
    }
  }
}

ProductSpace uc_structural_space(const Axis& x, const Axis& t, const Axis& y) {
  std::vector<Axis> axes{x, t};
  for (const auto& lab : t.labels()) axes.emplace_back("Y(" + lab + ")", y.labels());
  return ProductSpace(std::move(axes));
}

// P(x) P(t|x) C_x({y_t}) on the structural space, with C_x = a*indep + (1-a)*comonotone.
JointLaw uc_structural(const Axis& x, const Axis& t, const Axis& y, const std::vector<double>& px,
                       const std::vector<std::vector<double>>& ptx,
                       const std::vector<std::vector<std::vector<double>>>& py, double alpha) {
  auto space = uc_structural_space(x, t, y);
  const auto nt = t.size();
  std::size_t ny_total = 1;
  for (std::size_t j = 0; j < nt; ++j) ny_total *= y.size();
  std::vector<double> mass(space.size(), 0.0);
  for (std::size_t xi = 0; xi < x.size(); ++xi) {
    std::vector<std::vector<double>> margins;
    for (std::size_t j = 0; j < nt; ++j) margins.push_back(py[j][xi]);
    auto ind = independent_coupling(margins);
    std::vector<double> coupling = ind;
    if (alpha < 1.0) {
      auto co = comonotone_coupling(margins);
      for (std::size_t f = 0; f < coupling.size(); ++f) coupling[f] = alpha * ind[f] + (1.0 - alpha) * co[f];
    }
    for (std::size_t ti = 0; ti < nt; ++ti)
      for (std::size_t f = 0; f < ny_total; ++f) mass[(xi * nt + ti) * ny_total + f] = px[xi] * ptx[xi][ti] * coupling[f];
  }
  return JointLaw::normalized(space, std::move(mass));
}

}  // namespace

JointLaw observe_unconfounded(const JointLaw& structural, const ProductSpace& observable_space) {
  return pushforward(structural, observable_space, [](std::span<const std::size_t> c) {
    std::size_t t = c[1];
    return std::vector<std::size_t>{c[0], t, c[2 + t]};
  });
}

UnconfoundedDraw gen_unconfounded(const UnconfoundedSpec& spec, std::uint64_t seed) {
  validate(spec);
  std::mt19937_64 rng(seed);
  double alpha = uniform(rng, 0.0, 1.0);
  auto structural = uc_structural(spec.x, spec.t, spec.y, spec.px, spec.pt_given_x, spec.py, alpha);
  ProductSpace obs_space({spec.x, spec.t, spec.y});
  std::vector<double> m(obs_space.size());
  for (std::size_t w = 0; w < m.size(); ++w) {
    auto c = obs_space.decode(w);
    m[w] = spec.px[c[0]] * spec.pt_given_x[c[0]][c[1]] * spec.py[c[1]][c[0]][c[2]];
  }
  return {{std::move(structural), {}}, JointLaw::normalized(obs_space, std::move(m))};
}

StructuralLaw structural_from_observable_uc(const JointLaw& obs) {
  const auto& s = obs.space();
  const auto& x = s.axis(ax::X);
  const auto& t = s.axis(ax::T);
  const auto& y = s.axis(ax::Y);
  Table pxty(obs, {ax::X, ax::T, ax::Y}), pxt(obs, {ax::X, ax::T}), px(obs, {ax::X});
  std::vector<std::string> flags;
  std::vector<double> mx(x.size());
  std::vector<std::vector<double>> ptx(x.size(), std::vector<double>(t.size()));
  std::vector<std::vector<std::vector<double>>> py(t.size(),
                                                   std::vector<std::vector<double>>(x.size(), std::vector<double>(y.size())));
  for (std::size_t xi = 0; xi < x.size(); ++xi) {
    mx[xi] = px({xi});
    for (std::size_t ti = 0; ti < t.size(); ++ti) {
      double ptj = pxt({xi, ti});
      ptx[xi][ti] = mx[xi] > 0.0 ? ptj / mx[xi] : 1.0 / static_cast<double>(t.size());
      for (std::size_t yi = 0; yi < y.size(); ++yi)
        py[ti][xi][yi] = ptj > 0.0 ? pxty({xi, ti, yi}) / ptj : 1.0 / static_cast<double>(y.size());
      if (mx[xi] > 0.0 && !(ptj > 0.0))
        flags.push_back("arm T=" + t.label(ti) + " missing at X=" + x.label(xi) + "; arbitrary outcome law used");
    }
  }
  return {uc_structural(x, t, y, mx, ptx, py, 1.0), std::move(flags)};
}

// ---------------------------------------------------------------------------
// Bridge

CellFunction bridge_target(const JointLaw& law, const CondExpOperator& k) {
  auto ind = indicator_values(law, k.indicator());
  auto y = outcome_values(law);
  for (std::size_t c = 0; c < y.size(); ++c) y[c] *= ind[c];
  return cond_expectation(law, y, k.target().names());
}

BridgeSolution solve_bridge(const CondExpOperator& k, const CellFunction& b, const std::optional<Eigen::VectorXd>& weight,
                            double rel_tol) {
  if (!(b.space == k.target())) fail(ErrorCode::LabelMismatch, "bridge target is not a function of the operator's target");
  Eigen::VectorXd bv = Eigen::Map<const Eigen::VectorXd>(b.values.data(), static_cast<Eigen::Index>(b.size()));
  Eigen::VectorXd w = weight ? *weight : Eigen::VectorXd::Ones(bv.size());
  for (std::size_t c = 0; c < b.size(); ++c)
    if (!k.target_active(c)) bv[static_cast<Eigen::Index>(c)] = 0.0;
  auto g = gram(k, w, weight ? "K* W K" : "K* K");
  Eigen::VectorXd rhs = adjoint(k).apply(Eigen::VectorXd(w.cwiseProduct(bv)));
  Eigen::VectorXd h = pinv_apply(g, rhs, rel_tol);
  Eigen::VectorXd r = k.apply(h) - bv;

  BridgeSolution sol;
  sol.h = CellFunction(k.source(), std::vector<double>(h.data(), h.data() + h.size()));
  sol.h.flagged.assign(k.source().size(), 0);
  for (std::size_t a = 0; a < k.source().size(); ++a)
    if (!k.source_active(a)) sol.h.flagged[a] = 1;
  sol.residual_norm = std::sqrt(std::max(0.0, k.inner_target(r.cwiseProduct(w), r)));
  double bnorm = std::sqrt(std::max(0.0, k.inner_target(bv.cwiseProduct(w), bv)));
  sol.solvable = sol.residual_norm <= std::max(1e-8 * bnorm, 1e-14);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.matrix);
  double top = es.eigenvalues().size() ? es.eigenvalues().maxCoeff() : 0.0;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
    if (top > 0.0 && es.eigenvalues()[i] > rel_tol * top) ++rank;
  sol.kernel_dim = k.active_source_count() - rank;
  return sol;
}

// ---------------------------------------------------------------------------
// Negative control

NegControlModel gen_negative_control(const NegControlConfig& cfg, std::uint64_t seed) {
  if (cfg.nv < 1 || cfg.nz < 1 || cfg.nx < 1 || cfg.ny < 2) fail(ErrorCode::InvalidSizes, "negative-control sizes must be positive");
  std::mt19937_64 rng(seed);
  const auto nx = cfg.nx, nz = cfg.nz, nv = cfg.nv, ny = cfg.ny;
  ProductSpace space({indexed_axis(ax::X, nx), indexed_axis(ax::Z, nz), indexed_axis(ax::D, 2), indexed_axis(ax::V, nv),
                      outcome_axis(ny)});
  auto px = random_simplex(rng, nx);
  std::vector<std::vector<double>> pz(nx), pd(nx * nz);
  std::vector<std::vector<double>> pv(nx * nz);
  for (std::size_t x = 0; x < nx; ++x) pz[x] = random_simplex(rng, nz);
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t z = 0; z < nz; ++z) {
      double p1 = uniform(rng, 0.3, 0.7);
      pd[x * nz + z] = {1.0 - p1, p1};
      std::vector<double> w(nv);
      for (std::size_t v = 0; v < nv; ++v) w[v] = uniform(rng, 0.3, 1.7) + (v == z % nv ? 1.5 : 0.0);
      normalize(w);
      pv[x * nz + z] = w;
    }
  ProductSpace hspace = space.subspace(Names{ax::X, ax::D, ax::V});
  std::vector<double> hv(hspace.size());
  for (auto& v : hv) v = uniform(rng, 0.25, 0.75);
  auto hidx = [&](std::size_t x, std::size_t d, std::size_t v) { return (x * 2 + d) * nv + v; };
  if (cfg.heteroskedastic) {
    // constant effect: the direct term of mu vanishes and only the weighting matters
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t v = 0; v < nv; ++v) hv[hidx(x, 0, v)] = hv[hidx(x, 1, v)] - 0.1;
  }

  std::vector<double> mass(space.size(), 0.0);
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t z = 0; z < nz; ++z)
      for (std::size_t d = 0; d < 2; ++d) {
        const auto& pvz = pv[x * nz + z];
        auto delta = centered_noise(rng, pvz, 0.15);
        for (std::size_t v = 0; v < nv; ++v) {
          double m = hv[hidx(x, d, v)] + delta[v];
          double lambda = uniform(rng, 0.0, 1.0);
          if (cfg.heteroskedastic) lambda = z % 2 == 0 ? 1.0 : 0.0;
          auto py = outcome_distribution(m, lambda, ny);
          double base = px[x] * pz[x][z] * pd[x * nz + z][d] * pvz[v];
          for (std::size_t y = 0; y < ny; ++y) mass[space.encode(std::vector<std::size_t>{x, z, d, v, y})] = base * py[y];
        }
      }
  NegControlModel out{JointLaw::normalized(space, std::move(mass)), CellFunction(hspace, hv), 0, 0, 0};
  Table pxv(out.law, {ax::X, ax::V});
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t v = 0; v < nv; ++v) {
      out.mu1 += pxv({x, v}) * hv[hidx(x, 1, v)];
      out.mu0 += pxv({x, v}) * hv[hidx(x, 0, v)];
    }
  out.mu = out.mu1 - out.mu0;
  return out;
}

CondExpOperator nc_operator(const JointLaw& law, int d) {
  return build_operator(law, Names{ax::X, ax::V}, Names{ax::X, ax::Z}, Event{ax::D, std::to_string(d)});
}

CellFunction nc_arm(const CellFunction& h, int d) {
  const auto& s = h.space;
  ProductSpace arm = s.subspace(Names{ax::X, ax::V});
  auto kd = s.axis_position(ax::D);
  auto lab = s.axis(kd).index_of(std::to_string(d));
  auto proj = projection_map(s, arm);
  CellFunction out(arm, std::vector<double>(arm.size(), 0.0));
  for (std::size_t c = 0; c < s.size(); ++c)
    if (s.coordinate(c, kd) == lab) out.values[proj[c]] = h.values[c];
  return out;
}

CellFunction nc_join(const ProductSpace& h_space, const CellFunction& h1, const CellFunction& h0) {
  auto kd = h_space.axis_position(ax::D);
  auto one = h_space.axis(kd).index_of("1");
  auto proj = projection_map(h_space, h1.space);
  CellFunction out(h_space, std::vector<double>(h_space.size()));
  for (std::size_t c = 0; c < h_space.size(); ++c)
    out.values[c] = h_space.coordinate(c, kd) == one ? h1.values[proj[c]] : h0.values[proj[c]];
  return out;
}

double nc_bridge_residual(const JointLaw& law, const CellFunction& h) {
  double m = 0.0;
  for (int d = 0; d < 2; ++d) m = std::max(m, moment_residual(law, nc_operator(law, d), nc_arm(h, d)));
  return m;
}

NegControlConstruction structural_from_observable_nc(const JointLaw& obs, const CellFunction& h) {
  NegControlConstruction out{{JointLaw::uniform(ProductSpace({indexed_axis("_", 1)})), {}}, 0, 0, 0, 0, 0};
  out.bridge_residual = nc_bridge_residual(obs, h);
  if (out.bridge_residual > kExactTolerance)
    fail(ErrorCode::BridgeViolated, "bridge moment residual " + format_number(out.bridge_residual));
  if (ci_discrepancy(obs, {ax::V}, {ax::D}, {ax::X, ax::Z}) > 1e-12)
    fail(ErrorCode::ConstructionInapplicable,
         "V depends on D given (Z,X); setting U = Z cannot reproduce this law with a treatment-invariant V");

  const auto& s = obs.space();
  const Axis &x = s.axis(ax::X), &z = s.axis(ax::Z), &v = s.axis(ax::V), &y = s.axis(ax::Y);
  const auto nx = x.size(), nz = z.size(), nv = v.size(), ny = y.size();
  ProductSpace st({x, Axis(ax::U, z.labels()), z, s.axis(ax::D), v, Axis("Y(1)", y.labels()), Axis("Y(0)", y.labels())});
  Table pxz(obs, {ax::X, ax::Z}), pxzd(obs, {ax::X, ax::Z, ax::D}), pxzv(obs, {ax::X, ax::Z, ax::V}),
      pxzdv(obs, {ax::X, ax::Z, ax::D, ax::V}), pfull(obs, {ax::X, ax::Z, ax::D, ax::V, ax::Y});
  std::vector<double> mass(st.size(), 0.0);
  for (std::size_t xi = 0; xi < nx; ++xi)
    for (std::size_t u = 0; u < nz; ++u) {
      double pz = pxz({xi, u});
      if (!(pz > 0.0)) continue;
      for (std::size_t vi = 0; vi < nv; ++vi) {
        std::vector<std::vector<double>> g(2, std::vector<double>(ny));
        for (std::size_t d = 0; d < 2; ++d) {
          double den = pxzdv({xi, u, d, vi});
          for (std::size_t yi = 0; yi < ny; ++yi)
            g[d][yi] = den > 0.0 ? pfull({xi, u, d, vi, yi}) / den : 1.0 / static_cast<double>(ny);
          if (!(den > 0.0) && pxzv({xi, u, vi}) > 0.0)
            out.structural.flags.push_back("Y(" + std::to_string(d) + ") law arbitrary at X=" + x.label(xi) +
                                           ", U=" + z.label(u) + ", V=" + v.label(vi));
        }
        // Y(1) and Y(0) share the quantile draw.
        auto coupling = comonotone_coupling({g[1], g[0]});
        double pv_given = pxzv({xi, u, vi}) / pz;
        for (std::size_t d = 0; d < 2; ++d) {
          double pd = pxzd({xi, u, d}) / pz;
          for (std::size_t y1 = 0; y1 < ny; ++y1)
            for (std::size_t y0 = 0; y0 < ny; ++y0) {
              double m = pz * pd * pv_given * coupling[y1 * ny + y0];
              if (m > 0.0) mass[st.encode(std::vector<std::size_t>{xi, u, u, d, vi, y1, y0})] = m;
            }
        }
      }
    }
  out.structural.law = JointLaw::normalized(st, std::move(mass));
  const auto& law = out.structural.law;

  auto seen = pushforward(law, s, [&](std::span<const std::size_t> c) {
    std::size_t d = c[3];
    std::vector<std::size_t> o(s.rank());
    o[s.axis_position(ax::X)] = c[0];
    o[s.axis_position(ax::Z)] = c[2];
    o[s.axis_position(ax::D)] = d;
    o[s.axis_position(ax::V)] = c[4];
    o[s.axis_position(ax::Y)] = d == 1 ? c[5] : c[6];
    return o;
  });
  out.pushforward_error = max_abs_diff(seen, obs);

  for (int d = 0; d < 2; ++d) {
    std::string yd = "Y(" + std::to_string(d) + ")";
    out.latent_ignorability =
        std::max(out.latent_ignorability, ci_discrepancy(law, {yd, ax::V}, {ax::D, ax::Z}, {ax::U, ax::X}));
    Table sj(law, {ax::X, ax::U, ax::V, yd}), su(law, {ax::X, ax::U});
    for (std::size_t xi = 0; xi < nx; ++xi)
      for (std::size_t u = 0; u < nz; ++u) {
        double den_obs = pxzd({xi, u, static_cast<std::size_t>(d)});
        double den_st = su({xi, u});
        if (!(den_obs > 0.0) || !(den_st > 0.0)) continue;
        for (std::size_t vi = 0; vi < nv; ++vi)
          for (std::size_t yi = 0; yi < ny; ++yi) {
            double a = sj({xi, u, vi, yi}) / den_st;
            double b = pfull({xi, u, static_cast<std::size_t>(d), vi, yi}) / den_obs;
            out.conditional_match = std::max(out.conditional_match, std::abs(a - b));
          }
      }
  }

  // Completeness of U for Z given (D,X): E[g(U) | Z,D,X] = 0 forces g = 0.
  Table szdxu(law, {ax::X, ax::D, ax::Z, ax::U});
  for (std::size_t xi = 0; xi < nx; ++xi)
    for (std::size_t d = 0; d < 2; ++d) {
      Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nz), static_cast<Eigen::Index>(nz));
      std::vector<bool> u_active(nz, false);
      for (std::size_t zi = 0; zi < nz; ++zi) {
        double row = 0.0;
        for (std::size_t u = 0; u < nz; ++u) row += szdxu({xi, d, zi, u});
        if (!(row > 0.0)) continue;
        for (std::size_t u = 0; u < nz; ++u) {
          double p = szdxu({xi, d, zi, u});
          m(static_cast<Eigen::Index>(zi), static_cast<Eigen::Index>(u)) = p / row;
          if (p > 0.0) u_active[u] = true;
        }
      }
      Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
      lu.setThreshold(1e-12);
      auto active = static_cast<std::size_t>(std::count(u_active.begin(), u_active.end(), true));
      auto rank = static_cast<std::size_t>(lu.rank());
      if (rank < active) out.completeness_deficiency += active - rank;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Long term

LongTermModel gen_long_term(const LongTermConfig& cfg, std::uint64_t seed) {
  const auto n1 = cfg.s1, n2 = cfg.s2, n3 = cfg.s3, ny = cfg.ny;
  if (n1 < 1 || n2 < 1 || n3 < 1 || ny < 2) fail(ErrorCode::InvalidSizes, "long-term sizes must be positive");
  if (cfg.bijective && n1 != n3) fail(ErrorCode::InvalidSizes, "bijective design needs |S1| = |S3|");
  std::mt19937_64 rng(seed);
  ProductSpace space({Axis(ax::G, {"E", "O"}), indexed_axis(ax::D, 2), indexed_axis(ax::S1, n1), indexed_axis(ax::S2, n2),
                      indexed_axis(ax::S3, n3), outcome_axis(ny, true)});
  const std::size_t na = ny;  // index of the missing label
  double p_obs = uniform(rng, 0.4, 0.6);
  double p_e = uniform(rng, 0.4, 0.6), p_o = uniform(rng, 0.3, 0.7);

  // Observational short-term outcomes: (S1,S2) | D, then S3 | S1,S2.
  std::vector<std::vector<double>> p12(2);
  for (std::size_t d = 0; d < 2; ++d) p12[d] = random_simplex(rng, n1 * n2, 0.5, 1.5);
  std::vector<std::vector<double>> p3(n1 * n2);
  std::vector<std::size_t> perm(n1);
  for (std::size_t s2 = 0; s2 < n2; ++s2) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t s1 = 0; s1 < n1; ++s1) {
      std::vector<double> w(n3, 0.0);
      if (cfg.bijective) {
        w[perm[s1]] = 1.0;
      } else {
        for (std::size_t s3 = 0; s3 < n3; ++s3) w[s3] = uniform(rng, 0.3, 1.7) + (s3 == s1 % n3 ? 1.5 : 0.0);
        normalize(w);
      }
      p3[s1 * n2 + s2] = w;
    }
  }
  auto ps_obs = [&](std::size_t d, std::size_t s1, std::size_t s2, std::size_t s3) {
    return p12[d][s1 * n2 + s2] * p3[s1 * n2 + s2][s3];
  };
  // Experimental short-term law: the observational mixture over D unless effects are switched on.
  std::vector<std::vector<double>> ps_exp(2, std::vector<double>(n1 * n2 * n3));
  for (std::size_t d = 0; d < 2; ++d) {
    if (cfg.short_term_effect) {
      ps_exp[d] = random_simplex(rng, n1 * n2 * n3);
      continue;
    }
    for (std::size_t s1 = 0; s1 < n1; ++s1)
      for (std::size_t s2 = 0; s2 < n2; ++s2)
        for (std::size_t s3 = 0; s3 < n3; ++s3)
          ps_exp[d][(s1 * n2 + s2) * n3 + s3] = (1.0 - p_o) * ps_obs(0, s1, s2, s3) + p_o * ps_obs(1, s1, s2, s3);
  }

  ProductSpace hspace = space.subspace(Names{ax::D, ax::S2, ax::S3});
  std::vector<double> hv(hspace.size());
  for (auto& v : hv) v = uniform(rng, 0.3, 0.7);
  auto hval = [&](std::size_t d, std::size_t s2, std::size_t s3) { return hv[(d * n2 + s2) * n3 + s3]; };

  std::vector<std::vector<double>> delta(2 * n1 * n2);
  std::vector<double> lambdas(2 * n1 * n2 * n3);
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t s1 = 0; s1 < n1; ++s1)
      for (std::size_t s2 = 0; s2 < n2; ++s2) delta[(d * n1 + s1) * n2 + s2] = centered_noise(rng, p3[s1 * n2 + s2], 0.1);
  for (auto& l : lambdas) l = uniform(rng, 0.0, 1.0);

  auto assemble = [&](const std::vector<double>& shift) {
    std::vector<double> mass(space.size(), 0.0);
    for (std::size_t d = 0; d < 2; ++d)
      for (std::size_t s1 = 0; s1 < n1; ++s1)
        for (std::size_t s2 = 0; s2 < n2; ++s2)
          for (std::size_t s3 = 0; s3 < n3; ++s3) {
            double pe = (1.0 - p_obs) * (d ? p_e : 1.0 - p_e) * ps_exp[d][(s1 * n2 + s2) * n3 + s3];
            mass[space.encode(std::vector<std::size_t>{0, d, s1, s2, s3, na})] = pe;
            double po = p_obs * (d ? p_o : 1.0 - p_o) * ps_obs(d, s1, s2, s3);
            double m = hval(d, s2, s3) + delta[(d * n1 + s1) * n2 + s2][s3];
            if (!shift.empty()) m += shift[(d * n1 + s1) * n2 + s2];
            check_mean(m, "bridge violation");
            auto py = outcome_distribution(m, lambdas[((d * n1 + s1) * n2 + s2) * n3 + s3], ny);
            for (std::size_t y = 0; y < ny; ++y) mass[space.encode(std::vector<std::size_t>{1, d, s1, s2, s3, y})] = po * py[y];
          }
    return JointLaw::normalized(space, std::move(mass));
  };

  JointLaw law = assemble({});
  if (cfg.violation != 0.0) {
    auto k = lt_operator(law);
    auto phi = kernel_direction(k);
    if (!phi.empty()) {
      // The moment becomes P(O|c) * shift(c); divide so the residual lies in ker(K*).
      Table pc(law, {ax::D, ax::S1, ax::S2}), pco(law, {ax::G, ax::D, ax::S1, ax::S2});
      std::vector<double> shift(2 * n1 * n2);
      double top = 0.0;
      for (std::size_t d = 0; d < 2; ++d)
        for (std::size_t s1 = 0; s1 < n1; ++s1)
          for (std::size_t s2 = 0; s2 < n2; ++s2) {
            std::size_t c = (d * n1 + s1) * n2 + s2;
            shift[c] = phi[c] * pc({d, s1, s2}) / pco({1, d, s1, s2});
            top = std::max(top, std::abs(shift[c]));
          }
      for (auto& x : shift) x *= cfg.violation / top;
      law = assemble(shift);
    }
  }

  LongTermModel out{std::move(law), CellFunction(hspace, hv), 0, 0, 0};
  for (std::size_t s1 = 0; s1 < n1; ++s1)
    for (std::size_t s2 = 0; s2 < n2; ++s2)
      for (std::size_t s3 = 0; s3 < n3; ++s3) {
        out.mu1 += ps_exp[1][(s1 * n2 + s2) * n3 + s3] * hval(1, s2, s3);
        out.mu0 += ps_exp[0][(s1 * n2 + s2) * n3 + s3] * hval(0, s2, s3);
      }
  out.mu = out.mu1 - out.mu0;
  return out;
}

CondExpOperator lt_operator(const JointLaw& law) {
  return build_operator(law, Names{ax::D, ax::S2, ax::S3}, Names{ax::D, ax::S1, ax::S2}, Event{ax::G, "O"});
}

double lt_bridge_residual(const JointLaw& law, const CellFunction& h) { return moment_residual(law, lt_operator(law), h); }

LongTermConstruction structural_from_observable_lt(const JointLaw& obs, const CellFunction& h) {
  const auto& s = obs.space();
  const Axis &sd = s.axis(ax::D), &a1 = s.axis(ax::S1), &a2 = s.axis(ax::S2), &a3 = s.axis(ax::S3), &ay = s.axis(ax::Y);
  const auto n1 = a1.size(), n2 = a2.size(), n3 = a3.size();
  const auto e = s.axis(ax::G).index_of("E"), o = s.axis(ax::G).index_of("O");
  const auto na = ay.find(kMissingLabel);
  if (!na) fail(ErrorCode::LabelMismatch, "long-term outcome axis lacks the missing label");

  Table pgds(obs, {ax::G, ax::D, ax::S1, ax::S2}), pds(obs, {ax::D, ax::S1, ax::S2});
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t s1 = 0; s1 < n1; ++s1)
      for (std::size_t s2 = 0; s2 < n2; ++s2)
        if (pds({d, s1, s2}) > 0.0 && !(pgds({o, d, s1, s2}) > 0.0))
          fail(ErrorCode::MissingOverlap, "P(G=O | S2,S1,D) = 0 on a support cell");

  LongTermConstruction out{{JointLaw::uniform(ProductSpace({indexed_axis("_", 1)})), {}}, 0, 0, 0, 0, 0, 0};
  double resid = lt_bridge_residual(obs, h);
  if (resid > kExactTolerance) fail(ErrorCode::BridgeViolated, "bridge moment residual " + format_number(resid));

  // Applicability: experimental short-term law equals the observational one, and
  // S3 carries no treatment information beyond (S1,S2) in the observational arm.
  Table pg(obs, {ax::G}), pgd(obs, {ax::G, ax::D}), pgs(obs, {ax::G, ax::D, ax::S1, ax::S2, ax::S3});
  double worst = 0.0;
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t s1 = 0; s1 < n1; ++s1)
      for (std::size_t s2 = 0; s2 < n2; ++s2)
        for (std::size_t s3 = 0; s3 < n3; ++s3) {
          double exp_d = pgs({e, d, s1, s2, s3}) / pgd({e, d});
          double obs_s = (pgs({o, 0, s1, s2, s3}) + pgs({o, 1, s1, s2, s3})) / pg({o});
          worst = std::max(worst, std::abs(exp_d - obs_s));
        }
  JointLaw obs_o = condition(obs, {{ax::G, "O"}});
  if (worst > 1e-12 || ci_discrepancy(obs_o, {ax::S3}, {ax::D}, {ax::S1, ax::S2}) > 1e-12)
    fail(ErrorCode::ConstructionInapplicable,
         "short-term outcomes are not invariant across samples given (S1,S2); U = (S1,S2) cannot reproduce this law");
  for (std::size_t c = 0; c < obs.size(); ++c) {
    bool missing = s.coordinate(c, s.axis_position(ax::Y)) == *na;
    bool exper = s.coordinate(c, s.axis_position(ax::G)) == e;
    if (obs.mass(c) > 0.0 && missing != exper)
      fail(ErrorCode::ConstructionInapplicable, "long-term outcome must be observed exactly in the observational sample");
  }

  std::vector<std::string> ylabels;
  for (const auto& l : ay.labels())
    if (l != kMissingLabel) ylabels.push_back(l);
  const auto ny = ylabels.size();
  ProductSpace st({s.axis(ax::G), sd, Axis("U1", a1.labels()), Axis("U2", a2.labels()), a1, a2, a3, Axis("Y(1)", ylabels),
                   Axis("Y(0)", ylabels)});
  Table pfull(obs, {ax::G, ax::D, ax::S1, ax::S2, ax::S3, ax::Y});
  std::vector<double> mass(st.size(), 0.0);
  const double po_total = pg({o});
  for (std::size_t s1 = 0; s1 < n1; ++s1)
    for (std::size_t s2 = 0; s2 < n2; ++s2)
      for (std::size_t s3 = 0; s3 < n3; ++s3) {
        double ps = (pgs({o, 0, s1, s2, s3}) + pgs({o, 1, s1, s2, s3})) / po_total;
        if (!(ps > 0.0)) continue;
        std::vector<std::vector<double>> g(2, std::vector<double>(ny));
        for (std::size_t d = 0; d < 2; ++d) {
          double den = pgs({o, d, s1, s2, s3});
          for (std::size_t yi = 0; yi < ny; ++yi)
            g[d][yi] = den > 0.0 ? pfull({o, d, s1, s2, s3, yi}) / den : 1.0 / static_cast<double>(ny);
          if (!(den > 0.0))
            out.structural.flags.push_back("Y(" + std::to_string(d) + ") law arbitrary at S=(" + a1.label(s1) + "," +
                                           a2.label(s2) + "," + a3.label(s3) + ")");
        }
        auto coupling = comonotone_coupling({g[1], g[0]});
        for (std::size_t d = 0; d < 2; ++d) {
          double pe = pgd({e, d});
          double pod = pgs({o, d, s1, s2, s3}) / po_total / ps;  // P(D=d | S, O)
          for (std::size_t y1 = 0; y1 < ny; ++y1)
            for (std::size_t y0 = 0; y0 < ny; ++y0) {
              double q = coupling[y1 * ny + y0];
              if (!(q > 0.0)) continue;
              mass[st.encode(std::vector<std::size_t>{e, d, s1, s2, s1, s2, s3, y1, y0})] = pe * ps * q;
              mass[st.encode(std::vector<std::size_t>{o, d, s1, s2, s1, s2, s3, y1, y0})] = po_total * ps * pod * q;
            }
        }
      }
  out.structural.law = JointLaw::normalized(st, std::move(mass));
  const auto& law = out.structural.law;

  auto seen = pushforward(law, s, [&](std::span<const std::size_t> c) {
    std::vector<std::size_t> r(s.rank());
    r[s.axis_position(ax::G)] = c[0];
    r[s.axis_position(ax::D)] = c[1];
    r[s.axis_position(ax::S1)] = c[4];
    r[s.axis_position(ax::S2)] = c[5];
    r[s.axis_position(ax::S3)] = c[6];
    r[s.axis_position(ax::Y)] = c[0] == o ? (c[1] == 1 ? c[7] : c[8]) : *na;
    return r;
  });
  out.pushforward_error = max_abs_diff(seen, obs);

  JointLaw st_o = condition(law, {{ax::G, "O"}});
  JointLaw st_e = condition(law, {{ax::G, "E"}});
  for (const std::string yd : {"Y(1)", "Y(0)"}) {
    out.observational_unconfounded = std::max(
        out.observational_unconfounded, ci_discrepancy(st_o, {yd, ax::S1, ax::S2, ax::S3}, {ax::D}, {"U1", "U2"}));
    out.experiment_randomized = std::max(out.experiment_randomized,
                                         ci_discrepancy(st_e, {yd, ax::S1, ax::S2, ax::S3, "U1", "U2"}, {ax::D}, {}));
    out.sequential_outcomes =
        std::max(out.sequential_outcomes, ci_discrepancy(st_o, {yd, ax::S3}, {ax::S1}, {ax::S2, "U1", "U2"}));
  }
  out.external_validity = ci_discrepancy(law, {ax::S1, ax::S2, ax::S3, "U1", "U2"}, {ax::G}, {});

  // Completeness: given (S2, D, G=O), g(U) -> E[g(U) | S1, S2, D, G=O] is injective.
  Table su(st_o, {ax::S2, ax::D, ax::S1, "U1", "U2"});
  for (std::size_t s2 = 0; s2 < n2; ++s2)
    for (std::size_t d = 0; d < 2; ++d) {
      const auto nu = n1 * n2;
      Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n1), static_cast<Eigen::Index>(nu));
      std::vector<bool> active(nu, false);
      for (std::size_t s1 = 0; s1 < n1; ++s1) {
        double row = 0.0;
        for (std::size_t u = 0; u < nu; ++u) row += su({s2, d, s1, u / n2, u % n2});
        if (!(row > 0.0)) continue;
        for (std::size_t u = 0; u < nu; ++u) {
          double p = su({s2, d, s1, u / n2, u % n2});
          m(static_cast<Eigen::Index>(s1), static_cast<Eigen::Index>(u)) = p / row;
          if (p > 0.0) active[u] = true;
        }
      }
      Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
      lu.setThreshold(1e-12);
      auto na_u = static_cast<std::size_t>(std::count(active.begin(), active.end(), true));
      auto rank = static_cast<std::size_t>(lu.rank());
      if (rank < na_u) out.completeness_deficiency += na_u - rank;
    }

  // Bridge on the latent: E[Y(D) - h(S3,S2,D) | S2, D, U, G=O] = 0.
  {
    const auto& ss = st_o.space();
    auto yv = numeric_labels(ss.axis("Y(1)"));
    auto hproj = projection_map(ss, h.space);
    std::vector<double> r(st_o.size());
    auto pd = ss.axis_position(ax::D), p1 = ss.axis_position("Y(1)"), p0 = ss.axis_position("Y(0)");
    for (std::size_t c = 0; c < st_o.size(); ++c) {
      double y = ss.coordinate(c, pd) == 1 ? yv[ss.coordinate(c, p1)] : yv[ss.coordinate(c, p0)];
      r[c] = y - h.values[hproj[c]];
    }
    auto ce = cond_expectation(st_o, r, Names{ax::S2, ax::D, "U1", "U2"});
    for (std::size_t i = 0; i < ce.size(); ++i)
      if (!ce.is_flagged(i)) out.latent_bridge = std::max(out.latent_bridge, std::abs(ce.values[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// NPIV

NpivModel gen_npiv(const NpivConfig& cfg, std::uint64_t seed) {
  const auto nt = cfg.nt, nz = cfg.nz, nx = cfg.nx, ny = cfg.ny;
  if (nt < 3) fail(ErrorCode::GridTooCoarse, "treatment grid needs at least three points");
  if (nz < 1 || nx < 1 || ny < 2) fail(ErrorCode::InvalidSizes, "npiv sizes must be positive");
  std::mt19937_64 rng(seed);
  std::vector<double> tgrid(nt);
  for (std::size_t t = 0; t < nt; ++t) tgrid[t] = static_cast<double>(t) / static_cast<double>(nt - 1);
  ProductSpace space({indexed_axis(ax::X, nx), indexed_axis(ax::Z, nz), numeric_axis(ax::T, tgrid), outcome_axis(ny)});
  auto px = random_simplex(rng, nx);
  std::vector<std::vector<double>> pz(nx), pt(nx * nz);
  for (std::size_t x = 0; x < nx; ++x) pz[x] = random_simplex(rng, nz);
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t z = 0; z < nz; ++z) {
      double target = nz > 1 ? static_cast<double>(z) * static_cast<double>(nt - 1) / static_cast<double>(nz - 1) : 0.0;
      std::vector<double> w(nt);
      for (std::size_t t = 0; t < nt; ++t)
        w[t] = uniform(rng, 0.2, 1.0) + 2.0 * std::exp(-std::pow(static_cast<double>(t) - target, 2.0));
      normalize(w);
      pt[x * nz + z] = w;
    }
  ProductSpace hspace = space.subspace(Names{ax::X, ax::T});
  std::vector<double> hv(hspace.size());
  for (std::size_t x = 0; x < nx; ++x) {
    double shift = uniform(rng, -0.05, 0.05), curve = uniform(rng, -0.15, 0.15);
    for (std::size_t t = 0; t < nt; ++t) {
      double tv = tgrid[t];
      hv[x * nt + t] = 0.5 - cfg.beta / 2.0 + cfg.beta * tv + shift + (cfg.linear ? 0.0 : curve * (tv * tv - tv));
    }
  }
  std::vector<std::vector<double>> delta(nx * nz);
  std::vector<double> lambdas(nx * nz * nt);
  for (std::size_t c = 0; c < nx * nz; ++c) delta[c] = centered_noise(rng, pt[c], 0.12);
  for (auto& l : lambdas) l = uniform(rng, 0.0, 1.0);

  auto assemble = [&](const std::vector<double>& shift) {
    std::vector<double> mass(space.size(), 0.0);
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t z = 0; z < nz; ++z)
        for (std::size_t t = 0; t < nt; ++t) {
          double m = hv[x * nt + t] + delta[x * nz + z][t] + (shift.empty() ? 0.0 : shift[x * nz + z]);
          check_mean(m, "bridge violation");
          auto py = outcome_distribution(m, lambdas[(x * nz + z) * nt + t], ny);
          double base = px[x] * pz[x][z] * pt[x * nz + z][t];
          for (std::size_t y = 0; y < ny; ++y) mass[space.encode(std::vector<std::size_t>{x, z, t, y})] = base * py[y];
        }
    return JointLaw::normalized(space, std::move(mass));
  };
  JointLaw law = assemble({});
  if (cfg.violation != 0.0) {
    auto phi = kernel_direction(npiv_operator(law));
    if (!phi.empty()) {
      for (auto& v : phi) v *= cfg.violation;
      law = assemble(phi);
    }
  }
  NpivModel out{std::move(law), CellFunction(hspace, hv), 0.0};
  auto dh = npiv_derivative(out.h);
  out.mu = expectation(out.law, dh);
  return out;
}

CondExpOperator npiv_operator(const JointLaw& law) { return build_operator(law, Names{ax::X, ax::T}, Names{ax::X, ax::Z}); }

double npiv_bridge_residual(const JointLaw& law, const CellFunction& h) { return moment_residual(law, npiv_operator(law), h); }

CellFunction npiv_derivative(const CellFunction& h) {
  const auto& s = h.space;
  auto kt = s.axis_position(ax::T);
  auto tv = s.axis(kt).numeric_values();
  const auto nt = tv.size();
  if (nt < 3) fail(ErrorCode::GridTooCoarse, "treatment grid needs at least three points");
  CellFunction out(s, std::vector<double>(s.size()));
  for (std::size_t c = 0; c < s.size(); ++c) {
    auto coords = s.decode(c);
    std::size_t t = coords[kt];
    std::size_t lo = t == 0 ? 0 : t - 1, hi = t + 1 == nt ? t : t + 1;
    coords[kt] = lo;
    double hl = h.values[s.encode(coords)];
    coords[kt] = hi;
    double hh = h.values[s.encode(coords)];
    out.values[c] = (hh - hl) / (tv[hi] - tv[lo]);
  }
  return out;
}

// ---------------------------------------------------------------------------

Dataset sample(const JointLaw& law, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::uint32_t> pick(law.mass().begin(), law.mass().end());
  Dataset d{law.space(), {}};
  d.cells.resize(n);
  for (auto& c : d.cells) c = pick(rng);
  return d;
}

nlohmann::json law_to_json(const JointLaw& law) {
  nlohmann::json axes = nlohmann::json::array();
  for (const auto& a : law.space().axes()) axes.push_back({{"name", a.name()}, {"labels", a.labels()}});
  return {{"axes", std::move(axes)}, {"mass", law.mass()}};
}

double parse_number(const std::string& s) {
  auto v = parse_double(s);
  if (!v) fail(ErrorCode::ParseError, "label '" + s + "' is not numeric");
  return *v;
}

}  // namespace localid
