#include "blris/fields.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "blris/util.hpp"

namespace blris {

// ---------------------------------------------------------------------------
// constraint quantities

namespace {

int hw_threads() {
  unsigned h = std::thread::hardware_concurrency();
  return h ? int(h) : 4;
}

}  // namespace

Constraints scal_and_densities(double chi, double psi, const Vec3& grad_chi,
                               const Vec3& grad_psi, double a_val, double b_val) {
  if (!(chi > 0.0) || !(psi > 0.0))
    throw std::invalid_argument("scal_and_densities: factors must be positive");
  Constraints c;
  const double u = chi * psi;
  const Vec3 dlog = grad_chi / chi - grad_psi / psi;  // grad ln(chi/psi)
  c.e_norm_sq = dlog.norm2() / (u * u);
  const double u3 = u * u * u;
  c.rho_mass = (a_val * psi + b_val * chi) / u3;
  c.rho_el = (a_val * psi - b_val * chi) / u3;
  c.rho_bar_mass = psi * a_val + chi * b_val;
  c.rho_bar_el = psi * a_val - chi * b_val;
  c.scal = 16.0 * kPi * c.rho_mass + 2.0 * c.e_norm_sq;
  c.div_e = -4.0 * kPi * c.rho_el;
  return c;
}

// ---------------------------------------------------------------------------
// discrete superposition

namespace {

void add_point_source(const Vec3& x, const Vec3& p, double alpha, double beta,
                      FieldSample& s) {
  Vec3 d = x - p;
  double r2 = d.norm2();
  if (r2 == 0.0)
    throw std::domain_error("eval_discrete: singular evaluation at a source location");
  double r = std::sqrt(r2);
  double inv = 1.0 / r;
  double inv3 = inv / r2;
  s.chi += alpha * inv;
  s.psi += beta * inv;
  s.grad_chi += (-alpha * inv3) * d;
  s.grad_psi += (-beta * inv3) * d;
}

// distance from x to the closed box (0 when inside)
double box_distance(const Vec3& x, const Vec3& c, double half) {
  double dx = std::max(std::fabs(x.x - c.x) - half, 0.0);
  double dy = std::max(std::fabs(x.y - c.y) - half, 0.0);
  double dz = std::max(std::fabs(x.z - c.z) - half, 0.0);
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace

struct DiscreteField::Tree {
  struct Node {
    Vec3 box_center;
    double half = 0.0;
    int child[8] = {-1, -1, -1, -1, -1, -1, -1, -1};
    int lo = 0, hi = 0;  // leaf slice of `order`
    bool leaf = false;
    double a_tot = 0.0, b_tot = 0.0;
    Vec3 a_c, b_c;              // weighted centroids
    double m2 = 0.0;            // (alpha+beta)-weighted second moment
  };
  std::vector<Node> nodes;
  std::vector<int> order;

  int build(const std::vector<SourceEntry>& es, int lo, int hi, const Vec3& center,
            double half, int depth) {
    int id = int(nodes.size());
    nodes.push_back({});
    {
      auto& nd = nodes[id];
      nd.box_center = center;
      nd.half = half;
      nd.lo = lo;
      nd.hi = hi;
    }
    if (hi - lo <= 8 || depth >= 40) {
      nodes[id].leaf = true;
    } else {
      // bucket the slice into octants of the box
      std::array<std::vector<int>, 8> buckets;
      for (int k = lo; k < hi; ++k) {
        const Vec3& p = es[order[k]].p;
        int oct = (p.x >= center.x ? 1 : 0) | (p.y >= center.y ? 2 : 0) |
                  (p.z >= center.z ? 4 : 0);
        buckets[oct].push_back(order[k]);
      }
      int at = lo;
      double q = half / 2;
      for (int oct = 0; oct < 8; ++oct) {
        if (buckets[oct].empty()) continue;
        int blo = at;
        for (int idx : buckets[oct]) order[at++] = idx;
        Vec3 c = center + Vec3{oct & 1 ? q : -q, oct & 2 ? q : -q, oct & 4 ? q : -q};
        int cid = build(es, blo, at, c, q, depth + 1);
        nodes[id].child[oct] = cid;
      }
    }
    // moments from the slice (positions are shared by both sums)
    auto& nd = nodes[id];
    Vec3 ac{}, bc{};
    for (int k = lo; k < hi; ++k) {
      const auto& e = es[order[k]];
      nd.a_tot += e.alpha;
      nd.b_tot += e.beta;
      ac += e.alpha * e.p;
      bc += e.beta * e.p;
    }
    nd.a_c = nd.a_tot > 0 ? ac / nd.a_tot : center;
    nd.b_c = nd.b_tot > 0 ? bc / nd.b_tot : center;
    for (int k = lo; k < hi; ++k) {
      const auto& e = es[order[k]];
      nd.m2 += e.alpha * (e.p - nd.a_c).norm2() + e.beta * (e.p - nd.b_c).norm2();
    }
    return id;
  }

  void accumulate(const std::vector<SourceEntry>& es, int id, const Vec3& x,
                  double theta, double eps_node, FieldSample& s) const {
    const auto& nd = nodes[id];
    double d = box_distance(x, nd.box_center, nd.half);
    if (d > 0.0) {
      double size = 2.0 * nd.half;
      // geometric opening plus a quadrupole-remainder bound; the dipole term
      // vanishes by the centroid choice, so the residual is <= m2 / d^3
      if (size <= theta * d && nd.m2 <= eps_node * d * d * d) {
        if (nd.a_tot > 0.0) {
          Vec3 da = x - nd.a_c;
          double ra = da.norm();
          s.chi += nd.a_tot / ra;
          s.grad_chi += (-nd.a_tot / (ra * ra * ra)) * da;
        }
        if (nd.b_tot > 0.0) {
          Vec3 db = x - nd.b_c;
          double rb = db.norm();
          s.psi += nd.b_tot / rb;
          s.grad_psi += (-nd.b_tot / (rb * rb * rb)) * db;
        }
        return;
      }
    }
    if (nd.leaf) {
      for (int k = nd.lo; k < nd.hi; ++k) {
        const auto& e = es[order[k]];
        add_point_source(x, e.p, e.alpha, e.beta, s);
      }
      return;
    }
    for (int c : nd.child)
      if (c >= 0) accumulate(es, c, x, theta, eps_node, s);
  }
};

DiscreteField::DiscreteField(const SourceSet& sources) : set_(sources) {
  if (!sources.materialized)
    throw std::logic_error("DiscreteField: source set is not materialized");
}

void DiscreteField::ensure_tree() const {
  static std::mutex m;
  std::lock_guard<std::mutex> lock(m);
  if (tree_) return;
  auto t = std::make_shared<Tree>();
  t->order.resize(set_.entries.size());
  for (std::size_t i = 0; i < t->order.size(); ++i) t->order[i] = int(i);
  double half = set_.D;
  for (const auto& e : set_.entries)
    half = std::max({half, std::fabs(e.p.x), std::fabs(e.p.y), std::fabs(e.p.z)});
  if (!set_.entries.empty())
    t->build(set_.entries, 0, int(set_.entries.size()), Vec3{}, half, 0);
  tree_ = std::move(t);
}

FieldSample DiscreteField::eval(const Vec3& x, int exclude, Accel accel,
                                double theta) const {
  FieldSample s;
  s.x = x;
  if (accel == Accel::tree && exclude < 0 && !set_.entries.empty()) {
    if (!(theta > 0.0 && theta < 1.0))
      throw std::invalid_argument("eval: theta must lie in (0,1)");
    ensure_tree();
    tree_->accumulate(set_.entries, 0, x, theta, 1e-10, s);
  } else {
    for (int j = 0; j < int(set_.entries.size()); ++j) {
      if (j == exclude) continue;
      const auto& e = set_.entries[j];
      add_point_source(x, e.p, e.alpha, e.beta, s);
    }
  }
  Vec3 dlog = s.grad_chi / s.chi - s.grad_psi / s.psi;
  double u = s.chi * s.psi;
  s.e_norm_sq = dlog.norm2() / (u * u);
  s.scal = 2.0 * s.e_norm_sq;  // vacuum away from the sources
  s.div_e = 0.0;
  return s;
}

FieldSample eval_discrete(const SourceSet& sources, const Vec3& x, int exclude,
                          Accel accel, double theta) {
  return DiscreteField(sources).eval(x, exclude, accel, theta);
}

// ---------------------------------------------------------------------------
// continuum factors via the radial Newton reduction

namespace {

struct RadialPotential {
  double phi = 0.0;   // 4 pi [ F(r)/r + G(r) ]
  double dphi = 0.0;  // -4 pi F(r)/r^2
};

RadialPotential radial_potential(const Profile& P, double r, double tol) {
  RadialPotential out;
  const double R = P.support_radius();
  if (P.is_zero() || R <= 0.0) return out;
  auto f2 = [&](double s) { return s * s * P.value_radial(s); };
  auto f1 = [&](double s) { return s * P.value_radial(s); };
  if (r < 1e-13 * std::max(R, 1.0)) {
    out.phi = 4.0 * kPi * adaptive_simpson(f1, 0.0, R, tol);
    return out;
  }
  const double rin = std::min(r, R);
  double F = adaptive_simpson(f2, 0.0, rin, tol);
  double G = r < R ? adaptive_simpson(f1, r, R, tol) : 0.0;
  out.phi = 4.0 * kPi * (F / r + G);
  out.dphi = -4.0 * kPi * F / (r * r);
  return out;
}

}  // namespace

FieldSample eval_continuum(const DustCloud& cloud, const Vec3& x, double tol) {
  if (!(tol >= 1e-10))
    throw std::invalid_argument("eval_continuum: tol must be >= 1e-10");
  FieldSample s;
  s.x = x;
  const double r = x.norm();
  RadialPotential pa = radial_potential(cloud.A, r, tol);
  RadialPotential pb = radial_potential(cloud.B, r, tol);
  s.chi = 1.0 + pa.phi;
  s.psi = 1.0 + pb.phi;
  if (r > 0.0) {
    Vec3 dir = x / r;
    s.grad_chi = pa.dphi * dir;
    s.grad_psi = pb.dphi * dir;
  }
  Constraints c = scal_and_densities(s.chi, s.psi, s.grad_chi, s.grad_psi,
                                     cloud.A(x), cloud.B(x));
  s.e_norm_sq = c.e_norm_sq;
  s.scal = c.scal;
  s.rho_mass = c.rho_mass;
  s.rho_el = c.rho_el;
  s.rho_bar_mass = c.rho_bar_mass;
  s.rho_bar_el = c.rho_bar_el;
  s.div_e = c.div_e;
  return s;
}

// ---------------------------------------------------------------------------
// masses and charges

ChargeReport masses_charges(const SourceSet& sources, bool per_end) {
  if (!sources.materialized)
    throw std::logic_error("masses_charges: source set is not materialized");
  ChargeReport rep;
  const auto& es = sources.entries;
  for (const auto& e : es) {
    rep.m_adm += e.alpha + e.beta;
    rep.q_total += e.beta - e.alpha;
  }
  const int n = int(es.size());
  if (!per_end || n > 32768) return rep;
  rep.m_i.assign(n, 0.0);
  rep.q_i.assign(n, 0.0);
  std::atomic<bool> coincident{false};
  parallel_for(std::size_t(n), hw_threads(), [&](std::size_t iu) {
    int i = int(iu);
    double m = es[i].alpha + es[i].beta;
    double q = es[i].beta - es[i].alpha;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      double r = (es[j].p - es[i].p).norm();
      if (r == 0.0) {
        coincident = true;
        return;
      }
      m += (es[j].alpha * es[i].beta + es[i].alpha * es[j].beta) / r;
      q += (es[j].alpha * es[i].beta - es[i].alpha * es[j].beta) / r;
    }
    rep.m_i[i] = m;
    rep.q_i[i] = q;
  });
  if (coincident) throw std::domain_error("masses_charges: coincident sources");
  double sum_m = 0.0;
  for (double m : rep.m_i) sum_m += m;
  rep.interaction_energy = rep.m_adm - sum_m;
  return rep;
}

NearSourceDecomposition near_source(const DiscreteField& field, int i) {
  const auto& es = field.sources().entries;
  if (i < 0 || i >= int(es.size()))
    throw std::out_of_range("near_source: index out of range");
  NearSourceDecomposition d;
  d.index = i;
  d.p = es[i].p;
  d.alpha = es[i].alpha;
  d.beta = es[i].beta;
  FieldSample s = field.eval(d.p, i);
  d.chi_hat = s.chi;
  d.psi_hat = s.psi;
  return d;
}

// ---------------------------------------------------------------------------
// deviation report

DeviationReport deviation_report(const SourceSet& sources,
                                 const std::vector<Vec3>& samples, double nu) {
  if (!(nu > 1.0 && nu < 1.5))
    throw std::invalid_argument("deviation_report: nu must lie in (1, 3/2)");
  if (!sources.materialized || !sources.has_provenance)
    throw std::logic_error("deviation_report: needs a materialized set with its cloud");
  DeviationReport rep;
  rep.n = sources.n;
  rep.nu = nu;
  const double D = sources.D;
  const double r_val = D / (double(sources.n) * sources.n);
  const double r_grad = D * std::pow(double(sources.n), -nu);
  const auto& es = sources.entries;

  struct Row {
    double dchi = -1.0, dpsi = -1.0, dgchi = -1.0, dgpsi = -1.0;  // -1: excised
  };
  std::vector<Row> rows(samples.size());
  parallel_for(samples.size(), hw_threads(), [&](std::size_t k) {
    const Vec3& x = samples[k];
    FieldSample d;
    d.chi = d.psi = 1.0;
    double dmin = kInf;
    for (const auto& e : es) {
      dmin = std::min(dmin, (x - e.p).norm());
      add_point_source(x, e.p, e.alpha, e.beta, d);
    }
    FieldSample c = eval_continuum(sources.cloud, x, 1e-10);
    Row r;
    if (dmin > r_val) {
      r.dchi = std::fabs(d.chi - c.chi);
      r.dpsi = std::fabs(d.psi - c.psi);
    }
    if (dmin > r_grad) {
      r.dgchi = (d.grad_chi - c.grad_chi).norm();
      r.dgpsi = (d.grad_psi - c.grad_psi).norm();
    }
    rows[k] = r;
  });
  for (const Row& r : rows) {
    if (r.dchi >= 0.0) {
      rep.sup_chi = std::max(rep.sup_chi, r.dchi);
      rep.sup_psi = std::max(rep.sup_psi, r.dpsi);
      ++rep.value_points;
    }
    if (r.dgchi >= 0.0) {
      rep.sup_grad_chi = std::max(rep.sup_grad_chi, r.dgchi);
      rep.sup_grad_psi = std::max(rep.sup_grad_psi, r.dgpsi);
      ++rep.grad_points;
    }
  }

  // near-source variant: probes inside B(p_i, D/(2n)) against the regular part
  DiscreteField field(sources);
  const double rp = D / (4.0 * double(sources.n));
  std::size_t stride = std::max<std::size_t>(1, es.size() / 64);
  std::vector<std::size_t> picks;
  for (std::size_t i = 0; i < es.size(); i += stride) picks.push_back(i);
  std::vector<std::pair<double, double>> near(picks.size());
  parallel_for(picks.size(), hw_threads(), [&](std::size_t t) {
    std::size_t i = picks[t];
    double worst_chi = 0.0, worst_psi = 0.0;
    const Vec3 offs[7] = {{0, 0, 0}, {rp, 0, 0}, {-rp, 0, 0}, {0, rp, 0},
                          {0, -rp, 0}, {0, 0, rp}, {0, 0, -rp}};
    for (const Vec3& o : offs) {
      Vec3 x = es[i].p + o;
      FieldSample d = field.eval(x, int(i));
      FieldSample c = eval_continuum(sources.cloud, x, 1e-10);
      worst_chi = std::max(worst_chi, std::fabs(d.chi - c.chi));
      worst_psi = std::max(worst_psi, std::fabs(d.psi - c.psi));
    }
    near[t] = {worst_chi, worst_psi};
  });
  for (auto& [wc, wp] : near) {
    rep.near_chi = std::max(rep.near_chi, wc);
    rep.near_psi = std::max(rep.near_psi, wp);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// second-derivative probe

double hessian_bound_probe(const SourceSet& sources, double c_fraction,
                           int max_probe_sources, std::uint64_t seed) {
  if (!(c_fraction > 0.0 && c_fraction < 0.5))
    throw std::invalid_argument("hessian_bound_probe: fraction must lie in (0, 1/2)");
  if (!sources.materialized)
    throw std::logic_error("hessian_bound_probe: source set is not materialized");
  const auto& es = sources.entries;
  if (es.empty()) return 0.0;
  const double rc = c_fraction * sources.D / double(sources.n);

  std::vector<Vec3> probes;
  std::size_t stride = std::max<std::size_t>(1, es.size() / std::size_t(max_probe_sources));
  const double rr = 1.25 * rc;
  for (std::size_t i = 0; i < es.size(); i += stride) {
    const Vec3& p = es[i].p;
    const Vec3 cand[6] = {{p.x + rr, p.y, p.z}, {p.x - rr, p.y, p.z},
                          {p.x, p.y + rr, p.z}, {p.x, p.y - rr, p.z},
                          {p.x, p.y, p.z + rr}, {p.x, p.y, p.z - rr}};
    probes.insert(probes.end(), cand, cand + 6);
  }
  SplitRng rng(seed, 0x9e5);
  for (int k = 0; k < 128; ++k)
    probes.push_back(Vec3{rng.uniform(-sources.D, sources.D),
                          rng.uniform(-sources.D, sources.D),
                          rng.uniform(-sources.D, sources.D)});
  // keep only probes admissible for every source
  std::vector<char> keep(probes.size(), 0);
  parallel_for(probes.size(), hw_threads(), [&](std::size_t k) {
    for (const auto& e : es)
      if ((probes[k] - e.p).norm() < rc) return;
    keep[k] = 1;
  });

  DiscreteField field(sources);
  const double h = 0.05 * rc;
  std::vector<double> worst(probes.size(), 0.0);
  parallel_for(probes.size(), hw_threads(), [&](std::size_t k) {
    if (!keep[k]) return;
    const Vec3& x = probes[k];
    auto val = [&](const Vec3& y) {
      FieldSample s = field.eval(y);
      return std::pair<double, double>{s.chi, s.psi};
    };
    auto [c0, p0] = val(x);
    double w = 0.0;
    Vec3 e[3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    for (int a = 0; a < 3; ++a) {
      auto [cp, pp] = val(x + h * e[a]);
      auto [cm, pm] = val(x - h * e[a]);
      w = std::max({w, std::fabs((cp - 2 * c0 + cm) / (h * h)),
                    std::fabs((pp - 2 * p0 + pm) / (h * h))});
      for (int b = a + 1; b < 3; ++b) {
        auto [cpp, ppp] = val(x + h * e[a] + h * e[b]);
        auto [cpm, ppm] = val(x + h * e[a] - h * e[b]);
        auto [cmp, pmp] = val(x - h * e[a] + h * e[b]);
        auto [cmm, pmm] = val(x - h * e[a] - h * e[b]);
        w = std::max({w, std::fabs((cpp - cpm - cmp + cmm) / (4 * h * h)),
                      std::fabs((ppp - ppm - pmp + pmm) / (4 * h * h))});
      }
    }
    worst[k] = w;
  });
  double out = 0.0;
  for (double w : worst) out = std::max(out, w);
  return out;
}

double uniform_factor_bound(const SourceSet& sources) {
  if (!sources.has_provenance)
    throw std::logic_error("uniform_factor_bound: needs cloud provenance");
  const double D = sources.D;
  return 2.0 + 1600.0 * (sources.cloud.norm_a * D * D + sources.cloud.norm_b * D * D +
                         (sources.c_alpha + sources.c_beta) / D);
}

// ---------------------------------------------------------------------------
// radial coupled solve

namespace {

// cumulative integrals of w(s) f(s) over a grid block using per-interval
// two-point Gauss nodes (never on the block edges, so integrand kinks at
// block boundaries cost nothing); f is interpolated by a Catmull-Rom cubic
// cubic through nodes k-1..k+2 at parameter t in [0,1] between k and k+1
double cubic_interp(const std::vector<double>& v, std::size_t k, double t) {
  double vm = k > 0 ? v[k - 1] : 2 * v[0] - v[1];
  double vp = v[k], vq = v[k + 1];
  double vr = k + 2 < v.size() ? v[k + 2] : 2 * v[v.size() - 1] - v[v.size() - 2];
  double a0 = -0.5 * vm + 1.5 * vp - 1.5 * vq + 0.5 * vr;
  double a1 = vm - 2.5 * vp + 2.0 * vq - 0.5 * vr;
  double a2 = -0.5 * vm + 0.5 * vq;
  return ((a0 * t + a1) * t + a2) * t + vp;
}

}  // namespace

RadialCloudSolution solve_radial_cloud(const std::function<double(double)>& rho_bar_mass,
                                       const std::function<double(double)>& rho_bar_el,
                                       double support, double r_max, int nodes) {
  if (!(support > 0.0) || !(r_max > support))
    throw std::invalid_argument("solve_radial_cloud: need 0 < support < r_max");
  if (nodes < 64) throw std::invalid_argument("solve_radial_cloud: too few nodes");

  RadialCloudSolution sol;
  // two uniform blocks split exactly at the support edge
  int n_in = std::max(32, int(std::lround(nodes * support / r_max)));
  int n_out = std::max(16, nodes - n_in);
  for (int k = 0; k <= n_in; ++k) sol.r.push_back(support * k / double(n_in));
  for (int k = 1; k <= n_out; ++k)
    sol.r.push_back(support + (r_max - support) * k / double(n_out));
  const std::size_t N = sol.r.size();

  sol.rho_bar_mass.resize(N);
  sol.rho_bar_el.resize(N);
  for (std::size_t k = 0; k < N; ++k) {
    double m = sol.r[k] <= support ? rho_bar_mass(sol.r[k]) : 0.0;
    double e = sol.r[k] <= support ? rho_bar_el(sol.r[k]) : 0.0;
    if (m < std::fabs(e) - 1e-12 * (1.0 + std::fabs(m)))
      throw std::invalid_argument("solve_radial_cloud: energy condition violated");
    sol.rho_bar_mass[k] = m;
    sol.rho_bar_el[k] = e;
  }

  // Green update: u = 1 + 4 pi [ F(r)/r + G(r) ], lap u = -4 pi f,
  // f(s) = rho(s) / (2 * other(s)); Gauss nodes use exact rho and a cubic
  // interpolant (clamped >= 1) of the other factor.
  auto green = [&](const std::function<double(double)>& rho,
                   const std::vector<double>& other, std::vector<double>& out) {
    const double g1 = 0.5 - 0.5 / std::sqrt(3.0), g2 = 0.5 + 0.5 / std::sqrt(3.0);
    std::vector<double> F(N, 0.0), C(N, 0.0);  // int s^2 f, int s f
    for (std::size_t k = 0; k + 1 < N; ++k) {
      double h = sol.r[k + 1] - sol.r[k];
      double acc2 = 0.0, acc1 = 0.0;
      for (double t : {g1, g2}) {
        double s = sol.r[k] + t * h;
        if (s > support) continue;
        double w = std::max(1.0, cubic_interp(other, k, t));
        double f = rho(s) / (2.0 * w);
        acc2 += 0.5 * h * s * s * f;
        acc1 += 0.5 * h * s * f;
      }
      F[k + 1] = F[k] + acc2;
      C[k + 1] = C[k] + acc1;
    }
    out.resize(N);
    for (std::size_t k = 0; k < N; ++k) {
      double outer = C[N - 1] - C[k];
      double inner = sol.r[k] > 0.0 ? F[k] / sol.r[k] : 0.0;
      out[k] = 1.0 + 4.0 * kPi * (inner + outer);
    }
  };

  auto rho_chi = [&](double s) { return rho_bar_mass(s) + rho_bar_el(s); };
  auto rho_psi = [&](double s) { return rho_bar_mass(s) - rho_bar_el(s); };

  sol.chi.assign(N, 1.0);
  sol.psi.assign(N, 1.0);
  std::vector<double> nchi, npsi;
  double gap = kInf;
  for (sol.iterations = 0; sol.iterations < 200; ++sol.iterations) {
    green(rho_chi, sol.psi, nchi);  // Jacobi pair: keeps chi == psi exact
    green(rho_psi, sol.chi, npsi);  //   when rho_bar_el == 0
    gap = 0.0;
    for (std::size_t k = 0; k < N; ++k)
      gap = std::max({gap, std::fabs(nchi[k] - sol.chi[k]),
                      std::fabs(npsi[k] - sol.psi[k])});
    sol.chi.swap(nchi);
    sol.psi.swap(npsi);
    if (gap < 1e-13) break;
  }
  if (gap > 1e-10)
    throw std::runtime_error("solve_radial_cloud: no convergence, last gap " +
                             fmt_double(gap));

  // integral-form defect (zero at the exact solution of the coupled system)
  green(rho_chi, sol.psi, nchi);
  green(rho_psi, sol.chi, npsi);
  for (std::size_t k = 0; k < N; ++k) {
    sol.residual_chi = std::max(sol.residual_chi, std::fabs(nchi[k] - sol.chi[k]));
    sol.residual_psi = std::max(sol.residual_psi, std::fabs(npsi[k] - sol.psi[k]));
  }

  // independent centered-difference recomputation of psi lap chi = -2 pi rho,
  // skipping the support edge where the density may jump across the stencil
  for (std::size_t k = 1; k + 1 < N; ++k) {
    double hl = sol.r[k] - sol.r[k - 1], hr = sol.r[k + 1] - sol.r[k];
    if (std::fabs(hl - hr) > 1e-12 * hr) continue;  // block seam
    if (std::fabs(sol.r[k] - support) <= 2.0 * hr) continue;
    double lap = (sol.chi[k + 1] - 2 * sol.chi[k] + sol.chi[k - 1]) / (hr * hr) +
                 (sol.chi[k + 1] - sol.chi[k - 1]) / (hr * sol.r[k]);
    double res = sol.psi[k] * lap +
                 2.0 * kPi * (sol.rho_bar_mass[k] + sol.rho_bar_el[k]);
    sol.fd_residual = std::max(sol.fd_residual, std::fabs(res));
  }
  return sol;
}

RecoveredDensities recover_AB(const std::vector<double>& r, const std::vector<double>& chi,
                              const std::vector<double>& psi) {
  if (r.size() < 3 || r.size() != chi.size() || r.size() != psi.size())
    throw std::invalid_argument("recover_AB: need three aligned samples");
  RecoveredDensities out;
  out.min_a = kInf;
  out.min_b = kInf;
  for (std::size_t k = 1; k + 1 < r.size(); ++k) {
    double hl = r[k] - r[k - 1], hr = r[k + 1] - r[k];
    if (std::fabs(hl - hr) > 1e-9 * hr) continue;  // non-uniform seam
    if (r[k] <= 0.0) continue;
    auto lap = [&](const std::vector<double>& u) {
      return (u[k + 1] - 2 * u[k] + u[k - 1]) / (hr * hr) +
             (u[k + 1] - u[k - 1]) / (hr * r[k]);
    };
    out.r.push_back(r[k]);
    out.A.push_back(-lap(chi) / (4.0 * kPi));
    out.B.push_back(-lap(psi) / (4.0 * kPi));
    out.min_a = std::min(out.min_a, out.A.back());
    out.min_b = std::min(out.min_b, out.B.back());
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV dumps

std::string field_csv(const std::vector<FieldSample>& samples) {
  std::string out =
      "x,y,z,chi,psi,gchi_x,gchi_y,gchi_z,gpsi_x,gpsi_y,gpsi_z,"
      "e_norm_sq,scal,rho_mass,rho_el\n";
  for (const auto& s : samples) {
    const double cols[15] = {s.x.x, s.x.y, s.x.z, s.chi, s.psi,
                             s.grad_chi.x, s.grad_chi.y, s.grad_chi.z,
                             s.grad_psi.x, s.grad_psi.y, s.grad_psi.z,
                             s.e_norm_sq, s.scal, s.rho_mass, s.rho_el};
    for (int i = 0; i < 15; ++i) {
      out += fmt_double(cols[i]);
      out += i + 1 < 15 ? ',' : '\n';
    }
  }
  return out;
}

std::string radial_csv(const RadialCloudSolution& sol) {
  std::string out = "r,chi,psi,residual\n";
  double res = std::max(sol.residual_chi, sol.residual_psi);
  for (std::size_t k = 0; k < sol.r.size(); ++k) {
    out += fmt_double(sol.r[k]);
    out += ',';
    out += fmt_double(sol.chi[k]);
    out += ',';
    out += fmt_double(sol.psi[k]);
    out += ',';
    out += fmt_double(res);
    out += '\n';
  }
  return out;
}

}  // namespace blris
