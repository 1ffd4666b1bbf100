#include "blris/metricspace.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <queue>
#include <stdexcept>
#include <thread>
#include <unordered_map>
#include <utility>

namespace blris {

namespace {

// run body(k) over [0, n) in parallel, capturing the first exception instead
// of letting it escape a worker thread
void parallel_collect(std::size_t n, int threads,
                      const std::function<void(std::size_t)>& body) {
  std::vector<std::exception_ptr> errs(n);
  parallel_for(n, threads, [&](std::size_t k) {
    try {
      body(k);
    } catch (...) {
      errs[k] = std::current_exception();
    }
  });
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

double seg_point_dist(const Vec3& a, const Vec3& b, const Vec3& p) {
  Vec3 d = b - a;
  double l2 = d.norm2();
  double t = l2 > 0.0 ? std::clamp((p - a).dot(d) / l2, 0.0, 1.0) : 0.0;
  return (a + d * t - p).norm();
}

// uniform-cell spatial hash; coordinates stay small because cells are sized
// to the structures they index (lattice spacing, source spacing)
struct CellHash {
  double cell = 1.0;
  std::unordered_map<std::uint64_t, std::vector<std::int32_t>> bins;

  static std::uint64_t key(std::int64_t ix, std::int64_t iy, std::int64_t iz) {
    const std::uint64_t m = (std::uint64_t(1) << 21) - 1;
    return ((std::uint64_t(ix + (1 << 20)) & m) << 42) |
           ((std::uint64_t(iy + (1 << 20)) & m) << 21) |
           (std::uint64_t(iz + (1 << 20)) & m);
  }
  std::int64_t coord(double v) const {
    return std::int64_t(std::floor(v / cell));
  }
  void insert(const Vec3& x, std::int32_t id) {
    bins[key(coord(x.x), coord(x.y), coord(x.z))].push_back(id);
  }
  template <class F>
  void for_near(const Vec3& x, double radius, F&& f) const {
    std::int64_t x0 = coord(x.x - radius), x1 = coord(x.x + radius);
    std::int64_t y0 = coord(x.y - radius), y1 = coord(x.y + radius);
    std::int64_t z0 = coord(x.z - radius), z1 = coord(x.z + radius);
    for (std::int64_t ix = x0; ix <= x1; ++ix)
      for (std::int64_t iy = y0; iy <= y1; ++iy)
        for (std::int64_t iz = z0; iz <= z1; ++iz) {
          auto it = bins.find(key(ix, iy, iz));
          if (it == bins.end()) continue;
          for (std::int32_t id : it->second) f(id);
        }
  }
};

// latitude-ring discretization of a sphere of radius rho at spacing ~h;
// ring counts follow circumference with a floor so tiny shells stay 3-D
struct SGrid {
  int n_th = 0;
  std::vector<int> n_ph;
  int ring_total = 0;
};

SGrid shell_grid(double rho, double h, int min_rings) {
  SGrid g;
  g.n_th = std::max(min_rings, int(std::ceil(kPi * rho / h)));
  g.n_th = std::min(g.n_th, 64);
  g.n_ph.resize(g.n_th);
  for (int k = 0; k < g.n_th; ++k) {
    double th = kPi * (k + 0.5) / g.n_th;
    double s = std::sin(th);
    double want = std::max(2.0 * kPi * rho * s / h, 2.0 * min_rings * s);
    int np = std::min(128, std::max(4, int(std::ceil(want))));
    g.n_ph[k] = np;
    g.ring_total += np;
  }
  return g;
}

int shell_count(double rho, double h, int min_rings) {
  return 2 + shell_grid(rho, h, min_rings).ring_total;
}

// factor that lifts a shell above a sphere so its chords clear the sphere;
// 1.2 on the meridian gap covers the half-step phi misalignment of ring links
double grid_lift(const SGrid& g) {
  double gmax = 1.2 * kPi / g.n_th;
  for (int k = 0; k < g.n_th; ++k) {
    double th = kPi * (k + 0.5) / g.n_th;
    double s2 = std::sin(th) * std::sin(th);
    double cg = 1.0 - s2 * (1.0 - std::cos(2.0 * kPi / g.n_ph[k]));
    gmax = std::max(gmax, std::acos(std::clamp(cg, -1.0, 1.0)));
  }
  return (1.0 + 1e-6) / std::cos(0.5 * gmax);
}

// piecewise-linear radial table of the smooth-cloud conformal factor; valid
// because every profile is radial, so chi psi depends on |x| only
struct RadialFactor {
  double dr = 1.0;
  std::vector<double> val;
  double operator()(double r) const {
    double u = std::abs(r) / dr;
    std::size_t i = std::size_t(u);
    if (i + 1 >= val.size()) return val.back();
    double f = u - double(i);
    return val[i] * (1.0 - f) + val[i + 1] * f;
  }
};

RadialFactor make_radial_factor(const DustCloud& cloud, double rmax,
                                int threads) {
  const int m = 8192;
  RadialFactor rf;
  rf.dr = rmax / m;
  rf.val.resize(m + 1);
  parallel_collect(m + 1, threads, [&](std::size_t i) {
    FieldSample s =
        eval_continuum(cloud, Vec3{double(i) * rf.dr, 0.0, 0.0}, 1e-9);
    rf.val[i] = s.u();
  });
  return rf;
}

double rn_antideriv(double sig, double q, double r) {
  return r * r * r / 3.0 + 1.5 * sig * r * r + 3.0 * (q + sig * sig) * r +
         (sig * sig * sig + 6.0 * sig * q) * std::log(r) -
         (3.0 * q * q + 3.0 * sig * sig * q) / r -
         1.5 * sig * q * q / (r * r) - q * q * q / (3.0 * r * r * r);
}

int snapped_node(const GeodesicGraph& g, const Vec3& x) {
  int a = nearest_node(g, x);
  if (a < 0) throw std::invalid_argument("distance: empty graph");
  double d = (g.pos[a] - x).norm();
  if (d > 1.3 * double(g.snap[a]) + 1e-12)
    throw std::invalid_argument(
        "distance: point (" + fmt_double(x.x) + ", " + fmt_double(x.y) +
        ", " + fmt_double(x.z) + ") lies " + fmt_double(d) +
        " from the nearest node, beyond its snap radius " +
        fmt_double(double(g.snap[a])));
  return a;
}

}  // namespace

// ===========================================================================
// Domain

Domain make_domain(const SourceSet& sources, double R, ExcisionMode mode,
                   const std::vector<HorizonSurface>* horizons,
                   double rprime_hint) {
  if (!sources.materialized)
    throw std::invalid_argument("make_domain: source set is not materialized");
  if (!(R > std::sqrt(3.0) * sources.D))
    throw std::invalid_argument("make_domain: R must exceed sqrt(3) D");
  if (mode == ExcisionMode::lattice && sources.n < 2)
    throw std::invalid_argument("make_domain: lattice excision needs n >= 2");

  Domain dom;
  dom.R = R;
  dom.mode = mode;
  dom.rprime_hint = rprime_hint > 0.0 ? rprime_hint : 7.0 * R;
  dom.sources = std::make_shared<const SourceSet>(sources);
  const auto& es = dom.sources->entries;
  const std::size_t ns = es.size();
  if (ns > 0) dom.field = std::make_shared<const DiscreteField>(*dom.sources);

  dom.sep.assign(ns, kInf);
  if (ns > 1) {
    parallel_collect(ns, 0, [&](std::size_t i) {
      double best = kInf;
      for (std::size_t j = 0; j < ns; ++j)
        if (j != i) best = std::min(best, (es[i].p - es[j].p).norm());
      dom.sep[i] = best;
    });
  }

  dom.excision.assign(ns, 0.0);
  dom.log_excision.assign(ns, -kInf);
  dom.cylinder.assign(ns, 0);
  const double half = sources.D / (2.0 * sources.n);
  const double ball = sources.D / (double(sources.n) * sources.n);

  for (std::size_t i = 0; i < ns; ++i) {
    const SourceEntry& e = es[i];
    const bool cyl = !e.charged && (e.alpha + e.beta) > 0.0;
    dom.cylinder[i] = cyl ? 1 : 0;
    double exc = 0.0, lexc = -kInf;
    switch (mode) {
      case ExcisionMode::none:
        break;
      case ExcisionMode::lattice:
        exc = ball;
        lexc = std::log(ball);
        break;
      case ExcisionMode::horizon:
        if (cyl) {
          // cylinder end: radius where the radial depth from D/2n hits 4R'
          lexc = std::log(half) -
                 (4.0 * dom.rprime_hint - half) / (e.alpha + e.beta);
          exc = std::exp(lexc);  // 0.0 on underflow; the log stays exact
        } else if (e.charged) {
          const HorizonSurface* hs = nullptr;
          if (horizons)
            for (const auto& h : *horizons)
              if (h.index == int(i)) {
                hs = &h;
                break;
              }
          if (hs != nullptr) {
            exc = hs->mean_radius;
          } else {
            RescaledNeck nk = make_neck(dom.field, i);
            exc = nk.tau * nk.fhat;
          }
          lexc = std::log(exc);
          if (!(exc > 0.0) || !(exc < half) || exc > ball)
            throw std::runtime_error(
                "make_domain: horizon excision " + fmt_double(exc) +
                " for source " + std::to_string(i) +
                " must lie in (0, D/n^2] and below D/(2n)");
        }
        break;
    }
    dom.excision[i] = exc;
    dom.log_excision[i] = lexc;
  }
  return dom;
}

// ===========================================================================
// Closed forms

double neck_depth(double alpha, double beta, double s, double t) {
  if (!(0.0 < s && s < t))
    throw std::invalid_argument("neck_depth: need 0 < s < t");
  return (t - s) + (alpha + beta) * std::log(t / s) +
         alpha * beta * (1.0 / s - 1.0 / t);
}

double neck_depth(const SourceEntry& e, double s, double t) {
  return neck_depth(e.alpha, e.beta, s, t);
}

double rn_neck_volume(double alpha, double beta, double s, double t) {
  if (!(0.0 < s && s < t))
    throw std::invalid_argument("rn_neck_volume: need 0 < s < t");
  double sig = alpha + beta, q = alpha * beta;
  return 4.0 * kPi * (rn_antideriv(sig, q, t) - rn_antideriv(sig, q, s));
}

double rn_neck_volume_log(double alpha, double beta, double log_s, double t) {
  if (alpha != 0.0 && beta != 0.0)
    throw std::invalid_argument("rn_neck_volume_log: needs alpha beta = 0");
  if (!(t > 0.0) || !(log_s < std::log(t)))
    throw std::invalid_argument("rn_neck_volume_log: need s < t");
  double sig = alpha + beta;
  double s = std::exp(log_s);  // may flush to 0; the polynomial terms vanish
  double ft = t * t * t / 3.0 + 1.5 * sig * t * t + 3.0 * sig * sig * t +
              sig * sig * sig * std::log(t);
  double fs = s * s * s / 3.0 + 1.5 * sig * s * s + 3.0 * sig * sig * s +
              sig * sig * sig * log_s;
  return 4.0 * kPi * (ft - fs);
}

double truncation_exclusion(double D, int n, double alpha_plus_beta,
                            double rprime, bool* underflow) {
  if (!(D > 0.0) || n < 1 || !(rprime > 0.0) || alpha_plus_beta < 0.0)
    throw std::invalid_argument("truncation_exclusion: bad arguments");
  if (underflow) *underflow = false;
  double t = D / (2.0 * n);
  if (alpha_plus_beta == 0.0) {
    if (underflow) *underflow = true;
    return 0.0;
  }
  double ex = -rprime / alpha_plus_beta;
  if (ex < -700.0) {
    if (underflow) *underflow = true;
    return 0.0;
  }
  return t * std::exp(ex);
}

// ===========================================================================
// Graph construction

GeodesicGraph build_graph(const Domain& dom, const GraphParams& params) {
  if (params.m < 1) throw std::invalid_argument("build_graph: m must be >= 1");
  if (params.shells_per_decade < 1)
    throw std::invalid_argument("build_graph: shells_per_decade must be >= 1");
  if (params.min_rings < 2)
    throw std::invalid_argument("build_graph: min_rings must be >= 2");
  if (!(params.weight_tol > 0.0))
    throw std::invalid_argument("build_graph: weight_tol must be positive");
  if (!dom.sources)
    throw std::invalid_argument("build_graph: domain has no source set");

  GeodesicGraph g;
  g.domain = std::make_shared<const Domain>(dom);
  g.params = params;
  const Domain& dm = *g.domain;
  const SourceSet& ss = *dm.sources;
  const double D = ss.D, R = dm.R;
  const int n = ss.n;
  const std::size_t ns = ss.entries.size();
  const std::size_t np = dm.perf_p.size();
  if (dm.perf_r.size() != np)
    throw std::invalid_argument("build_graph: perforation arrays disagree");

  const double h_in = D / (double(params.m) * n);
  const double req = params.outer_spacing > 0.0 ? params.outer_spacing : R / 64.0;
  const std::int64_t c = std::max<std::int64_t>(1, std::llround(req / h_in));
  const double h_out = double(c) * h_in;
  g.h_in = h_in;
  g.h_out = h_out;

  // ---- per-source shell plans
  struct Plan {
    bool active = false;
    std::vector<double> radii;  // descending
    double keep = 0.0;          // lattice keep-out radius
    double guard = 0.0;         // segment clearance around the center
  };
  std::vector<Plan> plans(ns);
  const double fgeo = std::pow(10.0, 1.0 / params.shells_per_decade);
  for (std::size_t i = 0; i < ns; ++i) {
    const SourceEntry& e = ss.entries[i];
    Plan& pl = plans[i];
    double exc = dm.excision[i];
    double room = 0.9 * (R - e.p.norm());
    double rho0 = std::min({D / double(n), 0.49 * dm.sep[i], room});
    bool want = params.neck_shells && (e.alpha + e.beta) > 0.0 &&
                rho0 > exc * 1.05 && rho0 > 0.0;
    if (!want) {
      pl.keep = std::max(exc, 0.3 * h_in);
      pl.guard = exc;
      continue;
    }
    double floor_raw =
        std::max(exc, rho0 * std::pow(10.0, -params.max_shell_decades));
    double rdeep = floor_raw * grid_lift(shell_grid(floor_raw, h_in, params.min_rings));
    double r = rho0;
    while (r > rdeep * 1.2) {
      pl.radii.push_back(r);
      r /= fgeo;
    }
    pl.radii.push_back(rdeep);
    if (pl.radii.size() == 1 && rdeep < rho0)
      pl.radii.insert(pl.radii.begin(), rho0);
    pl.active = true;
    pl.keep = pl.radii.front();
    pl.guard = std::max(exc, 0.5 * rdeep);
  }

  struct PerfPlan {
    double ring = 0.0;
    SGrid grid;
  };
  std::vector<PerfPlan> perfs(np);
  const int perf_rings = std::max(8, params.min_rings);
  for (std::size_t j = 0; j < np; ++j) {
    double r_p = dm.perf_r[j];
    if (!(r_p > 0.0) || dm.perf_p[j].norm() + r_p >= R)
      throw std::invalid_argument(
          "build_graph: perforation " + std::to_string(j) +
          " is not a positive-radius ball inside B(0,R)");
    perfs[j].grid = shell_grid(r_p, h_in, perf_rings);
    perfs[j].ring = r_p * grid_lift(perfs[j].grid);
  }

  // ---- memory estimate before materializing anything
  {
    double est = 4.19 * R * R * R / (h_out * h_out * h_out) + 16.0;
    if (c > 1) est += std::pow(2.0 * params.m * n + 1.0, 3.0);
    for (const Plan& pl : plans)
      for (double r : pl.radii) est += shell_count(r, h_in, params.min_rings);
    for (const PerfPlan& pp : perfs) est += 2.0 + pp.grid.ring_total;
    double bytes = est * 300.0;
    if (bytes > double(params.memory_cap))
      throw std::runtime_error(
          "build_graph: memory cap exceeded (need about " +
          std::to_string(std::int64_t(bytes)) + " bytes, cap " +
          std::to_string(std::int64_t(params.memory_cap)) + ")");
  }

  // ---- nodes
  std::vector<Vec3> pos;
  std::vector<std::uint8_t> kind;
  std::vector<std::int32_t> src;
  std::vector<float> rho;
  std::vector<float> snapv;

  CellHash node_hash;  // lattice nodes only; serves the stitch searches
  node_hash.cell = h_out;
  CellHash source_hash;
  source_hash.cell = std::max(D / double(n), 1e-12);
  for (std::size_t i = 0; i < ns; ++i)
    source_hash.insert(ss.entries[i].p, std::int32_t(i));

  double keep_max = 0.0;
  for (const Plan& pl : plans) keep_max = std::max(keep_max, pl.keep);

  auto excluded = [&](const Vec3& x) {
    bool out = false;
    if (ns > 0)
      source_hash.for_near(x, keep_max, [&](std::int32_t i) {
        if (!out &&
            (x - ss.entries[i].p).norm() < plans[i].keep * (1.0 - 1e-12))
          out = true;
      });
    if (!out)
      for (std::size_t j = 0; j < np; ++j)
        if ((x - dm.perf_p[j]).norm() < dm.perf_r[j] * (1.0 - 1e-12))
          out = true;
    return out;
  };

  auto add_node = [&](const Vec3& x, NodeKind kd, std::int32_t s, double rh,
                      double sn) {
    pos.push_back(x);
    kind.push_back(std::uint8_t(kd));
    src.push_back(s);
    rho.push_back(float(rh));
    snapv.push_back(float(sn));
    return std::int32_t(pos.size() - 1);
  };

  std::unordered_map<std::uint64_t, std::int32_t> imap, omap;
  const double r2cap = R * R * (1.0 + 1e-12);

  if (c == 1) {
    std::int64_t k = std::int64_t(std::floor(R / h_in + 1e-9));
    for (std::int64_t kx = -k; kx <= k; ++kx)
      for (std::int64_t ky = -k; ky <= k; ++ky)
        for (std::int64_t kz = -k; kz <= k; ++kz) {
          Vec3 x{double(kx) * h_in, double(ky) * h_in, double(kz) * h_in};
          if (x.norm2() > r2cap || excluded(x)) continue;
          bool in_box = std::max({std::abs(x.x), std::abs(x.y),
                                  std::abs(x.z)}) <= D + 1e-9 * h_in;
          std::int32_t id = add_node(
              x, in_box ? NodeKind::bulk : NodeKind::outer, -1, 0.0, h_in);
          imap[CellHash::key(kx, ky, kz)] = id;
          node_hash.insert(x, id);
        }
  } else {
    std::int64_t ki = std::int64_t(params.m) * n;
    for (std::int64_t kx = -ki; kx <= ki; ++kx)
      for (std::int64_t ky = -ki; ky <= ki; ++ky)
        for (std::int64_t kz = -ki; kz <= ki; ++kz) {
          Vec3 x{double(kx) * h_in, double(ky) * h_in, double(kz) * h_in};
          if (excluded(x)) continue;
          std::int32_t id = add_node(x, NodeKind::bulk, -1, 0.0, h_in);
          imap[CellHash::key(kx, ky, kz)] = id;
          node_hash.insert(x, id);
        }
    std::int64_t ko = std::int64_t(std::floor(R / h_out + 1e-9));
    for (std::int64_t kx = -ko; kx <= ko; ++kx)
      for (std::int64_t ky = -ko; ky <= ko; ++ky)
        for (std::int64_t kz = -ko; kz <= ko; ++kz) {
          Vec3 x{double(kx) * h_out, double(ky) * h_out, double(kz) * h_out};
          if (x.norm2() > r2cap) continue;
          if (std::max({std::abs(x.x), std::abs(x.y), std::abs(x.z)}) <=
              D + 1e-9 * h_in)
            continue;  // the inner lattice covers the box
          if (excluded(x)) continue;
          std::int32_t id = add_node(x, NodeKind::outer, -1, 0.0, h_out);
          omap[CellHash::key(kx, ky, kz)] = id;
          node_hash.insert(x, id);
        }
  }

  // ---- edges: raw candidate list, deduplicated, then weighted in parallel
  std::vector<std::pair<std::int32_t, std::int32_t>> raw;
  raw.reserve(pos.size() * 14);
  auto push_edge = [&](std::int32_t a, std::int32_t b) {
    if (a == b || a < 0 || b < 0) return;
    raw.emplace_back(std::min(a, b), std::max(a, b));
  };

  static const int kStencil[13][3] = {
      {1, 0, 0},  {0, 1, 0},  {0, 0, 1},  {1, 1, 0},   {1, -1, 0},
      {1, 0, 1},  {1, 0, -1}, {0, 1, 1},  {0, 1, -1},  {1, 1, 1},
      {1, 1, -1}, {1, -1, 1}, {1, -1, -1}};

  auto stencil_edges = [&](const std::unordered_map<std::uint64_t,
                                                    std::int32_t>& map,
                           double h) {
    for (const auto& kv : map) {
      std::int32_t id = kv.second;
      std::int64_t kx = std::llround(pos[id].x / h);
      std::int64_t ky = std::llround(pos[id].y / h);
      std::int64_t kz = std::llround(pos[id].z / h);
      for (const auto& st : kStencil) {
        auto it = map.find(CellHash::key(kx + st[0], ky + st[1], kz + st[2]));
        if (it != map.end()) push_edge(id, it->second);
      }
    }
  };
  stencil_edges(imap, h_in);
  if (c > 1) {
    stencil_edges(omap, h_out);
    // stitch the coarse lattice to the fine one across the box face
    for (const auto& kv : omap) {
      std::int32_t id = kv.second;
      const Vec3& x = pos[id];
      if (std::max({std::abs(x.x), std::abs(x.y), std::abs(x.z)}) >
          D + 1.05 * h_out)
        continue;
      std::vector<std::pair<double, std::int32_t>> cand;
      node_hash.for_near(x, 1.2 * h_out, [&](std::int32_t v) {
        if (kind[v] != std::uint8_t(NodeKind::bulk)) return;
        double d2 = (pos[v] - x).norm2();
        if (d2 <= 1.44 * h_out * h_out) cand.emplace_back(d2, v);
      });
      std::sort(cand.begin(), cand.end());
      for (std::size_t t = 0; t < cand.size() && t < 8; ++t)
        push_edge(id, cand[t].second);
    }
  }

  // shell systems: contiguous ring-major node blocks per shell
  struct ShellRef {
    std::int32_t pole_p = -1, pole_m = -1;
    int n_th = 0;
    std::vector<std::int32_t> start;
    std::vector<int> nph;
    double rho_s = 0.0;
  };

  auto gen_shell = [&](const Vec3& p, double rho_s, const SGrid& sg,
                       std::int32_t sid, NodeKind kd, double sn) {
    ShellRef ref;
    ref.rho_s = rho_s;
    ref.n_th = sg.n_th;
    ref.nph = sg.n_ph;
    ref.start.resize(sg.n_th);
    ref.pole_p = add_node(p + Vec3{0, 0, rho_s}, kd, sid, rho_s, sn);
    for (int k = 0; k < sg.n_th; ++k) {
      double th = kPi * (k + 0.5) / sg.n_th;
      ref.start[k] = std::int32_t(pos.size());
      for (int j = 0; j < sg.n_ph[k]; ++j) {
        double ph = 2.0 * kPi * j / sg.n_ph[k];
        Vec3 u{std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph),
               std::cos(th)};
        add_node(p + u * rho_s, kd, sid, rho_s, sn);
      }
    }
    ref.pole_m = add_node(p + Vec3{0, 0, -rho_s}, kd, sid, rho_s, sn);
    return ref;
  };

  auto shell_edges = [&](const ShellRef& r) {
    for (int j = 0; j < r.nph[0]; ++j) push_edge(r.pole_p, r.start[0] + j);
    int last = r.n_th - 1;
    for (int j = 0; j < r.nph[last]; ++j)
      push_edge(r.pole_m, r.start[last] + j);
    for (int k = 0; k < r.n_th; ++k)
      for (int j = 0; j < r.nph[k]; ++j)
        push_edge(r.start[k] + j, r.start[k] + (j + 1) % r.nph[k]);
    for (int k = 0; k + 1 < r.n_th; ++k) {
      for (int j = 0; j < r.nph[k]; ++j) {
        int j2 = int(std::llround(double(j) * r.nph[k + 1] / r.nph[k])) %
                 r.nph[k + 1];
        push_edge(r.start[k] + j, r.start[k + 1] + j2);
      }
      for (int j = 0; j < r.nph[k + 1]; ++j) {
        int j2 =
            int(std::llround(double(j) * r.nph[k] / r.nph[k + 1])) % r.nph[k];
        push_edge(r.start[k + 1] + j, r.start[k] + j2);
      }
    }
  };

  auto match_node = [&](const ShellRef& a, double th, double ph,
                        const Vec3& dir, const Vec3& p) {
    int ka = std::clamp(int(std::llround(th * a.n_th / kPi - 0.5)), 0,
                        a.n_th - 1);
    std::int32_t best = -1;
    double bd = -2.0;
    auto consider = [&](std::int32_t id) {
      double d = (pos[id] - p).normalized().dot(dir);
      if (d > bd) {
        bd = d;
        best = id;
      }
    };
    for (int k = std::max(0, ka - 1); k <= std::min(a.n_th - 1, ka + 1); ++k) {
      int nn = a.nph[k];
      int j0 = int(std::llround(ph * nn / (2.0 * kPi)));
      for (int dj = -1; dj <= 1; ++dj)
        consider(a.start[k] + ((j0 + dj) % nn + nn) % nn);
    }
    if (ka == 0) consider(a.pole_p);
    if (ka == a.n_th - 1) consider(a.pole_m);
    return best;
  };

  auto link_shells = [&](const ShellRef& a, const ShellRef& b, const Vec3& p) {
    auto one_way = [&](const ShellRef& from, const ShellRef& to) {
      for (int k = 0; k < from.n_th; ++k) {
        double th = kPi * (k + 0.5) / from.n_th;
        for (int j = 0; j < from.nph[k]; ++j) {
          double ph = 2.0 * kPi * j / from.nph[k];
          Vec3 dir = (pos[from.start[k] + j] - p).normalized();
          push_edge(from.start[k] + j, match_node(to, th, ph, dir, p));
        }
      }
      push_edge(from.pole_p, to.pole_p);
      push_edge(from.pole_m, to.pole_m);
    };
    one_way(b, a);
    one_way(a, b);
  };

  g.deepest.assign(ns, -1);
  g.shell_outer.assign(ns, -1);
  std::vector<ShellRef> outer_refs;

  for (std::size_t i = 0; i < ns; ++i) {
    if (!plans[i].active) continue;
    const Vec3& p = ss.entries[i].p;
    ShellRef prev;
    bool have = false;
    for (std::size_t s = 0; s < plans[i].radii.size(); ++s) {
      double r = plans[i].radii[s];
      SGrid sg = shell_grid(r, h_in, params.min_rings);
      double sn = std::max(r * kPi / sg.n_th, r * (1.0 - 1.0 / fgeo));
      ShellRef ref = gen_shell(p, r, sg, std::int32_t(i), NodeKind::shell, sn);
      shell_edges(ref);
      if (s == 0) {
        g.shell_outer[i] = ref.pole_p;
        outer_refs.push_back(ref);
      }
      if (have) link_shells(prev, ref, p);
      prev = std::move(ref);
      have = true;
    }
    g.deepest[i] = prev.pole_p;
  }

  for (std::size_t j = 0; j < np; ++j) {
    double r = perfs[j].ring;
    double sn = std::max(r * kPi / perfs[j].grid.n_th,
                         2.0 * (r - dm.perf_r[j]) + 0.3 * h_in);
    ShellRef ref = gen_shell(dm.perf_p[j], r, perfs[j].grid,
                             std::int32_t(ns + j), NodeKind::ring, sn);
    shell_edges(ref);
    outer_refs.push_back(ref);
  }

  // stitch each outermost shell (and perforation ring) to the lattice
  for (const ShellRef& ref : outer_refs) {
    std::vector<std::int32_t> ids;
    ids.push_back(ref.pole_p);
    ids.push_back(ref.pole_m);
    for (int k = 0; k < ref.n_th; ++k)
      for (int j = 0; j < ref.nph[k]; ++j) ids.push_back(ref.start[k] + j);
    for (std::int32_t v : ids) {
      const Vec3& x = pos[v];
      double h_loc = std::max({std::abs(x.x), std::abs(x.y), std::abs(x.z)}) <=
                             D + 1e-9
                         ? h_in
                         : h_out;
      double r_st = 2.2 * std::max(h_loc, ref.rho_s * kPi / ref.n_th);
      for (int attempt = 0; attempt < 2; ++attempt) {
        std::vector<std::pair<double, std::int32_t>> cand;
        node_hash.for_near(x, r_st, [&](std::int32_t u) {
          double d2 = (pos[u] - x).norm2();
          if (d2 <= r_st * r_st && d2 > 1e-18) cand.emplace_back(d2, u);
        });
        if (cand.empty()) {
          r_st *= 2.0;
          continue;
        }
        std::sort(cand.begin(), cand.end());
        for (std::size_t t = 0; t < cand.size() && t < 8; ++t)
          push_edge(v, cand[t].second);
        break;
      }
    }
  }

  std::sort(raw.begin(), raw.end());
  raw.erase(std::unique(raw.begin(), raw.end()), raw.end());

  // ---- weights; an edge whose segment enters an excised (or guarded) ball
  // is dropped, so no path shortcuts through a well or a perforation
  std::vector<double> ob(ns, 0.0);
  double ob_max = 0.0;
  for (std::size_t i = 0; i < ns; ++i) {
    ob[i] = std::max(dm.excision[i] * (1.0 + 1e-8), plans[i].guard);
    ob_max = std::max(ob_max, ob[i]);
  }

  RadialFactor rf;
  if (params.weight == WeightMode::continuum) {
    if (!ss.has_provenance)
      throw std::invalid_argument(
          "build_graph: continuum weights need cloud provenance");
    rf = make_radial_factor(ss.cloud, R * (1.0 + 1e-6), params.threads);
  }
  const bool unit_factor =
      params.weight == WeightMode::discrete && ns == 0;

  const std::size_t ne = raw.size();
  std::vector<double> w(ne, -1.0);
  parallel_collect(ne, params.threads, [&](std::size_t ei) {
    const Vec3 pa = pos[raw[ei].first], pb = pos[raw[ei].second];
    double len = (pb - pa).norm();
    if (len < 1e-15) return;  // coincident stitch endpoints
    Vec3 mid = (pa + pb) * 0.5;
    bool blocked = false;
    if (ns > 0 && ob_max > 0.0)
      source_hash.for_near(mid, 0.5 * len + ob_max, [&](std::int32_t i) {
        if (blocked || ob[i] <= 0.0) return;
        if (seg_point_dist(pa, pb, ss.entries[i].p) < ob[i]) blocked = true;
      });
    if (!blocked)
      for (std::size_t j = 0; j < np; ++j)
        if (seg_point_dist(pa, pb, dm.perf_p[j]) <
            dm.perf_r[j] * (1.0 + 1e-8)) {
          blocked = true;
          break;
        }
    if (blocked) return;
    if (unit_factor) {
      w[ei] = len;
      return;
    }
    double val;
    if (params.weight == WeightMode::continuum) {
      val = adaptive_simpson(
          [&](double u) { return rf((pa + (pb - pa) * u).norm()); }, 0.0, 1.0,
          params.weight_tol);
    } else {
      val = adaptive_simpson(
          [&](double u) {
            return dm.field->eval(pa + (pb - pa) * u, -1, params.accel,
                                  params.theta)
                .u();
          },
          0.0, 1.0, params.weight_tol);
    }
    w[ei] = std::isfinite(val) && val > 0.0 ? len * val : -1.0;
  });

  // ---- assemble
  g.pos = std::move(pos);
  g.kind = std::move(kind);
  g.shell_src = std::move(src);
  g.shell_rho = std::move(rho);
  g.snap = std::move(snapv);
  const std::int64_t nn = g.node_count();

  std::vector<std::int64_t> deg(nn + 1, 0);
  g.min_ratio = kInf;
  g.max_ratio = 0.0;
  for (std::size_t ei = 0; ei < ne; ++ei) {
    if (w[ei] < 0.0) continue;
    g.edges.push_back(raw[ei]);
    g.edge_w.push_back(w[ei]);
    ++deg[raw[ei].first + 1];
    ++deg[raw[ei].second + 1];
    double len = (g.pos[raw[ei].second] - g.pos[raw[ei].first]).norm();
    double ratio = w[ei] / len;
    g.min_ratio = std::min(g.min_ratio, ratio);
    g.max_ratio = std::max(g.max_ratio, ratio);
  }
  if (g.edges.empty() && nn > 1)
    throw std::runtime_error("build_graph: no edges survived");
  if (g.min_ratio > g.max_ratio) g.min_ratio = g.max_ratio = 0.0;

  g.off.assign(nn + 1, 0);
  for (std::int64_t i = 0; i < nn; ++i) g.off[i + 1] = g.off[i] + deg[i + 1];
  g.adj.assign(std::size_t(g.off[nn]), 0);
  g.wgt.assign(std::size_t(g.off[nn]), 0.0);
  std::vector<std::int64_t> cur(g.off.begin(), g.off.end() - 1);
  for (std::size_t ei = 0; ei < g.edges.size(); ++ei) {
    auto [a, b] = g.edges[ei];
    double we = g.edge_w[ei];
    g.adj[std::size_t(cur[a])] = b;
    g.wgt[std::size_t(cur[a]++)] = we;
    g.adj[std::size_t(cur[b])] = a;
    g.wgt[std::size_t(cur[b]++)] = we;
  }

  // ---- connectivity
  if (nn > 0) {
    std::vector<char> vis(std::size_t(nn), 0);
    std::vector<std::int32_t> stack{0};
    vis[0] = 1;
    std::int64_t seen = 1;
    while (!stack.empty()) {
      std::int32_t u = stack.back();
      stack.pop_back();
      for (std::int64_t k = g.off[u]; k < g.off[u + 1]; ++k) {
        std::int32_t v = g.adj[std::size_t(k)];
        if (!vis[v]) {
          vis[v] = 1;
          ++seen;
          stack.push_back(v);
        }
      }
    }
    if (seen != nn)
      throw std::runtime_error("build_graph: graph is disconnected (" +
                               std::to_string(seen) + " of " +
                               std::to_string(nn) + " nodes reachable)");
  }
  return g;
}

// ===========================================================================
// Queries

int nearest_node(const GeodesicGraph& g, const Vec3& x) {
  int best = -1;
  double bd = kInf;
  for (std::int64_t i = 0; i < g.node_count(); ++i) {
    double d2 = (g.pos[std::size_t(i)] - x).norm2();
    if (d2 < bd) {
      bd = d2;
      best = int(i);
    }
  }
  return best;
}

std::vector<double> dijkstra_from(const GeodesicGraph& g, int source,
                                  double cutoff, int stop_at) {
  const std::int64_t nn = g.node_count();
  if (source < 0 || source >= nn)
    throw std::invalid_argument("dijkstra_from: source out of range");
  std::vector<double> dist(std::size_t(nn), kInf);
  using Item = std::pair<double, std::int32_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
  dist[std::size_t(source)] = 0.0;
  pq.emplace(0.0, source);
  while (!pq.empty()) {
    auto [d, u] = pq.top();
    pq.pop();
    if (d > dist[std::size_t(u)]) continue;
    if (u == stop_at) break;
    for (std::int64_t k = g.off[u]; k < g.off[u + 1]; ++k) {
      std::int32_t v = g.adj[std::size_t(k)];
      double nd = d + g.wgt[std::size_t(k)];
      if (nd < dist[std::size_t(v)] && nd <= cutoff) {
        dist[std::size_t(v)] = nd;
        pq.emplace(nd, v);
      }
    }
  }
  return dist;
}

double node_distance(const GeodesicGraph& g, int a, int b) {
  const std::int64_t nn = g.node_count();
  if (a < 0 || b < 0 || a >= nn || b >= nn)
    throw std::invalid_argument("node_distance: node out of range");
  if (a == b) return 0.0;
  auto dist = dijkstra_from(g, a, kInf, b);
  double d = dist[std::size_t(b)];
  if (!(d < kInf))
    throw std::runtime_error("node_distance: nodes are not connected");
  return d;
}

double distance(const GeodesicGraph& g, const Vec3& x, const Vec3& y) {
  return node_distance(g, snapped_node(g, x), snapped_node(g, y));
}

// ===========================================================================
// Diameter

DiameterReport diameter(const GeodesicGraph& g, int random_pairs,
                        std::uint64_t seed) {
  DiameterReport rep;
  const std::int64_t nn = g.node_count();
  if (nn == 0) return rep;

  int axp[3] = {0, 0, 0}, axm[3] = {0, 0, 0};
  double rmax = 0.0;
  for (std::int64_t i = 0; i < nn; ++i) {
    const Vec3& x = g.pos[std::size_t(i)];
    for (int c = 0; c < 3; ++c) {
      if (x[std::size_t(c)] > g.pos[std::size_t(axp[c])][std::size_t(c)])
        axp[c] = int(i);
      if (x[std::size_t(c)] < g.pos[std::size_t(axm[c])][std::size_t(c)])
        axm[c] = int(i);
    }
    rmax = std::max(rmax, x.norm());
  }
  int origin = nearest_node(g, Vec3{0, 0, 0});

  std::vector<std::pair<int, int>> want;
  for (int c = 0; c < 3; ++c) want.emplace_back(axp[c], axm[c]);

  std::vector<int> bnd;
  for (std::int64_t i = 0; i < nn; ++i)
    if (g.pos[std::size_t(i)].norm() >= 0.985 * rmax) bnd.push_back(int(i));
  SplitRng rng(seed, 0);
  for (std::size_t t = 0; t + 1 < bnd.size() && t < 8; ++t) {
    std::size_t j = std::size_t(t) +
                    std::size_t(rng.uniform_int(0, int(bnd.size() - 1 - t)));
    std::swap(bnd[t], bnd[j]);
  }
  for (std::size_t t = 0; t + 1 < std::min<std::size_t>(bnd.size(), 8);
       t += 2)
    want.emplace_back(bnd[t], bnd[t + 1]);

  const auto& es = g.domain->sources->entries;
  std::vector<std::pair<double, int>> deep;
  for (std::size_t i = 0; i < es.size(); ++i) {
    if (g.deepest[i] < 0) continue;
    double rin = double(g.shell_rho[std::size_t(g.deepest[i])]);
    double rout = double(g.shell_rho[std::size_t(g.shell_outer[i])]);
    double score =
        rin < rout ? neck_depth(es[i].alpha, es[i].beta, rin, rout) : 0.0;
    deep.emplace_back(score, g.deepest[i]);
  }
  std::sort(deep.begin(), deep.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  if (deep.size() > 8) deep.resize(8);
  for (const auto& d : deep) {
    want.emplace_back(d.second, origin);
    want.emplace_back(d.second, axp[0]);
  }
  for (std::size_t i = 0; i < deep.size(); ++i)
    for (std::size_t j = i + 1; j < deep.size(); ++j)
      want.emplace_back(deep[i].second, deep[j].second);

  SplitRng rng2(seed, 1);
  for (int t = 0; t < random_pairs; ++t) {
    int a = rng2.uniform_int(0, int(nn - 1));
    int b = rng2.uniform_int(0, int(nn - 1));
    if (a != b) want.emplace_back(a, b);
  }

  for (auto& pr : want)
    if (pr.first > pr.second) std::swap(pr.first, pr.second);
  std::sort(want.begin(), want.end());
  want.erase(std::unique(want.begin(), want.end()), want.end());

  std::unordered_map<int, std::vector<std::size_t>> by_src;
  for (std::size_t idx = 0; idx < want.size(); ++idx)
    by_src[want[idx].first].push_back(idx);
  std::vector<int> srcs;
  srcs.reserve(by_src.size());
  for (const auto& kv : by_src) srcs.push_back(kv.first);

  rep.pairs.resize(want.size());
  parallel_collect(srcs.size(), 0, [&](std::size_t k) {
    auto dist = dijkstra_from(g, srcs[k]);
    for (std::size_t idx : by_src[srcs[k]]) {
      rep.pairs[idx] = {want[idx].first, want[idx].second,
                        dist[std::size_t(want[idx].second)]};
    }
  });
  for (const auto& p : rep.pairs)
    if (p.dist < kInf) rep.lower = std::max(rep.lower, p.dist);
  return rep;
}

// ===========================================================================
// Truncation

TruncatedDomain truncate(const GeodesicGraph& g, double rprime) {
  if (!(rprime > 0.0))
    throw std::invalid_argument("truncate: rprime must be positive");
  TruncatedDomain td;
  td.rprime = rprime;
  const std::int64_t nn = g.node_count();
  if (nn == 0) return td;
  const Domain& dm = *g.domain;
  const SourceSet& ss = *dm.sources;
  const std::size_t ns = ss.entries.size();

  int o = nearest_node(g, Vec3{0, 0, 0});
  auto dist = dijkstra_from(g, o);
  std::vector<char> kept(std::size_t(nn), 0);
  for (std::int64_t v = 0; v < nn; ++v)
    if (dist[std::size_t(v)] < rprime) {
      td.retained.push_back(std::int32_t(v));
      kept[std::size_t(v)] = 1;
    }

  td.s_excl.assign(ns, 0.0);
  td.s_underflow.assign(ns, 0);
  double smax = 0.0;
  for (std::size_t i = 0; i < ns; ++i) {
    bool uf = false;
    td.s_excl[i] = truncation_exclusion(
        ss.D, ss.n, ss.entries[i].alpha + ss.entries[i].beta, rprime, &uf);
    td.s_underflow[i] = uf ? 1 : 0;
    smax = std::max(smax, td.s_excl[i]);
  }

  CellHash sh;
  sh.cell = std::max(ss.D / (2.0 * ss.n), 1e-12);
  for (std::size_t i = 0; i < ns; ++i)
    sh.insert(ss.entries[i].p, std::int32_t(i));

  if (smax > 0.0)
    for (std::int32_t v : td.retained) {
      bool bad = false;
      sh.for_near(g.pos[std::size_t(v)], smax, [&](std::int32_t i) {
        if (!bad && (g.pos[std::size_t(v)] - ss.entries[i].p).norm() <
                        td.s_excl[std::size_t(i)] * (1.0 - 1e-12))
          bad = true;
      });
      if (bad) {
        td.excl_ok = false;
        break;
      }
    }

  const double ball = ss.D / (double(ss.n) * ss.n);
  for (std::int64_t v = 0; v < nn && td.bulk_ok; ++v) {
    if (kept[std::size_t(v)]) continue;
    bool in_ball = false;
    sh.for_near(g.pos[std::size_t(v)], ball * 1.001, [&](std::int32_t i) {
      if (!in_ball && (g.pos[std::size_t(v)] - ss.entries[i].p).norm() <
                          ball * (1.0 + 1e-9))
        in_ball = true;
    });
    if (!in_ball) td.bulk_ok = false;
  }
  return td;
}

// ===========================================================================
// Capacity

int capacity(const GeodesicGraph& g, double r) {
  std::vector<std::int32_t> all(std::size_t(g.node_count()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = std::int32_t(i);
  return capacity(g, all, r);
}

int capacity(const GeodesicGraph& g, const std::vector<std::int32_t>& subset,
             double r) {
  if (!(r > 0.0)) throw std::invalid_argument("capacity: r must be positive");
  const std::int64_t nn = g.node_count();
  std::vector<char> marked(std::size_t(nn), 0);
  int cnt = 0;
  for (std::int32_t v : subset) {
    if (v < 0 || v >= nn)
      throw std::invalid_argument("capacity: node id out of range");
    if (marked[std::size_t(v)]) continue;
    ++cnt;
    // exclude everything within 2r so the r-balls stay pairwise disjoint
    auto dist = dijkstra_from(g, v, 2.0 * r);
    for (std::int64_t u = 0; u < nn; ++u)
      if (dist[std::size_t(u)] <= 2.0 * r) marked[std::size_t(u)] = 1;
  }
  return cnt;
}

// ===========================================================================
// Volumes and areas

RegionMeasure region_volume(const Domain& dom, RegionSelect sel,
                            WeightMode mode, const RegionParams& rp) {
  if (!dom.sources)
    throw std::invalid_argument("region_volume: domain has no source set");
  if (rp.bulk_grid < 2 || rp.sphere_degree < 2 || !(rp.radial_tol > 0.0))
    throw std::invalid_argument("region_volume: bad parameters");
  const SourceSet& ss = *dom.sources;
  const std::size_t ns = ss.entries.size();
  const double D = ss.D, R = dom.R;
  const int n = ss.n;
  const double t = D / (double(n) * n);
  RegionMeasure out;

  if (mode == WeightMode::continuum && !ss.has_provenance)
    throw std::invalid_argument(
        "region_volume: continuum factor needs cloud provenance");
  RadialFactor rf;
  if (mode == WeightMode::continuum)
    rf = make_radial_factor(ss.cloud, R * (1.0 + 1e-6), rp.threads);
  const Accel acc = ns > 512 ? Accel::tree : Accel::direct;
  auto fac = [&](const Vec3& x) {
    if (mode == WeightMode::continuum) return rf(x.norm());
    if (ns == 0) return 1.0;
    return dom.field->eval(x, -1, acc, 0.3).u();
  };

  const bool want_necks = sel == RegionSelect::necks || sel == RegionSelect::all;
  const bool want_bulk = sel == RegionSelect::bulk || sel == RegionSelect::all;
  const bool want_area =
      sel == RegionSelect::excision_areas || sel == RegionSelect::all;

  if (want_necks) {
    out.neck_volume.assign(ns, 0.0);
    if (ns > 0 && dom.mode == ExcisionMode::none &&
        mode == WeightMode::discrete)
      throw std::invalid_argument(
          "region_volume: neck volumes need excised balls under the "
          "point-source factor");
    SphereGrid sg(rp.sphere_degree);
    parallel_collect(ns, rp.threads, [&](std::size_t i) {
      const SourceEntry& en = ss.entries[i];
      double e = dom.excision[i], le = dom.log_excision[i];
      if (e >= t * (1.0 - 1e-12)) return;  // empty annulus (lattice mode)
      if (mode == WeightMode::continuum) {
        // smooth factor: plain spherical-shell quadrature down to e (0 ok)
        auto f = [&](double r) {
          double a = 0.0;
          for (std::size_t j = 0; j < sg.nodes(); ++j) {
            double v = rf((en.p + sg.unit(j) * r).norm());
            a += sg.weight(j) * v * v * v;
          }
          return r * r * a;
        };
        out.neck_volume[i] = adaptive_simpson(f, e, t, rp.radial_tol);
        return;
      }
      double base = dom.cylinder[i]
                        ? rn_neck_volume_log(en.alpha, en.beta, le, t)
                        : rn_neck_volume(en.alpha, en.beta, e, t);
      double corr = 0.0;
      if (ns >= 2) {
        double s_q = std::max(e, t * 1e-8);
        // the isolated-term split below is exact; near-extremal wells need
        // the per-source exclusion to avoid cancellation in chi - 1 - a/r
        bool sharp = (en.alpha + en.beta) > 1e3 * s_q;
        auto diff3 = [&](double r) {
          double a = 0.0;
          for (std::size_t j = 0; j < sg.nodes(); ++j) {
            Vec3 x = en.p + sg.unit(j) * r;
            double u, v;
            if (sharp) {
              FieldSample o = dom.field->eval(x, int(i));
              u = o.chi - 1.0;
              v = o.psi - 1.0;
            } else {
              FieldSample s = dom.field->eval(x, -1, acc, 0.3);
              u = std::max(0.0, s.chi - 1.0 - en.alpha / r);
              v = std::max(0.0, s.psi - 1.0 - en.beta / r);
            }
            double ia = 1.0 + en.alpha / r, ib = 1.0 + en.beta / r;
            double d1 = u * ib + v * ia + u * v;  // chi psi - (1+a/r)(1+b/r)
            double gg = ia * ib, ff = gg + d1;
            a += sg.weight(j) * d1 * (ff * ff + ff * gg + gg * gg);
          }
          return r * r * a;
        };
        corr = adaptive_simpson(diff3, s_q, t, rp.radial_tol);
        // below s_q the integrand decays like C/r; close that tail against
        // the exact (possibly underflowed) inner radius
        if (le < std::log(s_q) - 1e-12)
          corr += diff3(s_q) * s_q * (std::log(s_q) - le);
      }
      out.neck_volume[i] = base + corr;
    });
    for (double v : out.neck_volume) out.necks += v;
  }

  if (want_bulk) {
    const int nb = rp.bulk_grid;
    const double h = 2.0 * R / nb;
    const double hd = 0.5 * std::sqrt(3.0) * h;
    CellHash sh;
    sh.cell = std::max({t + hd, h, 1e-12});
    for (std::size_t i = 0; i < ns; ++i)
      sh.insert(ss.entries[i].p, std::int32_t(i));
    const std::size_t npf = dom.perf_p.size();

    std::vector<double> volx(std::size_t(nb), 0.0), vole(std::size_t(nb), 0.0);
    parallel_collect(std::size_t(nb), rp.threads, [&](std::size_t ix) {
      double vx = 0.0, ve = 0.0;
      for (int iy = 0; iy < nb; ++iy)
        for (int iz = 0; iz < nb; ++iz) {
          Vec3 x{-R + (double(ix) + 0.5) * h, -R + (iy + 0.5) * h,
                 -R + (iz + 0.5) * h};
          double rr = x.norm();
          if (rr - hd > R) continue;
          bool strad = rr + hd > R;
          bool skip = false;
          sh.for_near(x, t + hd, [&](std::int32_t i) {
            double d = (x - ss.entries[i].p).norm();
            if (d + hd < t)
              skip = true;
            else if (d - hd < t)
              strad = true;
          });
          for (std::size_t j = 0; j < npf && !skip; ++j) {
            double d = (x - dom.perf_p[j]).norm();
            if (d + hd < dom.perf_r[j])
              skip = true;
            else if (d - hd < dom.perf_r[j])
              strad = true;
          }
          if (skip) continue;
          if (!strad) {
            double f = fac(x);
            vx += h * h * h * f * f * f;
            ve += h * h * h;
            continue;
          }
          const double sub = h / 4.0, w8 = sub * sub * sub;
          for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b)
              for (int cq = 0; cq < 4; ++cq) {
                Vec3 y = x + Vec3{(a - 1.5) * sub, (b - 1.5) * sub,
                                  (cq - 1.5) * sub};
                if (y.norm() > R) continue;
                bool in = false;
                sh.for_near(y, t, [&](std::int32_t i) {
                  if (!in && (y - ss.entries[i].p).norm() < t) in = true;
                });
                for (std::size_t j = 0; j < npf && !in; ++j)
                  if ((y - dom.perf_p[j]).norm() < dom.perf_r[j]) in = true;
                if (in) continue;
                double f = fac(y);
                vx += w8 * f * f * f;
                ve += w8;
              }
        }
      volx[ix] = vx;
      vole[ix] = ve;
    });
    for (int ix = 0; ix < nb; ++ix) {
      out.bulk += volx[std::size_t(ix)];
      out.euclid_bulk += vole[std::size_t(ix)];
    }
  }

  if (want_area) {
    out.excision_area.assign(ns, 0.0);
    SphereGrid sa(10);
    parallel_collect(ns, rp.threads, [&](std::size_t i) {
      if (dom.mode == ExcisionMode::none) return;
      const SourceEntry& en = ss.entries[i];
      double e = dom.excision[i];
      if (e == 0.0) {
        // underflowed cylinder end: r chi psi -> (alpha+beta) * regular hat
        if (mode == WeightMode::continuum) return;
        NearSourceDecomposition nd = near_source(*dom.field, int(i));
        double hat = en.alpha > 0.0 ? nd.psi_hat : nd.chi_hat;
        double s = (en.alpha + en.beta) * hat;
        out.excision_area[i] = 4.0 * kPi * s * s;
        return;
      }
      bool tiny =
          mode == WeightMode::discrete && e < 1e-3 * (en.alpha + en.beta);
      double a = 0.0;
      for (std::size_t j = 0; j < sa.nodes(); ++j) {
        Vec3 x = en.p + sa.unit(j) * e;
        double val;
        if (mode == WeightMode::continuum) {
          val = rf(x.norm()) * e;
        } else if (!tiny) {
          val = dom.field->eval(x, -1, acc, 0.3).u() * e;
        } else {
          // overflow-safe form of e * chi psi for e << alpha + beta
          FieldSample o = dom.field->eval(x, int(i));
          double u = o.chi - 1.0, v = o.psi - 1.0;
          double s1 = e + en.alpha + u * e, s2 = e + en.beta + v * e;
          val = en.alpha == 0.0
                    ? (1.0 + u) * s2
                    : (en.beta == 0.0 ? s1 * (1.0 + v) : s1 * (s2 / e));
        }
        a += sa.weight(j) * val * val;
      }
      out.excision_area[i] = a;
    });
    for (double v : out.excision_area) out.area += v;
  }
  return out;
}

// ===========================================================================
// Export

std::string graph_json(const GeodesicGraph& g, const std::string& nodes_sha,
                       const std::string& edges_sha) {
  const GraphParams& p = g.params;
  std::string s = "{\n";
  s += "  \"nodes\": " + std::to_string(g.node_count()) + ",\n";
  s += "  \"edges\": " + std::to_string(g.edge_count()) + ",\n";
  s += "  \"h_in\": " + fmt_double(g.h_in) + ",\n";
  s += "  \"h_out\": " + fmt_double(g.h_out) + ",\n";
  s += "  \"min_ratio\": " + fmt_double(g.min_ratio) + ",\n";
  s += "  \"max_ratio\": " + fmt_double(g.max_ratio) + ",\n";
  s += "  \"params\": {\n";
  s += "    \"m\": " + std::to_string(p.m) + ",\n";
  s += "    \"shells_per_decade\": " + std::to_string(p.shells_per_decade) +
       ",\n";
  s += "    \"outer_spacing\": " + fmt_double(p.outer_spacing) + ",\n";
  s += std::string("    \"neck_shells\": ") +
       (p.neck_shells ? "true" : "false") + ",\n";
  s += "    \"max_shell_decades\": " + fmt_double(p.max_shell_decades) + ",\n";
  s += "    \"min_rings\": " + std::to_string(p.min_rings) + ",\n";
  s += std::string("    \"weight\": \"") +
       (p.weight == WeightMode::discrete ? "discrete" : "continuum") +
       "\",\n";
  s += "    \"weight_tol\": " + fmt_double(p.weight_tol) + "\n";
  s += "  },\n";
  const Domain& dm = *g.domain;
  s += "  \"domain\": {\n";
  s += "    \"R\": " + fmt_double(dm.R) + ",\n";
  s += std::string("    \"mode\": \"") +
       (dm.mode == ExcisionMode::horizon
            ? "horizon"
            : (dm.mode == ExcisionMode::lattice ? "lattice" : "none")) +
       "\",\n";
  s += "    \"sources\": " +
       std::to_string(dm.sources ? dm.sources->entries.size() : 0) + ",\n";
  s += "    \"perforations\": " + std::to_string(dm.perf_p.size()) + "\n";
  s += "  },\n";
  s += "  \"nodes_sha256\": \"" + nodes_sha + "\",\n";
  s += "  \"edges_sha256\": \"" + edges_sha + "\"\n";
  s += "}\n";
  return s;
}

void save_graph(const GeodesicGraph& g, const std::string& stem) {
  std::string nb;
  nb.reserve(std::size_t(g.node_count()) * 33);
  for (std::int64_t i = 0; i < g.node_count(); ++i) {
    double xyz[3] = {g.pos[std::size_t(i)].x, g.pos[std::size_t(i)].y,
                     g.pos[std::size_t(i)].z};
    nb.append(reinterpret_cast<const char*>(xyz), sizeof xyz);
    nb.push_back(char(g.kind[std::size_t(i)]));
    std::int32_t sid = g.shell_src[std::size_t(i)];
    nb.append(reinterpret_cast<const char*>(&sid), sizeof sid);
    float rh = g.shell_rho[std::size_t(i)];
    nb.append(reinterpret_cast<const char*>(&rh), sizeof rh);
  }
  std::string eb;
  eb.reserve(g.edges.size() * 16);
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    std::int32_t ab[2] = {g.edges[e].first, g.edges[e].second};
    eb.append(reinterpret_cast<const char*>(ab), sizeof ab);
    double w = g.edge_w[e];
    eb.append(reinterpret_cast<const char*>(&w), sizeof w);
  }
  std::string nsha = sha256_hex(nb), esha = sha256_hex(eb);
  auto write_file = [](const std::string& path, const std::string& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_graph: cannot open " + path);
    f.write(data.data(), std::streamsize(data.size()));
    if (!f) throw std::runtime_error("save_graph: write failed for " + path);
  };
  write_file(stem + ".nodes.bin", nb);
  write_file(stem + ".edges.bin", eb);
  write_file(stem + ".json", graph_json(g, nsha, esha));
}

std::string distance_csv(const GeodesicGraph& g,
                         const std::vector<std::pair<Vec3, Vec3>>& pairs) {
  std::string s = "xi,yi,dist\n";
  for (const auto& pr : pairs) {
    int a = snapped_node(g, pr.first), b = snapped_node(g, pr.second);
    s += std::to_string(a) + "," + std::to_string(b) + "," +
         fmt_double(node_distance(g, a, b)) + "\n";
  }
  return s;
}

}  // namespace blris
