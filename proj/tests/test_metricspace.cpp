#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "blris/cloud.hpp"
#include "blris/fields.hpp"
#include "blris/horizon.hpp"
#include "blris/metricspace.hpp"
#include "blris/profiles.hpp"
#include "blris/util.hpp"
#include "blris/vec3.hpp"
#include "doctest.h"

using namespace blris;

namespace {

SourceSet manual_set(double D, int n, std::vector<SourceEntry> entries) {
  SourceSet s;
  s.D = D;
  s.n = n;
  s.materialized = true;
  s.has_provenance = false;
  s.entries = std::move(entries);
  return s;
}

SourceEntry src(Vec3 p, double alpha, double beta) {
  SourceEntry e;
  e.p = p;
  e.alpha = alpha;
  e.beta = beta;
  e.charged = alpha > 0 && beta > 0;
  return e;
}

// flat space: a materialized set with no sources
SourceSet flat_set(double D, int n) { return manual_set(D, n, {}); }

double file_size(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) return -1.0;
  return double(f.tellg());
}

std::string file_text(const std::string& path) {
  std::ifstream f(path);
  std::string s((std::istreambuf_iterator<char>(f)),
                std::istreambuf_iterator<char>());
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// closed forms

TEST_CASE("neck depth closed form") {
  CHECK(neck_depth(0.01, 0.01, 0.02, 1.0) ==
        doctest::Approx(1.0631404601085629).epsilon(1e-14));
  // pure cylinder: no 1/s term
  CHECK(neck_depth(0.5, 0.0, 1e-8, 1.0) ==
        doctest::Approx((1.0 - 1e-8) + 0.5 * std::log(1e8)).epsilon(1e-13));
  SourceEntry e = src({0, 0, 0}, 0.01, 0.01);
  CHECK(neck_depth(e, 0.02, 1.0) == doctest::Approx(1.0631404601085629));
  CHECK_THROWS_AS(neck_depth(0.1, 0.1, 0.5, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(neck_depth(0.1, 0.1, 0.0, 1.0), std::invalid_argument);
}

TEST_CASE("annulus volume matches quadrature") {
  SplitRng rng(11, 0);
  for (int k = 0; k < 20; ++k) {
    double a = rng.uniform(0.0, 2.0);
    double b = k % 5 == 0 ? 0.0 : rng.uniform(0.0, 2.0);
    double s = rng.uniform(1e-3, 0.3);
    double t = rng.uniform(2.0 * s, 3.0);
    double vol = rn_neck_volume(a, b, s, t);
    double oracle = adaptive_simpson(
        [&](double r) {
          double f = (1.0 + a / r) * (1.0 + b / r);
          return 4.0 * kPi * r * r * f * f * f;
        },
        s, t, 1e-13);
    CHECK(vol == doctest::Approx(oracle).epsilon(1e-10));
  }
  CHECK_THROWS_AS(rn_neck_volume(0.1, 0.1, 0.5, 0.2), std::invalid_argument);
}

TEST_CASE("log-form annulus volume handles cylinder ends") {
  // representable inner radius: both forms agree
  CHECK(rn_neck_volume_log(0.7, 0.0, std::log(0.01), 2.0) ==
        doctest::Approx(rn_neck_volume(0.7, 0.0, 0.01, 2.0)).epsilon(1e-12));
  // inner radius far below double range: finite, dominated by the log term
  double sig = 0.5;
  double ft = 8.0 / 3.0 + 1.5 * sig * 4.0 + 3.0 * sig * sig * 2.0 +
              sig * sig * sig * std::log(2.0);
  double v = rn_neck_volume_log(0.5, 0.0, -222.0, 2.0);
  CHECK(v == doctest::Approx(4.0 * kPi * (ft + 0.125 * 222.0)).epsilon(1e-13));
  // the double view of that radius still round-trips through the plain form
  CHECK(rn_neck_volume(0.5, 0.0, std::exp(-222.0), 2.0) ==
        doctest::Approx(v).epsilon(1e-10));
  CHECK(std::isfinite(rn_neck_volume_log(0.01, 0.0, -11100.0, 2.0)));
  CHECK(rn_neck_volume_log(0.01, 0.0, -11100.0, 2.0) > 0.0);
  CHECK_THROWS_AS(rn_neck_volume_log(0.1, 0.2, -5.0, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(rn_neck_volume_log(0.1, 0.0, 1.0, 1.0),
                  std::invalid_argument);
}

TEST_CASE("truncation exclusion radius") {
  CHECK(truncation_exclusion(1.0, 10, 0.5, 1.0) ==
        doctest::Approx(0.05 * std::exp(-2.0)).epsilon(1e-15));
  bool uf = false;
  CHECK(truncation_exclusion(1.0, 10, 1e-3, 1.0, &uf) == 0.0);
  CHECK(uf);
  CHECK(truncation_exclusion(1.0, 10, 0.0, 1.0, &uf) == 0.0);
  CHECK(uf);
  truncation_exclusion(1.0, 10, 0.5, 1.0, &uf);
  CHECK_FALSE(uf);
  CHECK_THROWS_AS(truncation_exclusion(0.0, 10, 0.5, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(truncation_exclusion(1.0, 10, 0.5, 0.0),
                  std::invalid_argument);
}

TEST_CASE("neck depth dominates the well scale") {
  // radial depth of [2 sqrt(ab), D/2n^2] controls (D/12)(1/n^2 + ell_i) once
  // the well is deep enough relative to the lattice
  SplitRng rng(23, 0);
  int checked = 0;
  for (int k = 0; k < 400 && checked < 50; ++k) {
    double D = rng.uniform(0.5, 4.0);
    int n = 2 + rng.uniform_int(0, 4);
    double n2 = double(n) * n;
    double qmax = D * D / std::pow(4.0 * n2, 2.4);
    double q = qmax * std::pow(10.0, rng.uniform(-3.0, 0.0)) * 0.9;
    double ratio = std::pow(10.0, rng.uniform(-3.0, 3.0));
    double a = std::sqrt(q * ratio), b = std::sqrt(q / ratio);
    double s = 2.0 * std::sqrt(q), t = D / (2.0 * n2);
    if (!(s < t)) continue;
    if (!(t - 1.5 * std::sqrt(q) - (2.0 * n2 / D) * q >= D / (12.0 * n2)))
      continue;
    if (!(4.0 * n2 <= std::pow(q, -5.0 / 12.0) * std::pow(D, 5.0 / 6.0)))
      continue;
    double ell = (a + b) / D * std::abs(std::log(q / (D * D)));
    CHECK(neck_depth(a, b, s, t) >=
          (D / 12.0) * (1.0 / n2 + ell) * (1.0 - 1e-12));
    ++checked;
  }
  CHECK(checked >= 30);
}

TEST_CASE("annulus volume envelope") {
  // t^3 + s t^2 + s^2 t + s^3 ln(t/s) + q s^2/s + ... brackets the volume
  // within a fixed constant when the annulus is genuinely two-scale
  SplitRng rng(31, 0);
  for (int k = 0; k < 30; ++k) {
    double sig = std::pow(10.0, rng.uniform(-3.0, 0.5));
    double ratio = std::pow(10.0, rng.uniform(-2.0, 2.0));
    double a = sig / (1.0 + ratio), b = sig - a;
    double q = a * b;
    double t = rng.uniform(0.1, 3.0);
    double s = t * std::pow(10.0, rng.uniform(-4.0, -0.31));  // s <= t/2
    double env = t * t * t + sig * t * t + sig * sig * t +
                 sig * sig * sig * std::log(t / s) + q * sig * sig / s +
                 q * q * sig / (s * s) + q * q * q / (s * s * s);
    double vol = rn_neck_volume(a, b, s, t) / (4.0 * kPi);
    CHECK(vol <= 30.0 * env);
    CHECK(env <= 30.0 * vol);
  }
}

// ---------------------------------------------------------------------------
// domain

TEST_CASE("domain construction and validation") {
  // flat
  Domain fl = make_domain(flat_set(1.0, 2), 2.0);
  CHECK(fl.R == 2.0);
  CHECK(fl.excision.empty());
  CHECK(fl.field == nullptr);

  // lattice excision
  Domain lat = make_domain(manual_set(2.0, 2, {src({0.5, 0.5, 0.5}, 0.1, 0.1)}),
                           4.0, ExcisionMode::lattice);
  CHECK(lat.excision[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(lat.log_excision[0] == doctest::Approx(std::log(0.5)).epsilon(1e-15));
  CHECK_THROWS_AS(make_domain(manual_set(2.0, 1, {src({0, 0, 0}, 0.1, 0.1)}),
                              4.0, ExcisionMode::lattice),
                  std::invalid_argument);

  // horizon fallback on an isolated charged source: tau * fhat with trivial hats
  Domain iso =
      make_domain(manual_set(2.0, 1, {src({0, 0, 0}, 0.3, 0.3)}), 4.0);
  CHECK(iso.excision[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(iso.cylinder[0] == 0);
  CHECK(iso.sep[0] == kInf);

  // explicit horizon surfaces win over the fallback
  HorizonSurface hs;
  hs.index = 0;
  hs.mean_radius = 0.25;
  std::vector<HorizonSurface> hv{hs};
  Domain ovr = make_domain(manual_set(2.0, 1, {src({0, 0, 0}, 0.3, 0.3)}), 4.0,
                           ExcisionMode::horizon, &hv);
  CHECK(ovr.excision[0] == doctest::Approx(0.25).epsilon(1e-15));

  // cylinder end: excision from the 4R' depth, exact in log form
  Domain cyl =
      make_domain(manual_set(2.0, 1, {src({0, 0, 0}, 0.5, 0.0)}), 4.0);
  CHECK(cyl.cylinder[0] == 1);
  CHECK(cyl.rprime_hint == doctest::Approx(28.0));
  CHECK(cyl.log_excision[0] == doctest::Approx(-222.0).epsilon(1e-14));
  CHECK(cyl.excision[0] == doctest::Approx(std::exp(-222.0)).epsilon(1e-12));
  Domain cyl2 =
      make_domain(manual_set(2.0, 1, {src({0, 0, 0}, 0.01, 0.0)}), 4.0);
  CHECK(cyl2.excision[0] == 0.0);  // underflowed double view
  CHECK(cyl2.log_excision[0] == doctest::Approx(-11100.0).epsilon(1e-12));

  // separations
  Domain pair = make_domain(
      manual_set(2.0, 2,
                 {src({-0.5, 0, 0}, 0.1, 0.1), src({0.5, 0, 0}, 0.1, 0.1)}),
      4.0);
  CHECK(pair.sep[0] == doctest::Approx(1.0));
  CHECK(pair.sep[1] == doctest::Approx(1.0));

  // validation
  CHECK_THROWS_AS(make_domain(flat_set(1.0, 2), 1.7), std::invalid_argument);
  SourceSet un = flat_set(1.0, 2);
  un.materialized = false;
  CHECK_THROWS_AS(make_domain(un, 2.0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// flat graphs

TEST_CASE("flat graph distances are exact on lattice directions") {
  Domain dom = make_domain(flat_set(1.0, 2), 2.0);
  GeodesicGraph g = build_graph(dom);
  CHECK(g.h_in == doctest::Approx(0.25));
  CHECK(g.h_out == doctest::Approx(0.25));
  CHECK(g.node_count() > 2000);
  CHECK(g.min_ratio == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(g.max_ratio == doctest::Approx(1.0).epsilon(1e-14));

  // straight axis: the path is the axis chain, no anisotropy
  CHECK(distance(g, {-2, 0, 0}, {2, 0, 0}) ==
        doctest::Approx(4.0).epsilon(1e-13));
  // exact diagonals too
  CHECK(distance(g, {-1, -1, 0}, {1, 1, 0}) ==
        doctest::Approx(2.0 * std::sqrt(2.0) * 2.0 / 2.0).epsilon(1e-13));
  // worst-direction anisotropy of the 26-stencil stays below ~8.3%
  double d = distance(g, {-1.5, 0, 0}, {1.5, 0.75, 0});
  double eu = std::sqrt(3.0 * 3.0 + 0.75 * 0.75);
  CHECK(d >= eu * (1.0 - 1e-12));
  CHECK(d <= eu * 1.09);
  // symmetry
  CHECK(distance(g, {-1.5, 0, 0}, {1.5, 0.75, 0}) ==
        doctest::Approx(distance(g, {1.5, 0.75, 0}, {-1.5, 0, 0}))
            .epsilon(1e-12));

  // both node kinds present (box interior and exterior)
  bool has_bulk = false, has_outer = false;
  for (std::uint8_t k : g.kind) {
    if (k == std::uint8_t(NodeKind::bulk)) has_bulk = true;
    if (k == std::uint8_t(NodeKind::outer)) has_outer = true;
  }
  CHECK(has_bulk);
  CHECK(has_outer);

  // snapping rejects points far from every node
  CHECK_THROWS_AS(distance(g, {5.0, 0, 0}, {0, 0, 0}), std::invalid_argument);

  // deterministic rebuild
  GeodesicGraph g2 = build_graph(dom);
  CHECK(g2.node_count() == g.node_count());
  CHECK(g2.edges == g.edges);
  CHECK(g2.edge_w == g.edge_w);
}

TEST_CASE("flat capacity, truncation and diameter") {
  Domain dom = make_domain(flat_set(1.0, 2), 2.0);
  GeodesicGraph g = build_graph(dom);

  int cap = capacity(g, 1.0);
  CHECK(cap >= 2);
  CHECK(cap <= 60);
  CHECK(capacity(g, std::vector<std::int32_t>{0}, 1.0) == 1);
  CHECK_THROWS_AS(capacity(g, 0.0), std::invalid_argument);

  TruncatedDomain near = truncate(g, 1.5);
  CHECK(near.rprime == 1.5);
  CHECK(!near.retained.empty());
  for (std::int32_t v : near.retained)
    CHECK(g.pos[std::size_t(v)].norm() <= 1.5 + 1e-9);
  CHECK_FALSE(near.bulk_ok);  // everything here is bulk, and some was cut
  CHECK(near.excl_ok);

  TruncatedDomain all = truncate(g, 100.0);
  CHECK(std::int64_t(all.retained.size()) == g.node_count());
  CHECK(all.bulk_ok);
  CHECK(all.excl_ok);
  CHECK_THROWS_AS(truncate(g, 0.0), std::invalid_argument);

  DiameterReport rep = diameter(g);
  CHECK(rep.lower >= 4.0 - 1e-9);
  CHECK(rep.lower <= 4.0 * 1.09);
  CHECK(!rep.pairs.empty());
}

TEST_CASE("perforation forces a certified detour") {
  Domain plain = make_domain(flat_set(1.0, 2), 2.0);
  GeodesicGraph gv = build_graph(plain);
  double dv = distance(gv, {-1, 0, 0}, {1, 0, 0});
  CHECK(dv == doctest::Approx(2.0).epsilon(1e-13));

  Domain perf = plain;
  perf.perf_p.push_back({0, 0, 0});
  perf.perf_r.push_back(0.2);
  GeodesicGraph gu = build_graph(perf);

  // no node inside the open ball; a lifted ring sits just above it
  double rmin = kInf;
  bool has_ring = false;
  for (std::int64_t i = 0; i < gu.node_count(); ++i) {
    rmin = std::min(rmin, gu.pos[std::size_t(i)].norm());
    if (gu.kind[std::size_t(i)] == std::uint8_t(NodeKind::ring))
      has_ring = true;
  }
  CHECK(has_ring);
  CHECK(rmin >= 0.2 * (1.0 - 1e-9));

  double du = distance(gu, {-1, 0, 0}, {1, 0, 0});
  // flat tangent-line detour around a radius-r ball between (+-1,0,0)
  double r = 0.2;
  double exact = 2.0 * std::sqrt(1.0 - r * r) +
                 r * (kPi - 2.0 * std::acos(r / 1.0));
  CHECK(du >= exact * (1.0 - 1e-9));
  CHECK(du <= 2.30);
  CHECK(du - dv <= kPi * r * 1.05);
  CHECK(du > dv);
}

// ---------------------------------------------------------------------------
// curved graphs

TEST_CASE("ball graph reproduces the radial geometry of one throat") {
  SourceSet iso = manual_set(2.0, 1, {src({0, 0, 0}, 0.3, 0.3)});
  Domain dom = make_domain(iso, 4.0);
  GraphParams gp;
  gp.shells_per_decade = 6;
  gp.min_rings = 6;
  GeodesicGraph g = build_graph(dom, gp);
  CHECK(g.min_ratio >= 1.0 - 1e-9);

  int dn = g.deepest[0], on = g.shell_outer[0];
  REQUIRE(dn >= 0);
  REQUIRE(on >= 0);
  double rdeep = double(g.shell_rho[std::size_t(dn)]);
  double rout = double(g.shell_rho[std::size_t(on)]);
  CHECK(rdeep > 0.3);
  CHECK(rdeep < 0.34);
  CHECK(rout == doctest::Approx(2.0));

  // pole chain = exact radial segments; graph distance is sandwiched between
  // the continuum radial length and the chain's quadrature error
  double nd = neck_depth(0.3, 0.3, rdeep, rout);
  double d = node_distance(g, dn, on);
  CHECK(d >= nd * (1.0 - 1e-12));
  CHECK(d <= nd * (1.0 + 1e-4));

  // boundary antipodes: sandwiched between the conformal-flat obstacle
  // distance (factor >= 1) and the best radial-plus-arc construction
  double upper = kInf;
  for (double rho = 0.40; rho <= 3.5; rho += 1e-3) {
    double f = 1.0 + 0.3 / rho;
    upper = std::min(upper,
                     2.0 * neck_depth(0.3, 0.3, rho, 4.0) + kPi * rho * f * f);
  }
  double rex = 0.3;
  double lower = 2.0 * std::sqrt(16.0 - rex * rex) +
                 rex * (kPi - 2.0 * std::acos(rex / 4.0));
  double danti = distance(g, {-4, 0, 0}, {4, 0, 0});
  CHECK(danti >= lower * (1.0 - 1e-12));
  CHECK(danti <= upper * 1.02);

  DiameterReport rep = diameter(g);
  CHECK(rep.lower >= danti * (1.0 - 1e-12));
  CHECK(rep.lower <= danti * 1.3);

  // truncation flags on the same graph
  TruncatedDomain tfar = truncate(g, 12.0);
  CHECK(tfar.bulk_ok);
  CHECK(tfar.excl_ok);
  CHECK_FALSE(tfar.s_underflow[0]);
  CHECK(tfar.s_excl[0] == doctest::Approx(std::exp(-20.0)).epsilon(1e-12));
  TruncatedDomain tnear = truncate(g, 3.0);
  CHECK_FALSE(tnear.bulk_ok);
}

TEST_CASE("two wells separate by the sum of their depths") {
  SourceSet pair = manual_set(
      2.0, 2, {src({-0.5, 0, 0}, 0.1, 0.1), src({0.5, 0, 0}, 0.1, 0.1)});
  Domain dom = make_domain(pair, 4.0);
  CHECK(dom.excision[0] == doctest::Approx(dom.excision[1]).epsilon(1e-13));
  CHECK(dom.excision[0] < 0.5);

  GeodesicGraph g = build_graph(dom);
  CHECK(g.min_ratio >= 1.0 - 1e-9);
  int d0 = g.deepest[0], d1 = g.deepest[1];
  REQUIRE(d0 >= 0);
  REQUIRE(d1 >= 0);
  double r0 = double(g.shell_rho[std::size_t(d0)]);
  double r1 = double(g.shell_rho[std::size_t(d1)]);
  double out0 = double(g.shell_rho[std::size_t(g.shell_outer[0])]);
  // deep-to-deep paths must climb both wells; the superposed factor only
  // exceeds each isolated one, so the isolated depths are a lower bound
  double nd = neck_depth(0.1, 0.1, r0, out0) + neck_depth(0.1, 0.1, r1, out0);
  double d = node_distance(g, d0, d1);
  CHECK(d >= nd * (1.0 - 1e-12));
  CHECK(d <= nd + 3.0);
}

TEST_CASE("cylinder-end graph goes deep without losing connectivity") {
  SourceSet cyl = manual_set(2.0, 1, {src({0, 0, 0}, 0.5, 0.0)});
  Domain dom = make_domain(cyl, 4.0);
  GraphParams gp;
  gp.max_shell_decades = 6.0;
  GeodesicGraph g = build_graph(dom, gp);
  int dn = g.deepest[0], on = g.shell_outer[0];
  REQUIRE(dn >= 0);
  double rdeep = double(g.shell_rho[std::size_t(dn)]);
  CHECK(rdeep < 1e-5 * 2.0);
  double nd = neck_depth(0.5, 0.0, rdeep, double(g.shell_rho[std::size_t(on)]));
  double d = node_distance(g, dn, on);
  CHECK(d >= nd * (1.0 - 1e-12));
  CHECK(d <= nd * (1.0 + 1e-4));
}

TEST_CASE("refining the bulk lattice moves distances by little") {
  Domain dom = make_domain(flat_set(1.0, 2), 2.0);
  GraphParams g2p;
  g2p.m = 2;
  GraphParams g4p;
  g4p.m = 4;
  GeodesicGraph g2 = build_graph(dom, g2p);
  GeodesicGraph g4 = build_graph(dom, g4p);
  CHECK(distance(g2, {-2, 0, 0}, {2, 0, 0}) ==
        doctest::Approx(4.0).epsilon(1e-13));
  CHECK(distance(g4, {-2, 0, 0}, {2, 0, 0}) ==
        doctest::Approx(4.0).epsilon(1e-13));
  double a2 = distance(g2, {-1.5, 0, 0}, {1.5, 0.75, 0});
  double a4 = distance(g4, {-1.5, 0, 0}, {1.5, 0.75, 0});
  CHECK(std::abs(a2 - a4) / a4 <= 0.02);
}

// ---------------------------------------------------------------------------
// region measures

TEST_CASE("region measure of the flat ball") {
  Domain dom = make_domain(flat_set(1.0, 2), 2.0);
  RegionMeasure m = region_volume(dom, RegionSelect::all);
  CHECK(m.neck_volume.empty());
  CHECK(m.necks == 0.0);
  CHECK(m.area == 0.0);
  CHECK(m.bulk == doctest::Approx(4.0 / 3.0 * kPi * 8.0).epsilon(0.01));
  CHECK(m.euclid_bulk == m.bulk);

  Domain perf = dom;
  perf.perf_p.push_back({0, 0, 0});
  perf.perf_r.push_back(0.5);
  RegionMeasure mp = region_volume(perf, RegionSelect::bulk);
  CHECK(mp.bulk ==
        doctest::Approx(4.0 / 3.0 * kPi * (8.0 - 0.125)).epsilon(0.01));
  CHECK(mp.euclid_bulk == mp.bulk);
}

TEST_CASE("region measure of one throat") {
  SourceSet iso = manual_set(2.0, 1, {src({0, 0, 0}, 0.3, 0.3)});
  Domain dom = make_domain(iso, 4.0);
  RegionMeasure m = region_volume(dom, RegionSelect::all);

  double oracle = adaptive_simpson(
      [](double r) {
        double f = (1.0 + 0.3 / r) * (1.0 + 0.3 / r);
        return 4.0 * kPi * r * r * f * f * f;
      },
      0.3, 2.0, 1e-13);
  CHECK(m.neck_volume[0] == doctest::Approx(oracle).epsilon(1e-10));
  CHECK(m.necks == m.neck_volume[0]);

  // throat area is exactly 4 pi (sqrt a + sqrt b)^4
  double wa = 4.0 * kPi * std::pow(2.0 * std::sqrt(0.3), 4.0);
  CHECK(m.area == doctest::Approx(wa).epsilon(1e-8));

  CHECK(m.euclid_bulk ==
        doctest::Approx(4.0 / 3.0 * kPi * (64.0 - 8.0)).epsilon(0.01));
  CHECK(m.bulk > m.euclid_bulk);  // the factor exceeds 1 everywhere
}

TEST_CASE("region measure with a neighbor correction") {
  SourceSet pair = manual_set(
      2.0, 2, {src({-0.5, 0, 0}, 0.1, 0.1), src({0.5, 0, 0}, 0.1, 0.1)});
  Domain dom = make_domain(pair, 4.0);
  RegionParams rp;
  rp.sphere_degree = 12;
  RegionMeasure m = region_volume(dom, RegionSelect::necks,
                                  WeightMode::discrete, rp);

  double e0 = dom.excision[0], t = 0.5;
  CHECK(m.neck_volume[0] > rn_neck_volume(0.1, 0.1, e0, t));
  CHECK(m.neck_volume[0] ==
        doctest::Approx(m.neck_volume[1]).epsilon(1e-4));

  // independent full quadrature of (chi psi)^3 over the annulus
  DiscreteField field(pair);
  SphereGrid sg(16);
  Vec3 p{-0.5, 0, 0};
  auto shell = [&](double r) {
    double a = 0.0;
    for (std::size_t j = 0; j < sg.nodes(); ++j) {
      double u = field.eval(p + sg.unit(j) * r).u();
      a += sg.weight(j) * u * u * u;
    }
    return r * r * a;
  };
  double oracle = adaptive_simpson(shell, e0, t, 1e-11);
  CHECK(m.neck_volume[0] == doctest::Approx(oracle).epsilon(2e-5));
}

TEST_CASE("region measure of cylinder ends") {
  SourceSet cyl = manual_set(2.0, 1, {src({0, 0, 0}, 0.5, 0.0)});
  Domain dom = make_domain(cyl, 4.0);
  RegionMeasure m = region_volume(dom, RegionSelect::all);
  CHECK(m.neck_volume[0] ==
        doctest::Approx(rn_neck_volume_log(0.5, 0.0, -222.0, 2.0))
            .epsilon(1e-12));
  // r chi psi -> alpha psi_hat = 0.5 at the end, so the area tends to pi
  CHECK(m.area == doctest::Approx(kPi).epsilon(1e-10));

  SourceSet cyl2 = manual_set(2.0, 1, {src({0, 0, 0}, 0.01, 0.0)});
  Domain dom2 = make_domain(cyl2, 4.0);
  RegionMeasure m2 = region_volume(dom2, RegionSelect::all);
  CHECK(dom2.excision[0] == 0.0);
  CHECK(m2.area == doctest::Approx(4.0 * kPi * 1e-4).epsilon(1e-12));
  CHECK(m2.neck_volume[0] ==
        doctest::Approx(rn_neck_volume_log(0.01, 0.0, -11100.0, 2.0))
            .epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// cloud integration

TEST_CASE("graph over an assigned cloud") {
  DustCloud cloud = DustCloud::make(1.0, Profile::make_bump(0.6, 0.5),
                                    Profile::make_bump(0.5, 0.5));
  Grid grid{cloud.D, 6};
  SourceSet srcs = assign_parameters(grid, cloud, SchemeSpec{});
  REQUIRE(srcs.entries.size() > 20);
  Domain dom = make_domain(srcs, 2.0);

  GraphParams gp;
  gp.m = 1;
  gp.shells_per_decade = 2;
  gp.max_shell_decades = 2.0;
  GeodesicGraph g = build_graph(dom, gp);
  CHECK(g.min_ratio >= 1.0 - 1e-9);
  // deep ring edges carry the full conformal factor, so the ratio is large
  CHECK(std::isfinite(g.max_ratio));
  CHECK(g.max_ratio >= g.min_ratio);

  double d = distance(g, {1, 0, 0}, {-1, 0, 0});
  CHECK(d >= 2.0 * (1.0 - 1e-12));

  DiameterReport rep = diameter(g, 16);
  CHECK(rep.lower >= 3.8);
  CHECK(rep.lower <= 5.6);

  TruncatedDomain td = truncate(g, 10.0);
  CHECK(td.excl_ok);

  // smooth comparison measure over the same cloud
  Domain smooth = make_domain(srcs, 2.0, ExcisionMode::none);
  SourceSet with_prov = srcs;  // assigned sets carry their cloud
  REQUIRE(with_prov.has_provenance);
  RegionMeasure mc =
      region_volume(smooth, RegionSelect::bulk, WeightMode::continuum);
  CHECK(mc.bulk >= mc.euclid_bulk);
  CHECK(mc.bulk <= mc.euclid_bulk * 1.5);
}

// ---------------------------------------------------------------------------
// exports and validation

TEST_CASE("graph export round trip") {
  Domain dom = make_domain(flat_set(1.0, 1), 2.0);
  GraphParams gp;
  gp.m = 2;
  GeodesicGraph g = build_graph(dom, gp);
  save_graph(g, "ms_export_t");
  CHECK(file_size("ms_export_t.nodes.bin") == double(g.node_count()) * 33.0);
  CHECK(file_size("ms_export_t.edges.bin") == double(g.edge_count()) * 16.0);
  std::string js = file_text("ms_export_t.json");
  CHECK(js.find("\"nodes\": " + std::to_string(g.node_count())) !=
        std::string::npos);
  CHECK(js.find("nodes_sha256") != std::string::npos);
  CHECK(js.find("edges_sha256") != std::string::npos);
  CHECK(js.find("\"mode\": \"horizon\"") != std::string::npos);

  std::string csv = distance_csv(
      g, {{{-2, 0, 0}, {2, 0, 0}}, {{0, 0, 0}, {0, 2, 0}}});
  CHECK(csv.rfind("xi,yi,dist\n", 0) == 0);
  int lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  CHECK(lines == 3);
  std::remove("ms_export_t.nodes.bin");
  std::remove("ms_export_t.edges.bin");
  std::remove("ms_export_t.json");
}

TEST_CASE("graph parameter validation") {
  Domain dom = make_domain(flat_set(1.0, 2), 2.0);
  GraphParams bad;
  bad.m = 0;
  CHECK_THROWS_AS(build_graph(dom, bad), std::invalid_argument);
  bad = GraphParams{};
  bad.min_rings = 1;
  CHECK_THROWS_AS(build_graph(dom, bad), std::invalid_argument);
  bad = GraphParams{};
  bad.weight_tol = 0.0;
  CHECK_THROWS_AS(build_graph(dom, bad), std::invalid_argument);
  bad = GraphParams{};
  bad.memory_cap = 1000;
  CHECK_THROWS_AS(build_graph(dom, bad), std::runtime_error);
  bad = GraphParams{};
  bad.weight = WeightMode::continuum;  // flat manual set has no provenance
  CHECK_THROWS_AS(build_graph(dom, bad), std::invalid_argument);

  Domain pbad = dom;
  pbad.perf_p.push_back({1.9, 0, 0});
  pbad.perf_r.push_back(0.5);  // pokes out of the ball
  CHECK_THROWS_AS(build_graph(pbad), std::invalid_argument);

  GeodesicGraph g = build_graph(dom);
  CHECK_THROWS_AS(node_distance(g, -1, 0), std::invalid_argument);
  CHECK_THROWS_AS(node_distance(g, 0, int(g.node_count())),
                  std::invalid_argument);
  CHECK_THROWS_AS(dijkstra_from(g, -1), std::invalid_argument);
  CHECK_THROWS_AS(capacity(g, {int(g.node_count())}, 1.0),
                  std::invalid_argument);

  Domain none = make_domain(manual_set(2.0, 1, {src({0, 0, 0}, 0.3, 0.3)}),
                            4.0, ExcisionMode::none);
  CHECK_THROWS_AS(region_volume(none, RegionSelect::necks),
                  std::invalid_argument);
  RegionParams rbad;
  rbad.bulk_grid = 1;
  CHECK_THROWS_AS(region_volume(none, RegionSelect::bulk,
                                WeightMode::discrete, rbad),
                  std::invalid_argument);
}
