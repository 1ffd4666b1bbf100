#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "blris/cloud.hpp"
#include "blris/fields.hpp"
#include "blris/horizon.hpp"
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

SourceSet isolated(double alpha, double beta) {
  return manual_set(8.0 * (alpha + beta + 1.0), 1, {src({0, 0, 0}, alpha, beta)});
}

// two equal mass-m uncharged-model sources (alpha = beta = m/2) at separation d
SourceSet equal_pair(double m, double d) {
  return manual_set(2.0 * d, 1,
                    {src({0, 0, 0}, m / 2, m / 2), src({d, 0, 0}, m / 2, m / 2)});
}

double sup_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// spectral grid

TEST_CASE("sphere grid transforms are exact on band-limited data") {
  SphereGrid g(9);
  CHECK(g.degree() == 9);
  CHECK(g.nodes() == std::size_t(10 * 19));
  CHECK(g.coeffs() == std::size_t(100));

  double total = 0.0;
  for (std::size_t j = 0; j < g.nodes(); ++j) total += g.weight(j);
  CHECK(total == doctest::Approx(4.0 * kPi).epsilon(1e-14));

  SplitRng rng(5, 0);
  std::vector<double> c(g.coeffs());
  for (double& v : c) v = rng.uniform(-1.0, 1.0);
  std::vector<double> vals = g.synthesize(c);
  std::vector<double> back = g.analyze(vals);
  CHECK(sup_diff(c, back) < 1e-12);

  // point evaluation agrees with the node values
  for (std::size_t j = 0; j < g.nodes(); j += 37)
    CHECK(g.eval_at(c, g.theta(j), g.phi(j)) == doctest::Approx(vals[j]).epsilon(1e-12));

  // constants are harmonic
  std::vector<double> ones(g.nodes(), 1.0);
  std::vector<double> lap = g.laplacian(ones);
  for (double v : lap) CHECK(std::abs(v) < 1e-11);

  // degree-one modes have eigenvalue -2: use f = z = cos(theta)
  std::vector<double> zf(g.nodes());
  for (std::size_t j = 0; j < g.nodes(); ++j) zf[j] = g.unit(j).z;
  lap = g.laplacian(zf);
  for (std::size_t j = 0; j < g.nodes(); ++j)
    CHECK(lap[j] == doctest::Approx(-2.0 * zf[j]).epsilon(1e-12));
}

TEST_CASE("sphere grid derivatives match closed forms") {
  SphereGrid g(11);
  // f = xyz restricted to the sphere: a degree-3 harmonic polynomial, so
  // lap f = -12 f; the frame gradient has closed trigonometric components
  std::vector<double> f(g.nodes()), ft(g.nodes()), fp(g.nodes());
  for (std::size_t j = 0; j < g.nodes(); ++j) {
    double t = g.theta(j), p = g.phi(j);
    double st = std::sin(t), ct = std::cos(t);
    f[j] = st * st * ct * std::sin(p) * std::cos(p);
    ft[j] = (2.0 * st * ct * ct - st * st * st) * std::sin(p) * std::cos(p);
    fp[j] = st * ct * std::cos(2.0 * p);
  }
  SphereGrid::Derivs d = g.derivatives(f);
  CHECK(sup_diff(d.ft, ft) < 1e-11);
  CHECK(sup_diff(d.fp, fp) < 1e-11);
  for (std::size_t j = 0; j < g.nodes(); ++j)
    CHECK(d.lap[j] == doctest::Approx(-12.0 * f[j]).epsilon(1e-10));
  // the frame Hessian traces to the Laplacian
  for (std::size_t j = 0; j < g.nodes(); ++j)
    CHECK(d.htt[j] + d.hpp[j] == doctest::Approx(d.lap[j]).epsilon(1e-10));

  // quadrature of f^2 = x^2 y^2 z^2: exact moment 4 pi / 105
  double m = 0.0;
  for (std::size_t j = 0; j < g.nodes(); ++j) m += g.weight(j) * f[j] * f[j];
  CHECK(m == doctest::Approx(4.0 * kPi / 105.0).epsilon(1e-13));

  CHECK_THROWS_AS(SphereGrid(1), std::invalid_argument);
  CHECK_THROWS_AS(g.analyze(std::vector<double>(3, 0.0)), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// rescaled neck

TEST_CASE("rescaled neck freezes the regular part at the source") {
  SourceSet s = manual_set(40, 1, {src({0, 0, 0}, 1, 4), src({10, 0, 0}, 2, 3)});
  RescaledNeck n = make_neck(s, 0);
  CHECK(n.index == 0);
  CHECK(n.tau == 2.0);
  CHECK(n.sigma == 10.0);
  CHECK(n.chi_hat == doctest::Approx(1.2).epsilon(1e-15));
  CHECK(n.psi_hat == doctest::Approx(1.3).epsilon(1e-15));
  CHECK(n.fhat == doctest::Approx(1.0 / std::sqrt(1.2 * 1.3)).epsilon(1e-15));
  CHECK(n.fhat <= 1.0);

  RescaledNeck iso = make_neck(isolated(0.7, 1.9), 0);
  CHECK(iso.sigma == kInf);
  CHECK(iso.fhat == 1.0);

  CHECK_THROWS_AS(make_neck(manual_set(1, 1, {src({0, 0, 0}, 1, 0)}), 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_neck(s, 5), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// reaction terms

TEST_CASE("reaction terms: frozen form is exact for an isolated source") {
  const double al = 0.7, be = 1.9;
  RescaledNeck n = make_neck(isolated(al, be), 0);
  SphereGrid g(7);
  std::vector<double> h0(g.nodes(), 0.0);
  LambdaTerms lt = lambda_terms(n, g, h0);
  // the minimal sphere of the frozen model balances the reaction exactly
  for (std::size_t j = 0; j < g.nodes(); ++j) {
    CHECK(lt.lambda[j] == doctest::Approx(2.0).epsilon(1e-13));
    CHECK(lt.lambda_hat[j] == doctest::Approx(2.0).epsilon(1e-13));
    CHECK(lt.xi_t[j] == 0.0);
    CHECK(lt.xi_p[j] == 0.0);
  }
  // analytic h-derivative matches the frozen closed form at h = 0
  double closed = -4.0 * std::sqrt(al * be) /
                  ((std::sqrt(al) + std::sqrt(be)) * (std::sqrt(al) + std::sqrt(be)));
  for (std::size_t j = 0; j < g.nodes(); ++j)
    CHECK(lt.dlambda_dh[j] == doctest::Approx(closed).epsilon(1e-12));

  // symmetric case: derivative is exactly -1
  RescaledNeck sym = make_neck(isolated(0.5, 0.5), 0);
  LambdaTerms lts = lambda_terms(sym, g, h0);
  CHECK(lts.dlambda_dh[0] == doctest::Approx(-1.0).epsilon(1e-13));
}

TEST_CASE("reaction terms: analytic h-derivative matches finite differences") {
  SourceSet s = manual_set(60, 1, {src({0, 0, 0}, 0.5, 0.8), src({14, 3, -2}, 0.4, 0.9)});
  RescaledNeck n = make_neck(s, 0);
  SphereGrid g(7);
  std::vector<double> h(g.nodes());
  for (std::size_t j = 0; j < g.nodes(); ++j)
    h[j] = 0.02 * std::cos(g.theta(j)) + 0.01 * std::sin(g.phi(j));
  const double eps = 1e-6;
  std::vector<double> hp = h, hm = h;
  for (std::size_t j = 0; j < g.nodes(); ++j) {
    hp[j] += eps;
    hm[j] -= eps;
  }
  LambdaTerms lt = lambda_terms(n, g, h);
  LambdaTerms ltp = lambda_terms(n, g, hp);
  LambdaTerms ltm = lambda_terms(n, g, hm);
  for (std::size_t j = 0; j < g.nodes(); ++j) {
    double fd = (ltp.lambda[j] - ltm.lambda[j]) / (2.0 * eps);
    CHECK(lt.dlambda_dh[j] == doctest::Approx(fd).epsilon(1e-7));
  }
}

TEST_CASE("reaction terms: angular coefficient obeys the tau/sigma envelope") {
  SphereGrid g(7);
  std::vector<double> seps = {12.0, 24.0, 48.0, 96.0}, sups;
  double tau = 0.0;
  for (double sep : seps) {
    SourceSet s =
        manual_set(2 * sep, 1, {src({0, 0, 0}, 0.5, 0.5), src({sep, 0, 0}, 0.5, 0.5)});
    RescaledNeck n = make_neck(s, 0);
    tau = n.tau;
    LambdaTerms lt = lambda_terms(n, g, std::vector<double>(g.nodes(), 0.0));
    double sup = 0.0;
    for (std::size_t j = 0; j < g.nodes(); ++j)
      sup = std::max(sup, std::hypot(lt.xi_t[j], lt.xi_p[j]));
    CHECK(sup > 0.0);
    // envelope with a modest constant
    CHECK(sup <= 10.0 * n.tau / sep);
    sups.push_back(sup);
  }
  // measured decay for a single neighbor is one order faster than the
  // envelope (the tangential gradient is tidal), so at least 1/sigma
  CHECK(fit_loglog(seps, sups).slope <= -0.95);
  CHECK(tau > 0.0);
}

TEST_CASE("reaction terms reject radii that reach the neighbor") {
  SourceSet s = manual_set(4, 1, {src({0, 0, 0}, 0.5, 0.5), src({2, 0, 0}, 0.5, 0.5)});
  RescaledNeck n = make_neck(s, 0);
  SphereGrid g(5);
  // fhat e^h >= sigma/(2 tau) = 2 crosses the half-separation ball
  std::vector<double> big(g.nodes(), std::log(2.5 / n.fhat));
  CHECK_THROWS_AS(lambda_terms(n, g, big), std::domain_error);
}

// ---------------------------------------------------------------------------
// semilinear stage

TEST_CASE("semilinear stage is exact for an isolated source") {
  RescaledNeck n = make_neck(isolated(1.3, 0.2), 0);
  SphereGrid g(9);
  SemilinearSolution sol = solve_semilinear(n, g);
  CHECK(sol.sup_norm < 1e-12);
  CHECK(sol.bracket == 0.0);
  CHECK(sol.residual < 1e-8 / n.tau);
}

TEST_CASE("semilinear stage: deviation scales like (alpha+beta)/sigma") {
  SphereGrid g(9);
  HorizonOptions opts;
  opts.smallness = 0.12;
  std::vector<double> seps = {15.0, 30.0, 60.0, 120.0};
  std::vector<double> sups, grads;
  for (double sep : seps) {
    RescaledNeck n = make_neck(equal_pair(1.0, sep), 0);
    SemilinearSolution sol = solve_semilinear(n, g, opts);
    CHECK(sol.bracket > 0.0);
    CHECK(sol.residual < 1e-8 / n.tau);
    CHECK(sol.sup_norm <= sol.bracket);  // pinched between sub/supersolution
    sups.push_back(sol.sup_norm);
    grads.push_back(sol.grad_norm);
  }
  // deviation stays within the (alpha+beta)/sigma envelope; the measured
  // decay is one order faster because the frozen value already absorbs the
  // monopole of the neighbor, leaving the tidal term
  LineFit sfit = fit_loglog(seps, sups);
  CHECK(sfit.slope <= -0.95);
  LineFit gfit = fit_loglog(seps, grads);
  CHECK(gfit.slope <= -1.8);

  // the constants in the fitted laws stay modest
  for (std::size_t k = 0; k < seps.size(); ++k) {
    CHECK(sups[k] <= 5.0 * 1.0 / seps[k]);  // (alpha+beta) = 1
    CHECK(grads[k] <= 5.0 * 0.5 / (seps[k] * seps[k]));
  }
}

TEST_CASE("semilinear stage enforces the smallness precondition") {
  RescaledNeck n = make_neck(equal_pair(1.0, 4.0), 0);  // ratio 0.25
  SphereGrid g(5);
  CHECK_THROWS_AS(solve_semilinear(n, g), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// minimal-surface solves

TEST_CASE("isolated source: the solved surface is the round sphere sqrt(alpha*beta)") {
  SphereGrid g(15);
  SplitRng rng(42, 1);
  for (int trial = 0; trial < 10; ++trial) {
    double al = rng.uniform(0.1, 5.0), be = rng.uniform(0.1, 5.0);
    RescaledNeck n = make_neck(isolated(al, be), 0);
    HorizonSurface hs = solve_minimal(n, g, HorizonMode::picard);
    double tau = std::sqrt(al * be);
    CHECK(hs.mean_radius == doctest::Approx(tau).epsilon(1e-6));
    double area = 4.0 * kPi * std::pow(std::sqrt(al) + std::sqrt(be), 4.0);
    CHECK(hs.area == doctest::Approx(area).epsilon(1e-4));
    CHECK(hs.residual < 1e-8 / tau);
    for (double sv : hs.S) CHECK(sv == doctest::Approx(tau).epsilon(1e-10));
  }
}

TEST_CASE("two-source solve: modes agree, picard contracts, rays locate the surface") {
  const double m = 1.0, sep = 20.0;
  SourceSet s = equal_pair(m, sep);
  SphereGrid g(15);
  HorizonOptions opts;
  opts.smallness = 0.12;
  RescaledNeck n = make_neck(s, 0);

  HorizonSurface newton = solve_minimal(n, g, HorizonMode::newton, opts);
  HorizonSurface picard = solve_minimal(n, g, HorizonMode::picard, opts);
  CHECK(!picard.fallback);
  CHECK(newton.residual < 1e-8 / n.tau);
  CHECK(picard.residual < 1e-8 / n.tau);
  CHECK(sup_diff(newton.S, picard.S) / n.tau < 1e-6);

  // every successive correction at most halves; drive the tolerance down so
  // the iteration takes several steps before stopping
  HorizonOptions tight = opts;
  tight.tol_factor = 1e-12;
  HorizonSurface deep = solve_minimal(n, g, HorizonMode::picard, tight);
  CHECK(!deep.fallback);
  REQUIRE(deep.correction_norms.size() >= 2);
  for (std::size_t k = 1; k < deep.correction_norms.size(); ++k)
    CHECK(deep.correction_norms[k] <= 0.5 * deep.correction_norms[k - 1]);

  // per-ray roots of the sphere mean-curvature expression
  DiscreteField field(s);
  const SourceEntry& e = s.entries[0];
  auto hray = [&](double rho, const Vec3& dir) {
    Vec3 x = e.p + rho * dir;
    FieldSample fs = field.eval(x, 0);
    double gcn = fs.grad_chi.dot(dir), gpn = fs.grad_psi.dot(dir);
    return gcn * fs.psi + fs.chi * gpn +
           (fs.chi * fs.psi + e.alpha * gpn + e.beta * gcn) / rho -
           e.alpha * e.beta / (rho * rho * rho);
  };
  std::vector<Vec3> rays = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                            {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  double mean_root = 0.0;
  for (const Vec3& dir : rays) {
    auto f = [&](double r) { return hray(r, dir); };
    double lo = 0.3, hi = 0.7;
    mean_root += brent_root(f, lo, hi, f(lo), f(hi), 1e-12);
  }
  mean_root /= rays.size();
  CHECK(newton.mean_radius == doctest::Approx(mean_root).epsilon(0.01));

  // location law: the mean radius sits within C (alpha+beta)/sigma of tau fhat
  CHECK(std::abs(newton.mean_radius / n.tau - n.fhat) <= m / sep);
}

TEST_CASE("solve_all covers exactly the sources with both parameters") {
  SourceSet s = manual_set(80, 1,
                           {src({0, 0, 0}, 0.5, 0.5), src({30, 0, 0}, 0.3, 0.6),
                            src({0, 40, 0}, 0.8, 0.0)});
  SphereGrid g(9);
  std::vector<HorizonSurface> all = solve_all(s, g, HorizonMode::newton);
  REQUIRE(all.size() == 2);
  CHECK(all[0].index == 0);
  CHECK(all[1].index == 1);
  for (const HorizonSurface& hs : all) {
    CHECK(hs.residual < 1e-8 / hs.tau);
    CHECK(hs.mean_radius > 0.0);
  }
}

// ---------------------------------------------------------------------------
// coordinate-sphere mean curvature

TEST_CASE("sphere mean curvature closed forms") {
  SphereGrid g(5);
  // no sources: flat space, H = 2/rho
  SourceSet flat = manual_set(4, 1, {src({0, 0, 0}, 0.0, 0.0)});
  for (double rho : {0.5, 1.0, 2.0}) {
    CurvatureField c = mean_curvature_sphere(flat, 0, rho, g);
    CHECK(c.min == doctest::Approx(2.0 / rho).epsilon(1e-14));
    CHECK(c.max == doctest::Approx(2.0 / rho).epsilon(1e-14));
  }

  // single mass-1 source: zero at rho = 1/2, negative inside, positive outside
  SourceSet sch = isolated(0.5, 0.5);
  CHECK(std::abs(mean_curvature_sphere(sch, 0, 0.5, g).max) < 1e-14);
  CHECK(mean_curvature_sphere(sch, 0, 0.45, g).sign_class == -1);
  CHECK(mean_curvature_sphere(sch, 0, 0.55, g).sign_class == 1);

  // charged source (1,4): root of the sphere curvature at rho = 2
  SourceSet rn = isolated(1.0, 4.0);
  auto hmean = [&](double rho) { return mean_curvature_sphere(rn, 0, rho, g).H[0]; };
  double root = brent_root(hmean, 1.0, 3.0, hmean(1.0), hmean(3.0), 1e-13);
  CHECK(root == doctest::Approx(2.0).epsilon(1e-10));

  // spheres that reach another source are rejected
  SourceSet pair = manual_set(4, 1, {src({0, 0, 0}, 0.1, 0.1), src({1, 0, 0}, 0.1, 0.1)});
  CHECK_THROWS_AS(mean_curvature_sphere(pair, 0, 1.0, g), std::domain_error);
  CHECK_THROWS_AS(mean_curvature_sphere(pair, 0, 1.5, g), std::domain_error);
  CHECK(mean_curvature_sphere(pair, 0, 0.5, g).rho == 0.5);
}

TEST_CASE("foliation scan brackets the horizon and certifies horizonless ends") {
  SphereGrid g(5);
  // isolated charged source: signs flip across tau = 2
  SourceSet rn = isolated(1.0, 4.0);
  FoliationScan scan = foliation_scan(rn, 0, 1.0, 3.0, 21, g);
  CHECK(!scan.all_positive);
  CHECK(scan.rho_minus < 2.0);
  CHECK(scan.rho_plus > 2.0);
  CHECK(scan.rho_minus > 1.0 - 1e-12);
  // every radius below rho_minus scanned negative, above rho_plus positive
  for (std::size_t k = 0; k < scan.rho.size(); ++k) {
    if (scan.rho[k] <= scan.rho_minus) CHECK(scan.sign_class[k] == -1);
    if (scan.rho[k] >= scan.rho_plus) CHECK(scan.sign_class[k] == 1);
  }

  // half-charged source: no horizon, every sphere has positive curvature
  SourceSet ext = manual_set(8, 1, {src({0, 0, 0}, 1.0, 0.0)});
  FoliationScan pos = foliation_scan(ext, 0, 0.05, 4.0, 25, g);
  CHECK(pos.all_positive);
  CHECK(std::isnan(pos.rho_minus));
  CHECK(pos.rho_plus == pos.rho[0]);
}

TEST_CASE("foliation window brackets the solved horizon inside a cloud") {
  DustCloud cloud =
      DustCloud::make(1.0, Profile::make_bump(0.05, 1.0), Profile::make_bump(0.05, 1.0));
  SourceSet s = assign_parameters(subdivide(cloud, 2), cloud, SchemeSpec{});
  // the profile is supported in the unit ball, so the outer cells drop
  REQUIRE(s.entries.size() == 32);
  // pick the strongest source
  std::size_t imax = 0;
  for (std::size_t i = 0; i < s.entries.size(); ++i)
    if (s.entries[i].alpha > s.entries[imax].alpha) imax = i;
  REQUIRE(s.entries[imax].charged);

  SphereGrid g(9);
  RescaledNeck n = make_neck(s, imax);
  HorizonSurface hs = solve_minimal(n, g, HorizonMode::newton);

  double rhat = n.tau * n.fhat;
  FoliationScan scan = foliation_scan(s, imax, 0.5 * rhat, s.D / (2.0 * s.n), 24, g);
  CHECK(!scan.all_positive);
  CHECK(scan.rho_minus > 0.0);
  CHECK(scan.rho_plus < s.D / (2.0 * s.n) + 1e-12);
  CHECK(scan.rho_minus < hs.mean_radius);
  CHECK(hs.mean_radius < scan.rho_plus);
}

// ---------------------------------------------------------------------------
// dilated surfaces

TEST_CASE("dilated surfaces change mean-curvature sign across the horizon") {
  SphereGrid g(9);

  SourceSet iso = isolated(0.5, 0.5);
  RescaledNeck n = make_neck(iso, 0);
  HorizonSurface hs = solve_minimal(n, g, HorizonMode::newton);
  DilatedSign d1 = dilated_mean_curvature(iso, hs, 1.0);
  CHECK(std::max(std::abs(d1.min), std::abs(d1.max)) <= hs.residual + 1e-12);
  CHECK(dilated_mean_curvature(iso, hs, 0.8).sign_class == -1);
  CHECK(dilated_mean_curvature(iso, hs, 1.25).sign_class == 1);

  SourceSet pair = equal_pair(1.0, 20.0);
  HorizonOptions opts;
  opts.smallness = 0.12;
  RescaledNeck n2 = make_neck(pair, 0);
  HorizonSurface hs2 = solve_minimal(n2, g, HorizonMode::newton, opts);
  DilatedSign p1 = dilated_mean_curvature(pair, hs2, 1.0);
  CHECK(std::max(std::abs(p1.min), std::abs(p1.max)) <= hs2.residual + 1e-12);
  CHECK(dilated_mean_curvature(pair, hs2, 0.8).sign_class == -1);
  CHECK(dilated_mean_curvature(pair, hs2, 1.25).sign_class == 1);

  CHECK_THROWS_AS(dilated_mean_curvature(pair, hs2, 45.0), std::domain_error);
}

// ---------------------------------------------------------------------------
// symmetry and dumps

TEST_CASE("solves are equivariant under quarter turns about the source") {
  SphereGrid g(9);
  SourceSet base =
      manual_set(80, 1, {src({0, 0, 0}, 0.5, 0.8), src({30, 0, 0}, 0.3, 0.4)});
  SourceSet rot =
      manual_set(80, 1, {src({0, 0, 0}, 0.5, 0.8), src({0, 30, 0}, 0.3, 0.4)});
  HorizonSurface hb = solve_minimal(make_neck(base, 0), g, HorizonMode::newton);
  HorizonSurface hr = solve_minimal(make_neck(rot, 0), g, HorizonMode::newton);
  CHECK(hb.mean_radius == doctest::Approx(hr.mean_radius).epsilon(1e-12));
  CHECK(hb.area == doctest::Approx(hr.area).epsilon(1e-12));
  std::vector<double> cb = g.analyze(hb.S);
  for (std::size_t j = 0; j < g.nodes(); ++j) {
    double expect = g.eval_at(cb, g.theta(j), g.phi(j) - kPi / 2.0);
    CHECK(hr.S[j] == doctest::Approx(expect).epsilon(1e-8));
  }
}

TEST_CASE("surface dumps carry the node table and the summary") {
  SphereGrid g(5);
  SourceSet iso = isolated(2.0, 0.5);
  HorizonSurface hs = solve_minimal(make_neck(iso, 0), g, HorizonMode::newton);

  std::string csv = horizon_csv(hs);
  CHECK(csv.rfind("theta,phi,S,resid\n", 0) == 0);
  std::size_t rows = 0;
  for (char ch : csv)
    if (ch == '\n') ++rows;
  CHECK(rows == g.nodes() + 1);

  std::string js = horizon_json(hs);
  CHECK(js.find("\"i\": 0") != std::string::npos);
  CHECK(js.find("\"tau\": 1") != std::string::npos);
  CHECK(js.find("\"mode\": \"newton\"") != std::string::npos);
  CHECK(js.find("\"fallback\": false") != std::string::npos);
  CHECK(js.find("\"area\"") != std::string::npos);
}
