#include "blris/horizon.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <limits>
#include <stdexcept>
#include <thread>
#include <utility>

namespace blris {

namespace {

unsigned hw_threads() {
  unsigned h = std::thread::hardware_concurrency();
  return h == 0 ? 1 : h;
}

// run body(k) over [0, n) in parallel, capturing the first exception instead
// of letting it escape a worker thread
void parallel_for_collect(std::size_t n, int threads,
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

}  // namespace

// ===========================================================================
// SphereGrid

namespace {

// Normalized associated Legendre values Pbar_l^m(cos th) (orthonormal over
// the sphere together with the Fourier factors; no Condon-Shortley sign),
// plus first and second theta-derivatives. Packed index l(l+1)/2 + m, m >= 0.
void legendre_table(int L, double th, std::vector<double>& P, std::vector<double>& Pt,
                    std::vector<double>& Ptt) {
  const double x = std::cos(th), s = std::sin(th);
  auto pm = [](int l, int m) { return std::size_t(l) * (l + 1) / 2 + m; };
  P.assign(pm(L, L) + 1, 0.0);
  Pt.assign(P.size(), 0.0);
  Ptt.assign(P.size(), 0.0);
  P[0] = std::sqrt(1.0 / (4.0 * kPi));
  for (int m = 1; m <= L; ++m)
    P[pm(m, m)] = std::sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * P[pm(m - 1, m - 1)];
  for (int m = 0; m < L; ++m) P[pm(m + 1, m)] = std::sqrt(2.0 * m + 3.0) * x * P[pm(m, m)];
  for (int m = 0; m <= L; ++m)
    for (int l = m + 2; l <= L; ++l) {
      double a = std::sqrt((4.0 * l * l - 1.0) / (double(l) * l - double(m) * m));
      double b = std::sqrt((double(l - 1) * (l - 1) - double(m) * m) /
                           (4.0 * double(l - 1) * (l - 1) - 1.0));
      P[pm(l, m)] = a * (x * P[pm(l - 1, m)] - b * P[pm(l - 2, m)]);
    }
  // d/dth = (l x Pbar_l^m - e_l^m Pbar_{l-1}^m) / sin th; nodes avoid poles
  for (int l = 0; l <= L; ++l)
    for (int m = 0; m <= l; ++m) {
      double e = 0.0, below = 0.0;
      if (l > m) {
        e = std::sqrt((2.0 * l + 1.0) * (double(l) * l - double(m) * m) / (2.0 * l - 1.0));
        below = P[pm(l - 1, m)];
      }
      Pt[pm(l, m)] = (l * x * P[pm(l, m)] - e * below) / s;
      // Legendre ODE: P'' = -cot th P' - (l(l+1) - m^2/sin^2 th) P
      Ptt[pm(l, m)] = -(x / s) * Pt[pm(l, m)] -
                      (double(l) * (l + 1) - double(m) * m / (s * s)) * P[pm(l, m)];
    }
}

}  // namespace

struct SphereGrid::Impl {
  int L = 0;
  std::size_t N = 0, M = 0;
  std::vector<double> th, ph, w;
  std::vector<Vec3> dir;
  std::vector<int> ldeg;  // degree l of each coefficient
  // basis tables at the nodes: values and coordinate derivatives, N x M
  Eigen::MatrixXd Y, Yt, Yp, Ytt, Ytp, Ypp;
  Eigen::MatrixXd F;     // analyze, M x N
  Eigen::MatrixXd Dlap;  // node-space Laplace-Beltrami, N x N

  // one basis row (values + coordinate derivatives) at an arbitrary point
  void basis_row(double t, double p, double* y, double* yt = nullptr, double* yp = nullptr,
                 double* ytt = nullptr, double* ytp = nullptr, double* ypp = nullptr) const {
    std::vector<double> P, Pt, Ptt;
    legendre_table(L, t, P, Pt, Ptt);
    auto pm = [](int l, int m) { return std::size_t(l) * (l + 1) / 2 + m; };
    for (int l = 0; l <= L; ++l)
      for (int m = -l; m <= l; ++m) {
        std::size_t idx = std::size_t(l) * l + std::size_t(m + l);
        int mm = std::abs(m);
        double f, fp, fpp;  // longitude factor and phi-derivatives
        if (m == 0) {
          f = 1.0, fp = 0.0, fpp = 0.0;
        } else if (m > 0) {
          f = std::sqrt(2.0) * std::cos(mm * p);
          fp = -mm * std::sqrt(2.0) * std::sin(mm * p);
          fpp = -double(mm) * mm * f;
        } else {
          f = std::sqrt(2.0) * std::sin(mm * p);
          fp = mm * std::sqrt(2.0) * std::cos(mm * p);
          fpp = -double(mm) * mm * f;
        }
        y[idx] = P[pm(l, mm)] * f;
        if (yt) yt[idx] = Pt[pm(l, mm)] * f;
        if (yp) yp[idx] = P[pm(l, mm)] * fp;
        if (ytt) ytt[idx] = Ptt[pm(l, mm)] * f;
        if (ytp) ytp[idx] = Pt[pm(l, mm)] * fp;
        if (ypp) ypp[idx] = P[pm(l, mm)] * fpp;
      }
  }
};

SphereGrid::SphereGrid(int degree) {
  if (degree < 2) throw std::invalid_argument("SphereGrid: degree must be >= 2");
  auto impl = std::make_shared<Impl>();
  const int L = degree;
  const int nt = L + 1, np = 2 * L + 1;
  impl->L = L;
  impl->N = std::size_t(nt) * np;
  impl->M = std::size_t(L + 1) * (L + 1);

  std::vector<double> xs, ws;
  gauss_legendre(nt, xs, ws);
  impl->th.resize(impl->N);
  impl->ph.resize(impl->N);
  impl->w.resize(impl->N);
  impl->dir.resize(impl->N);
  for (int j = 0; j < nt; ++j) {
    double t = std::acos(std::min(1.0, std::max(-1.0, xs[j])));
    for (int k = 0; k < np; ++k) {
      std::size_t n = std::size_t(j) * np + k;
      double p = 2.0 * kPi * k / np;
      impl->th[n] = t;
      impl->ph[n] = p;
      impl->w[n] = ws[j] * (2.0 * kPi / np);
      impl->dir[n] = {std::sin(t) * std::cos(p), std::sin(t) * std::sin(p), std::cos(t)};
    }
  }
  impl->ldeg.resize(impl->M);
  for (int l = 0; l <= L; ++l)
    for (int m = -l; m <= l; ++m) impl->ldeg[std::size_t(l) * l + (m + l)] = l;

  impl->Y.resize(impl->N, impl->M);
  impl->Yt.resize(impl->N, impl->M);
  impl->Yp.resize(impl->N, impl->M);
  impl->Ytt.resize(impl->N, impl->M);
  impl->Ytp.resize(impl->N, impl->M);
  impl->Ypp.resize(impl->N, impl->M);
  std::vector<double> y(impl->M), yt(impl->M), yp(impl->M), ytt(impl->M), ytp(impl->M),
      ypp(impl->M);
  for (std::size_t n = 0; n < impl->N; ++n) {
    impl->basis_row(impl->th[n], impl->ph[n], y.data(), yt.data(), yp.data(), ytt.data(),
                    ytp.data(), ypp.data());
    for (std::size_t c = 0; c < impl->M; ++c) {
      impl->Y(n, c) = y[c];
      impl->Yt(n, c) = yt[c];
      impl->Yp(n, c) = yp[c];
      impl->Ytt(n, c) = ytt[c];
      impl->Ytp(n, c) = ytp[c];
      impl->Ypp(n, c) = ypp[c];
    }
  }
  // quadrature inverse: F = Y^T diag(w); exact because the quadrature
  // integrates products of two basis functions without error
  impl->F = impl->Y.transpose();
  for (std::size_t n = 0; n < impl->N; ++n) impl->F.col(n) *= impl->w[n];
  Eigen::VectorXd ev(impl->M);
  for (std::size_t c = 0; c < impl->M; ++c)
    ev[c] = -double(impl->ldeg[c]) * (impl->ldeg[c] + 1);
  impl->Dlap = impl->Y * ev.asDiagonal() * impl->F;
  impl_ = std::move(impl);
}

int SphereGrid::degree() const { return impl_->L; }
std::size_t SphereGrid::nodes() const { return impl_->N; }
std::size_t SphereGrid::coeffs() const { return impl_->M; }
double SphereGrid::theta(std::size_t node) const { return impl_->th[node]; }
double SphereGrid::phi(std::size_t node) const { return impl_->ph[node]; }
Vec3 SphereGrid::unit(std::size_t node) const { return impl_->dir[node]; }
double SphereGrid::weight(std::size_t node) const { return impl_->w[node]; }

std::vector<double> SphereGrid::analyze(const std::vector<double>& values) const {
  if (values.size() != impl_->N) throw std::invalid_argument("analyze: size mismatch");
  Eigen::Map<const Eigen::VectorXd> v(values.data(), values.size());
  Eigen::VectorXd c = impl_->F * v;
  return std::vector<double>(c.data(), c.data() + c.size());
}

std::vector<double> SphereGrid::synthesize(const std::vector<double>& coeffs) const {
  if (coeffs.size() != impl_->M) throw std::invalid_argument("synthesize: size mismatch");
  Eigen::Map<const Eigen::VectorXd> c(coeffs.data(), coeffs.size());
  Eigen::VectorXd v = impl_->Y * c;
  return std::vector<double>(v.data(), v.data() + v.size());
}

std::vector<double> SphereGrid::laplacian(const std::vector<double>& values) const {
  if (values.size() != impl_->N) throw std::invalid_argument("laplacian: size mismatch");
  Eigen::Map<const Eigen::VectorXd> v(values.data(), values.size());
  Eigen::VectorXd l = impl_->Dlap * v;
  return std::vector<double>(l.data(), l.data() + l.size());
}

double SphereGrid::eval_at(const std::vector<double>& coeffs, double th, double ph) const {
  if (coeffs.size() != impl_->M) throw std::invalid_argument("eval_at: size mismatch");
  std::vector<double> y(impl_->M);
  impl_->basis_row(th, ph, y.data());
  double acc = 0.0;
  for (std::size_t c = 0; c < impl_->M; ++c) acc += y[c] * coeffs[c];
  return acc;
}

SphereGrid::Derivs SphereGrid::derivatives(const std::vector<double>& values) const {
  if (values.size() != impl_->N) throw std::invalid_argument("derivatives: size mismatch");
  Eigen::Map<const Eigen::VectorXd> v(values.data(), values.size());
  Eigen::VectorXd c = impl_->F * v;
  Eigen::VectorXd ft = impl_->Yt * c;
  Eigen::VectorXd fpr = impl_->Yp * c;   // raw d/dphi
  Eigen::VectorXd htt = impl_->Ytt * c;
  Eigen::VectorXd htp = impl_->Ytp * c;  // raw d2/dth dphi
  Eigen::VectorXd hpp = impl_->Ypp * c;  // raw d2/dphi2
  Eigen::VectorXd lap = impl_->Dlap * v;
  Derivs d;
  d.ft.resize(impl_->N);
  d.fp.resize(impl_->N);
  d.lap.assign(lap.data(), lap.data() + lap.size());
  d.htt.resize(impl_->N);
  d.htp.resize(impl_->N);
  d.hpp.resize(impl_->N);
  for (std::size_t n = 0; n < impl_->N; ++n) {
    double s = std::sin(impl_->th[n]), ct = std::cos(impl_->th[n]) / s;
    d.ft[n] = ft[n];
    d.fp[n] = fpr[n] / s;
    d.htt[n] = htt[n];
    d.htp[n] = (htp[n] - ct * fpr[n]) / s;
    d.hpp[n] = hpp[n] / (s * s) + ct * ft[n];
  }
  return d;
}

// ===========================================================================
// RescaledNeck

RescaledNeck make_neck(std::shared_ptr<const DiscreteField> field, std::size_t i) {
  if (!field) throw std::invalid_argument("make_neck: null field");
  const SourceSet& s = field->sources();
  if (!s.materialized) throw std::invalid_argument("make_neck: set not materialized");
  if (i >= s.entries.size()) throw std::invalid_argument("make_neck: index out of range");
  const SourceEntry& e = s.entries[i];
  if (!(e.alpha > 0.0 && e.beta > 0.0))
    throw std::invalid_argument("make_neck: source needs alpha > 0 and beta > 0");
  RescaledNeck n;
  n.index = int(i);
  n.p = e.p;
  n.alpha = e.alpha;
  n.beta = e.beta;
  n.tau = std::sqrt(e.alpha * e.beta);
  n.sigma = kInf;
  for (std::size_t j = 0; j < s.entries.size(); ++j)
    if (j != i && (s.entries[j].alpha != 0.0 || s.entries[j].beta != 0.0))
      n.sigma = std::min(n.sigma, (s.entries[j].p - e.p).norm());
  NearSourceDecomposition d = near_source(*field, i);
  n.chi_hat = d.chi_hat;
  n.psi_hat = d.psi_hat;
  n.fhat = 1.0 / std::sqrt(n.chi_hat * n.psi_hat);
  n.field = std::move(field);
  return n;
}

RescaledNeck make_neck(const SourceSet& sources, std::size_t i) {
  return make_neck(std::make_shared<const DiscreteField>(sources), i);
}

// ===========================================================================
// lambda_terms

namespace {

// regular parts at x (source `skip` removed): values, gradients, and the
// second radial derivative n.Hess.n of the remaining 1/r potentials
struct RegProbe {
  double chi = 1.0, psi = 1.0;
  Vec3 grad_chi, grad_psi;
  double hnn_chi = 0.0, hnn_psi = 0.0;
};

RegProbe reg_probe(const SourceSet& s, std::size_t skip, const Vec3& x, const Vec3& nhat) {
  RegProbe r;
  for (std::size_t j = 0; j < s.entries.size(); ++j) {
    if (j == skip) continue;
    const SourceEntry& e = s.entries[j];
    if (e.alpha == 0.0 && e.beta == 0.0) continue;
    Vec3 d = x - e.p;
    double r2 = d.norm2();
    if (r2 == 0.0) throw std::domain_error("reg_probe: evaluation point hits a source");
    double rr = std::sqrt(r2);
    double inv = 1.0 / rr, inv3 = inv / r2, inv5 = inv3 / r2;
    double dn = d.dot(nhat);
    double hq = (3.0 * dn * dn - r2) * inv5;  // n.Hess(1/r).n
    r.chi += e.alpha * inv;
    r.psi += e.beta * inv;
    r.grad_chi -= (e.alpha * inv3) * d;
    r.grad_psi -= (e.beta * inv3) * d;
    r.hnn_chi += e.alpha * hq;
    r.hnn_psi += e.beta * hq;
  }
  return r;
}

void check_neck(const RescaledNeck& neck) {
  if (!neck.field || neck.index < 0 || !(neck.tau > 0.0))
    throw std::invalid_argument("horizon: neck is not initialized");
}

}  // namespace

LambdaTerms lambda_terms(const RescaledNeck& neck, const SphereGrid& grid,
                         const std::vector<double>& h) {
  check_neck(neck);
  const std::size_t N = grid.nodes();
  if (h.size() != N) throw std::invalid_argument("lambda_terms: h size mismatch");
  const SourceSet& set = neck.field->sources();
  const double a = std::sqrt(neck.alpha / neck.beta);
  const double b = std::sqrt(neck.beta / neck.alpha);
  LambdaTerms out;
  out.lambda.resize(N);
  out.lambda_hat.resize(N);
  out.dlambda_dh.resize(N);
  out.xi_t.resize(N);
  out.xi_p.resize(N);
  for (std::size_t j = 0; j < N; ++j) {
    double f = neck.fhat * std::exp(h[j]);
    if (!(2.0 * neck.tau * f < neck.sigma))
      throw std::domain_error("lambda_terms: radius leaves the half-separation ball");
    Vec3 nh = grid.unit(j);
    Vec3 x = neck.p + (neck.tau * f) * nh;
    RegProbe rp = reg_probe(set, std::size_t(neck.index), x, nh);
    double chi = rp.chi + a / f, psi = rp.psi + b / f;
    double dfchi = neck.tau * rp.grad_chi.dot(nh) - a / (f * f);
    double dfpsi = neck.tau * rp.grad_psi.dot(nh) - b / (f * f);
    double d2chi = neck.tau * neck.tau * rp.hnn_chi + 2.0 * a / (f * f * f);
    double d2psi = neck.tau * neck.tau * rp.hnn_psi + 2.0 * b / (f * f * f);
    double tc = dfchi / chi, tp = dfpsi / psi;
    out.lambda[j] = -2.0 * f * (tc + tp);
    out.dlambda_dh[j] =
        out.lambda[j] - 2.0 * f * f * (d2chi / chi - tc * tc + d2psi / psi - tp * tp);
    out.lambda_hat[j] =
        (2.0 / f) * (a / (neck.chi_hat + a / f) + b / (neck.psi_hat + b / f));
    double t = grid.theta(j), p = grid.phi(j);
    Vec3 et{std::cos(t) * std::cos(p), std::cos(t) * std::sin(p), -std::sin(t)};
    Vec3 ep{-std::sin(p), std::cos(p), 0.0};
    // sign fixed by the conformal mean-curvature law: the angular reaction
    // enters the graph equation with +2 d(chi psi)/(chi psi)
    out.xi_t[j] = 2.0 * neck.tau * f *
                  (rp.grad_chi.dot(et) / chi + rp.grad_psi.dot(et) / psi);
    out.xi_p[j] = 2.0 * neck.tau * f *
                  (rp.grad_chi.dot(ep) / chi + rp.grad_psi.dot(ep) / psi);
  }
  return out;
}

// ===========================================================================
// solvers

namespace {

double sup_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// residual of the semilinear stage: lap h + Lambda(h) - 2
std::vector<double> semilinear_residual(const RescaledNeck& neck, const SphereGrid& grid,
                                        const std::vector<double>& h, LambdaTerms* lt_out) {
  LambdaTerms lt = lambda_terms(neck, grid, h);
  std::vector<double> r = grid.laplacian(h);
  for (std::size_t j = 0; j < r.size(); ++j) r[j] += lt.lambda[j] - 2.0;
  if (lt_out) *lt_out = std::move(lt);
  return r;
}

// residual of the full radius-graph equation
std::vector<double> graph_residual(const RescaledNeck& neck, const SphereGrid& grid,
                                   const std::vector<double>& h, LambdaTerms* lt_out) {
  LambdaTerms lt = lambda_terms(neck, grid, h);
  SphereGrid::Derivs dv = grid.derivatives(h);
  std::vector<double> r(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) {
    double g2 = dv.ft[j] * dv.ft[j] + dv.fp[j] * dv.fp[j];
    double hess = dv.htt[j] * dv.ft[j] * dv.ft[j] + 2.0 * dv.htp[j] * dv.ft[j] * dv.fp[j] +
                  dv.hpp[j] * dv.fp[j] * dv.fp[j];
    r[j] = dv.lap[j] - hess / (1.0 + g2) + lt.xi_t[j] * dv.ft[j] + lt.xi_p[j] * dv.fp[j] +
           lt.lambda[j] - 2.0;
  }
  if (lt_out) *lt_out = std::move(lt);
  return r;
}

using ResidualFn = std::function<std::vector<double>(const std::vector<double>&, LambdaTerms*)>;

// damped quasi-Newton with J = lap + diag(dLambda/dh); returns iterations
// taken, appends correction sup-norms when asked
int newton_drive(const SphereGrid& grid, const ResidualFn& resid, std::vector<double>& h,
                 double tol, int max_iter, std::vector<double>* corrections,
                 double* final_sup, std::vector<double>* final_resid) {
  const std::size_t N = grid.nodes();
  const Eigen::MatrixXd& Dlap = grid.impl().Dlap;
  LambdaTerms lt;
  std::vector<double> r = resid(h, &lt);
  double sup = sup_abs(r);
  int it = 0, stall = 0;
  while (sup >= tol && it < max_iter) {
    Eigen::MatrixXd J = Dlap;
    for (std::size_t j = 0; j < N; ++j) J(j, j) += lt.dlambda_dh[j];
    Eigen::Map<const Eigen::VectorXd> rv(r.data(), N);
    Eigen::VectorXd delta = J.partialPivLu().solve(-rv);
    double dmax = 0.0;
    for (std::size_t j = 0; j < N; ++j) dmax = std::max(dmax, std::abs(delta[j]));
    // backtracking: largest step with a sufficient residual decrease
    bool accepted = false;
    std::vector<double> trial(N);
    for (double t = 1.0; t >= 1.0 / 64.0; t *= 0.5) {
      for (std::size_t j = 0; j < N; ++j) trial[j] = h[j] + t * delta[j];
      LambdaTerms lt_t;
      std::vector<double> rt;
      try {
        rt = resid(trial, &lt_t);
      } catch (const std::domain_error&) {
        continue;  // step walked out of the safe annulus; shorten
      }
      double sup_t = sup_abs(rt);
      if (sup_t < (1.0 - t / 4.0) * sup || sup_t < tol) {
        h = trial;
        r = std::move(rt);
        lt = std::move(lt_t);
        if (corrections) corrections->push_back(t * dmax);
        sup = sup_t;
        accepted = true;
        break;
      }
    }
    ++it;
    if (!accepted) {
      if (++stall >= 2) break;
    } else {
      stall = 0;
    }
  }
  if (final_sup) *final_sup = sup;
  if (final_resid) *final_resid = std::move(r);
  return it;
}

}  // namespace

SemilinearSolution solve_semilinear(const RescaledNeck& neck, const SphereGrid& grid,
                                    const HorizonOptions& opts) {
  check_neck(neck);
  const std::size_t N = grid.nodes();
  const double ratio =
      neck.sigma == kInf ? 0.0 : (neck.alpha + neck.beta) / neck.sigma;
  if (!(ratio < opts.smallness))
    throw std::invalid_argument(
        "solve_semilinear: (alpha+beta)/sigma exceeds the smallness threshold");
  const double tol = opts.tol_factor / neck.tau;

  SemilinearSolution out;
  // sub/supersolution bracket: constant h = -c must push the reaction above 2
  // and h = +c below it; the working constant is a small multiple of ratio
  if (ratio > 0.0) {
    bool found = false;
    for (double mult : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0}) {
      double c = mult * ratio;
      LambdaTerms lo = lambda_terms(neck, grid, std::vector<double>(N, -c));
      LambdaTerms hi = lambda_terms(neck, grid, std::vector<double>(N, c));
      double lo_min = *std::min_element(lo.lambda.begin(), lo.lambda.end());
      double hi_max = *std::max_element(hi.lambda.begin(), hi.lambda.end());
      if (lo_min - 2.0 > 0.0 && hi_max - 2.0 < 0.0) {
        out.bracket = c;
        found = true;
        break;
      }
    }
    if (!found)
      throw std::runtime_error("solve_semilinear: no sub/supersolution bracket found");
  }

  std::vector<double> h(N, 0.0);
  auto resid = [&](const std::vector<double>& hh, LambdaTerms* lt) {
    return semilinear_residual(neck, grid, hh, lt);
  };
  out.iterations =
      newton_drive(grid, resid, h, tol, opts.max_iter, nullptr, &out.residual, nullptr);
  if (out.residual >= tol)
    throw std::runtime_error("solve_semilinear: stagnated at residual " +
                             fmt_double(out.residual));
  out.h = std::move(h);
  out.sup_norm = sup_abs(out.h);
  SphereGrid::Derivs dv = grid.derivatives(out.h);
  for (std::size_t j = 0; j < N; ++j)
    out.grad_norm = std::max(
        out.grad_norm, std::sqrt(dv.ft[j] * dv.ft[j] + dv.fp[j] * dv.fp[j]));
  return out;
}

HorizonSurface solve_minimal(const RescaledNeck& neck, const SphereGrid& grid,
                             HorizonMode mode, const HorizonOptions& opts) {
  SemilinearSolution sem = solve_semilinear(neck, grid, opts);
  const std::size_t N = grid.nodes();
  const double tol = opts.tol_factor / neck.tau;

  HorizonSurface out;
  out.index = neck.index;
  out.p = neck.p;
  out.tau = neck.tau;
  out.fhat = neck.fhat;
  out.grid = grid;
  out.mode = mode;

  std::vector<double> h = sem.h;
  auto resid = [&](const std::vector<double>& hh, LambdaTerms* lt) {
    return graph_residual(neck, grid, hh, lt);
  };

  bool need_newton = (mode == HorizonMode::newton);
  if (mode == HorizonMode::picard) {
    // linearization constant: sphere average of -dLambda/dh at the
    // semilinear solution (kept constant so Linv is spectral)
    LambdaTerms lt0 = lambda_terms(neck, grid, sem.h);
    double c = 0.0;
    for (std::size_t j = 0; j < N; ++j) c -= grid.weight(j) * lt0.dlambda_dh[j];
    c /= 4.0 * kPi;
    if (!(c > 0.0)) {
      need_newton = true;
      out.fallback = true;
    } else {
      std::vector<double> lap_hs = grid.laplacian(sem.h);
      double prev = kInf;
      for (int it = 0; it < opts.max_iter; ++it) {
        LambdaTerms lt = lambda_terms(neck, grid, h);
        SphereGrid::Derivs dv = grid.derivatives(h);
        // rhs = E(h) - Q(h) with E the graph-vs-semilinear defect and
        // Q the quadratic remainder of the reaction about h_s
        std::vector<double> rhs(N);
        for (std::size_t j = 0; j < N; ++j) {
          double g2 = dv.ft[j] * dv.ft[j] + dv.fp[j] * dv.fp[j];
          double hess = dv.htt[j] * dv.ft[j] * dv.ft[j] +
                        2.0 * dv.htp[j] * dv.ft[j] * dv.fp[j] +
                        dv.hpp[j] * dv.fp[j] * dv.fp[j];
          double ee = hess / (1.0 + g2) - (lt.xi_t[j] * dv.ft[j] + lt.xi_p[j] * dv.fp[j]);
          double qq = lap_hs[j] + lt.lambda[j] - 2.0 + c * (h[j] - sem.h[j]);
          rhs[j] = ee - qq;
        }
        // apply Linv = (lap - c)^(-1) spectrally
        std::vector<double> rc = grid.analyze(rhs);
        const std::vector<int>& ldeg = grid.impl().ldeg;
        for (std::size_t q = 0; q < rc.size(); ++q)
          rc[q] /= -double(ldeg[q]) * (ldeg[q] + 1) - c;
        std::vector<double> upd = grid.synthesize(rc);
        std::vector<double> hn(N);
        for (std::size_t j = 0; j < N; ++j) hn[j] = sem.h[j] + upd[j];
        double dn = 0.0;
        for (std::size_t j = 0; j < N; ++j) dn = std::max(dn, std::abs(hn[j] - h[j]));
        out.correction_norms.push_back(dn);
        ++out.iterations;
        h = std::move(hn);
        std::vector<double> r = resid(h, nullptr);
        out.residual = sup_abs(r);
        if (out.residual < tol) {
          out.residual_field = std::move(r);
          break;
        }
        if (dn >= prev) {  // not contracting; hand off
          std::fprintf(stderr,
                       "warning: picard iteration not contracting for source %d; "
                       "switching to newton\n",
                       neck.index);
          need_newton = true;
          out.fallback = true;
          break;
        }
        prev = dn;
      }
      if (out.residual_field.empty() && !need_newton && out.residual >= tol) {
        need_newton = true;  // ran out of iterations
        out.fallback = true;
      }
    }
  }

  if (need_newton) {
    out.iterations += newton_drive(grid, resid, h, tol, opts.max_iter,
                                   &out.correction_norms, &out.residual, &out.residual_field);
    if (out.residual >= tol) {
      // residual plateau: retry once on a grid with twice the degree
      if (grid.degree() <= 24)
        return solve_minimal(neck, SphereGrid(2 * grid.degree()), mode, opts);
      throw std::runtime_error("solve_minimal: stagnated at residual " +
                               fmt_double(out.residual));
    }
  }

  out.h = std::move(h);
  out.S.resize(N);
  for (std::size_t j = 0; j < N; ++j)
    out.S[j] = neck.tau * neck.fhat * std::exp(out.h[j]);
  double mean = 0.0;
  for (std::size_t j = 0; j < N; ++j) mean += grid.weight(j) * out.S[j];
  out.mean_radius = mean / (4.0 * kPi);
  // area of the graph in the curved metric: (chi psi)^2 S^2 sqrt(1 + |dh|^2)
  SphereGrid::Derivs dv = grid.derivatives(out.h);
  double area = 0.0;
  for (std::size_t j = 0; j < N; ++j) {
    Vec3 x = out.p + out.S[j] * grid.unit(j);
    FieldSample fs = neck.field->eval(x);
    double g2 = dv.ft[j] * dv.ft[j] + dv.fp[j] * dv.fp[j];
    area += grid.weight(j) * (fs.chi * fs.psi) * (fs.chi * fs.psi) * out.S[j] * out.S[j] *
            std::sqrt(1.0 + g2);
  }
  out.area = area;
  return out;
}

std::vector<HorizonSurface> solve_all(const SourceSet& sources, const SphereGrid& grid,
                                      HorizonMode mode, const HorizonOptions& opts) {
  auto field = std::make_shared<const DiscreteField>(sources);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < sources.entries.size(); ++i)
    if (sources.entries[i].alpha > 0.0 && sources.entries[i].beta > 0.0) idx.push_back(i);
  std::vector<HorizonSurface> out(idx.size());
  parallel_for_collect(idx.size(), int(hw_threads()), [&](std::size_t k) {
    RescaledNeck neck = make_neck(field, idx[k]);
    out[k] = solve_minimal(neck, grid, mode, opts);
  });
  return out;
}

// ===========================================================================
// coordinate-sphere mean curvature and foliation scans

namespace {

CurvatureField mean_curv_impl(const DiscreteField& field, std::size_t i, double rho,
                              const SphereGrid& grid) {
  const SourceSet& s = field.sources();
  if (!s.materialized || i >= s.entries.size())
    throw std::invalid_argument("mean_curvature_sphere: bad source index");
  if (!(rho > 0.0)) throw std::invalid_argument("mean_curvature_sphere: rho must be > 0");
  const SourceEntry& e = s.entries[i];
  for (std::size_t j = 0; j < s.entries.size(); ++j)
    if (j != i && (s.entries[j].alpha != 0.0 || s.entries[j].beta != 0.0) &&
        !(rho < (s.entries[j].p - e.p).norm()))
      throw std::domain_error("mean_curvature_sphere: sphere reaches another source");
  const std::size_t N = grid.nodes();
  CurvatureField out;
  out.rho = rho;
  out.H.resize(N);
  for (std::size_t j = 0; j < N; ++j) {
    Vec3 nh = grid.unit(j);
    Vec3 x = e.p + rho * nh;
    FieldSample fs = field.eval(x, int(i));  // regular parts around source i
    double gcn = fs.grad_chi.dot(nh), gpn = fs.grad_psi.dot(nh);
    double rhs = gcn * fs.psi + fs.chi * gpn +
                 (fs.chi * fs.psi + e.alpha * gpn + e.beta * gcn) / rho -
                 e.alpha * e.beta / (rho * rho * rho);
    double chi = fs.chi + e.alpha / rho, psi = fs.psi + e.beta / rho;
    out.H[j] = 2.0 * rhs / ((chi * psi) * (chi * psi));
  }
  out.min = *std::min_element(out.H.begin(), out.H.end());
  out.max = *std::max_element(out.H.begin(), out.H.end());
  out.sign_class = out.max < 0.0 ? -1 : (out.min > 0.0 ? 1 : 0);
  return out;
}

}  // namespace

CurvatureField mean_curvature_sphere(const SourceSet& sources, std::size_t i, double rho,
                                     const SphereGrid& grid) {
  DiscreteField field(sources);
  return mean_curv_impl(field, i, rho, grid);
}

FoliationScan foliation_scan(const SourceSet& sources, std::size_t i, double rho_min,
                             double rho_max, int samples, const SphereGrid& grid) {
  if (!(rho_min > 0.0) || !(rho_max > rho_min) || samples < 2)
    throw std::invalid_argument("foliation_scan: bad radius window");
  DiscreteField field(sources);
  FoliationScan out;
  out.rho.resize(samples);
  for (int k = 0; k < samples; ++k)
    out.rho[k] = rho_min + (rho_max - rho_min) * k / (samples - 1);
  std::vector<CurvatureField> per(samples);
  parallel_for_collect(std::size_t(samples), int(hw_threads()), [&](std::size_t k) {
    per[k] = mean_curv_impl(field, i, out.rho[k], grid);
  });
  out.hmin.resize(samples);
  out.hmax.resize(samples);
  out.sign_class.resize(samples);
  for (int k = 0; k < samples; ++k) {
    out.hmin[k] = per[k].min;
    out.hmax[k] = per[k].max;
    out.sign_class[k] = per[k].sign_class;
  }
  // largest all-negative prefix and all-positive suffix bracket the rest
  int first_nonneg = 0;
  while (first_nonneg < samples && out.sign_class[first_nonneg] == -1) ++first_nonneg;
  int last_nonpos = samples - 1;
  while (last_nonpos >= 0 && out.sign_class[last_nonpos] == 1) --last_nonpos;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.rho_minus = first_nonneg > 0 ? out.rho[first_nonneg - 1] : nan;
  out.rho_plus = last_nonpos < samples - 1 ? out.rho[last_nonpos + 1] : nan;
  out.all_positive = true;
  for (int k = 0; k < samples; ++k)
    if (out.sign_class[k] != 1) out.all_positive = false;
  if (out.all_positive) out.rho_plus = out.rho[0];
  return out;
}

DilatedSign dilated_mean_curvature(const SourceSet& sources, const HorizonSurface& surface,
                                   double k) {
  if (!(k > 0.0)) throw std::invalid_argument("dilated_mean_curvature: k must be > 0");
  if (surface.S.empty())
    throw std::invalid_argument("dilated_mean_curvature: surface is not solved");
  DiscreteField field(sources);
  const SphereGrid& grid = surface.grid;
  const std::size_t N = grid.nodes();
  std::vector<double> W(N);
  double wmax = 0.0;
  for (std::size_t j = 0; j < N; ++j) {
    W[j] = k * surface.S[j];
    wmax = std::max(wmax, W[j]);
  }
  for (std::size_t j = 0; j < sources.entries.size(); ++j)
    if (int(j) != surface.index &&
        (sources.entries[j].alpha != 0.0 || sources.entries[j].beta != 0.0) &&
        !(wmax < (sources.entries[j].p - surface.p).norm()))
      throw std::domain_error("dilated_mean_curvature: dilated surface reaches a source");
  SphereGrid::Derivs dv = grid.derivatives(W);
  DilatedSign out;
  out.k = k;
  out.min = kInf;
  out.max = -kInf;
  for (std::size_t j = 0; j < N; ++j) {
    double wt = dv.ft[j], wp = dv.fp[j];
    double g2 = wt * wt + wp * wp;
    double q = W[j] * W[j] + g2;
    double hess = dv.htt[j] * wt * wt + 2.0 * dv.htp[j] * wt * wp + dv.hpp[j] * wp * wp;
    double e3 = dv.lap[j] - hess / q - (2.0 + g2 / q) * W[j];
    double h_flat = -e3 / (W[j] * std::sqrt(q));  // graph mean curvature
    double t = grid.theta(j), p = grid.phi(j);
    Vec3 nh = grid.unit(j);
    Vec3 et{std::cos(t) * std::cos(p), std::cos(t) * std::sin(p), -std::sin(t)};
    Vec3 ep{-std::sin(p), std::cos(p), 0.0};
    Vec3 x = surface.p + W[j] * nh;
    FieldSample fs = field.eval(x);
    double cp = fs.chi * fs.psi;
    Vec3 gcp = fs.grad_chi * fs.psi + fs.grad_psi * fs.chi;
    Vec3 nrm = (W[j] * nh - wt * et - wp * ep) / std::sqrt(q);
    double h = h_flat / cp + 2.0 * gcp.dot(nrm) / (cp * cp);
    out.min = std::min(out.min, h);
    out.max = std::max(out.max, h);
  }
  out.sign_class = out.max < 0.0 ? -1 : (out.min > 0.0 ? 1 : 0);
  return out;
}

// ===========================================================================
// dumps

std::string horizon_csv(const HorizonSurface& surface) {
  std::string out = "theta,phi,S,resid\n";
  for (std::size_t j = 0; j < surface.S.size(); ++j) {
    out += fmt_double(surface.grid.theta(j));
    out += ',';
    out += fmt_double(surface.grid.phi(j));
    out += ',';
    out += fmt_double(surface.S[j]);
    out += ',';
    out += fmt_double(surface.residual_field.empty() ? 0.0 : surface.residual_field[j]);
    out += '\n';
  }
  return out;
}

std::string horizon_json(const HorizonSurface& surface) {
  std::string out = "{\"i\": " + std::to_string(surface.index);
  out += ", \"tau\": " + fmt_double(surface.tau);
  out += ", \"fhat\": " + fmt_double(surface.fhat);
  out += ", \"mean_radius\": " + fmt_double(surface.mean_radius);
  out += ", \"area\": " + fmt_double(surface.area);
  out += ", \"resid\": " + fmt_double(surface.residual);
  out += ", \"iters\": " + std::to_string(surface.iterations);
  out += std::string(", \"mode\": \"") +
         (surface.mode == HorizonMode::picard ? "picard" : "newton") + "\"";
  out += std::string(", \"fallback\": ") + (surface.fallback ? "true" : "false");
  out += "}";
  return out;
}

}  // namespace blris
