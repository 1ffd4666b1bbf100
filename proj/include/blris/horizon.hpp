#pragma once

#include <memory>
#include <string>
#include <vector>

#include "blris/cloud.hpp"
#include "blris/fields.hpp"
#include "blris/vec3.hpp"

namespace blris {

// ---------------------------------------------------------------------------
// Collocation grid on S^2: Gauss-Legendre colatitudes x uniform longitudes,
// (L+1)(2L+1) nodes, with a real orthonormal spherical-harmonic basis through
// degree L ((L+1)^2 functions). The quadrature integrates products of basis
// functions exactly, so analyze/synthesize round-trip band-limited data to
// rounding. Copies share the underlying tables.
class SphereGrid {
 public:
  explicit SphereGrid(int degree);  // degree >= 2

  int degree() const;
  std::size_t nodes() const;
  std::size_t coeffs() const;
  double theta(std::size_t node) const;
  double phi(std::size_t node) const;
  Vec3 unit(std::size_t node) const;      // outward radial direction
  double weight(std::size_t node) const;  // quadrature weight; sums to 4 pi

  std::vector<double> analyze(const std::vector<double>& values) const;
  std::vector<double> synthesize(const std::vector<double>& coeffs) const;
  // Laplace-Beltrami via the basis eigenvalues -l(l+1)
  std::vector<double> laplacian(const std::vector<double>& values) const;
  // point evaluation of a coefficient vector anywhere on the sphere
  double eval_at(const std::vector<double>& coeffs, double th, double ph) const;

  // Tangent-frame (e_theta, e_phi) derivative fields of a node function.
  // htt + hpp == lap (the frame Hessian traces to the Laplacian).
  struct Derivs {
    std::vector<double> ft, fp;       // frame gradient components
    std::vector<double> lap;          // Laplace-Beltrami
    std::vector<double> htt, htp, hpp;  // frame Hessian components
  };
  Derivs derivatives(const std::vector<double>& values) const;

  struct Impl;
  const Impl& impl() const { return *impl_; }

 private:
  std::shared_ptr<const Impl> impl_;
};

// ---------------------------------------------------------------------------
// Rescaled picture around source i with alpha_i beta_i > 0: the dilation
// u -> p_i + tau u, tau = sqrt(alpha_i beta_i), turns the neck into an O(1)
// annulus. The pulled-back factor splits as
//   chi_r(u) = [regular part at p_i + tau u] + sqrt(alpha_i/beta_i)/|u|,
// and freezing the regular part at u=0 gives the model with minimal sphere
// |u| = fhat = (chi_hat psi_hat)^{-1/2} <= 1.
struct RescaledNeck {
  int index = -1;
  Vec3 p;
  double alpha = 0.0, beta = 0.0;
  double tau = 0.0;     // sqrt(alpha beta) > 0
  double sigma = kInf;  // distance to the nearest other source
  double chi_hat = 1.0, psi_hat = 1.0;
  double fhat = 1.0;
  std::shared_ptr<const DiscreteField> field;
};
RescaledNeck make_neck(std::shared_ptr<const DiscreteField> field, std::size_t i);
RescaledNeck make_neck(const SourceSet& sources, std::size_t i);

// ---------------------------------------------------------------------------
// Reaction terms of the radius-graph equation on the rescaled neck, sampled
// at grid nodes for the log-radius field h (radius f = fhat e^h):
//   Lambda(h)   = -2 f (d_f chi_r / chi_r + d_f psi_r / psi_r),
//   Xi(h)       = +2 (d_S2 chi_r / chi_r + d_S2 psi_r / psi_r)  (frame comps),
// lambda_hat is the frozen-coefficient closed form (== 2 at h = 0 for an
// isolated source), and dlambda_dh the analytic h-derivative of Lambda.
struct LambdaTerms {
  std::vector<double> lambda;
  std::vector<double> lambda_hat;
  std::vector<double> dlambda_dh;
  std::vector<double> xi_t, xi_p;
};
LambdaTerms lambda_terms(const RescaledNeck& neck, const SphereGrid& grid,
                         const std::vector<double>& h);

// ---------------------------------------------------------------------------
// Solver knobs. Solves require (alpha+beta)/sigma < smallness; the residual
// target is tol_factor / tau, i.e. 1e-8 of the physical radius scale.
struct HorizonOptions {
  double smallness = 0.05;
  double tol_factor = 1e-8;
  int max_iter = 80;
};

// Semilinear stage: lap h + Lambda(h) - 2 = 0 by damped Newton from h = 0.
// bracket is the smallest tested constant c (a multiple of (alpha+beta)/sigma)
// with Lambda(-c) - 2 > 0 > Lambda(c) - 2 pointwise; 0 for isolated sources.
struct SemilinearSolution {
  std::vector<double> h;
  double sup_norm = 0.0;
  double grad_norm = 0.0;  // L2 norm of the nonconstant modes
  double bracket = 0.0;
  double residual = 0.0;
  int iterations = 0;
};
SemilinearSolution solve_semilinear(const RescaledNeck& neck, const SphereGrid& grid,
                                    const HorizonOptions& opts = {});

// ---------------------------------------------------------------------------
// Full radius-graph solve. picard iterates the contraction
//   h <- h_s + Linv((R - T)(h) - Q(h)),   L = lap - c,  c = -avg dLambda/dh,
// around the semilinear solution h_s and falls back to newton if a step fails
// to contract; newton solves the full equation with a damped quasi-Newton
// using lap + diag(dLambda/dh). The grid is retained on the result so the
// surface can be re-expanded without outside bookkeeping.
enum class HorizonMode { picard, newton };

struct HorizonSurface {
  int index = -1;
  Vec3 p;
  double tau = 0.0, fhat = 1.0;
  SphereGrid grid{2};  // replaced by the grid the solve ran on
  std::vector<double> h;              // log radius deviation at nodes
  std::vector<double> S;              // physical radius tau fhat e^h
  std::vector<double> residual_field;  // pointwise equation residual
  double residual = 0.0;              // sup norm of residual_field
  double mean_radius = 0.0;           // quadrature average of S
  double area = 0.0;                  // area in the ambient curved metric
  std::vector<double> correction_norms;  // per-step sup corrections
  HorizonMode mode = HorizonMode::newton;
  bool fallback = false;  // picard handed off to newton
  int iterations = 0;
};
HorizonSurface solve_minimal(const RescaledNeck& neck, const SphereGrid& grid,
                             HorizonMode mode, const HorizonOptions& opts = {});

// All sources with alpha beta > 0, solved in parallel (one thread per solve).
std::vector<HorizonSurface> solve_all(const SourceSet& sources, const SphereGrid& grid,
                                      HorizonMode mode, const HorizonOptions& opts = {});

// ---------------------------------------------------------------------------
// Mean curvature of the coordinate sphere |x - p_i| = rho in the curved
// metric, outward normal, evaluated analytically from the split into the
// regular part and the central 1/r terms:
//   (chi psi)^2 H / 2 = grad(chi_r psi_r).N
//     + (chi_r psi_r + alpha grad psi_r.N + beta grad chi_r.N)/rho
//     - alpha beta / rho^3.
struct CurvatureField {
  double rho = 0.0;
  std::vector<double> H;
  double min = 0.0, max = 0.0;
  int sign_class = 0;  // -1: max < 0; +1: min > 0; 0 otherwise
};
CurvatureField mean_curvature_sphere(const SourceSet& sources, std::size_t i,
                                     double rho, const SphereGrid& grid);

// Sign classes of coordinate spheres across a radius window. rho_minus is the
// last radius of the all-negative prefix and rho_plus the first radius of the
// all-positive suffix (NaN when the prefix/suffix is empty), so mixed-sign
// radii lie in (rho_minus, rho_plus). all_positive certifies a horizonless
// end: every scanned sphere has strictly positive mean curvature.
struct FoliationScan {
  std::vector<double> rho;
  std::vector<double> hmin, hmax;
  std::vector<int> sign_class;
  double rho_minus = 0.0, rho_plus = 0.0;
  bool all_positive = false;
};
FoliationScan foliation_scan(const SourceSet& sources, std::size_t i, double rho_min,
                             double rho_max, int samples, const SphereGrid& grid);

// Sign summary of the mean curvature of the dilated surface k S_i, computed
// from the graph mean-curvature expression plus the conformal normal term.
struct DilatedSign {
  double k = 1.0;
  double min = 0.0, max = 0.0;
  int sign_class = 0;
};
DilatedSign dilated_mean_curvature(const SourceSet& sources, const HorizonSurface& surface,
                                   double k);

// ---------------------------------------------------------------------------
// Dumps: per-node CSV `theta,phi,S,resid` and a one-line JSON summary.
std::string horizon_csv(const HorizonSurface& surface);
std::string horizon_json(const HorizonSurface& surface);

}  // namespace blris
