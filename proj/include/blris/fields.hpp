#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "blris/cloud.hpp"
#include "blris/profiles.hpp"
#include "blris/vec3.hpp"

namespace blris {

// ---------------------------------------------------------------------------
// A field evaluation at one point. chi/psi and their gradients are always
// populated; the curvature and density slots are populated for continuum
// evaluations (where the densities are known pointwise) and by
// scal_and_densities. The electric-field norm is computable from the factors
// alone: |E|^2 = (chi psi)^-2 |grad chi/chi - grad psi/psi|^2.
struct FieldSample {
  Vec3 x;
  double chi = 1.0, psi = 1.0;
  Vec3 grad_chi, grad_psi;
  double e_norm_sq = 0.0;    // |E|^2 in the curved metric
  double scal = 0.0;         // scalar curvature of (chi psi)^2 * flat
  double rho_mass = 0.0, rho_el = 0.0;          // curved-volume densities
  double rho_bar_mass = 0.0, rho_bar_el = 0.0;  // flat 3-form densities
  double div_e = 0.0;

  double u() const { return chi * psi; }              // conformal factor
  double metric_scale() const { return u() * u(); }   // multiplies the flat metric
};

// Constraint quantities at a point with densities A, B:
//   Scal   = 16 pi (chi psi)^-3 (A psi + B chi) + 2|E|^2
//   div E  = -4 pi (chi psi)^-3 (A psi - B chi)
//   rho    = (chi psi)^-3 (A psi ± B chi),  rho_bar = psi A ± chi B
struct Constraints {
  double scal = 0.0;
  double rho_mass = 0.0, rho_el = 0.0;
  double rho_bar_mass = 0.0, rho_bar_el = 0.0;
  double e_norm_sq = 0.0;
  double div_e = 0.0;
};
Constraints scal_and_densities(double chi, double psi, const Vec3& grad_chi,
                               const Vec3& grad_psi, double a_val, double b_val);

// ---------------------------------------------------------------------------
// Discrete superposition chi_n = 1 + sum alpha_j / |x - p_j| (psi_n analogous),
// with term-wise gradients. `exclude` omits one source, which evaluated at that
// source's location gives the regular part chi^(i). Tree acceleration opens
// octree nodes until both the geometric ratio (node size / distance <= theta)
// and a second-moment error bound pass; it matches direct summation to 1e-6
// in the factors (which are >= 1). Exclusion always takes the direct path.
enum class Accel { direct, tree };

class DiscreteField {
 public:
  explicit DiscreteField(const SourceSet& sources);  // requires a materialized set
  FieldSample eval(const Vec3& x, int exclude = -1, Accel accel = Accel::direct,
                   double theta = 0.3) const;
  const SourceSet& sources() const { return set_; }

 private:
  struct Tree;
  void ensure_tree() const;
  SourceSet set_;
  mutable std::shared_ptr<const Tree> tree_;  // built once, then read-only
};

FieldSample eval_discrete(const SourceSet& sources, const Vec3& x, int exclude = -1,
                          Accel accel = Accel::direct, double theta = 0.3);

// ---------------------------------------------------------------------------
// Continuum factors chi = 1 + int A(y)/|x-y| dvol and psi (from B). Radial
// densities make the Newtonian reduction exact:
//   chi(x) = 1 + 4 pi [ (1/r) int_0^r s^2 A ds + int_r^inf s A ds ],  r = |x|,
// with grad chi = -4 pi (int_0^r s^2 A ds) x / r^3. Quadrature is adaptive
// with splits at the support edge; tol is a relative tolerance >= 1e-10.
FieldSample eval_continuum(const DustCloud& cloud, const Vec3& x, double tol = 1e-10);

// ---------------------------------------------------------------------------
// Mass and charge functionals. All from closed-form finite sums:
//   m_adm = sum (alpha_i + beta_i),  q_total = sum (beta_i - alpha_i)
//   m_i = alpha_i + beta_i + sum_{j != i} (alpha_j beta_i + alpha_i beta_j)/|p_j - p_i|
//   q_i = beta_i - alpha_i + sum_{j != i} (alpha_j beta_i - alpha_i beta_j)/|p_j - p_i|
//   (so an end with beta_i = 0 has m_i = -q_i exactly)
// Charge is exactly additive; interaction energy m_adm - sum m_i is <= 0.
struct ChargeReport {
  double m_adm = 0.0, q_total = 0.0;
  std::vector<double> m_i, q_i;  // empty when per-end sums were skipped
  double interaction_energy = 0.0;
};
// per_end enables the O(N^2) per-end sums (skipped above 32768 sources).
ChargeReport masses_charges(const SourceSet& sources, bool per_end = true);

// ---------------------------------------------------------------------------
// Regular parts at a source: chi^(i)(x) = chi_n(x) - alpha_i/|x - p_i| is
// finite at p_i; its frozen value chi_hat >= 1 controls the neck geometry.
struct NearSourceDecomposition {
  int index = -1;
  Vec3 p;
  double alpha = 0.0, beta = 0.0;
  double chi_hat = 1.0, psi_hat = 1.0;
};
NearSourceDecomposition near_source(const DiscreteField& field, int i);

// ---------------------------------------------------------------------------
// Sup-norm deviations between the discrete and continuum factors over a
// sample set. Value deviations exclude balls B(p_i, D/n^2); gradient
// deviations exclude B(p_i, D n^-nu) with 1 < nu < 3/2 (validated). The
// near-source variant measures sup over probes in B(p_i, D/(2n)) of
// |chi^(i) - chi| using the excluded sum.
struct DeviationReport {
  int n = 0;
  double nu = 0.0;
  double sup_chi = 0.0, sup_psi = 0.0;
  double sup_grad_chi = 0.0, sup_grad_psi = 0.0;
  double near_chi = 0.0, near_psi = 0.0;
  std::int64_t value_points = 0, grad_points = 0;
};
DeviationReport deviation_report(const SourceSet& sources,
                                 const std::vector<Vec3>& samples, double nu);

// Max finite-difference second-derivative magnitude of chi_n and psi_n over
// probes kept outside every ball B(p_i, c D/n), 0 < c < 1/2. Probes sit just
// outside the excision spheres (where the bound is tightest) plus a fixed
// deterministic bulk sample.
double hessian_bound_probe(const SourceSet& sources, double c_fraction,
                           int max_probe_sources = 512, std::uint64_t seed = 0);

// Sampled factors obey chi_n + psi_n <= this envelope at admissible points:
// 2 + 1600 (|A| D^2 + |B| D^2 + (c_alpha + c_beta)/D).
double uniform_factor_bound(const SourceSet& sources);

// ---------------------------------------------------------------------------
// Radial solve of the coupled constraint system
//   psi * lap chi = -2 pi (rho_bar_mass + rho_bar_el)
//   chi * lap psi = -2 pi (rho_bar_mass - rho_bar_el)
// by Picard iteration of the explicit Green representation
//   u(r) = (1/r) int_0^r 4 pi s^2 f ds + int_r^inf 4 pi s f ds,  lap u = -4 pi f,
// boundary value 1 at infinity. The reported residuals are the sup defect of
// the integral form (zero exactly at the true solution); fd_residual is an
// independent centered-difference recomputation of the first equation.
struct RadialCloudSolution {
  std::vector<double> r;
  std::vector<double> chi, psi;
  std::vector<double> rho_bar_mass, rho_bar_el;
  double residual_chi = 0.0, residual_psi = 0.0;
  double fd_residual = 0.0;
  int iterations = 0;
};
RadialCloudSolution solve_radial_cloud(const std::function<double(double)>& rho_bar_mass,
                                       const std::function<double(double)>& rho_bar_el,
                                       double support, double r_max, int nodes);

// Densities back from sampled radial factors by centered second differences:
// A = -lap chi / 4 pi, B = -lap psi / 4 pi on the interior nodes. min_a/min_b
// flag recovered negativity beyond discretization noise.
struct RecoveredDensities {
  std::vector<double> r;
  std::vector<double> A, B;
  double min_a = 0.0, min_b = 0.0;
};
RecoveredDensities recover_AB(const std::vector<double>& r, const std::vector<double>& chi,
                              const std::vector<double>& psi);

// ---------------------------------------------------------------------------
// CSV dumps
std::string field_csv(const std::vector<FieldSample>& samples);
std::string radial_csv(const RadialCloudSolution& sol);

}  // namespace blris
