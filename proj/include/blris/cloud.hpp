#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "blris/profiles.hpp"
#include "blris/util.hpp"
#include "blris/vec3.hpp"

namespace blris {

// ---------------------------------------------------------------------------
// A dust cloud: two nonnegative radial densities A, B supported inside the
// cube [-D,D]^3 (enforced: support radius <= D), with dense-sampled sup norms.
struct DustCloud {
  double D = 1.0;
  Profile A, B;
  double norm_a = 0.0, norm_b = 0.0;    // sup |A|, sup |B|
  double dnorm_a = 0.0, dnorm_b = 0.0;  // sup |dA|, sup |dB|

  static DustCloud make(double half_width, const Profile& a, const Profile& b);
  std::string to_json() const;
  static DustCloud from_json_text(const std::string& text);
};

// ---------------------------------------------------------------------------
// Subdivision of [-D,D]^3 into (2n)^3 cells of side D/n. Cell indices run
// -n <= k < n per axis; the cell (kx,ky,kz) spans [k/n, (k+1)/n]*D per axis
// and its center is ((k+1/2)/n)*D. Centers never hit the origin and satisfy
// |p| > (D/n)/2. Enumeration is lexicographic in (kx,ky,kz).
struct Grid {
  double D = 1.0;
  int n = 1;

  double cell_side() const { return D / n; }
  double sigma() const { return D / n; }  // nearest-center separation
  std::int64_t num_cells() const { return 8LL * n * n * n; }
  Vec3 center(int kx, int ky, int kz) const;
  std::int64_t linear_index(int kx, int ky, int kz) const;
  // closed-cell membership with absolute slack tol*D per coordinate
  bool contains_closed(int kx, int ky, int kz, const Vec3& q, double tol = 1e-12) const;
  std::vector<Vec3> centers() const;  // materialized, lexicographic
};

Grid subdivide(const DustCloud& cloud, int n);

// ---------------------------------------------------------------------------
// Per-cell replacement of the default sample rule: either explicit sample
// points qa (for alpha) / qb (for beta), or verbatim parameter values.
struct Override {
  int kx = 0, ky = 0, kz = 0;
  bool has_qa = false, has_qb = false;
  Vec3 qa, qb;
  bool has_alpha = false, has_beta = false;
  double alpha = 0.0, beta = 0.0;
};

// Parameter-assignment scheme. `midpoint` samples profiles at cell centers;
// `sample_jitter` displaces the sample point by jitter*(cell side/2) per
// coordinate, drawn deterministically from (seed, cell index); `shallow`
// applies the three-branch well-flattening rule with parameter lambda.
// Presets expand, per resolution n, to one sample-point override at the cell
// (n-1,0,0) touching the face x=D:
//   corner_pair : qa=((1-1/(2n)+3 ln n/(2n^2))D, l1*D/(2n), 0),
//                 qb=((1-1/(2n))D,               l2*D/(2n), 0)
//   edge_sample : qa=qb=((1-l1/(2n^3))D, 0, 0)
// Overrides and presets apply to midpoint/sample_jitter only.
struct SchemeSpec {
  enum class Kind { midpoint, sample_jitter, shallow };
  Kind kind = Kind::midpoint;
  double jitter = 0.0;       // fraction of half cell side, in [0,1]
  std::uint64_t seed = 0;
  double lambda = 0.0;       // shallow branch parameter, in (0,1]
  std::string preset;        // "", "corner_pair", "edge_sample"
  double preset_l1 = 0.0, preset_l2 = 0.0;
  std::vector<Override> overrides;

  std::string tag() const;
  // literal overrides + expanded preset for this n; validates containment
  std::vector<Override> resolved_overrides(int n, double D) const;
  std::string to_json() const;
  static SchemeSpec from_json_text(const std::string& text);
};

// ---------------------------------------------------------------------------
// Exact per-cell parameters in log form. `alpha`/`beta` carry ln-values that
// survive astronomically small densities (the composed profiles reach
// ln(value) ~ -e^2000 near the support edge). The stored source location is
// always the cell center; sample points only change the parameter values.
struct CellParams {
  Vec3 p;
  LogPair alpha, beta;
  // double view computed as a direct value product (never exp of a log sum,
  // which would cost the last ulp); 0.0 when the value underflows
  double alpha_value = 0.0, beta_value = 0.0;
  bool dropped = false;  // both parameters exactly zero
  // diagnostics for deviation constants and well-depth terms
  double mid_a = 0.0, mid_b = 0.0;   // midpoint values (double view)
  bool default_midpoint = true;      // sample point is the center, no overrides
  bool sampled_a = false, sampled_b = false;  // value came from a shifted sample
  bool same_q = true;                // alpha and beta share one sample point
  LogPair a_base_q;                  // ln base(q_a) when A is a composed family
};

CellParams cell_params(const Grid& grid, const DustCloud& cloud,
                       const SchemeSpec& scheme, int kx, int ky, int kz);

// ---------------------------------------------------------------------------
// The assigned point sources. Entries hold double-precision parameter values
// (astronomically small ones underflow to 0; `charged` preserves the exact
// alpha*beta>0 predicate). Sets larger than the materialization cap keep no
// entry list and answer diagnostics through their provenance instead.
struct SourceEntry {
  Vec3 p;
  double alpha = 0.0, beta = 0.0;
  int kx = 0, ky = 0, kz = 0;
  bool charged = false;  // alpha*beta > 0 (exact predicate, not the doubles)
};

inline constexpr std::int64_t kMaterializeCap = std::int64_t(1) << 21;

struct SourceSet {
  double D = 1.0;
  int n = 1;
  std::string scheme_tag;
  bool materialized = true;
  bool has_provenance = true;
  std::vector<SourceEntry> entries;  // empty when not materialized
  DustCloud cloud;                   // provenance (valid when has_provenance)
  SchemeSpec scheme;
  double c_alpha = 0.0, c_beta = 0.0;  // sup_i n^4 |par_i - P(p_i) (D/n)^3|
  std::int64_t retained = 0;           // cells with alpha+beta > 0
  bool any_half_zero = false;          // some retained cell has alpha*beta = 0

  double sigma() const { return D / n; }
  std::string to_csv() const;  // px,py,pz,alpha,beta (materialized only)
  static SourceSet from_csv(const std::string& text, double D, int n);
};

SourceSet assign_parameters(const Grid& grid, const DustCloud& cloud,
                            const SchemeSpec& scheme);

// Three-branch well-flattening rule (parameter lambda in (0,1], rejects
// lambda <= 0). Per cell, with a=A(p)D^2, b=B(p)D^2 at the midpoint:
//   (1) a*b != 0 and a|ln b| + b|ln a| <= 2n^2  -> midpoint values
//   (2) otherwise, a <= lambda/n and b <= lambda/n -> alpha = beta = 0
//   (3) otherwise -> smaller parameter replaced by lambda*D/n^4, other midpoint
// Output deviation constants satisfy C(alpha,A), C(beta,B) <= lambda*D.
SourceSet shallow_adjust(const Grid& grid, const DustCloud& cloud, double lambda);

// ---------------------------------------------------------------------------
// Well-depth diagnostics. For a source with parameters (alpha, beta):
//   ell = (1/D)(alpha+beta) |ln(alpha beta / D^2)|
// with ell = +inf when exactly one parameter vanishes, 0 when both do.
double well_ell(const LogPair& alpha, const LogPair& beta, double D);

struct WellRecord {
  int kx = 0, ky = 0, kz = 0;
  double ell = 0.0;
  double cross = 0.0;  // (beta/D) |ln(alpha n^3 / D)|, the half-well depth term
};

struct WellProfile {
  std::vector<double> per_source;  // aligned with entries (materialized only)
  double ell_max = 0.0;
  bool has_infinite = false;
  WellRecord argmax;
  double cross_max = 0.0;
  std::string classification;  // "deep" (some ell=inf) or "bounded"
};

WellProfile well_profile(const SourceSet& sources);

// Largest attained |center|^2/(D/(2n))^2 = x^2+y^2+z^2 over odd (x,y,z) with
// sum < 4n^2, reported as its gap k4 = 4n^2 - (x^2+y^2+z^2) with a witness.
// (k4 = 1 for odd n, 5 for even n; the witness coordinates are odd integers.)
struct BoundaryCell {
  std::int64_t k4 = 0;
  int x = 0, y = 0, z = 0;
};
BoundaryCell min_boundary_k4(int n);

// Trend over a resolution sweep of (n, ell_n): "deep" when any ell is +inf or
// the fitted log-log slope is positive; "shallow_trend" when the slope is
// negative (ell_n -> 0 proxy); "bounded" otherwise.
struct WellClassification {
  std::string label;
  double slope = 0.0;
  double ell_last = 0.0;
};
WellClassification classify_wells(const std::vector<std::pair<int, double>>& sweep);

// ell_n for each n in `ns` under the given cloud/scheme (implicit-capable).
std::vector<std::pair<int, double>> ell_over_sweep(const DustCloud& cloud,
                                                   const SchemeSpec& scheme,
                                                   const std::vector<int>& ns);

// Continuum envelope max_x 4 v |ln v|, v = A(x)D^2/n^3, matched by uncharged
// midpoint clouds (ell_i equals the envelope integrand at the cell center).
double uncharged_ell_bound(const DustCloud& cloud, int n);

// ---------------------------------------------------------------------------
// JSON config: keys half_width, profile_a, profile_b, scheme{...},
// overrides[], lambda. `scheme` may be a bare string kind.
struct CloudConfig {
  DustCloud cloud;
  SchemeSpec scheme;
};
CloudConfig parse_cloud_config(const std::string& json_text);
std::string cloud_config_to_json(const CloudConfig& cfg);

}  // namespace blris
