#pragma once

#include <memory>
#include <string>

#include "blris/util.hpp"
#include "blris/vec3.hpp"

namespace blris {

// Closed family of radial density profiles. Everything is serializable and has
// computable sup norms; no user callbacks. All members vanish for r >= radius
// except `ball` with taper_w=0 which jumps at its own ball radius.
//
//   zero            : 0
//   bump            : amplitude * exp(-1/(1-u²)),   u = r/radius
//   gbump           : amplitude * exp(-(1-u²)^{-q}), q > 0 (q=1 is bump)
//   composed        : exp(ln B / B) on supp B, else 0   (B = base)
//   recip_composed  : exp(-1/B)     on supp B, else 0   (B = base)
//   ball            : rho on r < a, tapered to 0 over [a-w, a] (C² quintic);
//                     w=0 is the sharp uniform ball
//
// The interior evaluations use s := 1-u² (the boundary margin) as the core
// variable; callers that know s exactly (grid cells have s = K4/(4n²) with
// integer K4) should use the *_s entry points to avoid cancellation near the
// support boundary.
struct Profile {
  enum class Kind { zero, bump, gbump, composed, recip_composed, ball };

  Kind kind = Kind::zero;
  double amplitude = 1.0;
  double radius = 1.0;
  double q = 1.0;       // gbump exponent
  double rho = 1.0;     // ball density
  double ball_a = 1.0;  // ball radius
  double taper_w = 0.0; // ball taper width (0 = sharp)
  std::shared_ptr<Profile> base;  // composed / recip_composed

  static Profile zero();
  static Profile make_bump(double amplitude = 1.0, double radius = 1.0);
  static Profile make_gbump(double q, double amplitude = 1.0, double radius = 1.0);
  static Profile make_composed(const Profile& b);
  static Profile make_recip_composed(const Profile& b);
  static Profile make_ball(double rho, double a, double w = 0.0);

  bool is_zero() const { return kind == Kind::zero; }

  // radius of the support ball (0 for the zero profile)
  double support_radius() const;

  double operator()(const Vec3& p) const { return value_radial(p.norm()); }
  double value_radial(double r) const;
  double dvalue_radial(double r) const;

  // s = 1 - (r/radius)²; s <= 0 means outside the support.
  double value_s(double s) const;
  LogPair log_value_s(double s) const;
  LogPair log_value_radial(double r) const;

  // Dense-sampling sup norms of the value and of |d/dr| (radial gradient
  // magnitude equals the full gradient magnitude for radial profiles).
  double sup_norm() const;
  double sup_grad_norm() const;

  std::string to_json() const;
  static Profile from_json_text(const std::string& text);
};

}  // namespace blris
