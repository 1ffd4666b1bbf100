#include "blris/profiles.hpp"

#include <json.hpp>

#include <stdexcept>

namespace blris {

Profile Profile::zero() { return Profile{}; }

Profile Profile::make_bump(double amplitude, double radius) {
  Profile p;
  p.kind = Kind::bump;
  p.amplitude = amplitude;
  p.radius = radius;
  return p;
}

Profile Profile::make_gbump(double q, double amplitude, double radius) {
  if (q <= 0.0) throw std::invalid_argument("gbump: q must be positive");
  Profile p;
  p.kind = Kind::gbump;
  p.q = q;
  p.amplitude = amplitude;
  p.radius = radius;
  return p;
}

Profile Profile::make_composed(const Profile& b) {
  Profile p;
  p.kind = Kind::composed;
  p.base = std::make_shared<Profile>(b);
  p.radius = b.radius;
  return p;
}

Profile Profile::make_recip_composed(const Profile& b) {
  Profile p;
  p.kind = Kind::recip_composed;
  p.base = std::make_shared<Profile>(b);
  p.radius = b.radius;
  return p;
}

Profile Profile::make_ball(double rho, double a, double w) {
  if (a <= 0.0 || w < 0.0 || w > a) throw std::invalid_argument("ball: bad radii");
  Profile p;
  p.kind = Kind::ball;
  p.rho = rho;
  p.ball_a = a;
  p.taper_w = w;
  p.radius = a;
  return p;
}

namespace {
// quintic smoothstep: 0 at t<=0, 1 at t>=1, C² at both ends
double smoother(double t) {
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  return t * t * t * (t * (6.0 * t - 15.0) + 10.0);
}
double dsmoother(double t) {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  return 30.0 * t * t * (t - 1.0) * (t - 1.0);
}
}  // namespace

double Profile::support_radius() const {
  switch (kind) {
    case Kind::zero:
      return 0.0;
    case Kind::bump:
    case Kind::gbump:
      return radius;
    case Kind::composed:
    case Kind::recip_composed:
      return base->support_radius();
    case Kind::ball:
      return ball_a;
  }
  return 0.0;
}

double Profile::value_radial(double r) const {
  if (kind == Kind::ball) {
    if (r >= ball_a) return 0.0;
    if (taper_w == 0.0 || r <= ball_a - taper_w) return rho;
    // 1 - smoother(t) == smoother(1 - t); the complement form avoids the
    // cancellation near the outer edge that would put ~1e-9 relative noise
    // on the tail and defeat tight quadrature tolerances
    return rho * smoother((ball_a - r) / taper_w);
  }
  double u = r / radius;
  return value_s((1.0 - u) * (1.0 + u));
}

double Profile::value_s(double s) const {
  switch (kind) {
    case Kind::zero:
      return 0.0;
    case Kind::bump:
      if (s <= 0.0) return 0.0;
      return amplitude * std::exp(-1.0 / s);
    case Kind::gbump:
      if (s <= 0.0) return 0.0;
      return amplitude * std::exp(-std::pow(s, -q));
    case Kind::composed:
    case Kind::recip_composed:
      return log_value_s(s).value();
    case Kind::ball:
      // s-form only meaningful for the smooth families; route through radius
      return value_radial(radius * std::sqrt(std::max(0.0, 1.0 - s)));
  }
  return 0.0;
}

LogPair Profile::log_value_radial(double r) const {
  if (kind == Kind::ball) return LogPair::from_value(value_radial(r));
  double u = r / radius;
  return log_value_s((1.0 - u) * (1.0 + u));
}

LogPair Profile::log_value_s(double s) const {
  switch (kind) {
    case Kind::zero:
      return LogPair{};
    case Kind::bump:
      if (s <= 0.0) return LogPair{};
      return LogPair::from_log(std::log(amplitude) - 1.0 / s);
    case Kind::gbump:
      if (s <= 0.0) return LogPair{};
      return LogPair::from_log(std::log(amplitude) - std::pow(s, -q));
    case Kind::composed: {
      // ln A = ln B / B = sign(ln B) * exp(ln|ln B| - ln B)
      LogPair lb = base->log_value_s(s);
      if (lb.is_zero()) return LogPair{};
      if (lb.sign_L == 0) return LogPair::from_log(0.0);  // B = 1 -> A = 1
      return LogPair::from_loglog(lb.sign_L, lb.LL - lb.L);
    }
    case Kind::recip_composed: {
      // ln A = -1/B = -exp(-ln B)
      LogPair lb = base->log_value_s(s);
      if (lb.is_zero()) return LogPair{};
      return LogPair::from_loglog(-1, -lb.L);
    }
    case Kind::ball:
      return LogPair::from_value(value_s(s));
  }
  return LogPair{};
}

double Profile::dvalue_radial(double r) const {
  switch (kind) {
    case Kind::zero:
      return 0.0;
    case Kind::bump:
    case Kind::gbump: {
      double u = r / radius;
      double s = (1.0 - u) * (1.0 + u);
      if (s <= 0.0) return 0.0;
      double qq = kind == Kind::bump ? 1.0 : q;
      // d/dr exp(-s^-q) = exp(-s^-q) * (-q s^-(q+1)) * (-2u/radius) ... ds/dr = -2u/radius
      double v = value_s(s);
      return v * (-qq * std::pow(s, -qq - 1.0)) * (2.0 * u / radius);
    }
    case Kind::composed: {
      // A' = A * B'/B * (1 - ln B)/B; underflows to 0 wherever A does
      double B = base->value_radial(r);
      if (B <= 0.0) return 0.0;
      double A = value_radial(r);
      if (A == 0.0) return 0.0;
      double dB = base->dvalue_radial(r);
      return A * dB / B * (1.0 - std::log(B)) / B;
    }
    case Kind::recip_composed: {
      double B = base->value_radial(r);
      if (B <= 0.0) return 0.0;
      double A = value_radial(r);
      if (A == 0.0) return 0.0;
      double dB = base->dvalue_radial(r);
      return A * dB / (B * B);
    }
    case Kind::ball: {
      if (taper_w == 0.0) return 0.0;  // jump excluded from the sampled norm
      if (r >= ball_a || r <= ball_a - taper_w) return 0.0;
      return -rho * dsmoother((r - (ball_a - taper_w)) / taper_w) / taper_w;
    }
  }
  return 0.0;
}

double Profile::sup_norm() const {
  if (kind == Kind::zero) return 0.0;
  if (kind == Kind::ball) return rho;
  double m = 0.0;
  const int N = 20000;
  for (int i = 0; i <= N; ++i) {
    double r = radius * i / N;
    m = std::max(m, value_radial(r));
  }
  return m;
}

double Profile::sup_grad_norm() const {
  if (kind == Kind::zero) return 0.0;
  double m = 0.0;
  const int N = 20000;
  double rmax = kind == Kind::ball ? ball_a : radius;
  for (int i = 0; i <= N; ++i) {
    double r = rmax * i / N;
    m = std::max(m, std::fabs(dvalue_radial(r)));
  }
  return m;
}

std::string Profile::to_json() const {
  nlohmann::json j;
  switch (kind) {
    case Kind::zero:
      j["kind"] = "zero";
      break;
    case Kind::bump:
      j["kind"] = "bump";
      j["amplitude"] = amplitude;
      j["radius"] = radius;
      break;
    case Kind::gbump:
      j["kind"] = "gbump";
      j["q"] = q;
      j["amplitude"] = amplitude;
      j["radius"] = radius;
      break;
    case Kind::composed:
      j["kind"] = "composed";
      j["base"] = nlohmann::json::parse(base->to_json());
      break;
    case Kind::recip_composed:
      j["kind"] = "recip_composed";
      j["base"] = nlohmann::json::parse(base->to_json());
      break;
    case Kind::ball:
      j["kind"] = "ball";
      j["rho"] = rho;
      j["a"] = ball_a;
      j["w"] = taper_w;
      break;
  }
  return j.dump();
}

Profile Profile::from_json_text(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "zero") return zero();
  if (kind == "bump")
    return make_bump(j.value("amplitude", 1.0), j.value("radius", 1.0));
  if (kind == "gbump")
    return make_gbump(j.at("q").get<double>(), j.value("amplitude", 1.0),
                      j.value("radius", 1.0));
  if (kind == "composed") return make_composed(from_json_text(j.at("base").dump()));
  if (kind == "recip_composed")
    return make_recip_composed(from_json_text(j.at("base").dump()));
  if (kind == "ball")
    return make_ball(j.at("rho").get<double>(), j.at("a").get<double>(), j.value("w", 0.0));
  throw std::invalid_argument("unknown profile kind: " + kind);
}

}  // namespace blris
