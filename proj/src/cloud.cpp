#include "blris/cloud.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace blris {

namespace {

std::int64_t sq64(std::int64_t v) { return v * v; }

// Squared center norm in units of (D/(2n))^2: odd-coordinate sum of squares.
std::int64_t center_s2(int kx, int ky, int kz) {
  return sq64(2 * kx + 1) + sq64(2 * ky + 1) + sq64(2 * kz + 1);
}

// s = 1 - |center|^2/R^2; exact rational when R == D (one rounding).
double s_of_center(const Profile& P, double D, int n, std::int64_t S) {
  if (P.radius == D) {
    double fourn2 = 4.0 * double(n) * double(n);
    return double(4LL * n * n - S) / fourn2;
  }
  double c = D / (2.0 * n);
  return 1.0 - double(S) * (c / P.radius) * (c / P.radius);
}

double s_of_point(const Profile& P, const Vec3& q) {
  return 1.0 - q.norm2() / (P.radius * P.radius);
}

// value(a) < value(b), honoring the two-level log encoding
bool log_less(const LogPair& a, const LogPair& b) {
  if (a.is_zero()) return !b.is_zero();
  if (b.is_zero()) return false;
  if (a.L != b.L) return a.L < b.L;
  if (std::isinf(a.L)) {
    // same saturated level: for -inf, larger LL means a smaller value
    return a.L < 0.0 ? a.LL > b.LL : a.LL < b.LL;
  }
  return false;
}

// ln( v * |ln w| ) for positive v, w: equals L_v + LL_w with saturation.
double ln_t(const LogPair& v, const LogPair& w) {
  double llw = (w.sign_L == 0) ? -kInf : w.LL;
  double r = v.L + llw;
  if (std::isnan(r)) return llw > 709.0 ? kInf : -kInf;  // mixed saturations
  return r;
}

bool same_point(const Vec3& a, const Vec3& b) {
  return a.x == b.x && a.y == b.y && a.z == b.z;
}

}  // namespace

// ---------------------------------------------------------------------------
// DustCloud

DustCloud DustCloud::make(double half_width, const Profile& a, const Profile& b) {
  if (!(half_width > 0.0)) throw std::invalid_argument("cloud: half_width must be positive");
  double slack = half_width * (1.0 + 1e-12);
  if (a.support_radius() > slack || b.support_radius() > slack)
    throw std::invalid_argument("cloud: profile support exceeds the cube half-width");
  DustCloud c;
  c.D = half_width;
  c.A = a;
  c.B = b;
  c.norm_a = a.sup_norm();
  c.norm_b = b.sup_norm();
  c.dnorm_a = a.sup_grad_norm();
  c.dnorm_b = b.sup_grad_norm();
  return c;
}

std::string DustCloud::to_json() const {
  nlohmann::json j;
  j["half_width"] = D;
  j["profile_a"] = nlohmann::json::parse(A.to_json());
  j["profile_b"] = nlohmann::json::parse(B.to_json());
  return j.dump();
}

DustCloud DustCloud::from_json_text(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  Profile a = Profile::from_json_text(j.at("profile_a").dump());
  Profile b = Profile::from_json_text(j.at("profile_b").dump());
  return make(j.at("half_width").get<double>(), a, b);
}

// ---------------------------------------------------------------------------
// Grid

Vec3 Grid::center(int kx, int ky, int kz) const {
  return Vec3{(kx + 0.5) / n * D, (ky + 0.5) / n * D, (kz + 0.5) / n * D};
}

std::int64_t Grid::linear_index(int kx, int ky, int kz) const {
  std::int64_t w = 2LL * n;
  return ((std::int64_t(kx) + n) * w + (ky + n)) * w + (kz + n);
}

bool Grid::contains_closed(int kx, int ky, int kz, const Vec3& q, double tol) const {
  double h = D / n, slack = tol * D;
  double lo[3] = {kx * h, ky * h, kz * h};
  double qc[3] = {q.x, q.y, q.z};
  for (int c = 0; c < 3; ++c)
    if (qc[c] < lo[c] - slack || qc[c] > lo[c] + h + slack) return false;
  return true;
}

std::vector<Vec3> Grid::centers() const {
  std::vector<Vec3> out;
  out.reserve(std::size_t(num_cells()));
  for (int kx = -n; kx < n; ++kx)
    for (int ky = -n; ky < n; ++ky)
      for (int kz = -n; kz < n; ++kz) out.push_back(center(kx, ky, kz));
  return out;
}

Grid subdivide(const DustCloud& cloud, int n) {
  if (n < 1) throw std::invalid_argument("subdivide: n must be >= 1");
  if (!(cloud.D > 0.0)) throw std::invalid_argument("subdivide: half-width must be positive");
  return Grid{cloud.D, n};
}

// ---------------------------------------------------------------------------
// SchemeSpec

std::string SchemeSpec::tag() const {
  switch (kind) {
    case Kind::midpoint:
      return preset.empty() && overrides.empty() ? "midpoint" : "midpoint+overrides";
    case Kind::sample_jitter:
      return "sample_jitter";
    case Kind::shallow:
      return "shallow";
  }
  return "midpoint";
}

std::vector<Override> SchemeSpec::resolved_overrides(int n, double D) const {
  std::vector<Override> out = overrides;
  if (!preset.empty()) {
    Override o;
    o.kx = n - 1;
    o.ky = 0;
    o.kz = 0;
    if (preset == "corner_pair") {
      double nn = n;
      o.has_qa = true;
      o.qa = Vec3{D * (1.0 - 1.0 / (2.0 * nn) + 3.0 * std::log(nn) / (2.0 * nn * nn)),
                  D * preset_l1 / (2.0 * nn), 0.0};
      o.has_qb = true;
      o.qb = Vec3{D * (1.0 - 1.0 / (2.0 * nn)), D * preset_l2 / (2.0 * nn), 0.0};
    } else if (preset == "edge_sample") {
      double nn = n;
      Vec3 q{D * (1.0 - preset_l1 / (2.0 * nn * nn * nn)), 0.0, 0.0};
      o.has_qa = o.has_qb = true;
      o.qa = o.qb = q;
    } else {
      throw std::invalid_argument("scheme: unknown preset " + preset);
    }
    out.push_back(o);
  }
  Grid grid{D, n};
  for (const auto& o : out) {
    if ((o.has_qa && !grid.contains_closed(o.kx, o.ky, o.kz, o.qa)) ||
        (o.has_qb && !grid.contains_closed(o.kx, o.ky, o.kz, o.qb)))
      throw std::invalid_argument("scheme: sample point lies outside its cell");
  }
  return out;
}

std::string SchemeSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = kind == Kind::midpoint    ? "midpoint"
              : kind == Kind::sample_jitter ? "sample_jitter"
                                            : "shallow";
  if (jitter != 0.0) j["jitter"] = jitter;
  if (seed != 0) j["seed"] = seed;
  if (lambda != 0.0) j["lambda"] = lambda;
  if (!preset.empty()) {
    j["preset"] = preset;
    j["lambda1"] = preset_l1;
    j["lambda2"] = preset_l2;
  }
  if (!overrides.empty()) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& o : overrides) {
      nlohmann::json jo;
      jo["cell"] = {o.kx, o.ky, o.kz};
      if (o.has_qa) jo["qa"] = {o.qa.x, o.qa.y, o.qa.z};
      if (o.has_qb) jo["qb"] = {o.qb.x, o.qb.y, o.qb.z};
      if (o.has_alpha) jo["alpha"] = o.alpha;
      if (o.has_beta) jo["beta"] = o.beta;
      arr.push_back(jo);
    }
    j["overrides"] = arr;
  }
  return j.dump();
}

namespace {

SchemeSpec scheme_from_json(const nlohmann::json& j) {
  SchemeSpec s;
  if (j.is_string()) {
    std::string k = j.get<std::string>();
    if (k == "midpoint")
      s.kind = SchemeSpec::Kind::midpoint;
    else if (k == "sample_jitter")
      s.kind = SchemeSpec::Kind::sample_jitter;
    else if (k == "shallow")
      s.kind = SchemeSpec::Kind::shallow;
    else
      throw std::invalid_argument("scheme: unknown kind " + k);
    return s;
  }
  std::string k = j.value("kind", "midpoint");
  if (k == "midpoint")
    s.kind = SchemeSpec::Kind::midpoint;
  else if (k == "sample_jitter")
    s.kind = SchemeSpec::Kind::sample_jitter;
  else if (k == "shallow")
    s.kind = SchemeSpec::Kind::shallow;
  else
    throw std::invalid_argument("scheme: unknown kind " + k);
  s.jitter = j.value("jitter", 0.0);
  s.seed = j.value("seed", std::uint64_t(0));
  s.lambda = j.value("lambda", 0.0);
  s.preset = j.value("preset", std::string());
  s.preset_l1 = j.value("lambda1", 0.0);
  s.preset_l2 = j.value("lambda2", 0.0);
  if (j.contains("overrides")) {
    for (const auto& jo : j.at("overrides")) {
      Override o;
      auto cell = jo.at("cell");
      o.kx = cell.at(0).get<int>();
      o.ky = cell.at(1).get<int>();
      o.kz = cell.at(2).get<int>();
      if (jo.contains("qa")) {
        o.has_qa = true;
        o.qa = Vec3{jo["qa"].at(0).get<double>(), jo["qa"].at(1).get<double>(),
                    jo["qa"].at(2).get<double>()};
      }
      if (jo.contains("qb")) {
        o.has_qb = true;
        o.qb = Vec3{jo["qb"].at(0).get<double>(), jo["qb"].at(1).get<double>(),
                    jo["qb"].at(2).get<double>()};
      }
      if (jo.contains("alpha")) {
        o.has_alpha = true;
        o.alpha = jo["alpha"].get<double>();
        if (o.alpha < 0.0) throw std::invalid_argument("override: negative alpha");
      }
      if (jo.contains("beta")) {
        o.has_beta = true;
        o.beta = jo["beta"].get<double>();
        if (o.beta < 0.0) throw std::invalid_argument("override: negative beta");
      }
      s.overrides.push_back(o);
    }
  }
  return s;
}

}  // namespace

SchemeSpec SchemeSpec::from_json_text(const std::string& text) {
  return scheme_from_json(nlohmann::json::parse(text));
}

// ---------------------------------------------------------------------------
// cell_params

CellParams cell_params(const Grid& grid, const DustCloud& cloud,
                       const SchemeSpec& scheme, int kx, int ky, int kz) {
  const int n = grid.n;
  if (kx < -n || kx >= n || ky < -n || ky >= n || kz < -n || kz >= n)
    throw std::out_of_range("cell_params: cell index out of range");
  const double D = grid.D;
  const double vol = (D / n) * (D / n) * (D / n);
  const std::int64_t S = center_s2(kx, ky, kz);

  CellParams out;
  out.p = grid.center(kx, ky, kz);

  if (scheme.kind == SchemeSpec::Kind::shallow) {
    const double lam = scheme.lambda;
    if (!(lam > 0.0)) throw std::invalid_argument("shallow_adjust: lambda must be positive");
    if (lam > 1.0) throw std::invalid_argument("shallow_adjust: lambda must be <= 1");
    const double sa = s_of_center(cloud.A, D, n, S), sb = s_of_center(cloud.B, D, n, S);
    LogPair la = cloud.A.log_value_s(sa);
    LogPair lb = cloud.B.log_value_s(sb);
    out.mid_a = cloud.A.value_s(sa) * vol;
    out.mid_b = cloud.B.value_s(sb) * vol;
    LogPair la2 = la.mul_value(D * D);
    LogPair lb2 = lb.mul_value(D * D);
    bool both_pos = !la.is_zero() && !lb.is_zero();
    double threshold = std::log(2.0 * double(n) * double(n));
    if (both_pos && logsumexp(ln_t(la2, lb2), ln_t(lb2, la2)) <= threshold) {
      out.alpha = la.mul_value(vol);
      out.beta = lb.mul_value(vol);
      out.alpha_value = out.mid_a;
      out.beta_value = out.mid_b;
      if (cloud.A.kind == Profile::Kind::composed ||
          cloud.A.kind == Profile::Kind::recip_composed)
        out.a_base_q = cloud.A.base->log_value_s(s_of_center(*cloud.A.base, D, n, S));
      out.same_q = true;
    } else if (la2.L <= std::log(lam / n) && lb2.L <= std::log(lam / n)) {
      out.dropped = true;
    } else {
      double repl = lam * D / (double(n) * n * n * n);
      if (log_less(lb2, la2)) {
        out.alpha = la.mul_value(vol);
        out.alpha_value = out.mid_a;
        out.beta = LogPair::from_value(repl);
        out.beta_value = repl;
      } else {
        out.alpha = LogPair::from_value(repl);
        out.alpha_value = repl;
        out.beta = lb.mul_value(vol);
        out.beta_value = out.mid_b;
      }
      out.same_q = false;
    }
    out.default_midpoint = false;
    out.dropped = out.dropped || (out.alpha.is_zero() && out.beta.is_zero());
    return out;
  }

  // default sample point: cell center, or deterministic jitter
  Vec3 qa = out.p, qb = out.p;
  bool jittered = false;
  if (scheme.kind == SchemeSpec::Kind::sample_jitter && scheme.jitter != 0.0) {
    if (scheme.jitter < 0.0 || scheme.jitter > 1.0)
      throw std::invalid_argument("scheme: jitter must lie in [0,1]");
    SplitRng rng(scheme.seed, std::uint64_t(grid.linear_index(kx, ky, kz)));
    double h = 0.5 * (D / n) * scheme.jitter;
    Vec3 dq{rng.uniform(-h, h), rng.uniform(-h, h), rng.uniform(-h, h)};
    qa = qb = out.p + dq;
    jittered = true;
  }

  bool explicit_a = false, explicit_b = false;
  double ea = 0.0, eb = 0.0;
  for (const auto& o : scheme.resolved_overrides(n, D)) {
    if (o.kx != kx || o.ky != ky || o.kz != kz) continue;
    if (o.has_qa) qa = o.qa;
    if (o.has_qb) qb = o.qb;
    if (o.has_alpha) {
      explicit_a = true;
      ea = o.alpha;
      if (ea < 0.0) throw std::invalid_argument("override: negative alpha");
    }
    if (o.has_beta) {
      explicit_b = true;
      eb = o.beta;
      if (eb < 0.0) throw std::invalid_argument("override: negative beta");
    }
  }
  if (!grid.contains_closed(kx, ky, kz, qa) || !grid.contains_closed(kx, ky, kz, qb))
    throw std::invalid_argument("scheme: sample point lies outside its cell");

  bool a_at_center = same_point(qa, out.p);
  bool b_at_center = same_point(qb, out.p);
  out.same_q = same_point(qa, qb) && !explicit_a && !explicit_b;
  out.default_midpoint = a_at_center && b_at_center && !explicit_a && !explicit_b;

  if (explicit_a) {
    out.alpha = LogPair::from_value(ea);
    out.alpha_value = ea;
  } else {
    double sa = a_at_center ? s_of_center(cloud.A, D, n, S) : s_of_point(cloud.A, qa);
    out.alpha = cloud.A.log_value_s(sa).mul_value(vol);
    out.alpha_value = cloud.A.value_s(sa) * vol;
    if (cloud.A.kind == Profile::Kind::composed ||
        cloud.A.kind == Profile::Kind::recip_composed)
      out.a_base_q = cloud.A.base->log_value_s(
          a_at_center ? s_of_center(*cloud.A.base, D, n, S) : s_of_point(*cloud.A.base, qa));
  }
  if (explicit_b) {
    out.beta = LogPair::from_value(eb);
    out.beta_value = eb;
  } else {
    double sb = b_at_center ? s_of_center(cloud.B, D, n, S) : s_of_point(cloud.B, qb);
    out.beta = cloud.B.log_value_s(sb).mul_value(vol);
    out.beta_value = cloud.B.value_s(sb) * vol;
  }

  if (!out.default_midpoint) {
    out.mid_a = cloud.A.value_s(s_of_center(cloud.A, D, n, S)) * vol;
    out.mid_b = cloud.B.value_s(s_of_center(cloud.B, D, n, S)) * vol;
    out.sampled_a = !explicit_a && (jittered || !a_at_center);
    out.sampled_b = !explicit_b && (jittered || !b_at_center);
  }

  out.dropped = out.alpha.is_zero() && out.beta.is_zero();
  return out;
}

// ---------------------------------------------------------------------------
// assign_parameters

namespace {

// count of odd-coordinate lattice points (x,y,z), x,y,z in {±1,…,±(2n−1)},
// with x²+y²+z² < bound; counts one octant and multiplies by 8
std::int64_t count_below(int n, double bound) {
  if (bound <= 3.0) return 0;
  std::int64_t cnt = 0;
  for (int x = 1; x <= 2 * n - 1; x += 2) {
    double bx = bound - double(x) * x;
    if (bx <= 2.0) break;
    for (int y = 1; y <= 2 * n - 1; y += 2) {
      double bxy = bx - double(y) * y;
      if (bxy <= 1.0) break;
      std::int64_t zmax = std::int64_t(std::floor(std::sqrt(bxy)));
      while (zmax >= 1 && double(zmax) * zmax >= bxy) --zmax;
      if (zmax > 2 * n - 1) zmax = 2 * n - 1;
      if (zmax < 1) continue;
      cnt += (zmax + 1) / 2;  // # odd integers in [1, zmax]
    }
  }
  return 8 * cnt;
}

}  // namespace

SourceSet assign_parameters(const Grid& grid, const DustCloud& cloud,
                            const SchemeSpec& scheme) {
  const int n = grid.n;
  const double D = grid.D;
  SourceSet set;
  set.D = D;
  set.n = n;
  set.scheme_tag = scheme.tag();
  set.cloud = cloud;
  set.scheme = scheme;
  const double n4 = double(n) * n * n * n;
  const double bound_a = D * D * D * D * cloud.dnorm_a;
  const double bound_b = D * D * D * D * cloud.dnorm_b;

  if (grid.num_cells() <= kMaterializeCap) {
    set.materialized = true;
    for (int kx = -n; kx < n; ++kx)
      for (int ky = -n; ky < n; ++ky)
        for (int kz = -n; kz < n; ++kz) {
          CellParams cp = cell_params(grid, cloud, scheme, kx, ky, kz);
          if (!cp.default_midpoint) {
            double dev_a = n4 * std::fabs(cp.alpha_value - cp.mid_a);
            double dev_b = n4 * std::fabs(cp.beta_value - cp.mid_b);
            set.c_alpha = std::max(set.c_alpha, dev_a);
            set.c_beta = std::max(set.c_beta, dev_b);
            if (cp.sampled_a && dev_a > bound_a * (1.0 + 1e-7) + 1e-300)
              throw std::logic_error("assign_parameters: alpha deviation exceeds D^4 |dA|");
            if (cp.sampled_b && dev_b > bound_b * (1.0 + 1e-7) + 1e-300)
              throw std::logic_error("assign_parameters: beta deviation exceeds D^4 |dB|");
          }
          if (cp.dropped) continue;
          SourceEntry e;
          e.p = cp.p;
          e.alpha = cp.alpha_value;
          e.beta = cp.beta_value;
          e.kx = kx;
          e.ky = ky;
          e.kz = kz;
          e.charged = !cp.alpha.is_zero() && !cp.beta.is_zero();
          set.any_half_zero = set.any_half_zero || !e.charged;
          set.entries.push_back(e);
        }
    set.retained = std::int64_t(set.entries.size());
    if (scheme.kind == SchemeSpec::Kind::shallow) {
      double cap = scheme.lambda * D * (1.0 + 1e-9);
      if (set.c_alpha > cap || set.c_beta > cap)
        throw std::invalid_argument(
            "shallow_adjust: resolution too small for the requested flattening");
    }
    return set;
  }

  // Implicit set: parameters stay answerable through (cloud, scheme, n).
  if (scheme.kind != SchemeSpec::Kind::midpoint)
    throw std::invalid_argument(
        "assign_parameters: resolution too large to materialize for this scheme");
  set.materialized = false;

  const double Ra = cloud.A.support_radius(), Rb = cloud.B.support_radius();
  const double c = D / (2.0 * n);
  auto s2_bound = [&](double R) { return (R / c) * (R / c); };  // |p|² < R² ⇔ S < bound
  double ba = s2_bound(Ra), bb = s2_bound(Rb);
  set.retained = count_below(n, std::max(ba, bb));
  if (Ra != Rb) {
    // some center falls between the two supports ⇒ a half-zero source
    double lo = std::min(ba, bb), hi = std::max(ba, bb);
    for (std::int64_t S = 3; S < std::int64_t(std::ceil(hi)); S += 8)
      if (double(S) >= lo && double(S) < hi) {
        set.any_half_zero = true;
        break;
      }
  }
  for (const auto& o : scheme.resolved_overrides(n, D)) {
    CellParams cp = cell_params(grid, cloud, scheme, o.kx, o.ky, o.kz);
    double dev_a = n4 * std::fabs(cp.alpha_value - cp.mid_a);
    double dev_b = n4 * std::fabs(cp.beta_value - cp.mid_b);
    set.c_alpha = std::max(set.c_alpha, dev_a);
    set.c_beta = std::max(set.c_beta, dev_b);
    if (cp.sampled_a && dev_a > bound_a * (1.0 + 1e-7) + 1e-300)
      throw std::logic_error("assign_parameters: alpha deviation exceeds D^4 |dA|");
    if (cp.sampled_b && dev_b > bound_b * (1.0 + 1e-7) + 1e-300)
      throw std::logic_error("assign_parameters: beta deviation exceeds D^4 |dB|");
    std::int64_t S = center_s2(o.kx, o.ky, o.kz);
    bool bulk_retained = double(S) < std::max(ba, bb);
    set.retained += std::int64_t(!cp.dropped) - std::int64_t(bulk_retained);
    if (!cp.dropped)
      set.any_half_zero =
          set.any_half_zero || cp.alpha.is_zero() != cp.beta.is_zero();
  }
  return set;
}

SourceSet shallow_adjust(const Grid& grid, const DustCloud& cloud, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("shallow_adjust: lambda must be positive");
  SchemeSpec s;
  s.kind = SchemeSpec::Kind::shallow;
  s.lambda = lambda;
  return assign_parameters(grid, cloud, s);
}

// ---------------------------------------------------------------------------
// CSV

std::string SourceSet::to_csv() const {
  if (!materialized)
    throw std::logic_error("SourceSet::to_csv: set is not materialized");
  std::string out = "px,py,pz,alpha,beta\n";
  for (const auto& e : entries) {
    out += fmt_double(e.p.x);
    out += ',';
    out += fmt_double(e.p.y);
    out += ',';
    out += fmt_double(e.p.z);
    out += ',';
    out += fmt_double(e.alpha);
    out += ',';
    out += fmt_double(e.beta);
    out += '\n';
  }
  return out;
}

SourceSet SourceSet::from_csv(const std::string& text, double D, int n) {
  SourceSet set;
  set.D = D;
  set.n = n;
  set.scheme_tag = "csv";
  set.materialized = true;
  set.has_provenance = false;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("px", 0) == 0) continue;  // header
    }
    SourceEntry e;
    double* slot[5] = {&e.p.x, &e.p.y, &e.p.z, &e.alpha, &e.beta};
    std::istringstream ls(line);
    std::string tok;
    for (int i = 0; i < 5; ++i) {
      if (!std::getline(ls, tok, ','))
        throw std::invalid_argument("SourceSet::from_csv: short row");
      *slot[i] = std::stod(tok);
    }
    if (e.alpha < 0.0 || e.beta < 0.0)
      throw std::invalid_argument("SourceSet::from_csv: negative parameter");
    if (e.alpha == 0.0 && e.beta == 0.0) continue;
    e.charged = e.alpha > 0.0 && e.beta > 0.0;
    set.any_half_zero = set.any_half_zero || !e.charged;
    set.entries.push_back(e);
  }
  set.retained = std::int64_t(set.entries.size());
  return set;
}

// ---------------------------------------------------------------------------
// Well diagnostics

double well_ell(const LogPair& alpha, const LogPair& beta, double D) {
  bool az = alpha.is_zero(), bz = beta.is_zero();
  if (az && bz) return 0.0;
  if (az || bz) return kInf;
  if ((std::isinf(alpha.L) && alpha.sign_L > 0) ||
      (std::isinf(beta.L) && beta.sign_L > 0))
    return kInf;  // astronomically large parameter (not physical, but honest)
  const double lnD = std::log(D);

  if (std::isinf(alpha.L) && std::isinf(beta.L)) {
    // both parameters below every representable log: the prefactor e^{−e^{LL}}
    // collapses the well depth ( α+β ≤ 2e^{−e^{LLmin}}, |ln αβ| ≤ 2e^{LLmax} )
    double lmin = std::min(alpha.LL, beta.LL);
    double lmax = std::max(alpha.LL, beta.LL);
    double lnell = lmax - (lmin > 709.0 ? kInf : std::exp(lmin)) - lnD;
    if (std::isnan(lnell)) return 0.0;
    return std::exp(lnell);
  }

  // ln(α+β): an astronomically tiny partner contributes nothing
  double lsum = logsumexp(std::isfinite(alpha.L) ? alpha.L : -kInf,
                          std::isfinite(beta.L) ? beta.L : -kInf);

  // T = ln(αβ/D²) as (sign, ln|T|)
  double lnAbsT;
  if (std::isfinite(alpha.L) && std::isfinite(beta.L)) {
    long double T = (long double)alpha.L + (long double)beta.L - 2.0L * (long double)lnD;
    if (T == 0.0L) return 0.0;
    lnAbsT = std::log(double(fabsl(T)));
  } else {
    const LogPair& big = std::isfinite(alpha.L) ? beta : alpha;
    double rest = (std::isfinite(alpha.L) ? alpha.L : 0.0) +
                  (std::isfinite(beta.L) ? beta.L : 0.0) - 2.0 * lnD;
    double corr = rest != 0.0 ? std::log(std::fabs(rest)) : -kInf;
    bool same_sign = rest == 0.0 || (big.sign_L < 0) == (rest < 0.0);
    if (same_sign)
      lnAbsT = logsumexp(big.LL, corr);
    else if (big.LL >= corr)
      lnAbsT = big.LL + std::log1p(-std::exp(corr - big.LL));
    else
      lnAbsT = corr + std::log1p(-std::exp(big.LL - corr));
  }
  return std::exp(lsum + lnAbsT - lnD);
}

namespace {

// (β/D)|ln(α n³/D)| = (β/D)|ln(A(q_a) D²)|, the charged half of the well depth.
double cross_term_generic(const CellParams& cp, int n, double D) {
  if (cp.beta.is_zero() || cp.alpha.is_zero()) return 0.0;
  const double lnD = std::log(D);
  double lnX;  // ln|ln(α n³/D)|
  if (std::isfinite(cp.alpha.L)) {
    long double T = (long double)cp.alpha.L + 3.0L * std::log((long double)n) -
                    (long double)lnD;
    if (T == 0.0L) return 0.0;
    lnX = std::log(double(fabsl(T)));
  } else {
    lnX = cp.alpha.LL;  // the astronomic level dominates every finite shift
  }
  double ln_cross = cp.beta.L - lnD + lnX;
  if (std::isnan(ln_cross)) return 0.0;
  return std::exp(ln_cross);
}

// When A is a composed family over the β profile and both use one sample
// point, ln A = f(ln B) lets the base value factor out of |ln(A D²)| exactly:
//   cross = |g| · D²/n³,  g = lnB + 2 lnD e^{lnB}   (A = exp(lnB/B))
//                          g = -1 + 2 lnD e^{lnB}   (A = exp(-1/B))
// This path stays exact when ln A ~ -e^{2000}, where the generic route loses
// the small |ln B| summand to the huge exponent.
// the composed-family structural check is per-cloud, not per-cell; callers in
// tight loops hoist it through this predicate
bool composed_over_beta(const DustCloud& cloud) {
  bool fam = cloud.A.kind == Profile::Kind::composed ||
             cloud.A.kind == Profile::Kind::recip_composed;
  return fam && cloud.A.base && cloud.B.to_json() == cloud.A.base->to_json();
}

double cross_term(const CellParams& cp, const DustCloud& cloud, int n,
                  bool cloud_structural) {
  if (cp.beta.is_zero() || cp.alpha.is_zero()) return 0.0;
  const double D = cloud.D;
  const double lnD = std::log(D);
  bool comp = cloud.A.kind == Profile::Kind::composed;
  bool structural = cloud_structural && cp.same_q && !cp.a_base_q.is_zero();
  if (!structural) return cross_term_generic(cp, n, D);
  const LogPair& lb = cp.a_base_q;
  if (std::isfinite(lb.L)) {
    double expL = lb.L < 700.0 ? std::exp(lb.L) : kInf;
    double g = comp ? lb.L + 2.0 * lnD * expL : -1.0 + 2.0 * lnD * expL;
    if (!std::isfinite(g) || g == 0.0) return cross_term_generic(cp, n, D);
    return std::fabs(g) * D * D / (double(n) * n * n);
  }
  // base below representable logs: |g| → e^{LL} (composed) or 1 (reciprocal)
  double core = comp ? lb.LL : 0.0;
  return std::exp(core + 2.0 * lnD - 3.0 * std::log(double(n)));
}

}  // namespace

WellProfile well_profile(const SourceSet& sources) {
  WellProfile wp;
  const double D = sources.D;
  const int n = sources.n;

  auto track = [&](int kx, int ky, int kz, double ell, double cross) {
    if (std::isinf(ell)) wp.has_infinite = true;
    if (ell > wp.ell_max) {
      wp.ell_max = ell;
      wp.argmax = WellRecord{kx, ky, kz, ell, cross};
    }
    wp.cross_max = std::max(wp.cross_max, cross);
  };

  if (sources.materialized) {
    wp.per_source.reserve(sources.entries.size());
    if (sources.has_provenance) {
      Grid grid{D, n};
      bool cs = composed_over_beta(sources.cloud);
      for (const auto& e : sources.entries) {
        CellParams cp = cell_params(grid, sources.cloud, sources.scheme, e.kx, e.ky, e.kz);
        double ell = well_ell(cp.alpha, cp.beta, D);
        double cross = cross_term(cp, sources.cloud, n, cs);
        wp.per_source.push_back(ell);
        track(e.kx, e.ky, e.kz, ell, cross);
      }
    } else {
      for (const auto& e : sources.entries) {
        LogPair la = LogPair::from_value(e.alpha), lb = LogPair::from_value(e.beta);
        double ell = well_ell(la, lb, D);
        CellParams cp;
        cp.alpha = la;
        cp.beta = lb;
        cp.same_q = false;
        double cross = cross_term_generic(cp, n, D);
        wp.per_source.push_back(ell);
        track(e.kx, e.ky, e.kz, ell, cross);
      }
    }
    wp.classification = wp.has_infinite ? "deep" : "bounded";
    return wp;
  }

  // Implicit set: overrides exactly, bulk through the attained shell values.
  // Midpoint values depend on a cell only through S = Σ(2k+1)²; every S ≡ 3
  // (mod 8) below the support bound is attained (three odd squares), and each
  // S is shared by ≥ 8 cells, so the overridden cell never hides a shell.
  if (!sources.has_provenance)
    throw std::logic_error("well_profile: implicit set without provenance");
  const DustCloud& cloud = sources.cloud;
  if ((cloud.A.support_radius() != 0.0 && cloud.A.radius != D) ||
      (cloud.B.support_radius() != 0.0 && cloud.B.radius != D))
    throw std::invalid_argument(
        "well_profile: implicit sets require support radius equal to the half-width");
  Grid grid{D, n};
  bool composed_pair = composed_over_beta(cloud);
  for (const auto& o : sources.scheme.resolved_overrides(n, D)) {
    CellParams cp = cell_params(grid, cloud, sources.scheme, o.kx, o.ky, o.kz);
    if (cp.dropped) continue;
    track(o.kx, o.ky, o.kz, well_ell(cp.alpha, cp.beta, D),
          cross_term(cp, cloud, n, composed_pair));
  }
  const double vol = (D / n) * (D / n) * (D / n);
  std::int64_t smax = 4LL * n * n;
  std::int64_t best_s = -1;
  double best_ell = -1.0, best_cross = 0.0;
  for (std::int64_t S = 3; S < smax; S += 8) {
    double sa = s_of_center(cloud.A, D, n, S);
    double sb = s_of_center(cloud.B, D, n, S);
    LogPair la = cloud.A.log_value_s(sa).mul_value(vol);
    LogPair lb = cloud.B.log_value_s(sb).mul_value(vol);
    if (la.is_zero() && lb.is_zero()) continue;
    double ell = well_ell(la, lb, D);
    CellParams cp;
    cp.alpha = la;
    cp.beta = lb;
    cp.same_q = true;
    if (composed_pair) cp.a_base_q = cloud.A.base->log_value_s(sa);
    double cross = cross_term(cp, cloud, n, composed_pair);
    if (std::isinf(ell)) wp.has_infinite = true;
    if (ell > best_ell) {
      best_ell = ell;
      best_s = S;
      best_cross = cross;
    }
    wp.cross_max = std::max(wp.cross_max, cross);
  }
  if (best_s >= 0 && best_ell >= wp.ell_max) {
    // recover one odd representation of best_s for the witness
    int wx = -1, wy = -1, wz = -1;
    for (std::int64_t x = std::int64_t(std::sqrt(double(best_s))) | 1; x >= 1; x -= 2) {
      if (x * x > best_s) continue;
      std::int64_t rem = best_s - x * x;
      for (std::int64_t y = std::int64_t(std::sqrt(double(rem))) | 1; y >= 1; y -= 2) {
        if (y * y > rem) continue;
        std::int64_t z2 = rem - y * y;
        std::int64_t z = std::int64_t(std::sqrt(double(z2)));
        while (z * z < z2) ++z;
        while (z * z > z2) --z;
        if (z >= 1 && (z & 1) && z * z == z2) {
          wx = int(x);
          wy = int(y);
          wz = int(z);
          break;
        }
      }
      if (wx > 0) break;
    }
    wp.ell_max = best_ell;
    wp.argmax = wx > 0 ? WellRecord{(wx - 1) / 2, (wy - 1) / 2, (wz - 1) / 2,
                                    best_ell, best_cross}
                       : WellRecord{0, 0, 0, best_ell, best_cross};
  }
  wp.classification = wp.has_infinite ? "deep" : "bounded";
  return wp;
}

BoundaryCell min_boundary_k4(int n) {
  if (n < 1) throw std::invalid_argument("min_boundary_k4: n must be >= 1");
  const std::int64_t cap = 4LL * n * n;
  BoundaryCell best;
  std::int64_t best_s = -1;
  for (std::int64_t x = 1; x <= 2 * n - 1; x += 2) {
    for (std::int64_t y = 1; y <= x; y += 2) {
      std::int64_t rem = cap - 1 - x * x - y * y;
      if (rem < 1) break;
      std::int64_t z = std::int64_t(std::sqrt(double(rem)));
      while (z * z > rem) --z;
      if (!(z & 1)) --z;
      if (z < 1) continue;
      std::int64_t s = x * x + y * y + z * z;
      if (s > best_s) {
        best_s = s;
        best = BoundaryCell{cap - s, int(x), int(y), int(z)};
      }
    }
  }
  if (best_s < 0) throw std::logic_error("min_boundary_k4: no interior cell");
  return best;
}

WellClassification classify_wells(const std::vector<std::pair<int, double>>& sweep) {
  WellClassification wc;
  if (sweep.empty()) throw std::invalid_argument("classify_wells: empty sweep");
  wc.ell_last = sweep.back().second;
  bool any_inf = false, any_pos = false;
  std::vector<double> xs, ys;
  for (const auto& [n, ell] : sweep) {
    if (std::isinf(ell)) any_inf = true;
    if (ell > 0.0 && std::isfinite(ell)) {
      xs.push_back(double(n));
      ys.push_back(ell);
      any_pos = true;
    }
  }
  if (any_inf) {
    wc.label = "deep";
    return wc;
  }
  if (!any_pos) {
    wc.label = "shallow_trend";  // no wells at all
    wc.slope = 0.0;
    return wc;
  }
  if (xs.size() < 2) {
    wc.label = "bounded";
    return wc;
  }
  LineFit fit = fit_loglog(xs, ys);
  wc.slope = fit.slope;
  if (fit.slope > 0.05)
    wc.label = "deep";
  else if (fit.slope < -0.05)
    wc.label = "shallow_trend";
  else
    wc.label = "bounded";
  return wc;
}

std::vector<std::pair<int, double>> ell_over_sweep(const DustCloud& cloud,
                                                   const SchemeSpec& scheme,
                                                   const std::vector<int>& ns) {
  std::vector<std::pair<int, double>> out;
  for (int n : ns) {
    Grid grid = subdivide(cloud, n);
    SourceSet set = assign_parameters(grid, cloud, scheme);
    out.emplace_back(n, well_profile(set).ell_max);
  }
  return out;
}

double uncharged_ell_bound(const DustCloud& cloud, int n) {
  double best = 0.0;
  const int N = 20000;
  double R = cloud.A.support_radius();
  double shift = 2.0 * std::log(cloud.D) - 3.0 * std::log(double(n));
  for (int i = 0; i <= N; ++i) {
    LogPair lv = cloud.A.log_value_radial(R * i / N);
    if (lv.is_zero()) continue;
    double lnv = lv.L + shift;
    double term = std::isfinite(lnv) ? 4.0 * std::exp(lnv) * std::fabs(lnv) : 0.0;
    best = std::max(best, term);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Config

CloudConfig parse_cloud_config(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  CloudConfig cfg;
  Profile a = j.contains("profile_a") ? Profile::from_json_text(j.at("profile_a").dump())
                                      : Profile::zero();
  Profile b = j.contains("profile_b") ? Profile::from_json_text(j.at("profile_b").dump())
                                      : Profile::zero();
  cfg.cloud = DustCloud::make(j.value("half_width", 1.0), a, b);
  cfg.scheme = j.contains("scheme") ? scheme_from_json(j.at("scheme")) : SchemeSpec{};
  if (j.contains("overrides"))
    for (const auto& jo : j.at("overrides")) {
      nlohmann::json wrap;
      wrap["kind"] = "midpoint";
      wrap["overrides"] = nlohmann::json::array({jo});
      SchemeSpec tmp = scheme_from_json(wrap);
      cfg.scheme.overrides.push_back(tmp.overrides.front());
    }
  if (j.contains("lambda")) cfg.scheme.lambda = j.at("lambda").get<double>();
  return cfg;
}

std::string cloud_config_to_json(const CloudConfig& cfg) {
  nlohmann::json j = nlohmann::json::parse(cfg.cloud.to_json());
  j["scheme"] = nlohmann::json::parse(cfg.scheme.to_json());
  return j.dump(2);
}

}  // namespace blris
