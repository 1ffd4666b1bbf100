#include "blris/util.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <thread>

namespace blris {

// ---------------------------------------------------------------------------
// LogPair

LogPair LogPair::from_value(double v) {
  if (v < 0.0) throw std::invalid_argument("LogPair::from_value: negative");
  if (v == 0.0) return LogPair{};
  return from_log(std::log(v));
}

LogPair LogPair::from_log(double lnv) {
  LogPair p;
  p.L = lnv;
  if (lnv == 0.0) {
    p.sign_L = 0;
    p.LL = -kInf;
  } else {
    p.sign_L = lnv > 0.0 ? 1 : -1;
    p.LL = std::log(std::fabs(lnv));
  }
  return p;
}

LogPair LogPair::from_loglog(int s, double ll) {
  LogPair p;
  p.sign_L = s;
  p.LL = ll;
  double mag = std::exp(ll);
  p.L = s >= 0 ? mag : -mag;  // may saturate to +-inf; LL keeps the truth
  if (s == 0) p.L = 0.0;
  return p;
}

double LogPair::value() const {
  if (is_zero()) return 0.0;
  return std::exp(L);  // exp saturates to 0 or inf on its own
}

double LogPair::abs_log() const {
  if (is_zero()) return kInf;
  if (std::isfinite(L)) return std::fabs(L);
  return std::exp(LL);  // saturates to inf only past LL ~ 709
}

LogPair LogPair::mul(const LogPair& o) const {
  if (is_zero() || o.is_zero()) return LogPair{};
  if (std::isfinite(L) && std::isfinite(o.L)) return from_log(L + o.L);
  // At least one factor has an astronomically large |ln|. Add the logs in the
  // double-log domain; the result is correct to relative e^(-|LL gap|).
  if (sign_L == 0) return o;    // this == 1
  if (o.sign_L == 0) return *this;
  double hi = std::max(LL, o.LL), lo = std::min(LL, o.LL);
  int sign_hi = LL >= o.LL ? sign_L : o.sign_L;
  double t = (sign_L == o.sign_L ? 1.0 : -1.0) * std::exp(lo - hi);
  if (t == -1.0) return from_log(0.0);  // the logs cancel exactly
  return from_loglog(sign_hi, hi + std::log1p(t));
}

LogPair LogPair::mul_value(double c) const {
  if (c <= 0.0) {
    if (c == 0.0) return LogPair{};
    throw std::invalid_argument("LogPair::mul_value: negative");
  }
  if (is_zero()) return LogPair{};
  if (std::isfinite(L)) return from_log(L + std::log(c));
  return *this;  // finite factor cannot move an astronomic log
}

LogPair LogPair::pow(double p) const {
  if (is_zero()) return LogPair{};
  if (std::isfinite(L)) return from_log(L * p);
  LogPair r = *this;
  r.LL += std::log(std::fabs(p));
  if (p < 0) r.sign_L = -r.sign_L;
  r.L = r.sign_L >= 0 ? kInf : -kInf;
  return r;
}

double logsumexp(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// ---------------------------------------------------------------------------
// Brent root refinement on a bracketing interval.

double brent_root(const std::function<double(double)>& f, double a, double b,
                  double fa, double fb, double tol, int max_iter) {
  if (fa == 0.0) return a;
  if (fb == 0.0) return b;
  if (fa * fb > 0.0) throw std::invalid_argument("brent_root: not a bracket");
  double c = a, fc = fa, d = b - a, e = d;
  for (int it = 0; it < max_iter; ++it) {
    if (std::fabs(fc) < std::fabs(fb)) {
      a = b;
      b = c;
      c = a;
      fa = fb;
      fb = fc;
      fc = fa;
    }
    double tol1 = 2.0 * std::numeric_limits<double>::epsilon() * std::fabs(b) + 0.5 * tol;
    double xm = 0.5 * (c - b);
    if (std::fabs(xm) <= tol1 || fb == 0.0) return b;
    if (std::fabs(e) >= tol1 && std::fabs(fa) > std::fabs(fb)) {
      double s = fb / fa, p, q;
      if (a == c) {
        p = 2.0 * xm * s;
        q = 1.0 - s;
      } else {
        double qq = fa / fc, r = fb / fc;
        p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
        q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
      }
      if (p > 0.0) q = -q;
      p = std::fabs(p);
      if (2.0 * p < std::min(3.0 * xm * q - std::fabs(tol1 * q), std::fabs(e * q))) {
        e = d;
        d = p / q;
      } else {
        d = xm;
        e = d;
      }
    } else {
      d = xm;
      e = d;
    }
    a = b;
    fa = fb;
    b += std::fabs(d) > tol1 ? d : (xm > 0 ? tol1 : -tol1);
    fb = f(b);
    if ((fb > 0) == (fc > 0)) {
      c = a;
      fc = fa;
      d = b - a;
      e = d;
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Gauss-Legendre by Newton on Legendre polynomials.

void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  nodes.assign(n, 0.0);
  weights.assign(n, 0.0);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int j = 0; j < n; ++j) {
        double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * j + 1.0) * x * p1 - j * p2) / (j + 1.0);
      }
      pp = n * (x * p0 - p1) / (x * x - 1.0);
      double dx = p0 / pp;
      x -= dx;
      if (std::fabs(dx) < 1e-15) break;
    }
    nodes[i] = -x;
    nodes[n - 1 - i] = x;
    double w = 2.0 / ((1.0 - x * x) * pp * pp);
    weights[i] = w;
    weights[n - 1 - i] = w;
  }
}

namespace {
double simpson_rec(const std::function<double(double)>& f, double a, double b, double fa,
                   double fm, double fb, double whole, double rel_tol, int depth) {
  double m = 0.5 * (a + b);
  double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  double flm = f(lm), frm = f(rm);
  double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  double err = left + right - whole;
  double scale = std::max(std::fabs(left + right), 1e-300);
  if (depth <= 0 || std::fabs(err) <= 15.0 * rel_tol * scale)
    return left + right + err / 15.0;
  return simpson_rec(f, a, m, fa, flm, fm, left, rel_tol, depth - 1) +
         simpson_rec(f, m, b, fm, frm, fb, right, rel_tol, depth - 1);
}
}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double rel_tol, int max_depth) {
  if (a == b) return 0.0;
  double m = 0.5 * (a + b);
  double fa = f(a), fm = f(m), fb = f(b);
  double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return simpson_rec(f, a, b, fa, fm, fb, whole, rel_tol, max_depth);
}

// ---------------------------------------------------------------------------

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  LineFit r;
  std::size_t n = x.size();
  if (n < 2 || y.size() != n) return r;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  double det = n * sxx - sx * sx;
  if (det == 0.0) return r;
  r.slope = (n * sxy - sx * sy) / det;
  r.intercept = (sy - r.slope * sx) / n;
  for (std::size_t i = 0; i < n; ++i)
    r.max_residual = std::max(r.max_residual, std::fabs(y[i] - (r.slope * x[i] + r.intercept)));
  return r;
}

LineFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (x[i] > 0.0 && y[i] > 0.0) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  }
  return fit_line(lx, ly);
}

// ---------------------------------------------------------------------------

SplitRng::SplitRng(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 mixing of (seed, stream)
  state = seed + 0x9E3779B97f4A7C15ULL * (stream + 1);
  next_u64();
  next_u64();
}

std::uint64_t SplitRng::next_u64() {
  std::uint64_t z = (state += 0x9E3779B97f4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double SplitRng::uniform() {
  return (next_u64() >> 11) * (1.0 / 9007199254740992.0);
}

double SplitRng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int SplitRng::uniform_int(int lo, int hi) {
  return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
}

// ---------------------------------------------------------------------------
// SHA-256

namespace {
constexpr std::uint32_t kSha256K[64] = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
    0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
    0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
    0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
    0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
    0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
    0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
    0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
    0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
    0xc67178f2};

inline std::uint32_t rotr(std::uint32_t v, int c) { return (v >> c) | (v << (32 - c)); }

void sha256_block(std::uint32_t h[8], const unsigned char* p) {
  std::uint32_t w[64];
  for (int i = 0; i < 16; ++i)
    w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
           (std::uint32_t(p[4 * i + 2]) << 8) | std::uint32_t(p[4 * i + 3]);
  for (int i = 16; i < 64; ++i) {
    std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
    std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
    w[i] = w[i - 16] + s0 + w[i - 7] + s1;
  }
  std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6],
                hh = h[7];
  for (int i = 0; i < 64; ++i) {
    std::uint32_t S1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
    std::uint32_t ch = (e & f) ^ (~e & g);
    std::uint32_t t1 = hh + S1 + ch + kSha256K[i] + w[i];
    std::uint32_t S0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
    std::uint32_t mj = (a & b) ^ (a & c) ^ (b & c);
    std::uint32_t t2 = S0 + mj;
    hh = g;
    g = f;
    f = e;
    e = d + t1;
    d = c;
    c = b;
    b = a;
    a = t1 + t2;
  }
  h[0] += a;
  h[1] += b;
  h[2] += c;
  h[3] += d;
  h[4] += e;
  h[5] += f;
  h[6] += g;
  h[7] += hh;
}
}  // namespace

std::string sha256_hex(const void* data, std::size_t len) {
  std::uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                        0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::size_t full = len / 64;
  for (std::size_t i = 0; i < full; ++i) sha256_block(h, p + 64 * i);
  unsigned char tail[128];
  std::size_t rem = len - 64 * full;
  std::memcpy(tail, p + 64 * full, rem);
  tail[rem] = 0x80;
  std::size_t padded = rem + 1 <= 56 ? 64 : 128;
  std::memset(tail + rem + 1, 0, padded - rem - 1 - 8);
  std::uint64_t bits = std::uint64_t(len) * 8;
  for (int i = 0; i < 8; ++i) tail[padded - 1 - i] = static_cast<unsigned char>(bits >> (8 * i));
  sha256_block(h, tail);
  if (padded == 128) sha256_block(h, tail + 64);
  char out[65];
  for (int i = 0; i < 8; ++i) std::snprintf(out + 8 * i, 9, "%08x", h[i]);
  return std::string(out, 64);
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

// ---------------------------------------------------------------------------

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // prefer the shortest representation that round-trips
  for (int prec = 1; prec < 17; ++prec) {
    char s[40];
    std::snprintf(s, sizeof s, "%.*g", prec, v);
    double back;
    std::sscanf(s, "%lf", &back);
    if (back == v || (std::isnan(back) && std::isnan(v))) return s;
  }
  return buf;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  int nt = std::min<std::size_t>(threads, n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (int t = 0; t < nt; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        body(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace blris
