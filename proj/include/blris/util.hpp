#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace blris {

constexpr double kPi = 3.14159265358979323846;
constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Two-level log scalar.
//
// Represents a nonnegative value v through L = ln v, and additionally LL =
// ln|L| so that |ln v| itself survives when it exceeds double range (the
// composed profiles reach ln v ~ -e^2000). Invariant: when |L| is finite and
// representable, LL == ln(|L|); when L has overflowed, L is +-inf and LL
// carries the magnitude.
struct LogPair {
  double L = -kInf;   // ln(value); -inf encodes value == 0
  double LL = -kInf;  // ln|ln(value)|
  int sign_L = 0;     // sign of ln(value): -1, 0, +1

  static LogPair from_value(double v);
  static LogPair from_log(double lnv);
  // value = exp(s * exp(LL)) with s = sign_L; used when ln v itself is only
  // available in log form.
  static LogPair from_loglog(int s, double ll);

  double value() const;     // saturates to 0 / inf when out of range
  double abs_log() const;   // |ln v|, saturates to inf
  bool is_zero() const { return sign_L == 0 && L == -kInf && LL == -kInf; }

  LogPair mul(const LogPair& o) const;          // v1 * v2
  LogPair mul_value(double c) const;            // v * c, c > 0
  LogPair pow(double p) const;                  // v^p
};

// ln(e^a + e^b), safe for -inf operands.
double logsumexp(double a, double b);

// ---------------------------------------------------------------------------
// Root bracketing / refinement (Brent).
double brent_root(const std::function<double(double)>& f, double a, double b,
                  double fa, double fb, double tol, int max_iter = 200);

// ---------------------------------------------------------------------------
// Gauss-Legendre nodes/weights on [-1,1].
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights);

// Adaptive Simpson on [a,b] to given relative tolerance.
double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double rel_tol, int max_depth = 40);

// ---------------------------------------------------------------------------
// Least-squares line fit y = slope*x + intercept.
struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double max_residual = 0.0;
};
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

// log-log slope fit of (x_i, y_i), skipping nonpositive entries.
LineFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y);

// ---------------------------------------------------------------------------
// Deterministic splittable RNG: xorshift-based mix of a seed and an index, so
// parallel work items draw identical streams at any thread count.
struct SplitRng {
  std::uint64_t state;

  explicit SplitRng(std::uint64_t seed, std::uint64_t stream = 0);
  std::uint64_t next_u64();
  double uniform();                       // [0,1)
  double uniform(double lo, double hi);   // [lo,hi)
  int uniform_int(int lo, int hi);        // inclusive bounds
};

// ---------------------------------------------------------------------------
// SHA-256 (FIPS 180-4), for config hashes and artifact manifests.
std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);

// ---------------------------------------------------------------------------
// Formatting: shortest round-trip double for CSV (%.17g trimmed).
std::string fmt_double(double v);

// Simple fixed-size thread pool running an indexed parallel-for with
// deterministic output (each index writes only its own slot).
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

}  // namespace blris
