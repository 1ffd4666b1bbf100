#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "blris/cloud.hpp"
#include "blris/fields.hpp"
#include "blris/horizon.hpp"
#include "blris/vec3.hpp"

namespace blris {

// ---------------------------------------------------------------------------
// Region carved out around each source. `horizon` excises at the solved (or
// frozen-coefficient) horizon radius; `lattice` excises the D/n^2 balls;
// `none` keeps the full ball B(0,R) (the smooth comparison space).
enum class ExcisionMode { horizon, lattice, none };

// Conformal factor used for lengths, areas and volumes: the point-source
// superposition chi_n psi_n, or the smooth-cloud chi psi (radial profiles
// make the latter a cached 1-D table).
enum class WeightMode { discrete, continuum };

// ---------------------------------------------------------------------------
// The ball B(0,R) minus the per-source excised balls. For a source with
// alpha*beta = 0 the end is an infinite cylinder; its excision radius is the
// depth-4R' truncation radius (D/2n) exp(-(4R' - D/2n)/(alpha+beta)), kept in
// log form because the double view routinely underflows.
struct Domain {
  double R = 0.0;
  ExcisionMode mode = ExcisionMode::horizon;
  std::shared_ptr<const SourceSet> sources;
  std::shared_ptr<const DiscreteField> field;  // null when there are no entries
  std::vector<double> excision;      // per entry; 0.0 when the value underflowed
  std::vector<double> log_excision;  // ln(excision), exact for cylinder ends
  std::vector<char> cylinder;        // exactly one of alpha, beta positive
  std::vector<double> sep;           // min distance to the other sources (inf if alone)
  double rprime_hint = 0.0;          // cylinder truncation depth = 4 * this

  // purely geometric perforations: excised flat balls with no field sources
  std::vector<Vec3> perf_p;
  std::vector<double> perf_r;
};

// `horizons` (matched by surface index) overrides the frozen-coefficient
// fallback tau * fhat. rprime_hint <= 0 uses 7R. Validates R > sqrt(3) D and,
// in horizon mode, every excision radius < D/(2n) and <= D/n^2.
Domain make_domain(const SourceSet& sources, double R,
                   ExcisionMode mode = ExcisionMode::horizon,
                   const std::vector<HorizonSurface>* horizons = nullptr,
                   double rprime_hint = 0.0);

// ---------------------------------------------------------------------------
// Node layout: a cubic lattice of spacing D/(m n) inside [-D,D]^3, spacing
// ~outer_spacing (rounded to a lattice multiple) outside, and per-source
// spherical shells at geometrically spaced radii from min(D/n, sep/2) down to
// the excision radius, with node counts proportional to shell circumference
// (floored at min_rings). Edge weights are line integrals of the conformal
// factor along straight segments (adaptive Simpson, rel tol weight_tol).
struct GraphParams {
  int m = 2;                       // bulk lattice spacing D/(m n)
  int shells_per_decade = 4;       // geometric shell density per factor 10
  double outer_spacing = 0.0;      // target spacing outside the box; 0 -> R/64
  bool neck_shells = true;         // build per-source shell systems
  double max_shell_decades = 6.0;  // shells stop this far below the start radius
  int min_rings = 3;               // latitude-ring floor per shell
  WeightMode weight = WeightMode::discrete;
  Accel accel = Accel::direct;     // tree pays off beyond ~1000 sources
  double theta = 0.3;
  double weight_tol = 1e-6;        // Simpson relative tolerance per edge
  int threads = 0;                 // 0 -> hardware concurrency
  std::uint64_t memory_cap = std::uint64_t(1) << 31;  // bytes
};

enum class NodeKind : std::uint8_t { bulk = 0, outer = 1, shell = 2, ring = 3 };

// Immutable after build. Adjacency is CSR over both directions; `edges` keeps
// each undirected edge once (canonical a < b) for export and statistics.
struct GeodesicGraph {
  std::shared_ptr<const Domain> domain;
  GraphParams params;
  double h_in = 0.0, h_out = 0.0;

  std::vector<Vec3> pos;
  std::vector<std::uint8_t> kind;
  std::vector<std::int32_t> shell_src;  // source (or perforation) id; -1 elsewhere
  std::vector<float> shell_rho;         // shell radius; 0 elsewhere
  std::vector<float> snap;              // local spacing, the snap tolerance scale

  std::vector<std::int64_t> off;  // CSR offsets, size node_count()+1
  std::vector<std::int32_t> adj;
  std::vector<double> wgt;
  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  std::vector<double> edge_w;

  std::vector<std::int32_t> deepest;      // per source: node on the last shell (-1 if none)
  std::vector<std::int32_t> shell_outer;  // per source: node on the first shell (-1 if none)

  double min_ratio = 0.0, max_ratio = 0.0;  // edge weight / Euclidean length

  std::int64_t node_count() const { return std::int64_t(pos.size()); }
  std::int64_t edge_count() const { return std::int64_t(edges.size()); }
};

GeodesicGraph build_graph(const Domain& dom, const GraphParams& params = {});

// Nearest node by Euclidean distance (brute force; -1 on an empty graph).
int nearest_node(const GeodesicGraph& g, const Vec3& x);

// Single-source distances; entries beyond `cutoff` stay +inf. `stop_at` ends
// the scan once that node is settled.
std::vector<double> dijkstra_from(const GeodesicGraph& g, int source,
                                  double cutoff = kInf, int stop_at = -1);

double node_distance(const GeodesicGraph& g, int a, int b);

// Snaps both points to nearest nodes (within ~one local spacing, else throws)
// and returns the shortest-path length.
double distance(const GeodesicGraph& g, const Vec3& x, const Vec3& y);

// ---------------------------------------------------------------------------
// Radial length of the neck annulus s <= r <= t under (1+a/r)^2 (1+b/r)^2:
//   (t - s) + (a+b) ln(t/s) + a b (1/s - 1/t).
double neck_depth(double alpha, double beta, double s, double t);
double neck_depth(const SourceEntry& e, double s, double t);

// Volume of the same annulus: the exact antiderivative of
// 4 pi r^2 (1+a/r)^3 (1+b/r)^3. The log variant takes ln(s) and requires
// a b = 0 (the only case whose inner radius underflows but whose volume
// stays finite).
double rn_neck_volume(double alpha, double beta, double s, double t);
double rn_neck_volume_log(double alpha, double beta, double log_s, double t);

// Exclusion radius (D/2n) exp(-rprime/(alpha+beta)) of the truncated ball;
// clamps to 0 and sets *underflow when the exponent is out of range.
double truncation_exclusion(double D, int n, double alpha_plus_beta,
                            double rprime, bool* underflow = nullptr);

// ---------------------------------------------------------------------------
// Max distance over a structured sample: axis-extreme boundary antipodes,
// random boundary nodes, the deepest shell node of every (deepest-ranked)
// source, the node nearest the origin, plus `random_pairs` random pairs.
struct DiameterPair {
  int a = -1, b = -1;
  double dist = 0.0;
};
struct DiameterReport {
  double lower = 0.0;               // max sampled distance
  std::vector<DiameterPair> pairs;  // the full table
};
DiameterReport diameter(const GeodesicGraph& g, int random_pairs = 32,
                        std::uint64_t seed = 7);

// ---------------------------------------------------------------------------
// Geodesic ball of radius R' about the node nearest the origin.
//   excl_ok: no retained node lies inside B(p_i, s_excl[i]);
//   bulk_ok: every node outside all B(p_i, D/n^2) was retained.
struct TruncatedDomain {
  double rprime = 0.0;
  std::vector<std::int32_t> retained;  // ascending node ids with d(0,v) < R'
  std::vector<double> s_excl;          // per source, 0.0 when underflowed
  std::vector<char> s_underflow;
  bool excl_ok = true;
  bool bulk_ok = true;
};
TruncatedDomain truncate(const GeodesicGraph& g, double rprime);

// ---------------------------------------------------------------------------
// Greedy maximal r-ball packing in node order; a certified lower bound on the
// packing number, deterministic given the graph.
int capacity(const GeodesicGraph& g, double r);
int capacity(const GeodesicGraph& g, const std::vector<std::int32_t>& subset, double r);

// ---------------------------------------------------------------------------
// Volumes and areas under the chosen conformal factor. Neck volumes integrate
// the annulus excision <= |x-p_i| <= D/n^2 as the exact isolated closed form
// plus spherical quadrature of the (nonnegative) neighbor correction; the bulk
// is a midpoint sum over B(0,R) minus the neck balls with boundary-cell
// refinement; excision areas are spherical quadratures of (chi psi)^2 r^2.
struct RegionParams {
  int sphere_degree = 6;     // angular quadrature order
  double radial_tol = 1e-7;  // adaptive radial tolerance
  int bulk_grid = 128;       // midpoint cells per axis across [-R,R]
  int threads = 0;
};
struct RegionMeasure {
  std::vector<double> neck_volume;  // per source
  double necks = 0.0;               // their sum
  double bulk = 0.0;                // volume of B(0,R) minus the neck balls
  double euclid_bulk = 0.0;         // same cells under the flat metric
  std::vector<double> excision_area;  // per source
  double area = 0.0;                  // their sum
};
enum class RegionSelect { necks, bulk, excision_areas, all };
RegionMeasure region_volume(const Domain& dom, RegionSelect sel,
                            WeightMode mode = WeightMode::discrete,
                            const RegionParams& params = {});

// ---------------------------------------------------------------------------
// Export: <stem>.nodes.bin (pos, kind, shell id, shell radius), <stem>.edges.bin
// (a, b, weight) and <stem>.json (counts, params, SHA-256 of both tables).
void save_graph(const GeodesicGraph& g, const std::string& stem);
std::string graph_json(const GeodesicGraph& g, const std::string& nodes_sha,
                       const std::string& edges_sha);

// CSV `xi,yi,dist` over snapped endpoint node ids.
std::string distance_csv(const GeodesicGraph& g,
                         const std::vector<std::pair<Vec3, Vec3>>& pairs);

}  // namespace blris
