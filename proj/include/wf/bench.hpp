#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "wf/attention.hpp"
#include "wf/encoder.hpp"

namespace wf {

struct SweepSpec {
  std::vector<CostMechanism> mechanisms;
  std::vector<std::string> config_names;  // encoder presets supplying d_e and H
  std::int64_t np = 20;
  std::vector<std::int64_t> c_values;  // default 1..64
  int repetitions = 10;                // median reported
  int warmup = 3;
  bool check_load = true;
  std::uint64_t seed = 0;

  void validate() const;
  static std::vector<std::int64_t> default_c_values();
};

// Median attention-core wall time, transient-allocation peak, instrumented
// element counts, and the analytic closed forms per sweep point. The timed
// region is the part of the mechanism the complexity model covers: scores,
// masking, softmax, and value aggregation on pre-projected Q/K/V (pools
// included for bottleneck); the QKV/output projections are mechanism-
// independent and excluded. `alternating` reports the per-layer worst case
// of its two halves, matching the analytic max convention. Out-of-memory
// points carry status "oom"; a busy machine (>25% background CPU before the
// run) turns every point into status "load_warning" with no measurements.
std::vector<CostReport> run_sweep(const SweepSpec& spec);

// Fraction of non-idle CPU time over a short sampling window, excluding this
// (sleeping) process.
double background_busy_fraction(int sample_ms = 150);

struct ScalingVerdict {
  CostMechanism mechanism = CostMechanism::standard;
  std::string config_name;
  bool elements_exact = false;  // closed form reproduced point-wise
  double element_slope = 0.0;   // log-log slope of elements vs C
  double formula_slope = 0.0;   // slope the closed form itself gives
  bool element_slope_ok = false;
  double time_slope = 0.0;
  bool time_ok = false;           // within +-0.5 of the formula slope
  int monotonic_inversions = 0;   // measured-time decreases along rising C;
                                  // more than one is flagged, never failed
};

// Log-log regression of score elements and measured time against C; needs at
// least four C values per (mechanism, config) series.
std::vector<ScalingVerdict> check_scaling(const std::vector<CostReport>& reports);

// CSV schema: mechanism,config,C,Np,de,score_elements,score_flops,median_ns,
// peak_bytes,status
void write_cost_csv(std::ostream& out, const std::vector<CostReport>& reports);

// Two-column gnuplot series (C, median_ms), one .dat file per
// (mechanism, config).
void write_gnuplot_dat(const std::string& dir, const std::vector<CostReport>& reports);

}  // namespace wf
