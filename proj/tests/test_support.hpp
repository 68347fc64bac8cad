#pragma once

// Helpers shared across test binaries. The central-difference gradient checker
// is the independent oracle for every analytic gradient in the project: it
// only re-evaluates the loss as a black box and never touches the tape.

#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include "botarena/rng.hpp"

namespace testsupport {

struct FdParam {
  std::vector<double>* value;            // perturbed in place, restored after
  const std::vector<double>* analytic;   // gradient to check, same length
};

struct FdResult {
  double max_rel_err = 0.0;   // over informative entries
  int informative = 0;        // entries with |grad| above the floor
  int small_checked = 0;      // near-zero-gradient entries, checked absolutely
  double max_small_abs_err = 0.0;
};

// Central differences with step h on up to max_samples informative entries.
// Entries where both analytic and numeric gradients are below the floor are
// verified with an absolute tolerance instead (they carry no relative signal).
inline FdResult fd_check(std::vector<FdParam> params,
                         const std::function<double()>& loss,
                         int max_samples, double h, botarena::Rng& rng,
                         double informative_floor = 1e-4) {
  std::vector<std::pair<std::size_t, std::size_t>> positions;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].value->size(); ++i) positions.emplace_back(p, i);
  }
  rng.shuffle(positions);
  FdResult res;
  for (auto [p, i] : positions) {
    if (res.informative >= max_samples) break;
    double& x = (*params[p].value)[i];
    double x0 = x;
    x = x0 + h;
    double lp = loss();
    x = x0 - h;
    double lm = loss();
    x = x0;
    double fd = (lp - lm) / (2.0 * h);
    double ad = (*params[p].analytic)[i];
    double mag = std::max(std::fabs(fd), std::fabs(ad));
    if (mag >= informative_floor) {
      res.max_rel_err = std::max(res.max_rel_err, std::fabs(fd - ad) / mag);
      res.informative += 1;
    } else {
      res.max_small_abs_err = std::max(res.max_small_abs_err, std::fabs(fd - ad));
      res.small_checked += 1;
    }
  }
  return res;
}

inline bool close(double a, double b, double tol) { return std::fabs(a - b) <= tol; }

}  // namespace testsupport
