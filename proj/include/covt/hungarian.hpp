#pragma once

// Minimum-cost square assignment via the Hungarian algorithm with potentials,
// plus a deterministic lexicographic tie-break over optimal permutations.

#include <Eigen/Dense>
#include <limits>
#include <vector>

#include "covt/errors.hpp"

namespace covt {

namespace detail {

// O(n^3) shortest augmenting path formulation. Returns the optimal cost.
inline double assignment_cost(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, false);
    do {
      used[j0] = true;
      int i0 = p[j0], j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j) total += cost(p[j] - 1, j - 1);
  return total;
}

}  // namespace detail

// sigma[i] = column assigned to row i, minimizing total cost. Among optimal
// assignments the lexicographically smallest permutation is returned: row 0
// gets the smallest feasible column, then row 1, and so on.
inline std::vector<int> hungarian_match(const Eigen::MatrixXd& cost) {
  if (cost.rows() != cost.cols() || cost.rows() == 0)
    throw NonSquare("cost matrix is " + std::to_string(cost.rows()) + "x" +
                    std::to_string(cost.cols()));
  if (!cost.allFinite()) throw InvalidValue("cost matrix has non-finite entries");
  const int n = static_cast<int>(cost.rows());

  double best = detail::assignment_cost(cost);
  double scale = cost.cwiseAbs().maxCoeff();
  double tol = 1e-9 * std::max(1.0, scale);

  std::vector<int> sigma(n, -1);
  std::vector<char> used(n, false);
  double fixed = 0.0;
  for (int i = 0; i < n; ++i) {
    const int m = n - i - 1;  // remaining rows after fixing row i
    for (int j = 0; j < n; ++j) {
      if (used[j]) continue;
      double rest = 0.0;
      if (m > 0) {
        Eigen::MatrixXd sub(m, m);
        int rr = 0;
        for (int r = i + 1; r < n; ++r, ++rr) {
          int cc = 0;
          for (int c = 0; c < n; ++c) {
            if (used[c] || c == j) continue;
            sub(rr, cc++) = cost(r, c);
          }
        }
        rest = detail::assignment_cost(sub);
      }
      if (fixed + cost(i, j) + rest <= best + tol) {
        sigma[i] = j;
        used[j] = true;
        fixed += cost(i, j);
        break;
      }
    }
    if (sigma[i] < 0) throw InvalidValue("hungarian_match: internal inconsistency");
  }
  return sigma;
}

inline double assignment_total(const Eigen::MatrixXd& cost, const std::vector<int>& sigma) {
  double total = 0.0;
  for (size_t i = 0; i < sigma.size(); ++i) total += cost(static_cast<int>(i), sigma[i]);
  return total;
}

}  // namespace covt
