#include "fedleak/matching.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "fedleak/metrics.hpp"

namespace fedleak {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Kuhn-Munkres with potentials on a square cost matrix (minimizing).
std::pair<std::vector<int>, double> solve_min(
    const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(n) + 1, 0);
  std::vector<int> way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      int j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                           u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> perm(static_cast<size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[static_cast<size_t>(j)])
      perm[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    total += cost[static_cast<size_t>(i)][static_cast<size_t>(perm[static_cast<size_t>(i)])];
  return {std::move(perm), total};
}

}  // namespace

std::vector<std::vector<double>> similarity_matrix(
    const std::vector<Array>& a, const std::vector<Array>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("similarity_matrix: image counts differ");
  const size_t n = a.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) m[i][j] = psnr(a[i], b[j]);
  return m;
}

Assignment linear_sum_assignment(const std::vector<std::vector<double>>& m,
                                 bool maximize) {
  const int n = static_cast<int>(m.size());
  Assignment out;
  if (n == 0) return out;
  for (const auto& row : m) {
    if (static_cast<int>(row.size()) != n)
      throw std::invalid_argument("linear_sum_assignment: matrix not square");
    for (double v : row)
      if (!std::isfinite(v))
        throw std::invalid_argument("linear_sum_assignment: non-finite entry");
  }
  std::vector<std::vector<double>> cost(m.size());
  for (size_t i = 0; i < m.size(); ++i) {
    cost[i] = m[i];
    if (maximize)
      for (double& v : cost[i]) v = -v;
  }
  const double best = solve_min(cost).second;
  const double tol = 1e-9 * (1.0 + std::abs(best));

  // Greedy lexicographic refinement over equally optimal assignments: fix
  // rows in order, picking the smallest column whose optimal completion
  // still attains the optimum.
  std::vector<int> perm(static_cast<size_t>(n), -1);
  std::vector<char> used(static_cast<size_t>(n), 0);
  double fixed_cost = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<int> free_cols;
    for (int j = 0; j < n; ++j)
      if (!used[static_cast<size_t>(j)]) free_cols.push_back(j);
    for (int j : free_cols) {
      double completion = 0.0;
      if (i + 1 < n) {
        std::vector<std::vector<double>> sub;
        sub.reserve(static_cast<size_t>(n - i - 1));
        for (int r = i + 1; r < n; ++r) {
          std::vector<double> row;
          row.reserve(free_cols.size() - 1);
          for (int col : free_cols)
            if (col != j) row.push_back(cost[static_cast<size_t>(r)][static_cast<size_t>(col)]);
          sub.push_back(std::move(row));
        }
        completion = solve_min(sub).second;
      }
      const double total = fixed_cost + cost[static_cast<size_t>(i)][static_cast<size_t>(j)] + completion;
      if (total <= best + tol) {
        perm[static_cast<size_t>(i)] = j;
        used[static_cast<size_t>(j)] = 1;
        fixed_cost += cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
        break;
      }
    }
    if (perm[static_cast<size_t>(i)] < 0)
      throw std::runtime_error("linear_sum_assignment: refinement failed");
  }

  out.perm = std::move(perm);
  out.objective = 0.0;
  for (int i = 0; i < n; ++i)
    out.objective += m[static_cast<size_t>(i)][static_cast<size_t>(out.perm[static_cast<size_t>(i)])];
  return out;
}

std::vector<Array> match_epoch(const std::vector<std::vector<Array>>& per_epoch) {
  if (per_epoch.empty())
    throw std::invalid_argument("match_epoch: no epochs");
  const size_t n = per_epoch[0].size();
  for (const auto& epoch : per_epoch)
    if (epoch.size() != n)
      throw std::invalid_argument("match_epoch: epochs hold different image counts");
  if (per_epoch.size() == 1) return per_epoch[0];

  std::vector<Array> out = per_epoch[0];
  for (size_t e = 1; e < per_epoch.size(); ++e) {
    auto m = similarity_matrix(per_epoch[0], per_epoch[e]);
    Assignment a = linear_sum_assignment(m, /*maximize=*/true);
    for (size_t i = 0; i < n; ++i) {
      const Array& img = per_epoch[e][static_cast<size_t>(a.perm[i])];
      for (size_t px = 0; px < img.data.size(); ++px)
        out[i].data[px] += img.data[px];
    }
  }
  const double inv = 1.0 / static_cast<double>(per_epoch.size());
  for (Array& img : out)
    for (double& v : img.data) v *= inv;
  return out;
}

}  // namespace fedleak
