#include "gap/hungarian.hpp"

#include <cmath>
#include <limits>

#include "gap/errors.hpp"

namespace gap::loss {

Assignment hungarian(const CostMatrix& cost) {
    const std::size_t n = cost.size;
    if (cost.values.size() != n * n) throw ShapeError("hungarian: cost matrix is not square");
    for (double v : cost.values) {
        if (!std::isfinite(v)) throw NumericError("hungarian: non-finite cost entry");
    }
    Assignment result;
    if (n == 0) return result;

    // 1-based rows/columns; column 0 is the virtual source of each augmenting path.
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> row_of(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        row_of[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = row_of[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (row_of[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    result.pairs.resize(n);
    for (std::size_t j = 1; j <= n; ++j) result.pairs[row_of[j] - 1] = {row_of[j] - 1, j - 1};
    for (const auto& [r, c] : result.pairs) result.total_cost += cost(r, c);
    return result;
}

}  // namespace gap::loss
