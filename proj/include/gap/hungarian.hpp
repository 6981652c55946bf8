#pragma once

#include <cstddef>
#include <utility>
#include <vector>

namespace gap::loss {

// Dense row-major square matrix.
struct CostMatrix {
    std::size_t size = 0;
    std::vector<double> values;

    CostMatrix() = default;
    explicit CostMatrix(std::size_t n, double fill = 0.0) : size(n), values(n * n, fill) {}
    double& operator()(std::size_t r, std::size_t c) { return values[r * size + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values[r * size + c]; }
};

struct Assignment {
    // (row, column) pairs sorted by row; every row and column appears once.
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    double total_cost = 0.0;

    // Column assigned to `row`.
    std::size_t column_of(std::size_t row) const { return pairs.at(row).second; }
};

// Minimum-cost perfect assignment (Kuhn-Munkres with potentials, O(n^3)).
// Deterministic: when several columns tie during augmentation the lowest
// index wins. Throws NumericError on non-finite entries.
Assignment hungarian(const CostMatrix& cost);

}  // namespace gap::loss
