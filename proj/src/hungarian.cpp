#include <cmath>
#include <limits>
#include <vector>

#include "ovseg/errors.hpp"
#include "ovseg/proposals.hpp"

namespace ovseg {

// Shortest-augmenting-path assignment with dual potentials (the O(G·N^2)
// Jonker-Volgenant scheme). Exact for rectangular instances with G <= N.
Assignment hungarian_match(const std::vector<double>& cost, std::size_t g, std::size_t n) {
    if (g > n)
        throw ShapeError("hungarian_match: rows " + std::to_string(g) + " exceed columns " +
                         std::to_string(n));
    if (cost.size() != g * n) throw ShapeError("hungarian_match: cost size mismatch");
    for (double c : cost)
        if (!std::isfinite(c)) throw NumericError("hungarian_match: non-finite cost");

    Assignment out;
    out.proposal_of_gt.assign(g, 0);
    if (g == 0) return out;

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(g + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> match(n + 1, 0);  // match[j] = row occupying column j (1-based)
    std::vector<std::size_t> way(n + 1, 0);

    for (std::size_t i = 1; i <= g; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = match[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {  // unwind the augmenting path
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    for (std::size_t j = 1; j <= n; ++j)
        if (match[j] != 0) out.proposal_of_gt[match[j] - 1] = j - 1;
    for (std::size_t i = 0; i < g; ++i)
        out.total_cost += cost[i * n + out.proposal_of_gt[i]];
    return out;
}

}  // namespace ovseg
