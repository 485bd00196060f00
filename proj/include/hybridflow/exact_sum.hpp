#pragma once

#include <cstddef>
#include <vector>

namespace hybridflow {

/// Exact floating-point accumulator (Shewchuk non-overlapping expansion).
/// value() is the correctly rounded sum of everything added, so the result
/// does not depend on insertion order.
class ExactSum {
public:
    void add(double x);
    /// Adds a*b without rounding the product.
    void add_product(double a, double b);
    void merge(const ExactSum& other);
    double value() const;
    bool empty() const { return partials_.empty(); }

private:
    std::vector<double> partials_;
};

}  // namespace hybridflow
