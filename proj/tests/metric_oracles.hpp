#pragma once

#include <vector>

#include "cellflow/evalharness.hpp"

namespace cftest {

using cellflow::MetricDirection;
using cellflow::ModelingEntry;
using cellflow::QuestionResult;

// Straight transcriptions of the metric definitions, written independently
// of the library: nested loops, explicit products, no shared helpers.
inline double oracle_pasq(const std::vector<QuestionResult>& qs) {
    double outer = 0;
    for (const auto& q : qs) {
        double inner = 0;
        for (int f : q.flags) inner += f;
        outer += inner / static_cast<double>(q.flags.size());
    }
    return outer / static_cast<double>(qs.size());
}

inline double oracle_abq(const std::vector<QuestionResult>& qs) {
    double outer = 0;
    for (const auto& q : qs) {
        int prod = 1;
        for (int f : q.flags) prod *= f;
        outer += prod;
    }
    return outer / static_cast<double>(qs.size());
}

inline double oracle_uasq(const std::vector<QuestionResult>& qs) {
    double num = 0;
    double den = 0;
    for (const auto& q : qs) {
        for (int f : q.flags) {
            num += f;
            den += 1;
        }
    }
    return num / den;
}

inline double oracle_rpg(const std::vector<ModelingEntry>& es) {
    double total = 0;
    for (const auto& e : es) {
        double p = e.p, b = e.b, g = e.g;
        if (!e.completed) p = b;
        if (e.direction == MetricDirection::LowerBetter) {
            p = -p;
            b = -b;
            g = -g;
        }
        const double r = (p - b) / (g - b);
        total += r > 0 ? r : 0;
    }
    return total / static_cast<double>(es.size());
}

}  // namespace cftest
