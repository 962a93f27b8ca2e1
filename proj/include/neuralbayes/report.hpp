#pragma once

#include <cstddef>
#include <string>

namespace nb {

/// Per-term breakdown of one loss evaluation.
struct ObjectiveReport {
    std::size_t step = 0;
    double mi_term = 0.0;
    double prior_term = 0.0;
    double smooth_term = 0.0;
    double total = 0.0;
};

/// {"step":..,"mi_term":..,"prior_term":..,"smooth_term":..,"total":..} on one line.
std::string to_json(const ObjectiveReport& r);
ObjectiveReport report_from_json(const std::string& line);

}  // namespace nb
