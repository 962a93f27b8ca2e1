#include "neuralbayes/report.hpp"

#include <json.hpp>

#include "neuralbayes/errors.hpp"

namespace nb {

std::string to_json(const ObjectiveReport& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["mi_term"] = r.mi_term;
    j["prior_term"] = r.prior_term;
    j["smooth_term"] = r.smooth_term;
    j["total"] = r.total;
    return j.dump();
}

ObjectiveReport report_from_json(const std::string& line) {
    try {
        auto j = nlohmann::json::parse(line);
        ObjectiveReport r;
        r.step = j.at("step").get<std::size_t>();
        r.mi_term = j.at("mi_term").get<double>();
        r.prior_term = j.at("prior_term").get<double>();
        r.smooth_term = j.at("smooth_term").get<double>();
        r.total = j.at("total").get<double>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("objective report: ") + e.what());
    }
}

}  // namespace nb
