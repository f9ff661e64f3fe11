#pragma once

#include "bdlab/errors.hpp"

#include <string>

namespace bdlab {

enum class Verdict { benign, backdoored };

inline const char* verdict_name(Verdict v) { return v == Verdict::backdoored ? "backdoored" : "benign"; }

inline Verdict verdict_from(const std::string& s) {
    if (s == "benign") return Verdict::benign;
    if (s == "backdoored") return Verdict::backdoored;
    throw ConfigError("unknown verdict '" + s + "'");
}

} // namespace bdlab
