#pragma once

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "hybridflow/common.hpp"

namespace hybridflow {

inline void reject_unknown(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                           const std::string& where) {
    if (!obj.is_object()) throw Error(where + ": expected an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw Error(where + ": unknown field '" + key + "'");
    }
}

}  // namespace hybridflow
