#pragma once

namespace creq {

inline constexpr const char* kToolName = "creq";
inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace creq
