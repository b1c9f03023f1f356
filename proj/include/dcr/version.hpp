#pragma once

#include <string_view>

#ifndef DCR_GIT_VERSION
#define DCR_GIT_VERSION "unknown"
#endif

namespace dcr {

inline constexpr std::string_view kVersion = "0.1.0";
inline constexpr std::string_view kGitVersion = DCR_GIT_VERSION;

}  // namespace dcr
