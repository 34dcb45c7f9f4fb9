#pragma once

namespace kllab {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace kllab
