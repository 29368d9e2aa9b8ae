#pragma once

namespace moescope {

inline constexpr const char* kToolkitVersion = "0.1.0";

}  // namespace moescope
