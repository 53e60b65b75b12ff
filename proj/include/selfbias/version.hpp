#pragma once

namespace selfbias {

inline constexpr const char* kToolkitVersion = "0.1.0";

}  // namespace selfbias
