#pragma once

namespace pstarc {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace pstarc
