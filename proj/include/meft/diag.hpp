#pragma once

#include <string>

namespace meft {

// One stderr line per event; also counted so tests can assert a warning fired.
void warn(const std::string& msg);
long warn_count();

}  // namespace meft
