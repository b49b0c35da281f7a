// Resolution of the bundled data directory (prompt registries, template
// pools). Explicit paths win over the TRACEGUARD_DATA_DIR environment
// variable, which wins over the compiled-in default.
#pragma once

#include <string>

namespace traceguard {

std::string default_data_dir();

}  // namespace traceguard
