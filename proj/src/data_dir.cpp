#include "traceguard/data_dir.hpp"

#include <cstdlib>

#ifndef TRACEGUARD_DEFAULT_DATA_DIR
#define TRACEGUARD_DEFAULT_DATA_DIR "data"
#endif

namespace traceguard {

std::string default_data_dir() {
  if (const char* env = std::getenv("TRACEGUARD_DATA_DIR"); env && *env) {
    return env;
  }
  return TRACEGUARD_DEFAULT_DATA_DIR;
}

}  // namespace traceguard
