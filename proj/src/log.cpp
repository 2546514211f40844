#include "qgs/log.hpp"

#include <spdlog/spdlog.h>

#include <cstdlib>

namespace qgs {

void init_logging() {
  const char* env = std::getenv("QGS_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
}

}  // namespace qgs
