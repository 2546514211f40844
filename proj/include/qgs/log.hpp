#pragma once

namespace qgs {

// Sets the log level from QGS_LOG (trace|debug|info|warn|error|off), default warn.
void init_logging();

}  // namespace qgs
