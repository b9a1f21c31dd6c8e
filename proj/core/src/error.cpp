#include "jotr/error.hpp"

#include <cstdio>

namespace jotr {

void log_warn(const std::string& message) { std::fprintf(stderr, "[warn] %s\n", message.c_str()); }
void log_info(const std::string& message) { std::fprintf(stderr, "[info] %s\n", message.c_str()); }

} // namespace jotr
