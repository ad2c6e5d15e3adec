#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace ldp {

// Base error for all failures raised by this library. Messages carry the
// offending operator/dims so callers can report without extra context.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Configuration / usage errors (CLI exit code 1); everything else exits 2.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    format_into(os, rest...);
}
} // namespace detail

template <typename... Args>
[[noreturn]] void fail(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    throw Error(os.str());
}

template <typename... Args>
[[noreturn]] void fail_config(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    throw ConfigError(os.str());
}

template <typename... Args>
void require(bool cond, const Args&... args) {
    if (!cond) fail(args...);
}

} // namespace ldp
