#pragma once

#include <stdexcept>
#include <string>

namespace cxr {

enum class ErrorKind {
    shape,
    parameter,
    format,
    layout,
    corruption,
    numerical,
    io,
    iteration,
    split,
    degenerate_batch,
    undefined_auc,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape: return "shape error";
        case ErrorKind::parameter: return "parameter error";
        case ErrorKind::format: return "format error";
        case ErrorKind::layout: return "layout error";
        case ErrorKind::corruption: return "corruption error";
        case ErrorKind::numerical: return "numerical error";
        case ErrorKind::io: return "I/O error";
        case ErrorKind::iteration: return "iteration error";
        case ErrorKind::split: return "split error";
        case ErrorKind::degenerate_batch: return "degenerate-batch error";
        case ErrorKind::undefined_auc: return "undefined-AUC error";
    }
    return "error";
}

// Every failure raised by the library carries a kind so the CLI can map it
// onto a distinct exit code.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), detail_(what) {}

    ErrorKind kind() const noexcept { return kind_; }
    // The message without the kind prefix.
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorKind kind_;
    std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

}  // namespace cxr
