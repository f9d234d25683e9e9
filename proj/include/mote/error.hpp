#pragma once

#include <stdexcept>
#include <string>

namespace mote {

// Error classes double as CLI exit codes: validation = 2, I/O = 3, internal = 4.
enum class ErrorClass { Validation = 2, Io = 3, Internal = 4 };

class Error : public std::runtime_error {
public:
    Error(ErrorClass cls, const std::string& msg) : std::runtime_error(msg), cls_(cls) {}
    ErrorClass error_class() const { return cls_; }

private:
    ErrorClass cls_;
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error(ErrorClass::Validation, msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ErrorClass::Io, msg) {}
};

struct InternalError : Error {
    explicit InternalError(const std::string& msg) : Error(ErrorClass::Internal, msg) {}
};

// Faults a binary-file reader can hit, each programmatically distinguishable.
enum class FileFault { BadMagic, BadVersion, Truncated, LabelRange };

class FileFormatError : public IoError {
public:
    FileFormatError(FileFault fault, const std::string& msg) : IoError(msg), fault_(fault) {}
    FileFault fault() const { return fault_; }

private:
    FileFault fault_;
};

}  // namespace mote
