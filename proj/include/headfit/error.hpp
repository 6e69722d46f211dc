#pragma once

#include <stdexcept>
#include <string>

namespace headfit {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument, configuration, or dimension mismatch.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Filesystem failure (missing file, unwritable path, short read).
class IoError : public Error {
public:
    using Error::Error;
};

/// Structurally corrupt file (bad magic, inconsistent header, truncation).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Geometry that cannot be processed (degenerate rings, non-manifold mesh,
/// point behind the camera).
class GeometryError : public Error {
public:
    using Error::Error;
};

/// Rendering produced no usable output (e.g. zero visible triangles).
class RenderError : public Error {
public:
    using Error::Error;
};

/// Nonlinear solver failure (pre-alignment divergence, indefinite system).
class SolverError : public Error {
public:
    using Error::Error;
};

/// Mesh alignment failure in the evaluation pipeline.
class AlignmentError : public Error {
public:
    using Error::Error;
};

} // namespace headfit
