#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace seat {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A computation-graph failure attributed to a specific node.
class GraphError : public Error {
 public:
  GraphError(std::size_t node, const std::string& what)
      : Error("node " + std::to_string(node) + ": " + what), node_(node) {}

  std::size_t node() const noexcept { return node_; }

 private:
  std::size_t node_;
};

class ShapeError : public GraphError {
 public:
  using GraphError::GraphError;
};

class NonFiniteError : public GraphError {
 public:
  using GraphError::GraphError;
};

/// Two parameter vectors (or a vector and a model) disagree on layout.
class LayoutError : public Error {
 public:
  using Error::Error;
};

}  // namespace seat
