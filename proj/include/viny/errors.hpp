// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace viny {

/// Input tensors or configuration whose shape violates a contract.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or infinity reached an activation, loss, or gradient.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// The run store is missing, unreadable, or in a state the request conflicts
/// with.
class StoreError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace viny
