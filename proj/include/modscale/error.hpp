// Copyright 2026 The modscale Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace modscale {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value violates a documented invariant (bad ids, non-positive capacity...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A scaling operation does not fit on its destination device.
class InfeasibleOp : public Error {
 public:
  InfeasibleOp(const std::string& what, double shortfall_mb)
      : Error(what), shortfall_mb_(shortfall_mb) {}

  double shortfall_mb() const noexcept { return shortfall_mb_; }

 private:
  double shortfall_mb_;
};

/// No device can accept a module during scale-down.
class NoFeasibleDestination : public Error {
 public:
  using Error::Error;
};

/// Exhaustive search would exceed its configured bound.
class SearchSpaceTooLarge : public Error {
 public:
  using Error::Error;
};

/// Scenario or sweep configuration is malformed. `field()` names the
/// offending path, e.g. "cluster.devices[1].memory_mb".
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace modscale
