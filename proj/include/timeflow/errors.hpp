/*
 * TimeFlow longitudinal registration
 *
 * Copyright 2026 The TimeFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace timeflow {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// File contents or layout not supported (e.g. a 4D NIfTI where 3D is required).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Grid dimensions of two operands disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input admits no meaningful answer: constant image, empty mask, flat objective.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the operation's domain (non-finite time, t outside (0,1), ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration or manifest.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace timeflow
