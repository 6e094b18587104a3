/*
 * Copyright 2026 The LesionFuse Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace lf {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map them onto exit codes with a single catch.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define LF_DECLARE_ERROR(Name)         \
  class Name : public Error {          \
   public:                             \
    using Error::Error;                \
  }

LF_DECLARE_ERROR(FormatError);       // malformed file content
LF_DECLARE_ERROR(UnsupportedError);  // valid file, unsupported feature
LF_DECLARE_ERROR(IoError);
LF_DECLARE_ERROR(ArgumentError);
LF_DECLARE_ERROR(ShapeError);
LF_DECLARE_ERROR(FittingError);
LF_DECLARE_ERROR(DegenerateError);
LF_DECLARE_ERROR(PlacementError);
LF_DECLARE_ERROR(UsageError);
LF_DECLARE_ERROR(DatasetError);
LF_DECLARE_ERROR(TrainingError);
LF_DECLARE_ERROR(SchemaError);
LF_DECLARE_ERROR(StageError);

#undef LF_DECLARE_ERROR

// Raised when a training loss turns non-finite.
class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, const std::string& what)
      : Error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

template <typename E, typename... Args>
[[noreturn]] void raise(Args&&... args) {
  throw E(detail::concat(std::forward<Args>(args)...));
}

}  // namespace lf
