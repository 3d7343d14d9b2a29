/*
 * Copyright 2026 The CF-Reg Authors.
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

#ifndef CFREG_ERROR_HPP_
#define CFREG_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace cfreg {

// Error categories. The numeric values are mirrored by cfreg_status in the C
// API header and must stay in sync.
enum class ErrorCode : int {
  kInvalidArgument = 1,
  kShapeMismatch = 2,
  kIo = 3,
  kParse = 4,
  kDegenerateModel = 5,
  kDivergence = 6,
  kNonFinite = 7,
  kUnsupported = 8,
  kInternal = 9,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void Fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace cfreg

#endif  // CFREG_ERROR_HPP_
