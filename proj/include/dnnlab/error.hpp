// dnnlab/error.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dnnlab {

/// Failure categories. The CLI maps these onto exit codes.
enum class ErrorKind {
  kInvalidConfig,
  kShape,
  kInvalidInput,
  kInvalidLabel,
  kTrainingDiverged,
  kConvergenceFailure,
  kAdaptationDiverged,
  kParse,
  kIo,
};

inline const char *ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidConfig: return "invalid-config";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kInvalidLabel: return "invalid-label";
    case ErrorKind::kTrainingDiverged: return "training-diverged";
    case ErrorKind::kConvergenceFailure: return "convergence-failure";
    case ErrorKind::kAdaptationDiverged: return "adaptation-diverged";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string &what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

struct InvalidConfigError : Error {
  explicit InvalidConfigError(const std::string &w)
      : Error(ErrorKind::kInvalidConfig, w) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string &w) : Error(ErrorKind::kShape, w) {}
};

struct InvalidInputError : Error {
  explicit InvalidInputError(const std::string &w)
      : Error(ErrorKind::kInvalidInput, w) {}
};

struct InvalidLabelError : Error {
  explicit InvalidLabelError(const std::string &w)
      : Error(ErrorKind::kInvalidLabel, w) {}
};

class TrainingDivergedError : public Error {
 public:
  explicit TrainingDivergedError(int epoch)
      : Error(ErrorKind::kTrainingDiverged,
              "training diverged at epoch " + std::to_string(epoch)),
        epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

/// Power iteration hit its cap; best_estimate is the last Rayleigh value.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string &w, double best_estimate)
      : Error(ErrorKind::kConvergenceFailure, w), best_(best_estimate) {}
  double best_estimate() const { return best_; }

 private:
  double best_;
};

struct AdaptationDivergedError : Error {
  explicit AdaptationDivergedError(const std::string &w)
      : Error(ErrorKind::kAdaptationDiverged, w) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string &w, std::size_t line)
      : Error(ErrorKind::kParse, "line " + std::to_string(line) + ": " + w),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct IoError : Error {
  explicit IoError(const std::string &w) : Error(ErrorKind::kIo, w) {}
};

}  // namespace dnnlab
