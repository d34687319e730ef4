// dnnlab/types.hpp

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

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "dnnlab/error.hpp"

namespace dnnlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMajorMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Network-ready training/evaluation frames: one spliced input per row.
struct FrameSet {
  Matrix inputs;
  std::vector<int> labels;

  int size() const { return static_cast<int>(inputs.rows()); }
  int dim() const { return static_cast<int>(inputs.cols()); }
};

inline void check_frame_set(const FrameSet &data) {
  if (static_cast<std::size_t>(data.inputs.rows()) != data.labels.size())
    throw ShapeError("frame set has " + std::to_string(data.inputs.rows()) +
                     " rows but " + std::to_string(data.labels.size()) +
                     " labels");
}

/// Concatenates frame sets row-wise; all parts must agree on input width.
inline FrameSet concat(const std::vector<const FrameSet *> &parts) {
  FrameSet out;
  Eigen::Index rows = 0, cols = -1;
  for (const FrameSet *p : parts) {
    check_frame_set(*p);
    if (p->inputs.rows() == 0) continue;
    if (cols >= 0 && p->inputs.cols() != cols)
      throw ShapeError("cannot concatenate frame sets of different widths");
    cols = p->inputs.cols();
    rows += p->inputs.rows();
  }
  out.inputs.resize(rows, cols < 0 ? 0 : cols);
  Eigen::Index r = 0;
  for (const FrameSet *p : parts) {
    if (p->inputs.rows() == 0) continue;
    out.inputs.middleRows(r, p->inputs.rows()) = p->inputs;
    r += p->inputs.rows();
    out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
  }
  return out;
}

/// FNV-1a, used for config fingerprints embedded in reports.
inline std::uint64_t fnv1a64(const std::string &bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char *digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

}  // namespace dnnlab
