// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mim4d/diff.hpp"

namespace mim4d::gradsuite {

struct Case {
  std::string name;
  bool composition = false;
  double tolerance = 1e-4;
  std::function<diff::GradcheckResult()> run;
};

/// Every differentiable tape operation on small random inputs; `instance`
/// selects an independent draw of the inputs.
std::vector<Case> op_cases(std::uint64_t instance = 0);

/// Encoder to loss with no temporal stage, deformable attention alone, and the
/// full pipeline with both temporal branches on a two-frame toy clip.
std::vector<Case> composition_cases();

struct Outcome {
  std::string name;
  bool composition = false;
  double tolerance = 0.0;
  diff::GradcheckResult result;
  double seconds = 0.0;
  bool passed() const { return result.checked > 0 && result.max_rel_error < tolerance; }
};

std::vector<Outcome> run(const std::vector<Case>& cases);

}  // namespace mim4d::gradsuite
