#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dedn/errors.hpp"

namespace dedn {

enum class EvalMode { kZsl, kGzsl };

/// Seen/unseen class split plus train/test sample index lists. Class ids are
/// dense in [0, K); seen and unseen are sorted and disjoint and together
/// cover every class.
struct SplitSpec {
  std::vector<std::uint32_t> seen_classes;
  std::vector<std::uint32_t> unseen_classes;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;

  std::size_t class_count() const {
    return seen_classes.size() + unseen_classes.size();
  }

  bool is_seen(std::uint32_t cls) const {
    return std::binary_search(seen_classes.begin(), seen_classes.end(), cls);
  }

  bool is_unseen(std::uint32_t cls) const {
    return std::binary_search(unseen_classes.begin(), unseen_classes.end(),
                              cls);
  }

  /// Checks the split against a labelled sample set. Throws ValidationError
  /// naming the first violation.
  void validate(std::size_t num_samples,
                std::span<const std::uint32_t> labels) const {
    const std::size_t k = class_count();
    std::vector<char> covered(k, 0);
    for (auto list : {&seen_classes, &unseen_classes}) {
      std::uint32_t prev = 0;
      bool first = true;
      for (std::uint32_t c : *list) {
        if (c >= k) {
          throw ValidationError("split: class id " + std::to_string(c) +
                                " out of range for K=" + std::to_string(k));
        }
        if (!first && c <= prev) {
          throw ValidationError("split: class list not sorted/unique at id " +
                                std::to_string(c));
        }
        if (covered[c]) {
          throw ValidationError("split: class id " + std::to_string(c) +
                                " listed as both seen and unseen");
        }
        covered[c] = 1;
        prev = c;
        first = false;
      }
    }
    // coverage is implied by |seen| + |unseen| == k with no duplicates
    if (labels.size() != num_samples) {
      throw ValidationError("split: " + std::to_string(labels.size()) +
                            " labels for " + std::to_string(num_samples) +
                            " samples");
    }
    for (std::uint32_t lbl : labels) {
      if (lbl >= k) {
        throw ValidationError("split: label " + std::to_string(lbl) +
                              " out of range for K=" + std::to_string(k));
      }
    }
    for (auto list : {&train_indices, &test_indices}) {
      for (std::size_t idx : *list) {
        if (idx >= num_samples) {
          throw ValidationError("split: sample index " + std::to_string(idx) +
                                " out of range for N=" +
                                std::to_string(num_samples));
        }
      }
    }
    for (std::size_t idx : train_indices) {
      if (!is_seen(labels[idx])) {
        throw ValidationError("split: train sample " + std::to_string(idx) +
                              " has unseen-class label " +
                              std::to_string(labels[idx]));
      }
    }
    if (test_indices.empty()) {
      throw ValidationError("split: empty test set");
    }
    bool test_seen = false, test_unseen = false;
    for (std::size_t idx : test_indices) {
      (is_seen(labels[idx]) ? test_seen : test_unseen) = true;
    }
    if (unseen_classes.empty() || !test_unseen) {
      throw ValidationError("split: test set has no unseen-class samples");
    }
    if (!test_seen) {
      throw ValidationError("split: test set has no seen-class samples");
    }
  }
};

}  // namespace dedn
