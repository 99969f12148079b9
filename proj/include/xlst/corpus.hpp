#pragma once

#include <string>
#include <vector>

#include "xlst/tensor.hpp"

namespace xlst {

struct Utterance {
  std::string id;
  int language = 0;
  Matrix<double> features;        // T x F
  std::vector<int> frame_labels;  // per input frame, phone index within the language; empty if unlabeled
  std::vector<int> transcript;    // frame_labels with repeats merged

  bool has_labels() const { return !frame_labels.empty(); }
};

using Dataset = std::vector<Utterance>;

// Merge consecutive repeats.
std::vector<int> collapse_repeats(const std::vector<int>& labels);

// Label of encoder frame k is the label of input frame stride * k.
std::vector<int> downsample_labels(const std::vector<int>& frame_labels, int stride);

// CTC targets: phone index p becomes label p + 1 (0 is blank).
std::vector<int> ctc_targets(const std::vector<int>& transcript);

// Copy without labels; the form in which un-annotated sets are handed out.
Dataset strip_labels(const Dataset& data);

Dataset filter_language(const Dataset& data, int language);

}  // namespace xlst
