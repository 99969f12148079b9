#include "xlst/corpus.hpp"

#include "xlst/error.hpp"

namespace xlst {

std::vector<int> collapse_repeats(const std::vector<int>& labels) {
  std::vector<int> out;
  for (int l : labels) {
    if (out.empty() || out.back() != l) out.push_back(l);
  }
  return out;
}

std::vector<int> downsample_labels(const std::vector<int>& frame_labels, int stride) {
  if (stride < 1) throw ConfigError("downsample_labels: stride must be >= 1");
  std::vector<int> out;
  const std::size_t frames = frame_labels.size() / static_cast<std::size_t>(stride);
  out.reserve(frames);
  for (std::size_t k = 0; k < frames; ++k) out.push_back(frame_labels[k * static_cast<std::size_t>(stride)]);
  return out;
}

std::vector<int> ctc_targets(const std::vector<int>& transcript) {
  std::vector<int> out;
  out.reserve(transcript.size());
  for (int p : transcript) out.push_back(p + 1);
  return out;
}

Dataset strip_labels(const Dataset& data) {
  Dataset out = data;
  for (auto& u : out) {
    u.frame_labels.clear();
    u.transcript.clear();
  }
  return out;
}

Dataset filter_language(const Dataset& data, int language) {
  Dataset out;
  for (const auto& u : data) {
    if (u.language == language) out.push_back(u);
  }
  return out;
}

}  // namespace xlst
