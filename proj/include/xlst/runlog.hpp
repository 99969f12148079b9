#pragma once

// Run directory plumbing: the metrics log and the writer lock.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "xlst/trainer.hpp"

namespace xlst {

// One JSON object per line, flushed after every record. Every record
// carries a "step" field.
class MetricsLog {
 public:
  // Starts a fresh log.
  explicit MetricsLog(const std::filesystem::path& path);
  // Continues a log at a resumed step: complete records up to and
  // including `step` are kept, anything later or torn is dropped.
  MetricsLog(const std::filesystem::path& path, std::int64_t step);

  void write(const nlohmann::ordered_json& record);

 private:
  std::ofstream out_;
};

// Complete records; a torn last line (a crashed writer) is ignored.
std::vector<nlohmann::json> read_metrics(const std::filesystem::path& path);

// NaN fields become null.
nlohmann::ordered_json step_record(const StepMetrics& m);

// Exclusive advisory lock on `<dir>/.lock`, released when the object dies
// or the process exits. A second writer gets StateError.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace xlst
