#include "xlst/runlog.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cmath>
#include <sstream>

#include "xlst/error.hpp"
#include "xlst/io.hpp"

namespace xlst {

namespace fs = std::filesystem;

namespace {

void open_log(std::ofstream& out, const fs::path& path, std::ios::openmode mode) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out.open(path, std::ios::binary | mode);
  if (!out) throw Error("cannot open metrics log " + path.string());
}

nlohmann::ordered_json number_or_null(double v) {
  return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v);
}

}  // namespace

MetricsLog::MetricsLog(const fs::path& path) { open_log(out_, path, std::ios::trunc); }

MetricsLog::MetricsLog(const fs::path& path, std::int64_t step) {
  std::string kept;
  if (fs::exists(path)) {
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line) && !in.eof()) {
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("step") || j["step"].get<std::int64_t>() > step) break;
      kept += line + '\n';
    }
  }
  write_file_atomic(path, kept);
  open_log(out_, path, std::ios::app);
}

void MetricsLog::write(const nlohmann::ordered_json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
  if (!out_) throw Error("metrics log write failed");
}

std::vector<nlohmann::json> read_metrics(const fs::path& path) {
  std::vector<nlohmann::json> out;
  std::istringstream in(read_file(path));
  std::string line;
  // A line without its newline was torn by a crash.
  while (std::getline(in, line) && !in.eof()) {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw FormatError(path.string() + ": malformed metrics record");
    out.push_back(std::move(j));
  }
  return out;
}

nlohmann::ordered_json step_record(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["type"] = "step";
  j["step"] = m.step;
  j["epoch"] = m.epoch;
  j["round"] = m.round;
  j["lr"] = m.lr;
  j["loss"] = number_or_null(m.loss);
  j["frame_acc"] = number_or_null(m.frame_acc);
  j["collapse_cosine"] = number_or_null(m.collapse_cosine);
  return j;
}

RunLock::RunLock(const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path path = dir / ".lock";
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error("cannot open lock file " + path.string());
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw StateError("run directory " + dir.string() + " is in use by another process");
  }
}

RunLock::~RunLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

}  // namespace xlst
