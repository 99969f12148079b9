#pragma once

// The `xlst` command line: synth-data, pretrain-sup, pretrain-xlst,
// finetune and eval. Each command owns one output directory holding the
// resolved config.ini, metrics.jsonl, checkpoints and reports.

#include <iosfwd>

namespace xlst {

// Environment variable naming the default output root.
constexpr const char* out_root_env = "XLST_OUT_ROOT";

// Returns the process exit code; diagnostics go to err.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace xlst
