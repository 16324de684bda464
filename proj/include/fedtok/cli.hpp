#pragma once

#include <string>
#include <vector>

namespace fedtok {

// Command-line entry point behind the `fedtok` binary, exposed so tests can
// drive it in-process. `args` excludes the program name, e.g.
// {"run", "--config", "experiment.json"}.
//
// Subcommands: make-synth, train-tokenizer, run, eval, sample, remap — each
// pipeline stage independently invocable. Every subcommand reads a JSON
// config (--config PATH, required) and honors --seed N / --out DIR overrides.
//
// Exit codes: 0 success, 1 configuration error (bad flags, unreadable or
// invalid config, missing input paths), 2 runtime error (a pipeline stage
// failed; partial artifacts are left in place).
int cli_main(const std::vector<std::string>& args);

}  // namespace fedtok
