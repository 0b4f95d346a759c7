#pragma once

// Command-line entry point: pretrain / finetune / analyze subcommands over
// the library modules.  Exit codes: 0 success, 2 usage or input problems,
// 3 numeric failure.

namespace mcls::cli {

int run(int argc, char** argv);

}  // namespace mcls::cli
