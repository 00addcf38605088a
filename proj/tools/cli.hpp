#pragma once

#include <iosfwd>

namespace srclab {

/// Entry point of the srclab command line; returns the process exit code.
int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace srclab
