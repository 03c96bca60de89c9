#include "lawa/cli.hpp"

int main(int argc, char** argv) { return lawa::cli::dispatch(argc, argv); }
