#include "ddmc/cli.hpp"

int main(int argc, char** argv) { return ddmc::cli::dispatch(argc, argv); }
