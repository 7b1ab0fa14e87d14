#include "msuf/cli.hpp"

int main(int argc, char** argv) { return msuf::cli::run(argc, argv); }
