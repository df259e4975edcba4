#include "commands.hpp"

extern char** environ;

int main(int argc, char** argv) { return protopart::cli::run(argc, argv, environ); }
