#include <fodfkit/cli.hpp>

int main(int argc, char** argv) { return fodf::cli::run(argc, argv); }
