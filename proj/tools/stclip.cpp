#include "stclip/cli.hpp"

int main(int argc, char** argv) { return stclip::cli::run(argc, argv); }
