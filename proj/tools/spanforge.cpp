#include "spanforge/cli.hpp"

int main(int argc, char** argv) { return spanforge::run(argc, argv); }
