#include "ovseg/commands.hpp"

int main(int argc, char** argv) { return ovseg::run_cli(argc, argv); }
