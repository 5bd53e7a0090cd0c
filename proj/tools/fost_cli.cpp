#include <iostream>

#include "criteria.hpp"
#include "fost/harness.hpp"

int main(int argc, char** argv) {
  return fost::run_command(argc, argv, std::cout, std::cerr, fost::acceptance::selftest_suites);
}
