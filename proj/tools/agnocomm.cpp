#include <agnocomm/cli.hpp>

int main(int argc, char** argv) { return agnocomm::cli::run(argc, argv, agnocomm::cli::process_environment()); }
