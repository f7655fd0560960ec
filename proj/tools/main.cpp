#include "moenc/cli.hpp"

int main(int argc, char** argv) {
    return moenc::cli::run(argc, argv);
}
