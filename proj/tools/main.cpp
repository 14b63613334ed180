#include <iostream>
#include <malloc.h>

#include "cli_app.hpp"

int main(int argc, char** argv)
{
    // Keep freed tensor buffers in the heap; repeated large allocations are
    // otherwise returned to and refetched from the OS on every batch.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    std::vector<std::string> args(argv + 1, argv + argc);
    return trojanscope::run_cli(args, std::cout, std::cerr);
}
