#include <cstdio>

// Placeholder entry point; subcommands are wired in once the command layer
// lands.
int main() {
    std::fprintf(stderr, "jotr: no subcommands wired yet\n");
    return 1;
}
