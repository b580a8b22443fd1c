#include <cstdio>

int main() {
    std::puts("duvsynth: CLI not wired up yet");
    return 1;
}
