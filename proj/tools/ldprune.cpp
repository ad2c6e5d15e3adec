#include <cstdio>

int main() {
    std::puts("ldprune: placeholder");
    return 0;
}
