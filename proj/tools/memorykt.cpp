#include <iostream>

int main() {
    std::cout << "memorykt: subcommands not wired yet\n";
    return 0;
}
