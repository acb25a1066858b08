// Vertex-frontier variant; prints the degree of every labelled vertex.
#include <fstream>
#include <iostream>
#include <map>

int main(int argc, char **argv) {
    if (argc < 2) {
        std::cerr << "usage: " << argv[0] << " EDGES\n";
        return 2;
    }
    std::map<long, long> degree;
    std::ifstream edges(argv[1]);
    long a, b;
    while (edges >> a >> b) {
        ++degree[a];
        ++degree[b];
    }
    for (const auto &kv : degree) std::cout << kv.first << " " << kv.second << "\n";
    return 0;
}
