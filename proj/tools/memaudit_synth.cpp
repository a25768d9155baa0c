#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "memaudit/synthdata.hpp"

// Emits a synthetic dataset directory in the MNIST/CIFAR file layout, for
// running the pipeline where the benchmark datasets are not available.
int main(int argc, char** argv) {
    CLI::App app{"memaudit-synth - write a synthetic dataset directory"};
    std::string out;
    int train_n = 12000;
    int test_n = 2000;
    int ood_n = 4000;
    std::uint64_t seed = 1;
    app.add_option("--out", out, "output directory")->required();
    app.add_option("--train-n", train_n, "training digits (default 12000)");
    app.add_option("--test-n", test_n, "held-out digits (default 2000)");
    app.add_option("--ood-n", ood_n, "OOD scene images (default 4000)");
    app.add_option("--seed", seed, "generator seed (default 1)");
    CLI11_PARSE(app, argc, argv);

    try {
        memaudit::write_synth_dataset_dir(out, train_n, test_n, ood_n, seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cout << "wrote train/test IDX files and test_batch.bin under " << out << "\n";
    return 0;
}
