#pragma once

#include <cstdint>
#include <filesystem>

#include "memaudit/data.hpp"

namespace memaudit {

// Deterministic synthetic stand-ins for the benchmark datasets, used by the
// test fixtures and the memaudit-synth tool when no real data is on disk.
//
// Digits are rendered from seven-segment-style stroke glyphs under random
// affine jitter, stroke width, intensity and pixel noise. A configurable
// fraction of examples is "hard" (heavy noise, occlusion, low contrast) and
// a small fraction carries a wrong label, giving the long tail of atypical
// examples that real handwriting datasets have.
struct SynthDigitsConfig {
    int count = 10000;
    std::uint64_t seed = 1;
    double hard_fraction = 0.15;
    double label_noise = 0.03;
};

LabelledDataset make_synth_digits(const SynthDigitsConfig& cfg);

// Natural-image stand-ins: smooth colour gradients, soft ellipses and
// low-frequency texture, 3x32x32. Labels are all zero (the OOD probes never
// use them).
LabelledDataset make_synth_scenes(int count, std::uint64_t seed);

// Writes an MNIST-layout directory: train-images-idx3-ubyte,
// train-labels-idx1-ubyte, t10k-* (held-out digits) and test_batch.bin
// (CIFAR-format scenes for OOD probes).
void write_synth_dataset_dir(const std::filesystem::path& dir, int train_count, int test_count,
                             int ood_count, std::uint64_t seed);

}  // namespace memaudit
