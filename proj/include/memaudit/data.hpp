#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "memaudit/rng.hpp"
#include "memaudit/tensor.hpp"

namespace memaudit {

// Training images ([c x h x w], values in [0,1]) with labels and stable ids.
struct LabelledDataset {
    std::vector<Tensor> images;
    std::vector<int> labels;
    std::vector<std::int64_t> ids;

    std::size_t size() const { return images.size(); }
    // Index of an example id, or nullopt.
    std::optional<std::size_t> index_of(std::int64_t id) const;
    void check_consistent() const;
};

// ---- IDX (MNIST-family) -------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<Tensor> parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_idx_images(const std::vector<Tensor>& images);
std::vector<std::uint8_t> write_idx_labels(const std::vector<int>& labels);

LabelledDataset load_idx_dataset(const std::filesystem::path& images_file,
                                 const std::filesystem::path& labels_file);

// ---- CIFAR-10 binary ------------------------------------------------------

// 3073-byte records: 1 label byte + 3072 channel-major (R,G,B) pixel bytes.
LabelledDataset parse_cifar10(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_cifar10(const LabelledDataset& ds);
LabelledDataset load_cifar10(const std::vector<std::filesystem::path>& record_files);

// ---- OOD conversion -------------------------------------------------------

enum class Domain { MnistLike, CifarLike };

// CIFAR [3x32x32] -> MnistLike [1x28x28] by BT.601 luma then centre crop;
// MNIST [1x28x28] -> CifarLike [3x32x32] by channel replication then 2-pixel
// zero padding.
std::vector<Tensor> to_ood_base(const std::vector<Tensor>& images, Domain target);

// ---- Patches and canaries -------------------------------------------------

struct FeaturePatch {
    enum class Kind { unique, random };
    static constexpr int kSide = 5;

    Kind kind = Kind::unique;
    std::array<double, kSide * kSide> pixels{};
};

// The fixed letter-A glyph: rows {01110, 10001, 11111, 10001, 10001},
// foreground 1.0 on background 0.0.
FeaturePatch unique_feature_patch();
FeaturePatch random_feature_patch(Rng& rng);

struct Placement {
    int row = 1;
    int col = 1;
};

// Copy of image with the 5x5 region at `placement` replaced by the patch
// values on every channel. The input is left untouched.
Tensor apply_patch(const Tensor& image, const FeaturePatch& patch, Placement placement = {});

struct CanarySpec {
    std::int64_t host_id = 0;
    FeaturePatch patch = unique_feature_patch();
    Placement placement{};
};

// Copy of `train` in which exactly the host image carries the patch.
LabelledDataset make_canary_dataset(const LabelledDataset& train, const CanarySpec& spec);

// Aligned OOD probe sets: clean, unique-patched, random-patched.
struct InferenceTriplet {
    std::vector<Tensor> clean;
    std::vector<Tensor> unique;
    std::vector<Tensor> random;

    std::size_t size() const { return clean.size(); }
};

// First n_pairs images of a seeded shuffle of ood_base as D_c; D_u carries
// the unique patch on every image, D_r a fresh Uniform[0,1] patch per image.
// `draw` indexes the random-patch stream: the clean and unique sets are
// identical across draws, only D_r is redrawn.
InferenceTriplet build_triplet(const std::vector<Tensor>& ood_base,
                               const FeaturePatch& unique_patch, std::uint64_t seed, int n_pairs,
                               int draw = 0, Placement placement = {});

// Seeded Fisher-Yates permutation of {0, ..., n-1}.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

std::vector<std::uint8_t> read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes);

}  // namespace memaudit
