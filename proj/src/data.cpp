#include "memaudit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "memaudit/errors.hpp"

namespace memaudit {

std::optional<std::size_t> LabelledDataset::index_of(std::int64_t id) const {
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == id) {
            return i;
        }
    }
    return std::nullopt;
}

void LabelledDataset::check_consistent() const {
    if (images.size() != labels.size() || images.size() != ids.size()) {
        throw UsageError("dataset images/labels/ids lengths differ");
    }
}

namespace {

std::uint32_t read_u32_be(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void push_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::llround(v * 255.0));
}

}  // namespace

std::vector<Tensor> parse_idx_images(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 16) {
        throw FormatError("IDX image stream truncated: " + std::to_string(bytes.size()) +
                          " bytes, need at least 16 for the header");
    }
    const std::uint32_t magic = read_u32_be(bytes.data());
    if (magic != kIdxImagesMagic) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "0x%08x", magic);
        throw FormatError(std::string("IDX image magic mismatch: observed ") + buf);
    }
    const std::uint32_t count = read_u32_be(bytes.data() + 4);
    const std::uint32_t rows = read_u32_be(bytes.data() + 8);
    const std::uint32_t cols = read_u32_be(bytes.data() + 12);
    const std::size_t expected = 16 + static_cast<std::size_t>(count) * rows * cols;
    if (bytes.size() != expected) {
        throw FormatError("IDX image payload length " + std::to_string(bytes.size() - 16) +
                          " does not match header (" + std::to_string(count) + " x " +
                          std::to_string(rows) + " x " + std::to_string(cols) + ")");
    }
    std::vector<Tensor> images;
    images.reserve(count);
    const std::uint8_t* p = bytes.data() + 16;
    for (std::uint32_t i = 0; i < count; ++i) {
        Tensor img(Shape{1, static_cast<int>(rows), static_cast<int>(cols)});
        auto d = img.mutable_data();
        for (std::size_t j = 0; j < static_cast<std::size_t>(rows) * cols; ++j) {
            d[j] = static_cast<double>(*p++) / 255.0;
        }
        images.push_back(std::move(img));
    }
    return images;
}

std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) {
        throw FormatError("IDX label stream truncated: " + std::to_string(bytes.size()) +
                          " bytes, need at least 8 for the header");
    }
    const std::uint32_t magic = read_u32_be(bytes.data());
    if (magic != kIdxLabelsMagic) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "0x%08x", magic);
        throw FormatError(std::string("IDX label magic mismatch: observed ") + buf);
    }
    const std::uint32_t count = read_u32_be(bytes.data() + 4);
    if (bytes.size() != 8 + static_cast<std::size_t>(count)) {
        throw FormatError("IDX label payload length " + std::to_string(bytes.size() - 8) +
                          " does not match header count " + std::to_string(count));
    }
    std::vector<int> labels(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        labels[i] = bytes[8 + i];
    }
    return labels;
}

std::vector<std::uint8_t> write_idx_images(const std::vector<Tensor>& images) {
    std::vector<std::uint8_t> out;
    const int rows = images.empty() ? 0 : images.front().dim(1);
    const int cols = images.empty() ? 0 : images.front().dim(2);
    out.reserve(16 + images.size() * static_cast<std::size_t>(rows) * cols);
    push_u32_be(out, kIdxImagesMagic);
    push_u32_be(out, static_cast<std::uint32_t>(images.size()));
    push_u32_be(out, static_cast<std::uint32_t>(rows));
    push_u32_be(out, static_cast<std::uint32_t>(cols));
    for (const Tensor& img : images) {
        if (img.rank() != 3 || img.dim(0) != 1 || img.dim(1) != rows || img.dim(2) != cols) {
            throw UsageError("write_idx_images expects uniform [1 x h x w] images");
        }
        for (const double v : img.data()) {
            out.push_back(to_byte(v));
        }
    }
    return out;
}

std::vector<std::uint8_t> write_idx_labels(const std::vector<int>& labels) {
    std::vector<std::uint8_t> out;
    out.reserve(8 + labels.size());
    push_u32_be(out, kIdxLabelsMagic);
    push_u32_be(out, static_cast<std::uint32_t>(labels.size()));
    for (const int l : labels) {
        out.push_back(static_cast<std::uint8_t>(l));
    }
    return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + p.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot write " + p.string());
    }
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) {
        throw IoError("short write to " + p.string());
    }
}

LabelledDataset load_idx_dataset(const std::filesystem::path& images_file,
                                 const std::filesystem::path& labels_file) {
    LabelledDataset ds;
    ds.images = parse_idx_images(read_file(images_file));
    ds.labels = parse_idx_labels(read_file(labels_file));
    if (ds.images.size() != ds.labels.size()) {
        throw FormatError("image/label counts differ: " + std::to_string(ds.images.size()) +
                          " vs " + std::to_string(ds.labels.size()));
    }
    ds.ids.resize(ds.images.size());
    for (std::size_t i = 0; i < ds.ids.size(); ++i) {
        ds.ids[i] = static_cast<std::int64_t>(i);
    }
    return ds;
}

LabelledDataset parse_cifar10(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t kRecord = 3073;
    if (bytes.size() % kRecord != 0) {
        throw FormatError("CIFAR-10 stream length " + std::to_string(bytes.size()) +
                          " is not a multiple of " + std::to_string(kRecord));
    }
    LabelledDataset ds;
    const std::size_t n = bytes.size() / kRecord;
    ds.images.reserve(n);
    ds.labels.reserve(n);
    ds.ids.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* rec = bytes.data() + i * kRecord;
        ds.labels.push_back(rec[0]);
        Tensor img(Shape{3, 32, 32});
        auto d = img.mutable_data();
        for (std::size_t j = 0; j < 3072; ++j) {
            d[j] = static_cast<double>(rec[1 + j]) / 255.0;
        }
        ds.images.push_back(std::move(img));
        ds.ids.push_back(static_cast<std::int64_t>(i));
    }
    return ds;
}

std::vector<std::uint8_t> write_cifar10(const LabelledDataset& ds) {
    std::vector<std::uint8_t> out;
    out.reserve(ds.size() * 3073);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Tensor& img = ds.images[i];
        if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != 32 || img.dim(2) != 32) {
            throw UsageError("write_cifar10 expects [3 x 32 x 32] images");
        }
        out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
        for (const double v : img.data()) {
            out.push_back(to_byte(v));
        }
    }
    return out;
}

LabelledDataset load_cifar10(const std::vector<std::filesystem::path>& record_files) {
    LabelledDataset ds;
    for (const auto& p : record_files) {
        LabelledDataset part = parse_cifar10(read_file(p));
        for (std::size_t i = 0; i < part.size(); ++i) {
            part.ids[i] = static_cast<std::int64_t>(ds.size() + i);
        }
        ds.images.insert(ds.images.end(), part.images.begin(), part.images.end());
        ds.labels.insert(ds.labels.end(), part.labels.begin(), part.labels.end());
        ds.ids.insert(ds.ids.end(), part.ids.begin(), part.ids.end());
    }
    return ds;
}

std::vector<Tensor> to_ood_base(const std::vector<Tensor>& images, Domain target) {
    std::vector<Tensor> out;
    out.reserve(images.size());
    for (const Tensor& img : images) {
        if (target == Domain::MnistLike) {
            if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != 32 || img.dim(2) != 32) {
                throw UsageError("to_ood_base(MnistLike) expects [3 x 32 x 32] sources, got " +
                                 shape_str(img.shape()));
            }
            Tensor g(Shape{1, 28, 28});
            auto d = g.mutable_data();
            const auto s = img.data();
            for (int y = 0; y < 28; ++y) {
                for (int x = 0; x < 28; ++x) {
                    const std::size_t src = static_cast<std::size_t>(y + 2) * 32 + (x + 2);
                    const double luma = 0.299 * s[src] + 0.587 * s[1024 + src] +
                                        0.114 * s[2048 + src];
                    d[static_cast<std::size_t>(y) * 28 + x] = std::clamp(luma, 0.0, 1.0);
                }
            }
            out.push_back(std::move(g));
        } else {
            if (img.rank() != 3 || img.dim(0) != 1 || img.dim(1) != 28 || img.dim(2) != 28) {
                throw UsageError("to_ood_base(CifarLike) expects [1 x 28 x 28] sources, got " +
                                 shape_str(img.shape()));
            }
            Tensor g(Shape{3, 32, 32});
            auto d = g.mutable_data();
            const auto s = img.data();
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < 28; ++y) {
                    for (int x = 0; x < 28; ++x) {
                        d[(static_cast<std::size_t>(c) * 32 + y + 2) * 32 + (x + 2)] =
                            s[static_cast<std::size_t>(y) * 28 + x];
                    }
                }
            }
            out.push_back(std::move(g));
        }
    }
    return out;
}

FeaturePatch unique_feature_patch() {
    // 5x5 letter-A bitmap.
    static constexpr std::array<std::uint8_t, 25> kGlyph = {
        0, 1, 1, 1, 0,
        1, 0, 0, 0, 1,
        1, 1, 1, 1, 1,
        1, 0, 0, 0, 1,
        1, 0, 0, 0, 1,
    };
    FeaturePatch p;
    p.kind = FeaturePatch::Kind::unique;
    for (std::size_t i = 0; i < kGlyph.size(); ++i) {
        p.pixels[i] = static_cast<double>(kGlyph[i]);
    }
    return p;
}

FeaturePatch random_feature_patch(Rng& rng) {
    FeaturePatch p;
    p.kind = FeaturePatch::Kind::random;
    for (double& v : p.pixels) {
        v = rng.uniform();
    }
    return p;
}

Tensor apply_patch(const Tensor& image, const FeaturePatch& patch, Placement placement) {
    if (image.rank() != 3) {
        throw UsageError("apply_patch expects [c x h x w] images, got " + shape_str(image.shape()));
    }
    const int c = image.dim(0);
    const int h = image.dim(1);
    const int w = image.dim(2);
    if (placement.row < 0 || placement.col < 0 || placement.row + FeaturePatch::kSide > h ||
        placement.col + FeaturePatch::kSide > w) {
        throw UsageError("patch placement (" + std::to_string(placement.row) + "," +
                         std::to_string(placement.col) + ") out of bounds for " +
                         shape_str(image.shape()));
    }
    Tensor out = image.clone();
    auto d = out.mutable_data();
    for (int ch = 0; ch < c; ++ch) {
        for (int dy = 0; dy < FeaturePatch::kSide; ++dy) {
            for (int dx = 0; dx < FeaturePatch::kSide; ++dx) {
                d[(static_cast<std::size_t>(ch) * h + placement.row + dy) * w + placement.col +
                  dx] = patch.pixels[static_cast<std::size_t>(dy) * FeaturePatch::kSide + dx];
            }
        }
    }
    return out;
}

LabelledDataset make_canary_dataset(const LabelledDataset& train, const CanarySpec& spec) {
    train.check_consistent();
    const auto idx = train.index_of(spec.host_id);
    if (!idx) {
        throw LookupError("canary host id " + std::to_string(spec.host_id) +
                          " not present in the training dataset");
    }
    LabelledDataset out;
    out.images = train.images;  // shallow tensor copies; images are immutable
    out.labels = train.labels;
    out.ids = train.ids;
    out.images[*idx] = apply_patch(train.images[*idx], spec.patch, spec.placement);
    return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) {
        idx[i] = i;
    }
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.uniform_int(i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

InferenceTriplet build_triplet(const std::vector<Tensor>& ood_base,
                               const FeaturePatch& unique_patch, std::uint64_t seed, int n_pairs,
                               int draw, Placement placement) {
    if (n_pairs < 0 || static_cast<std::size_t>(n_pairs) > ood_base.size()) {
        throw UsageError("build_triplet: n_pairs " + std::to_string(n_pairs) + " exceeds base of " +
                         std::to_string(ood_base.size()) + " images");
    }
    const SeedTree seeds(seed);
    Rng shuffle_rng = seeds.stream("triplet-shuffle");
    Rng patch_rng = seeds.stream("triplet-patches", static_cast<std::uint64_t>(draw));
    const auto perm = shuffled_indices(ood_base.size(), shuffle_rng);

    InferenceTriplet t;
    t.clean.reserve(static_cast<std::size_t>(n_pairs));
    t.unique.reserve(static_cast<std::size_t>(n_pairs));
    t.random.reserve(static_cast<std::size_t>(n_pairs));
    for (int i = 0; i < n_pairs; ++i) {
        const Tensor& base = ood_base[perm[static_cast<std::size_t>(i)]];
        t.clean.push_back(base);
        t.unique.push_back(apply_patch(base, unique_patch, placement));
        t.random.push_back(apply_patch(base, random_feature_patch(patch_rng), placement));
    }
    return t;
}

}  // namespace memaudit
