#include "memaudit/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

namespace memaudit {

namespace {

struct Seg {
    double x1, y1, x2, y2;
};

// Seven-segment endpoints in a unit box (x right, y down).
constexpr Seg kA{0.12, 0.08, 0.88, 0.08};  // top
constexpr Seg kB{0.88, 0.08, 0.88, 0.50};  // top right
constexpr Seg kC{0.88, 0.50, 0.88, 0.92};  // bottom right
constexpr Seg kD{0.12, 0.92, 0.88, 0.92};  // bottom
constexpr Seg kE{0.12, 0.50, 0.12, 0.92};  // bottom left
constexpr Seg kF{0.12, 0.08, 0.12, 0.50};  // top left
constexpr Seg kG{0.12, 0.50, 0.88, 0.50};  // middle

const std::vector<Seg>& glyph_segments(int digit) {
    static const std::array<std::vector<Seg>, 10> glyphs = {{
        {kA, kB, kC, kD, kE, kF},                          // 0
        {{0.50, 0.05, 0.50, 0.95}, {0.32, 0.22, 0.50, 0.05}},  // 1
        {kA, kB, kG, kE, kD},                              // 2
        {kA, kB, kG, kC, kD},                              // 3
        {kF, kG, kB, kC},                                  // 4
        {kA, kF, kG, kC, kD},                              // 5
        {kA, kF, kE, kD, kC, kG},                          // 6
        {kA, {0.88, 0.08, 0.34, 0.95}},                    // 7
        {kA, kB, kC, kD, kE, kF, kG},                      // 8
        {kA, kB, kC, kD, kF, kG},                          // 9
    }};
    return glyphs[static_cast<std::size_t>(digit)];
}

double dist_to_segment(double px, double py, const Seg& s) {
    const double dx = s.x2 - s.x1;
    const double dy = s.y2 - s.y1;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - s.x1) * dx + (py - s.y1) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double cx = s.x1 + t * dx;
    const double cy = s.y1 + t * dy;
    return std::hypot(px - cx, py - cy);
}

struct DigitStyle {
    double rot, shear, sx, sy, tx, ty;
    double thickness, intensity, noise_sigma;
    bool occlude;
    double occ_x, occ_y, occ_w, occ_h;
};

Tensor render_digit(int digit, const DigitStyle& st, Rng& noise_rng) {
    constexpr int kSize = 28;
    constexpr double kGlyphScale = 20.0;
    const double cr = std::cos(st.rot);
    const double sr = std::sin(st.rot);

    // Transform the unit-box segments into image coordinates.
    std::vector<Seg> segs = glyph_segments(digit);
    for (Seg& s : segs) {
        const auto map = [&](double& x, double& y) {
            double ux = (x - 0.5) * kGlyphScale * st.sx;
            double uy = (y - 0.5) * kGlyphScale * st.sy;
            ux += st.shear * uy;
            const double rx = cr * ux - sr * uy;
            const double ry = sr * ux + cr * uy;
            x = kSize / 2.0 + rx + st.tx;
            y = kSize / 2.0 + ry + st.ty;
        };
        map(s.x1, s.y1);
        map(s.x2, s.y2);
    }

    Tensor img(Shape{1, kSize, kSize});
    auto d = img.mutable_data();
    for (int y = 0; y < kSize; ++y) {
        for (int x = 0; x < kSize; ++x) {
            double dist = 1e9;
            for (const Seg& s : segs) {
                dist = std::min(dist, dist_to_segment(x + 0.5, y + 0.5, s));
            }
            // 1px linear edge falloff around the stroke.
            const double cover = std::clamp(st.thickness * 0.5 + 0.5 - dist, 0.0, 1.0);
            d[static_cast<std::size_t>(y) * kSize + x] = st.intensity * cover;
        }
    }
    if (st.occlude) {
        for (int y = 0; y < kSize; ++y) {
            for (int x = 0; x < kSize; ++x) {
                if (x >= st.occ_x && x < st.occ_x + st.occ_w && y >= st.occ_y &&
                    y < st.occ_y + st.occ_h) {
                    d[static_cast<std::size_t>(y) * kSize + x] = 0.0;
                }
            }
        }
    }
    for (auto& v : d) {
        v = std::clamp(v + st.noise_sigma * noise_rng.normal(), 0.0, 1.0);
    }
    return img;
}

}  // namespace

LabelledDataset make_synth_digits(const SynthDigitsConfig& cfg) {
    const SeedTree seeds(cfg.seed);
    Rng rng = seeds.stream("digit-style");
    Rng noise = seeds.stream("digit-noise");
    Rng label_rng = seeds.stream("digit-labels");

    LabelledDataset ds;
    ds.images.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i) {
        const int digit = static_cast<int>(label_rng.uniform_int(10));
        const bool hard = rng.bernoulli(cfg.hard_fraction);

        DigitStyle st{};
        st.rot = rng.uniform(-0.22, 0.22);
        st.shear = rng.uniform(-0.25, 0.25);
        st.sx = rng.uniform(0.80, 1.15);
        st.sy = rng.uniform(0.80, 1.15);
        st.tx = rng.uniform(-2.5, 2.5);
        st.ty = rng.uniform(-2.5, 2.5);
        st.thickness = rng.uniform(0.9, 1.9);
        st.intensity = rng.uniform(0.65, 1.0);
        st.noise_sigma = rng.uniform(0.02, 0.08);
        st.occlude = false;
        if (hard) {
            st.rot = rng.uniform(-0.55, 0.55);
            st.shear = rng.uniform(-0.45, 0.45);
            st.intensity = rng.uniform(0.30, 0.55);
            st.noise_sigma = rng.uniform(0.15, 0.32);
            st.occlude = rng.bernoulli(0.5);
            st.occ_w = rng.uniform(5.0, 10.0);
            st.occ_h = rng.uniform(5.0, 10.0);
            st.occ_x = rng.uniform(0.0, 28.0 - st.occ_w);
            st.occ_y = rng.uniform(0.0, 28.0 - st.occ_h);
        }

        int label = digit;
        if (label_rng.bernoulli(cfg.label_noise)) {
            label = static_cast<int>((digit + 1 + label_rng.uniform_int(9)) % 10);
        }

        ds.images.push_back(render_digit(digit, st, noise));
        ds.labels.push_back(label);
        ds.ids.push_back(i);
    }
    return ds;
}

LabelledDataset make_synth_scenes(int count, std::uint64_t seed) {
    constexpr int kSize = 32;
    const SeedTree seeds(seed);
    Rng rng = seeds.stream("scene-style");
    Rng noise = seeds.stream("scene-noise");

    LabelledDataset ds;
    ds.images.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Tensor img(Shape{3, kSize, kSize});
        auto d = img.mutable_data();

        // Gradient background between two random colours.
        std::array<double, 3> c0{};
        std::array<double, 3> c1{};
        for (int c = 0; c < 3; ++c) {
            c0[static_cast<std::size_t>(c)] = rng.uniform(0.1, 0.9);
            c1[static_cast<std::size_t>(c)] = rng.uniform(0.1, 0.9);
        }
        const double gx = rng.uniform(-1.0, 1.0);
        const double gy = rng.uniform(-1.0, 1.0);
        for (int y = 0; y < kSize; ++y) {
            for (int x = 0; x < kSize; ++x) {
                const double t = std::clamp(
                    0.5 + 0.5 * (gx * (x - kSize / 2.0) + gy * (y - kSize / 2.0)) / kSize, 0.0,
                    1.0);
                for (int c = 0; c < 3; ++c) {
                    d[(static_cast<std::size_t>(c) * kSize + y) * kSize + x] =
                        (1.0 - t) * c0[static_cast<std::size_t>(c)] +
                        t * c1[static_cast<std::size_t>(c)];
                }
            }
        }

        // Soft ellipses.
        const int blobs = 2 + static_cast<int>(rng.uniform_int(3));
        for (int b = 0; b < blobs; ++b) {
            const double bx = rng.uniform(4.0, 28.0);
            const double by = rng.uniform(4.0, 28.0);
            const double rx = rng.uniform(3.0, 11.0);
            const double ry = rng.uniform(3.0, 11.0);
            const double ang = rng.uniform(0.0, 3.14159265358979);
            const double ca = std::cos(ang);
            const double sa = std::sin(ang);
            std::array<double, 3> col{};
            for (int c = 0; c < 3; ++c) {
                col[static_cast<std::size_t>(c)] = rng.uniform(0.0, 1.0);
            }
            const double alpha = rng.uniform(0.5, 0.95);
            for (int y = 0; y < kSize; ++y) {
                for (int x = 0; x < kSize; ++x) {
                    const double ux = ca * (x - bx) + sa * (y - by);
                    const double uy = -sa * (x - bx) + ca * (y - by);
                    const double r = std::sqrt((ux / rx) * (ux / rx) + (uy / ry) * (uy / ry));
                    const double cover = std::clamp((1.0 - r) * 4.0, 0.0, 1.0) * alpha;
                    if (cover <= 0.0) {
                        continue;
                    }
                    for (int c = 0; c < 3; ++c) {
                        double& v = d[(static_cast<std::size_t>(c) * kSize + y) * kSize + x];
                        v = (1.0 - cover) * v + cover * col[static_cast<std::size_t>(c)];
                    }
                }
            }
        }

        // Low-frequency texture plus pixel noise.
        for (int wave = 0; wave < 3; ++wave) {
            const double fx = rng.uniform(0.05, 0.35);
            const double fy = rng.uniform(0.05, 0.35);
            const double ph = rng.uniform(0.0, 6.2831853);
            const double amp = rng.uniform(0.03, 0.10);
            const int c = static_cast<int>(rng.uniform_int(3));
            for (int y = 0; y < kSize; ++y) {
                for (int x = 0; x < kSize; ++x) {
                    d[(static_cast<std::size_t>(c) * kSize + y) * kSize + x] +=
                        amp * std::cos(fx * x + fy * y + ph);
                }
            }
        }
        for (auto& v : d) {
            v = std::clamp(v + 0.02 * noise.normal(), 0.0, 1.0);
        }

        ds.images.push_back(std::move(img));
        ds.labels.push_back(0);
        ds.ids.push_back(i);
    }
    return ds;
}

void write_synth_dataset_dir(const std::filesystem::path& dir, int train_count, int test_count,
                             int ood_count, std::uint64_t seed) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    const SeedTree seeds(seed);

    SynthDigitsConfig train_cfg;
    train_cfg.count = train_count;
    train_cfg.seed = seeds.seed("train");
    const LabelledDataset train = make_synth_digits(train_cfg);
    write_file(dir / "train-images-idx3-ubyte", write_idx_images(train.images));
    write_file(dir / "train-labels-idx1-ubyte", write_idx_labels(train.labels));

    SynthDigitsConfig test_cfg;
    test_cfg.count = test_count;
    test_cfg.seed = seeds.seed("test");
    const LabelledDataset test = make_synth_digits(test_cfg);
    write_file(dir / "t10k-images-idx3-ubyte", write_idx_images(test.images));
    write_file(dir / "t10k-labels-idx1-ubyte", write_idx_labels(test.labels));

    const LabelledDataset scenes = make_synth_scenes(ood_count, seeds.seed("ood"));
    write_file(dir / "test_batch.bin", write_cifar10(scenes));
}

}  // namespace memaudit
