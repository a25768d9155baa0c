#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "memaudit/models.hpp"
#include "memaudit/trainer.hpp"

namespace memaudit {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kManifestVersion = 1;

// Everything that determines a run's outputs byte for byte. Serialised as
// versioned JSON (schema documented in the README).
struct Manifest {
    int version = kManifestVersion;
    std::string dataset_id = "mnist";   // mnist | fashion-mnist | cifar10 | synth-mnist
    std::int64_t subset = 0;            // 0 = whole set, else seeded subset size
    ModelSpec model;
    TrainConfig train;
    std::string ood_source = "cifar10";  // dataset the OOD probes come from
    int n_pairs = 2000;
    int r_draws = 1;
    std::uint64_t seed = 0;
    std::optional<std::int64_t> canary_host;
    std::string tool_version = kToolVersion;
};

std::string manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const std::string& text);
Manifest load_manifest(const std::filesystem::path& file);
void save_manifest(const Manifest& m, const std::filesystem::path& file);

// Fills the derived per-component seeds (model init, train loop) from the
// manifest root seed. Idempotent; every pipeline entry point calls it.
void derive_seeds(Manifest& m);

}  // namespace memaudit
