#include "memaudit/manifest.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "memaudit/errors.hpp"

namespace memaudit {

using nlohmann::json;

std::string manifest_to_json(const Manifest& m) {
    json j;
    j["version"] = m.version;
    j["dataset"] = {{"id", m.dataset_id}, {"subset", m.subset}};
    j["model"] = {
        {"arch", arch_name(m.model.arch)},
        {"input_shape", m.model.input_shape},
        {"num_classes", m.model.num_classes},
        {"dropout_rate", m.model.dropout_rate},
        {"batch_norm", m.model.batch_norm},
    };
    j["train"] = {
        {"max_epochs", m.train.max_epochs},
        {"patience", m.train.patience},
        {"learning_rate", m.train.learning_rate},
        {"batch_size", m.train.batch_size},
        {"augment", m.train.augment},
        {"validation_fraction", m.train.validation_fraction},
    };
    j["audit"] = {
        {"ood_source", m.ood_source},
        {"n_pairs", m.n_pairs},
        {"r_draws", m.r_draws},
    };
    if (m.canary_host) {
        j["canary"] = {{"host_id", *m.canary_host}};
    } else {
        j["canary"] = nullptr;
    }
    j["seed"] = m.seed;
    j["tool_version"] = m.tool_version;
    return j.dump(2) + "\n";
}

Manifest manifest_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("manifest is not valid JSON: ") + e.what());
    }
    try {
        Manifest m;
        m.version = j.at("version").get<int>();
        if (m.version != kManifestVersion) {
            throw ConfigError("unsupported manifest version " + std::to_string(m.version));
        }
        m.dataset_id = j.at("dataset").at("id").get<std::string>();
        m.subset = j.at("dataset").value("subset", std::int64_t{0});
        const auto& jm = j.at("model");
        m.model.arch = arch_from_name(jm.at("arch").get<std::string>());
        m.model.input_shape = jm.at("input_shape").get<Shape>();
        m.model.num_classes = jm.at("num_classes").get<int>();
        m.model.dropout_rate = jm.value("dropout_rate", 0.0);
        m.model.batch_norm = jm.value("batch_norm", false);
        const auto& jt = j.at("train");
        m.train.max_epochs = jt.at("max_epochs").get<int>();
        m.train.patience = jt.at("patience").get<int>();
        m.train.learning_rate = jt.at("learning_rate").get<double>();
        m.train.batch_size = jt.at("batch_size").get<int>();
        m.train.augment = jt.value("augment", false);
        m.train.validation_fraction = jt.value("validation_fraction", 0.1);
        const auto& ja = j.at("audit");
        m.ood_source = ja.at("ood_source").get<std::string>();
        m.n_pairs = ja.value("n_pairs", 2000);
        m.r_draws = ja.value("r_draws", 1);
        if (j.contains("canary") && !j.at("canary").is_null()) {
            m.canary_host = j.at("canary").at("host_id").get<std::int64_t>();
        }
        m.seed = j.at("seed").get<std::uint64_t>();
        m.tool_version = j.value("tool_version", std::string(kToolVersion));
        derive_seeds(m);

        if (m.train.max_epochs < 1 || m.train.patience < 1 ||
            m.train.patience >= m.train.max_epochs) {
            throw ConfigError("manifest train block: need 1 <= patience < max_epochs");
        }
        if (m.train.batch_size < 1 || m.n_pairs < 2 || m.r_draws < 1) {
            throw ConfigError("manifest: batch_size >= 1, n_pairs >= 2, r_draws >= 1 required");
        }
        if (!(m.train.validation_fraction > 0.0 && m.train.validation_fraction < 1.0)) {
            throw ConfigError("manifest: validation_fraction must lie in (0, 1)");
        }
        return m;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("manifest schema violation: ") + e.what());
    }
}

void derive_seeds(Manifest& m) {
    const SeedTree seeds(m.seed);
    m.model.seed = seeds.seed("init-root");
    m.train.seed = seeds.seed("train-root");
}

Manifest load_manifest(const std::filesystem::path& file) {
    std::ifstream f(file);
    if (!f) {
        throw IoError("cannot open manifest " + file.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return manifest_from_json(ss.str());
}

void save_manifest(const Manifest& m, const std::filesystem::path& file) {
    std::ofstream f(file, std::ios::trunc);
    if (!f) {
        throw IoError("cannot write manifest " + file.string());
    }
    f << manifest_to_json(m);
}

}  // namespace memaudit
