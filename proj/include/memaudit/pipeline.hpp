#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "memaudit/data.hpp"
#include "memaudit/influence.hpp"
#include "memaudit/manifest.hpp"
#include "memaudit/memscore.hpp"
#include "memaudit/store.hpp"

namespace memaudit {

// ---- data resolution --------------------------------------------------------

// Loads the training dataset named by the manifest from data_dir, applying
// the seeded subset if manifest.subset > 0. Ids are the positions in the
// full set, so they stay stable across subset sizes.
LabelledDataset load_training_data(const Manifest& m, const std::filesystem::path& data_dir);

// Loads the OOD source named by the manifest and converts it to the model's
// input domain.
std::vector<Tensor> load_ood_base(const Manifest& m, const std::filesystem::path& data_dir);

// ---- in-process audit --------------------------------------------------------

struct AuditOutcome {
    AuditRow row;
    DivergenceSamples samples;
    int best_epoch = 0;
    int epochs_run = 0;
};

// Trains a model per the manifest (with the canary injected when `canary` is
// set), probes it with the manifest-seeded OOD triplet and returns the
// scored report row. `train_data` and `ood_base` come from the loaders
// above; passing them in lets callers amortise parsing across audits.
AuditOutcome audit_run(const Manifest& m, const LabelledDataset& train_data,
                       const std::vector<Tensor>& ood_base,
                       const std::optional<CanarySpec>& canary, TTest test = TTest::paired);

// ---- CLI-facing commands ------------------------------------------------------

// memaudit train: trains per manifest, persists manifest, per-epoch
// checkpoints, loss curve and summary under out_dir.
TrainResult run_train(const Manifest& m, const std::filesystem::path& data_dir,
                      const std::filesystem::path& out_dir);

// memaudit influence: self-influence of a seeded subsample of training
// examples against the run's persisted checkpoints; writes influence.csv
// (sorted by descending score) and influence_meta.json.
SelfInfluenceTable run_influence(const std::filesystem::path& run_dir,
                                 const std::filesystem::path& data_dir, std::int64_t subsample,
                                 int k = 10);

// memaudit audit: one retrain-and-score per host id (or a single clean audit
// when hosts is empty); appends rows to the run's report.csv.
std::vector<AuditRow> run_audit(const std::filesystem::path& run_dir,
                                const std::filesystem::path& data_dir,
                                const std::vector<std::int64_t>& hosts, bool clean,
                                std::optional<int> n_pairs_override = std::nullopt,
                                std::optional<int> r_draws_override = std::nullopt);

// memaudit report: joins report.csv rows with self-influence scores across
// runs, writes aggregate.csv (with per-dataset/model average-M-over-positive
// rows) and scatter.svg, and returns the Pearson r when computable.
struct ReportSummary {
    std::vector<AuditRow> rows;
    std::vector<double> m_values;      // canary rows joined with an influence score
    std::vector<double> self_influences;
    std::optional<double> pearson;
};

ReportSummary run_report(const std::vector<std::filesystem::path>& run_dirs,
                         const std::filesystem::path& out_dir);

// Mean of M over rows with M > 0 (Table-1 convention). NaN when no row
// qualifies.
double average_positive_m(const std::vector<AuditRow>& rows);

// Deterministic SVG scatter of M against self-influence, one circle per
// point.
std::string svg_scatter(const std::vector<double>& x, const std::vector<double>& y,
                        const std::string& x_label, const std::string& y_label);

}  // namespace memaudit
