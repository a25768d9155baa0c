#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "memaudit/influence.hpp"
#include "memaudit/manifest.hpp"
#include "memaudit/memscore.hpp"
#include "memaudit/models.hpp"
#include "memaudit/trainer.hpp"

namespace memaudit {

// Full-precision decimal rendering (17 significant digits) so CSV outputs
// parse back to the exact doubles.
std::string format_double(double v);

// ---- checkpoint files -----------------------------------------------------
// Layout: magic "MAUD", u32 version, u8 arch id, u32 entry count, then per
// entry: u32 name length, name bytes, u32 rank, u32 dims..., f64 data
// (little-endian).

void save_checkpoint(const std::filesystem::path& file, Arch arch,
                     const std::vector<NamedTensor>& params,
                     const std::vector<NamedTensor>& buffers);

struct CheckpointFile {
    Arch arch;
    std::vector<NamedTensor> entries;
};

CheckpointFile load_checkpoint(const std::filesystem::path& file);

// Restores a checkpoint file into a model (names, shapes and architecture
// must match; FormatError otherwise).
void restore_into_model(const CheckpointFile& ck, Model& model);

// ---- run directory ----------------------------------------------------------
// <run>/manifest.json
// <run>/loss_curve.csv            epoch,train_loss,val_loss,lr
// <run>/run_summary.json          best epoch / loss, epochs run
// <run>/checkpoints/epoch_NNNN.ckpt
// <run>/influence.csv             example_id,self_influence
// <run>/report.csv                audit rows

class RunStore {
  public:
    static RunStore create(const std::filesystem::path& dir, const Manifest& manifest);
    static RunStore open(const std::filesystem::path& dir);

    const std::filesystem::path& dir() const { return dir_; }
    const Manifest& manifest() const { return manifest_; }

    std::filesystem::path checkpoint_path(int epoch) const;
    std::vector<int> checkpoint_epochs() const;

    void write_loss_curve(const CheckpointSeries& series) const;
    void write_summary(const TrainResult& result) const;

    std::filesystem::path loss_curve_file() const { return dir_ / "loss_curve.csv"; }
    std::filesystem::path influence_file() const { return dir_ / "influence.csv"; }
    std::filesystem::path report_file() const { return dir_ / "report.csv"; }

  private:
    std::filesystem::path dir_;
    Manifest manifest_;
};

// ---- report rows ------------------------------------------------------------

struct AuditRow {
    std::int64_t image_id = -1;  // -1 for clean (no canary) audits
    std::string dataset;
    std::string model;
    MemorisationReport report;
};

inline constexpr const char* kReportHeader = "image_id,dataset,model,X_u,X_r,M,t,p,significant";
inline constexpr const char* kInfluenceHeader = "example_id,self_influence";

std::string report_csv(const std::vector<AuditRow>& rows);
std::vector<AuditRow> parse_report_csv(const std::string& text);
void append_report_rows(const std::filesystem::path& file, const std::vector<AuditRow>& rows);

std::string influence_csv(const SelfInfluenceTable& table);

}  // namespace memaudit
