#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "memaudit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace memaudit;

int main(int argc, char** argv) {
    CLI::App app{"memaudit - unique-feature memorisation auditing for image classifiers"};
    app.require_subcommand(1);

    std::string manifest_path;
    std::string data_dir = ".";
    std::string out_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> n_pairs;
    std::optional<int> r_draws;
    std::int64_t subsample = 5000;
    int k_checkpoints = 10;
    bool clean = false;
    std::vector<std::int64_t> hosts;
    std::vector<std::string> run_dirs;

    auto* train = app.add_subcommand("train", "train a model per manifest and persist the run");
    train->add_option("--manifest", manifest_path, "manifest JSON file")->required();
    train->add_option("--data-dir", data_dir, "directory with the dataset files");
    train->add_option("--out", out_path, "run directory to create")->required();
    train->add_option("--seed", seed, "override the manifest seed");

    auto* influence = app.add_subcommand(
        "influence", "score training-example self-influence against a run's checkpoints");
    influence->add_option("--out", out_path, "run directory")->required();
    influence->add_option("--data-dir", data_dir, "directory with the dataset files");
    influence->add_option("--subsample", subsample,
                          "examples to score (0 = all; default 5000)");
    influence->add_option("--k", k_checkpoints, "checkpoints to use (default 10)");

    auto* audit = app.add_subcommand(
        "audit", "inject a canary, retrain from the manifest seeds and score memorisation");
    audit->add_option("--out", out_path, "run directory (holds manifest and report.csv)")
        ->required();
    audit->add_option("--data-dir", data_dir, "directory with the dataset files");
    audit->add_option("--canary-host", hosts, "host example id (repeatable)");
    audit->add_flag("--clean", clean, "baseline audit without any canary");
    audit->add_option("--n-pairs", n_pairs, "OOD pairs to probe (default from manifest)");
    audit->add_option("--r-draws", r_draws, "random-patch draws per image (default from manifest)");

    auto* report = app.add_subcommand(
        "report", "aggregate audited runs into CSV, SVG scatter and Pearson r");
    report->add_option("runs", run_dirs, "run directories")->required();
    report->add_option("--out", out_path, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            Manifest m = load_manifest(manifest_path);
            if (seed) {
                m.seed = *seed;
                derive_seeds(m);
            }
            const TrainResult r = run_train(m, data_dir, out_path);
            std::cout << "trained " << r.epochs_run << " epochs; best epoch " << r.best_epoch
                      << " (val loss " << format_double(r.best_val_loss) << ")\n";
        } else if (*influence) {
            const SelfInfluenceTable t =
                run_influence(out_path, data_dir, subsample, k_checkpoints);
            std::cout << "scored " << t.scores.size() << " examples over checkpoints [";
            for (std::size_t i = 0; i < t.checkpoint_epochs.size(); ++i) {
                std::cout << (i ? "," : "") << t.checkpoint_epochs[i];
            }
            std::cout << "] -> " << (fs::path(out_path) / "influence.csv").string() << "\n";
        } else if (*audit) {
            const auto rows = run_audit(out_path, data_dir, hosts, clean, n_pairs, r_draws);
            for (const auto& row : rows) {
                std::cout << (row.image_id < 0 ? std::string("clean")
                                               : std::to_string(row.image_id))
                          << ": M=" << format_double(row.report.m)
                          << " p=" << format_double(row.report.p_value)
                          << (row.report.significant ? " (significant)" : "") << "\n";
            }
        } else if (*report) {
            std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
            const ReportSummary s = run_report(dirs, out_path);
            if (s.pearson) {
                std::cout << "pearson r = " << format_double(*s.pearson) << "\n";
            }
            std::cout << s.rows.size() << " rows -> " << out_path << "/aggregate.csv, "
                      << out_path << "/scatter.svg\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
