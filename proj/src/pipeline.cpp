#include "memaudit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "memaudit/errors.hpp"

namespace memaudit {

namespace fs = std::filesystem;

namespace {

bool mnist_family(const std::string& dataset_id) {
    return dataset_id == "mnist" || dataset_id == "fashion-mnist" || dataset_id == "synth-mnist";
}

bool cifar_family(const std::string& dataset_id) {
    return dataset_id == "cifar10" || dataset_id == "synth-cifar";
}

LabelledDataset load_full_dataset(const std::string& dataset_id, const fs::path& data_dir) {
    if (mnist_family(dataset_id)) {
        return load_idx_dataset(data_dir / "train-images-idx3-ubyte",
                                data_dir / "train-labels-idx1-ubyte");
    }
    if (cifar_family(dataset_id)) {
        std::vector<fs::path> files;
        for (int i = 1; i <= 5; ++i) {
            const fs::path p = data_dir / ("data_batch_" + std::to_string(i) + ".bin");
            if (fs::exists(p)) {
                files.push_back(p);
            }
        }
        if (files.empty()) {
            throw IoError("no data_batch_*.bin found under " + data_dir.string());
        }
        return load_cifar10(files);
    }
    throw ConfigError("unknown dataset id: " + dataset_id);
}

}  // namespace

LabelledDataset load_training_data(const Manifest& m, const fs::path& data_dir) {
    LabelledDataset full = load_full_dataset(m.dataset_id, data_dir);
    if (m.subset <= 0 || static_cast<std::size_t>(m.subset) >= full.size()) {
        return full;
    }
    Rng rng = SeedTree(m.seed).stream("subset");
    const auto perm = shuffled_indices(full.size(), rng);
    LabelledDataset sub;
    sub.images.reserve(static_cast<std::size_t>(m.subset));
    for (std::int64_t i = 0; i < m.subset; ++i) {
        const std::size_t idx = perm[static_cast<std::size_t>(i)];
        sub.images.push_back(full.images[idx]);
        sub.labels.push_back(full.labels[idx]);
        sub.ids.push_back(full.ids[idx]);
    }
    return sub;
}

std::vector<Tensor> load_ood_base(const Manifest& m, const fs::path& data_dir) {
    const bool model_is_mnist_like = m.model.input_shape == Shape{1, 28, 28};
    std::vector<Tensor> raw;
    if (cifar_family(m.ood_source)) {
        const fs::path p = data_dir / "test_batch.bin";
        raw = parse_cifar10(read_file(p)).images;
    } else if (mnist_family(m.ood_source)) {
        raw = parse_idx_images(read_file(data_dir / "t10k-images-idx3-ubyte"));
    } else {
        throw ConfigError("unknown ood source: " + m.ood_source);
    }
    return to_ood_base(raw, model_is_mnist_like ? Domain::MnistLike : Domain::CifarLike);
}

AuditOutcome audit_run(const Manifest& manifest, const LabelledDataset& train_data,
                       const std::vector<Tensor>& ood_base,
                       const std::optional<CanarySpec>& canary, TTest test) {
    Manifest m = manifest;
    derive_seeds(m);
    TrainConfig cfg = m.train;
    cfg.record_weights = false;
    cfg.pinned_train_ids.clear();
    if (canary) {
        cfg.pinned_train_ids.push_back(canary->host_id);
    }

    const LabelledDataset* data = &train_data;
    LabelledDataset canaried;
    if (canary) {
        canaried = make_canary_dataset(train_data, *canary);
        data = &canaried;
    }

    Model model = Model::build(m.model);
    const TrainResult result = train(model, *data, cfg);

    if (static_cast<std::size_t>(m.n_pairs) > ood_base.size()) {
        throw UsageError("n_pairs " + std::to_string(m.n_pairs) + " exceeds OOD base of " +
                         std::to_string(ood_base.size()));
    }
    const std::uint64_t triplet_seed = SeedTree(m.seed).seed("triplet");
    const FeaturePatch probe = canary ? canary->patch : unique_feature_patch();

    // One clean/unique prediction pass, then d_r averaged over r_draws fresh
    // random-patch sets (the outer expectation of the score).
    const InferenceTriplet triplet0 = build_triplet(ood_base, probe, triplet_seed, m.n_pairs, 0);
    const auto pc = model.predict_batch(triplet0.clean);
    const auto pu = model.predict_batch(triplet0.unique);

    DivergenceSamples samples;
    samples.d_u.resize(static_cast<std::size_t>(m.n_pairs));
    samples.d_r.assign(static_cast<std::size_t>(m.n_pairs), 0.0);
    for (int i = 0; i < m.n_pairs; ++i) {
        samples.d_u[static_cast<std::size_t>(i)] =
            kl_divergence(pc[static_cast<std::size_t>(i)], pu[static_cast<std::size_t>(i)]);
    }
    for (int draw = 0; draw < m.r_draws; ++draw) {
        const InferenceTriplet t = draw == 0
            ? triplet0
            : build_triplet(ood_base, probe, triplet_seed, m.n_pairs, draw);
        const auto pr = model.predict_batch(t.random);
        for (int i = 0; i < m.n_pairs; ++i) {
            samples.d_r[static_cast<std::size_t>(i)] +=
                kl_divergence(pc[static_cast<std::size_t>(i)], pr[static_cast<std::size_t>(i)]);
        }
    }
    for (double& v : samples.d_r) {
        v /= static_cast<double>(m.r_draws);
    }

    AuditOutcome out;
    out.samples = samples;
    out.best_epoch = result.best_epoch;
    out.epochs_run = result.epochs_run;
    out.row.image_id = canary ? canary->host_id : -1;
    out.row.dataset = m.dataset_id;
    out.row.model = arch_name(m.model.arch);
    out.row.report = score(samples, test);
    return out;
}

TrainResult run_train(const Manifest& manifest, const fs::path& data_dir,
                      const fs::path& out_dir) {
    Manifest m = manifest;
    derive_seeds(m);
    const RunStore store = RunStore::create(out_dir, m);

    LabelledDataset data = load_training_data(m, data_dir);
    TrainConfig cfg = m.train;
    cfg.record_weights = false;  // every epoch is persisted to disk instead
    cfg.pinned_train_ids.clear();
    LabelledDataset canaried;
    if (m.canary_host) {
        CanarySpec spec;
        spec.host_id = *m.canary_host;
        canaried = make_canary_dataset(data, spec);
        data = std::move(canaried);
        cfg.pinned_train_ids.push_back(*m.canary_host);
    }

    Model model = Model::build(m.model);
    const TrainResult result =
        train(model, data, cfg, [&](const Checkpoint& ck, const Model& mm) {
            save_checkpoint(store.checkpoint_path(ck.epoch), mm.spec().arch, mm.params(),
                            mm.buffers());
        });
    store.write_loss_curve(result.series);
    store.write_summary(result);
    return result;
}

namespace {

CheckpointSeries load_series_meta(const RunStore& store) {
    std::ifstream f(store.loss_curve_file());
    if (!f) {
        throw IoError("cannot open " + store.loss_curve_file().string() +
                      "; run `memaudit train` first");
    }
    std::string line;
    if (!std::getline(f, line) || line != "epoch,train_loss,val_loss,lr") {
        throw FormatError("loss curve header mismatch in " + store.loss_curve_file().string());
    }
    CheckpointSeries series;
    while (std::getline(f, line)) {
        if (line.empty()) {
            continue;
        }
        Checkpoint ck;
        std::istringstream is(line);
        char comma = 0;
        is >> ck.epoch >> comma >> ck.train_loss >> comma >> ck.val_loss >> comma >>
            ck.learning_rate;
        if (is.fail()) {
            throw FormatError("bad loss curve row: " + line);
        }
        series.entries.push_back(std::move(ck));
    }
    return series;
}

}  // namespace

SelfInfluenceTable run_influence(const fs::path& run_dir, const fs::path& data_dir,
                                 std::int64_t subsample, int k) {
    const RunStore store = RunStore::open(run_dir);
    Manifest m = store.manifest();
    derive_seeds(m);
    if (store.checkpoint_epochs().empty()) {
        throw UsageError("run at " + run_dir.string() + " has no persisted checkpoints");
    }

    LabelledDataset data = load_training_data(m, data_dir);
    if (m.canary_host) {
        CanarySpec spec;
        spec.host_id = *m.canary_host;
        data = make_canary_dataset(data, spec);
    }

    CheckpointSeries series = load_series_meta(store);
    const std::vector<int> wanted = select_checkpoints(series, k);
    for (auto& entry : series.entries) {
        if (std::find(wanted.begin(), wanted.end(), entry.epoch) == wanted.end()) {
            continue;
        }
        const CheckpointFile ck = load_checkpoint(store.checkpoint_path(entry.epoch));
        entry.weights.reserve(ck.entries.size());
        for (const auto& nt : ck.entries) {
            entry.weights.emplace_back(nt.value.data().begin(), nt.value.data().end());
        }
    }

    std::vector<std::size_t> indices;
    if (subsample > 0 && static_cast<std::size_t>(subsample) < data.size()) {
        Rng rng = SeedTree(m.seed).stream("influence-subsample");
        const auto perm = shuffled_indices(data.size(), rng);
        indices.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(subsample));
    } else {
        indices.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) {
            indices[i] = i;
        }
    }

    SelfInfluenceTable table = self_influence_table(m.model, series, data, indices, k);
    table.dataset_id = m.dataset_id;

    {
        std::ofstream f(store.influence_file(), std::ios::trunc);
        if (!f) {
            throw IoError("cannot write " + store.influence_file().string());
        }
        f << influence_csv(table);
    }
    {
        nlohmann::json meta;
        meta["checkpoint_epochs"] = table.checkpoint_epochs;
        meta["subsample"] = static_cast<std::int64_t>(indices.size());
        std::ofstream f(run_dir / "influence_meta.json", std::ios::trunc);
        f << meta.dump(2) << '\n';
    }
    return table;
}

std::vector<AuditRow> run_audit(const fs::path& run_dir, const fs::path& data_dir,
                                const std::vector<std::int64_t>& hosts, bool clean,
                                std::optional<int> n_pairs_override,
                                std::optional<int> r_draws_override) {
    const RunStore store = RunStore::open(run_dir);
    Manifest m = store.manifest();
    derive_seeds(m);
    if (n_pairs_override) {
        m.n_pairs = *n_pairs_override;
    }
    if (r_draws_override) {
        m.r_draws = *r_draws_override;
    }
    if (!clean && hosts.empty()) {
        throw UsageError("audit needs --canary-host ids or --clean");
    }

    const LabelledDataset data = load_training_data(m, data_dir);
    const std::vector<Tensor> ood = load_ood_base(m, data_dir);

    std::vector<AuditRow> rows;
    if (clean) {
        rows.push_back(audit_run(m, data, ood, std::nullopt).row);
    }
    for (const std::int64_t host : hosts) {
        CanarySpec spec;
        spec.host_id = host;
        rows.push_back(audit_run(m, data, ood, spec).row);
    }
    append_report_rows(store.report_file(), rows);
    return rows;
}

double average_positive_m(const std::vector<AuditRow>& rows) {
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        if (r.report.m > 0.0) {
            s += r.report.m;
            ++n;
        }
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : s / n;
}

std::string svg_scatter(const std::vector<double>& x, const std::vector<double>& y,
                        const std::string& x_label, const std::string& y_label) {
    constexpr int kW = 640;
    constexpr int kH = 480;
    constexpr double kMargin = 56.0;
    const auto lo_hi = [](const std::vector<double>& v) {
        double lo = v.empty() ? 0.0 : v[0];
        double hi = lo;
        for (const double e : v) {
            lo = std::min(lo, e);
            hi = std::max(hi, e);
        }
        if (lo == hi) {
            lo -= 1.0;
            hi += 1.0;
        }
        const double pad = 0.06 * (hi - lo);
        return std::pair<double, double>(lo - pad, hi + pad);
    };
    const auto [x0, x1] = lo_hi(x);
    const auto [y0, y1] = lo_hi(y);
    const auto sx = [&](double v) {
        return kMargin + (v - x0) / (x1 - x0) * (kW - 2 * kMargin);
    };
    const auto sy = [&](double v) {
        return kH - kMargin - (v - y0) / (y1 - y0) * (kH - 2 * kMargin);
    };
    char buf[256];
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << kW << ' ' << kH
       << "\" version=\"1.1\">\n";
    os << "  <rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "  <line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n",
                  kMargin, kH - kMargin, static_cast<double>(kW) - kMargin, kH - kMargin);
    os << buf;
    std::snprintf(buf, sizeof buf,
                  "  <line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n",
                  kMargin, kH - kMargin, kMargin, kMargin);
    os << buf;
    for (int tick = 0; tick <= 4; ++tick) {
        const double fx = x0 + (x1 - x0) * tick / 4.0;
        const double fy = y0 + (y1 - y0) * tick / 4.0;
        std::snprintf(buf, sizeof buf,
                      "  <text x=\"%.2f\" y=\"%.2f\" font-size=\"11\" text-anchor=\"middle\">"
                      "%.3g</text>\n",
                      sx(fx), kH - kMargin + 16.0, fx);
        os << buf;
        std::snprintf(buf, sizeof buf,
                      "  <text x=\"%.2f\" y=\"%.2f\" font-size=\"11\" text-anchor=\"end\">"
                      "%.3g</text>\n",
                      kMargin - 6.0, sy(fy) + 4.0, fy);
        os << buf;
    }
    std::snprintf(buf, sizeof buf,
                  "  <text x=\"%.2f\" y=\"%.2f\" font-size=\"13\" text-anchor=\"middle\">%s"
                  "</text>\n",
                  kW / 2.0, kH - 12.0, x_label.c_str());
    os << buf;
    std::snprintf(buf, sizeof buf,
                  "  <text x=\"%.2f\" y=\"%.2f\" font-size=\"13\" text-anchor=\"middle\" "
                  "transform=\"rotate(-90 16 %d)\">%s</text>\n",
                  16.0, kH / 2.0, kH / 2, y_label.c_str());
    os << buf;
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::snprintf(buf, sizeof buf,
                      "  <circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"steelblue\" "
                      "fill-opacity=\"0.8\"/>\n",
                      sx(x[i]), sy(y[i]));
        os << buf;
    }
    os << "</svg>\n";
    return os.str();
}

ReportSummary run_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
    ReportSummary summary;
    std::map<std::pair<std::string, std::string>, std::vector<AuditRow>> groups;
    std::vector<std::pair<AuditRow, double>> joined;  // canary rows + influence score

    for (const auto& dir : run_dirs) {
        const RunStore store = RunStore::open(dir);
        std::map<std::int64_t, double> influence;
        if (fs::exists(store.influence_file())) {
            std::ifstream f(store.influence_file());
            std::string line;
            std::getline(f, line);
            if (line != kInfluenceHeader) {
                throw FormatError("influence CSV header mismatch in " +
                                  store.influence_file().string());
            }
            while (std::getline(f, line)) {
                if (line.empty()) {
                    continue;
                }
                const std::size_t comma = line.find(',');
                influence[std::stoll(line.substr(0, comma))] = std::stod(line.substr(comma + 1));
            }
        }
        if (!fs::exists(store.report_file())) {
            continue;
        }
        std::ifstream f(store.report_file());
        std::ostringstream ss;
        ss << f.rdbuf();
        for (AuditRow& row : parse_report_csv(ss.str())) {
            const auto it = influence.find(row.image_id);
            const double si = it == influence.end()
                                  ? std::numeric_limits<double>::quiet_NaN()
                                  : it->second;
            if (row.image_id >= 0 && !std::isnan(si)) {
                joined.emplace_back(row, si);
            }
            groups[{row.dataset, row.model}].push_back(row);
            summary.rows.push_back(std::move(row));
        }
    }

    std::error_code ec;
    fs::create_directories(out_dir, ec);

    // Aggregate CSV: all rows plus the Table-1 style average-over-positive-M
    // row per dataset/model group.
    {
        std::ofstream f(out_dir / "aggregate.csv", std::ios::trunc);
        if (!f) {
            throw IoError("cannot write aggregate.csv under " + out_dir.string());
        }
        f << kReportHeader << ",self_influence\n";
        for (const auto& [row, si] : joined) {
            std::string line = report_csv({row});
            line.erase(0, line.find('\n') + 1);
            line.pop_back();  // trailing newline
            f << line << ',' << format_double(si) << '\n';
        }
        for (const auto& [key, rows] : groups) {
            const double avg = average_positive_m(rows);
            double xu = 0.0;
            double xr = 0.0;
            int n = 0;
            for (const auto& r : rows) {
                if (r.report.m > 0.0) {
                    xu += r.report.x_u;
                    xr += r.report.x_r;
                    ++n;
                }
            }
            if (n == 0) {
                continue;
            }
            f << "AVERAGE," << key.first << ',' << key.second << ',' << format_double(xu / n)
              << ',' << format_double(xr / n) << ',' << format_double(avg) << ",,,,\n";
        }
    }

    for (const auto& [row, si] : joined) {
        summary.m_values.push_back(row.report.m);
        summary.self_influences.push_back(si);
    }
    if (joined.size() >= 3) {
        summary.pearson = pearson_r(summary.self_influences, summary.m_values);
    } else {
        std::cerr << "report: fewer than 3 audited canaries with influence scores; "
                     "correlation omitted\n";
    }

    const std::string svg =
        svg_scatter(summary.self_influences, summary.m_values, "self-influence",
                    "memorisation score M");
    std::ofstream f(out_dir / "scatter.svg", std::ios::trunc);
    if (!f) {
        throw IoError("cannot write scatter.svg under " + out_dir.string());
    }
    f << svg;
    return summary;
}

}  // namespace memaudit
