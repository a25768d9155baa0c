#include "memaudit/store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "memaudit/errors.hpp"

namespace memaudit {

namespace fs = std::filesystem;

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'A', 'U', 'D'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

void put_u32(std::ofstream& f, std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::ifstream& f) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

}  // namespace

void save_checkpoint(const fs::path& file, Arch arch, const std::vector<NamedTensor>& params,
                     const std::vector<NamedTensor>& buffers) {
    std::ofstream f(file, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot write checkpoint " + file.string());
    }
    f.write(kCheckpointMagic, 4);
    put_u32(f, kCheckpointVersion);
    const std::uint8_t aid = static_cast<std::uint8_t>(arch);
    f.write(reinterpret_cast<const char*>(&aid), 1);
    put_u32(f, static_cast<std::uint32_t>(params.size() + buffers.size()));
    const auto write_entry = [&](const NamedTensor& nt) {
        put_u32(f, static_cast<std::uint32_t>(nt.name.size()));
        f.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        put_u32(f, static_cast<std::uint32_t>(nt.value.rank()));
        for (int i = 0; i < nt.value.rank(); ++i) {
            put_u32(f, static_cast<std::uint32_t>(nt.value.dim(i)));
        }
        const auto d = nt.value.data();
        f.write(reinterpret_cast<const char*>(d.data()),
                static_cast<std::streamsize>(d.size() * sizeof(double)));
    };
    for (const auto& p : params) {
        write_entry(p);
    }
    for (const auto& b : buffers) {
        write_entry(b);
    }
    if (!f) {
        throw IoError("short write to checkpoint " + file.string());
    }
}

CheckpointFile load_checkpoint(const fs::path& file) {
    std::ifstream f(file, std::ios::binary);
    if (!f) {
        throw IoError("cannot open checkpoint " + file.string());
    }
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw FormatError("bad checkpoint magic in " + file.string());
    }
    const std::uint32_t version = get_u32(f);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint8_t aid = 0;
    f.read(reinterpret_cast<char*>(&aid), 1);
    if (aid > 2) {
        throw FormatError("bad architecture id " + std::to_string(aid) + " in " + file.string());
    }
    CheckpointFile ck;
    ck.arch = static_cast<Arch>(aid);
    const std::uint32_t count = get_u32(f);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32(f);
        if (!f || name_len > 4096) {
            throw FormatError("corrupt entry name in " + file.string());
        }
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const std::uint32_t rank = get_u32(f);
        if (!f || rank > 8) {
            throw FormatError("corrupt entry rank in " + file.string());
        }
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<int>(get_u32(f));
        }
        std::vector<double> data(static_cast<std::size_t>(numel(shape)));
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!f) {
            throw FormatError("truncated checkpoint payload in " + file.string());
        }
        ck.entries.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(data))});
    }
    return ck;
}

void restore_into_model(const CheckpointFile& ck, Model& model) {
    if (ck.arch != model.spec().arch) {
        throw FormatError("checkpoint architecture " + arch_name(ck.arch) +
                          " does not match model " + arch_name(model.spec().arch));
    }
    const std::size_t expected = model.params().size() + model.buffers().size();
    if (ck.entries.size() != expected) {
        throw FormatError("checkpoint has " + std::to_string(ck.entries.size()) +
                          " entries, model needs " + std::to_string(expected));
    }
    std::vector<std::vector<double>> weights;
    weights.reserve(ck.entries.size());
    std::size_t i = 0;
    const auto take = [&](const NamedTensor& want) {
        const NamedTensor& got = ck.entries[i++];
        if (got.name != want.name || got.value.shape() != want.value.shape()) {
            throw FormatError("checkpoint entry '" + got.name + "' does not match model entry '" +
                              want.name + "'");
        }
        weights.emplace_back(got.value.data().begin(), got.value.data().end());
    };
    for (const auto& p : model.params()) {
        take(p);
    }
    for (const auto& b : model.buffers()) {
        take(b);
    }
    model.restore_weights(weights);
}

RunStore RunStore::create(const fs::path& dir, const Manifest& manifest) {
    std::error_code ec;
    fs::create_directories(dir / "checkpoints", ec);
    if (ec) {
        throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
    }
    save_manifest(manifest, dir / "manifest.json");
    RunStore s;
    s.dir_ = dir;
    s.manifest_ = manifest;
    return s;
}

RunStore RunStore::open(const fs::path& dir) {
    RunStore s;
    s.dir_ = dir;
    s.manifest_ = load_manifest(dir / "manifest.json");
    return s;
}

fs::path RunStore::checkpoint_path(int epoch) const {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch);
    return dir_ / "checkpoints" / name;
}

std::vector<int> RunStore::checkpoint_epochs() const {
    std::vector<int> epochs;
    const fs::path cdir = dir_ / "checkpoints";
    if (!fs::exists(cdir)) {
        return epochs;
    }
    for (const auto& entry : fs::directory_iterator(cdir)) {
        const std::string name = entry.path().filename().string();
        int epoch = 0;
        if (std::sscanf(name.c_str(), "epoch_%d.ckpt", &epoch) == 1) {
            epochs.push_back(epoch);
        }
    }
    std::sort(epochs.begin(), epochs.end());
    return epochs;
}

void RunStore::write_loss_curve(const CheckpointSeries& series) const {
    std::ofstream f(loss_curve_file(), std::ios::trunc);
    if (!f) {
        throw IoError("cannot write " + loss_curve_file().string());
    }
    f << "epoch,train_loss,val_loss,lr\n";
    for (const auto& c : series.entries) {
        f << c.epoch << ',' << format_double(c.train_loss) << ',' << format_double(c.val_loss)
          << ',' << format_double(c.learning_rate) << '\n';
    }
}

void RunStore::write_summary(const TrainResult& result) const {
    nlohmann::json j;
    j["best_epoch"] = result.best_epoch;
    j["best_val_loss"] = result.best_val_loss;
    j["epochs_run"] = result.epochs_run;
    std::ofstream f(dir_ / "run_summary.json", std::ios::trunc);
    if (!f) {
        throw IoError("cannot write run summary in " + dir_.string());
    }
    f << j.dump(2) << '\n';
}

std::string report_csv(const std::vector<AuditRow>& rows) {
    std::ostringstream os;
    os << kReportHeader << '\n';
    for (const auto& r : rows) {
        os << r.image_id << ',' << r.dataset << ',' << r.model << ','
           << format_double(r.report.x_u) << ',' << format_double(r.report.x_r) << ','
           << format_double(r.report.m) << ',' << format_double(r.report.t_stat) << ','
           << format_double(r.report.p_value) << ','
           << (r.report.significant ? "true" : "false") << '\n';
    }
    return os.str();
}

std::vector<AuditRow> parse_report_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kReportHeader) {
        throw FormatError("report CSV header mismatch: '" + line + "'");
    }
    std::vector<AuditRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            const std::size_t comma = line.find(',', start);
            if (comma == std::string::npos) {
                cells.push_back(line.substr(start));
                break;
            }
            cells.push_back(line.substr(start, comma - start));
            start = comma + 1;
        }
        if (cells.size() != 9) {
            throw FormatError("report CSV row has " + std::to_string(cells.size()) + " cells");
        }
        AuditRow r;
        r.image_id = std::stoll(cells[0]);
        r.dataset = cells[1];
        r.model = cells[2];
        r.report.x_u = std::stod(cells[3]);
        r.report.x_r = std::stod(cells[4]);
        r.report.m = std::stod(cells[5]);
        r.report.t_stat = std::stod(cells[6]);
        r.report.p_value = std::stod(cells[7]);
        r.report.significant = cells[8] == "true";
        r.report.zero_variance = std::isnan(r.report.p_value);
        rows.push_back(std::move(r));
    }
    return rows;
}

void append_report_rows(const fs::path& file, const std::vector<AuditRow>& rows) {
    const bool fresh = !fs::exists(file);
    std::ofstream f(file, std::ios::app);
    if (!f) {
        throw IoError("cannot write report " + file.string());
    }
    std::string body = report_csv(rows);
    if (!fresh) {
        body.erase(0, body.find('\n') + 1);  // drop the header when appending
    }
    f << body;
}

std::string influence_csv(const SelfInfluenceTable& table) {
    auto rows = table.scores;
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) {
            return a.second > b.second;
        }
        return a.first < b.first;
    });
    std::ostringstream os;
    os << kInfluenceHeader << '\n';
    for (const auto& [id, score] : rows) {
        os << id << ',' << format_double(score) << '\n';
    }
    return os.str();
}

}  // namespace memaudit
