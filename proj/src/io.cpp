#include "psgld/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "psgld/baselines.hpp"
#include "psgld/distributed.hpp"
#include "psgld/rng.hpp"

namespace fs = std::filesystem;

namespace psgld {

namespace {

[[noreturn]] void parse_fail(const std::string& path, std::int64_t line_no,
                             const std::string& message) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + message);
}

std::vector<std::string> split_fields(const std::string& line, const std::string& sep) {
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
        const std::size_t next = line.find(sep, pos);
        if (next == std::string::npos) {
            fields.push_back(line.substr(pos));
            break;
        }
        fields.push_back(line.substr(pos, next - pos));
        pos = next + sep.size();
    }
    return fields;
}

double parse_number(const std::string& s, const std::string& path, std::int64_t line_no) {
    try {
        std::size_t used = 0;
        const double x = std::stod(s, &used);
        if (used != s.size()) parse_fail(path, line_no, "trailing characters in number '" + s + "'");
        return x;
    } catch (const std::invalid_argument&) {
        parse_fail(path, line_no, "expected a number, got '" + s + "'");
    } catch (const std::out_of_range&) {
        parse_fail(path, line_no, "number out of range: '" + s + "'");
    }
}

std::int64_t parse_int(const std::string& s, const std::string& path, std::int64_t line_no) {
    const double x = parse_number(s, path, line_no);
    if (std::floor(x) != x) parse_fail(path, line_no, "expected an integer, got '" + s + "'");
    return static_cast<std::int64_t>(x);
}

struct RawTriplet {
    std::int64_t row_id;
    std::int64_t col_id;
    double value;
};

// Reindexes raw row/column ids to contiguous 0-based indices (ascending raw
// id) and assembles the matrix per the zeros policy.
IngestResult assemble_from_raw(std::vector<RawTriplet> triplets, ZerosPolicy zeros,
                               InputFormat detected) {
    std::set<std::int64_t> row_set, col_set;
    for (const RawTriplet& t : triplets) {
        row_set.insert(t.row_id);
        col_set.insert(t.col_id);
    }
    if (row_set.empty()) throw std::runtime_error("ingest: no data rows found");
    IngestResult out;
    out.detected = detected;
    out.mapping.row_ids.assign(row_set.begin(), row_set.end());
    out.mapping.col_ids.assign(col_set.begin(), col_set.end());
    std::map<std::int64_t, std::int64_t> row_index, col_index;
    for (std::size_t i = 0; i < out.mapping.row_ids.size(); ++i)
        row_index[out.mapping.row_ids[i]] = static_cast<std::int64_t>(i);
    for (std::size_t j = 0; j < out.mapping.col_ids.size(); ++j)
        col_index[out.mapping.col_ids[j]] = static_cast<std::int64_t>(j);
    const std::int64_t n_rows = static_cast<std::int64_t>(out.mapping.row_ids.size());
    const std::int64_t n_cols = static_cast<std::int64_t>(out.mapping.col_ids.size());

    if (zeros == ZerosPolicy::kObserved) {
        std::vector<double> dense(static_cast<std::size_t>(n_rows * n_cols), 0.0);
        std::vector<bool> seen(dense.size(), false);
        for (const RawTriplet& t : triplets) {
            const std::int64_t i = row_index[t.row_id];
            const std::int64_t j = col_index[t.col_id];
            const std::size_t lin = static_cast<std::size_t>(i * n_cols + j);
            if (seen[lin])
                throw std::runtime_error("ingest: duplicate coordinate for raw ids (" +
                                         std::to_string(t.row_id) + "," +
                                         std::to_string(t.col_id) + ")");
            seen[lin] = true;
            dense[lin] = t.value;
        }
        out.v = ObservationMatrix::dense(n_rows, n_cols, std::move(dense));
        return out;
    }
    // zeros-as-missing applies to the unlisted cells; explicitly listed
    // entries are observed whatever their value
    std::vector<Entry> entries;
    entries.reserve(triplets.size());
    for (const RawTriplet& t : triplets)
        entries.push_back(Entry{row_index[t.row_id], col_index[t.col_id], t.value});
    out.v = ObservationMatrix::sparse(n_rows, n_cols, std::move(entries));
    return out;
}

IngestResult ingest_matrix_market(const std::string& path, std::istream& in, bool coordinate,
                                  ZerosPolicy zeros) {
    std::string line;
    std::int64_t line_no = 1;  // header already consumed
    // skip comments
    std::int64_t dims_line = 0;
    std::vector<std::string> dims;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line[0] == '%') continue;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        std::string tok;
        while (ls >> tok) dims.push_back(tok);
        dims_line = line_no;
        break;
    }
    if (dims.empty()) parse_fail(path, line_no, "missing size line");

    if (coordinate) {
        if (dims.size() != 3) parse_fail(path, dims_line, "coordinate size line needs 'rows cols nnz'");
        const std::int64_t n_rows = parse_int(dims[0], path, dims_line);
        const std::int64_t n_cols = parse_int(dims[1], path, dims_line);
        const std::int64_t nnz = parse_int(dims[2], path, dims_line);
        if (n_rows < 1 || n_cols < 1) parse_fail(path, dims_line, "non-positive dimensions");
        std::vector<Entry> entries;
        entries.reserve(static_cast<std::size_t>(nnz));
        std::int64_t seen = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty() || line[0] == '%') continue;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            std::istringstream ls(line);
            std::string si, sj, sv;
            if (!(ls >> si >> sj >> sv)) parse_fail(path, line_no, "expected 'i j value'");
            const std::int64_t i = parse_int(si, path, line_no) - 1;
            const std::int64_t j = parse_int(sj, path, line_no) - 1;
            const double value = parse_number(sv, path, line_no);
            if (i < 0 || i >= n_rows || j < 0 || j >= n_cols)
                parse_fail(path, line_no, "coordinate out of bounds");
            if (value < 0) parse_fail(path, line_no, "negative value under non-negativity");
            entries.push_back(Entry{i, j, value});
            ++seen;
        }
        if (seen != nnz)
            throw std::runtime_error(path + ": expected " + std::to_string(nnz) +
                                     " entries, found " + std::to_string(seen));
        IngestResult out;
        out.detected = InputFormat::kMatrixMarketCoordinate;
        if (zeros == ZerosPolicy::kObserved) {
            std::vector<double> dense(static_cast<std::size_t>(n_rows * n_cols), 0.0);
            std::vector<bool> filled(dense.size(), false);
            for (const Entry& e : entries) {
                const std::size_t lin = static_cast<std::size_t>(e.i * n_cols + e.j);
                if (filled[lin])
                    throw std::runtime_error(path + ": duplicate coordinate (" +
                                             std::to_string(e.i + 1) + "," +
                                             std::to_string(e.j + 1) + ")");
                filled[lin] = true;
                dense[lin] = e.v;
            }
            out.v = ObservationMatrix::dense(n_rows, n_cols, std::move(dense));
        } else {
            // listed entries stay observed even when zero; only unlisted
            // cells are treated as missing
            out.v = ObservationMatrix::sparse(n_rows, n_cols, std::move(entries));
        }
        return out;
    }

    if (dims.size() != 2) parse_fail(path, dims_line, "array size line needs 'rows cols'");
    const std::int64_t n_rows = parse_int(dims[0], path, dims_line);
    const std::int64_t n_cols = parse_int(dims[1], path, dims_line);
    if (n_rows < 1 || n_cols < 1) parse_fail(path, dims_line, "non-positive dimensions");
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(n_rows * n_cols));
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '%') continue;
        std::istringstream ls(line);
        std::string tok;
        while (ls >> tok) values.push_back(parse_number(tok, path, line_no));
    }
    if (static_cast<std::int64_t>(values.size()) != n_rows * n_cols)
        throw std::runtime_error(path + ": expected " + std::to_string(n_rows * n_cols) +
                                 " values, found " + std::to_string(values.size()));
    // MatrixMarket array files are column-major.
    std::vector<double> row_major(values.size());
    for (std::int64_t j = 0; j < n_cols; ++j)
        for (std::int64_t i = 0; i < n_rows; ++i)
            row_major[static_cast<std::size_t>(i * n_cols + j)] =
                values[static_cast<std::size_t>(j * n_rows + i)];
    IngestResult out;
    out.detected = InputFormat::kMatrixMarketArray;
    out.v = ObservationMatrix::dense(n_rows, n_cols, std::move(row_major));
    return out;
}

IngestResult ingest_movielens(const std::string& path, std::istream& in, ZerosPolicy zeros) {
    std::string line;
    std::int64_t line_no = 0;
    std::vector<RawTriplet> triplets;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> fields = split_fields(line, "::");
        if (fields.size() == 1) fields = split_fields(line, "\t");
        if (fields.size() < 3)
            parse_fail(path, line_no, "expected user::movie::rating[::timestamp]");
        const std::int64_t user = parse_int(fields[0], path, line_no);
        const std::int64_t movie = parse_int(fields[1], path, line_no);
        const double rating = parse_number(fields[2], path, line_no);
        if (rating < 0) parse_fail(path, line_no, "negative rating under non-negativity");
        // movies are rows, users are columns
        triplets.push_back(RawTriplet{movie, user, rating});
    }
    return assemble_from_raw(std::move(triplets), zeros, InputFormat::kMovieLensRatings);
}

IngestResult ingest_tsv(const std::string& path, std::istream& in, ZerosPolicy zeros) {
    std::string line;
    std::int64_t line_no = 0;
    std::vector<RawTriplet> triplets;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string si, sj, sv;
        if (!(ls >> si >> sj >> sv)) parse_fail(path, line_no, "expected 'row col value'");
        const std::int64_t i = parse_int(si, path, line_no);
        const std::int64_t j = parse_int(sj, path, line_no);
        const double value = parse_number(sv, path, line_no);
        if (value < 0) parse_fail(path, line_no, "negative value under non-negativity");
        triplets.push_back(RawTriplet{i, j, value});
    }
    return assemble_from_raw(std::move(triplets), zeros, InputFormat::kTsvTriplets);
}

void atomic_write(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
        out << contents;
        if (!out) throw std::runtime_error("write failed: " + tmp);
    }
    fs::rename(tmp, path);
}

}  // namespace

IngestResult ingest(const std::string& path, InputFormat format, ZerosPolicy zeros) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open input file: " + path);

    std::string first_line;
    if (!std::getline(in, first_line)) throw std::runtime_error(path + ": empty file");
    if (!first_line.empty() && first_line.back() == '\r') first_line.pop_back();

    if (format == InputFormat::kAuto) {
        if (first_line.rfind("%%MatrixMarket", 0) == 0) {
            format = first_line.find("coordinate") != std::string::npos
                         ? InputFormat::kMatrixMarketCoordinate
                         : InputFormat::kMatrixMarketArray;
        } else if (first_line.find("::") != std::string::npos) {
            format = InputFormat::kMovieLensRatings;
        } else {
            const auto fields = split_fields(first_line, "\t");
            format = fields.size() >= 4 ? InputFormat::kMovieLensRatings
                                        : InputFormat::kTsvTriplets;
        }
    }

    switch (format) {
        case InputFormat::kMatrixMarketCoordinate:
        case InputFormat::kMatrixMarketArray: {
            if (first_line.rfind("%%MatrixMarket", 0) != 0)
                parse_fail(path, 1, "missing %%MatrixMarket header");
            if (first_line.find("pattern") != std::string::npos ||
                first_line.find("complex") != std::string::npos ||
                first_line.find("symmetric") != std::string::npos)
                parse_fail(path, 1, "unsupported MatrixMarket qualifier (need real/integer general)");
            const bool coordinate = first_line.find("coordinate") != std::string::npos;
            if (coordinate != (format == InputFormat::kMatrixMarketCoordinate))
                parse_fail(path, 1, "MatrixMarket header does not match the requested format");
            return ingest_matrix_market(path, in, coordinate, zeros);
        }
        case InputFormat::kMovieLensRatings: {
            in.seekg(0);
            return ingest_movielens(path, in, zeros);
        }
        case InputFormat::kTsvTriplets: {
            in.seekg(0);
            return ingest_tsv(path, in, zeros);
        }
        case InputFormat::kAuto:
            break;
    }
    throw std::logic_error("ingest: unreachable");
}

std::pair<ObservationMatrix, ObservationMatrix> holdout_split(const ObservationMatrix& v,
                                                              double fraction,
                                                              std::uint64_t seed) {
    if (!(fraction >= 0.0) || fraction >= 1.0)
        throw std::invalid_argument("holdout_split: fraction must lie in [0, 1)");
    const std::int64_t n = v.n_observed();
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_stream(seed, stream_tag::kHoldout);
    std::shuffle(order.begin(), order.end(), rng);
    const std::int64_t n_test = std::llround(fraction * static_cast<double>(n));

    std::vector<Entry> test_entries, train_entries;
    test_entries.reserve(static_cast<std::size_t>(n_test));
    train_entries.reserve(static_cast<std::size_t>(n - n_test));
    for (std::int64_t p = 0; p < n; ++p) {
        const Entry e = v.entry(order[static_cast<std::size_t>(p)]);
        (p < n_test ? test_entries : train_entries).push_back(e);
    }
    return {ObservationMatrix::sparse(v.rows(), v.cols(), std::move(train_entries), true),
            ObservationMatrix::sparse(v.rows(), v.cols(), std::move(test_entries), true)};
}

void write_matrix_market_array(const std::string& path, const Eigen::MatrixXd& m) {
    std::string out = "%%MatrixMarket matrix array real general\n";
    out += std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) out += format_double(m(i, j)) + "\n";
    atomic_write(path, out);
}

Eigen::MatrixXd read_matrix_market_array(const std::string& path) {
    IngestResult r = ingest(path, InputFormat::kMatrixMarketArray);
    Eigen::MatrixXd m(r.v.rows(), r.v.cols());
    for (std::int64_t i = 0; i < r.v.rows(); ++i)
        for (std::int64_t j = 0; j < r.v.cols(); ++j) m(i, j) = r.v.dense_at(i, j);
    return m;
}

void write_observations(const std::string& path, const ObservationMatrix& v) {
    if (v.is_dense()) {
        std::string out = "%%MatrixMarket matrix array real general\n";
        out += std::to_string(v.rows()) + " " + std::to_string(v.cols()) + "\n";
        for (std::int64_t j = 0; j < v.cols(); ++j)
            for (std::int64_t i = 0; i < v.rows(); ++i) out += format_double(v.dense_at(i, j)) + "\n";
        atomic_write(path, out);
        return;
    }
    std::string out = "%%MatrixMarket matrix coordinate real general\n";
    out += std::to_string(v.rows()) + " " + std::to_string(v.cols()) + " " +
           std::to_string(v.n_observed()) + "\n";
    v.for_each([&](std::int64_t i, std::int64_t j, double val) {
        out += std::to_string(i + 1) + " " + std::to_string(j + 1) + " " + format_double(val) +
               "\n";
    });
    atomic_write(path, out);
}

void write_id_mapping(const std::string& path, const std::vector<std::int64_t>& ids) {
    std::string out = "raw_id\tindex\n";
    for (std::size_t idx = 0; idx < ids.size(); ++idx)
        out += std::to_string(ids[idx]) + "\t" + std::to_string(idx) + "\n";
    atomic_write(path, out);
}

std::vector<std::int64_t> read_id_mapping(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open mapping file: " + path);
    std::string line;
    std::getline(in, line);  // header
    std::vector<std::int64_t> ids;
    std::int64_t raw, idx;
    while (in >> raw >> idx) {
        if (static_cast<std::int64_t>(ids.size()) != idx)
            throw std::runtime_error(path + ": non-contiguous index column");
        ids.push_back(raw);
    }
    return ids;
}

std::string metrics_csv_row(const ChainRecord& rec) {
    std::string row = std::to_string(rec.iteration);
    row += "," + format_double(rec.epsilon);
    row += "," + format_double(rec.log_post);
    row += "," + format_double(rec.train_rmse);
    row += ",";
    if (rec.test_rmse) row += format_double(*rec.test_rmse);
    row += "," + std::to_string(rec.wall_ms);
    return row;
}

const char* algorithm_name(Algorithm algorithm) {
    switch (algorithm) {
        case Algorithm::kPsgld: return "psgld";
        case Algorithm::kLd: return "ld";
        case Algorithm::kSgld: return "sgld";
        case Algorithm::kGibbs: return "gibbs";
        case Algorithm::kDsgd: return "dsgd";
    }
    return "?";
}

Algorithm parse_algorithm(const std::string& name) {
    if (name == "psgld") return Algorithm::kPsgld;
    if (name == "ld") return Algorithm::kLd;
    if (name == "sgld") return Algorithm::kSgld;
    if (name == "gibbs") return Algorithm::kGibbs;
    if (name == "dsgd") return Algorithm::kDsgd;
    throw std::invalid_argument("unknown algorithm: " + name +
                                " (expected psgld|ld|sgld|gibbs|dsgd)");
}

void RunConfig::validate() const {
    spec.validate();
    sampler.validate();
    if (blocks < 1) throw std::invalid_argument("RunConfig: blocks must be >= 1");
    if (distributed_nodes < 0)
        throw std::invalid_argument("RunConfig: distributed node count must be >= 0");
    if (!(holdout_fraction >= 0.0) || holdout_fraction >= 1.0)
        throw std::invalid_argument("RunConfig: holdout_fraction must lie in [0, 1)");
    if (gen_rows < 1 || gen_cols < 1)
        throw std::invalid_argument("RunConfig: generate shape must be positive");
    if (!(gen_density > 0.0) || gen_density > 1.0)
        throw std::invalid_argument("RunConfig: density must lie in (0, 1]");
}

namespace {

nlohmann::json config_manifest(const RunConfig& cfg) {
    nlohmann::json j;
    j["tool"] = "psgld";
    j["version"] = "0.1.0";
    j["command"] = cfg.command;
    j["input"] = {{"path", cfg.input_path},
                  {"zeros", cfg.zeros == ZerosPolicy::kMissing ? "missing" : "observed"}};
    j["model"] = {{"beta", cfg.spec.beta},
                  {"phi", cfg.spec.phi},
                  {"lambda_w", cfg.spec.lambda_w},
                  {"lambda_h", cfg.spec.lambda_h},
                  {"k", cfg.spec.k}};
    nlohmann::json part = {{"blocks", cfg.blocks}};
    if (cfg.permute_seed) part["permute_seed"] = *cfg.permute_seed;
    j["partition"] = part;
    nlohmann::json samp = {
        {"algorithm", algorithm_name(cfg.sampler.algorithm)},
        {"iterations", cfg.sampler.total_iterations},
        {"burn_in", cfg.sampler.burn_in},
        {"thin", cfg.sampler.thin},
        {"seed", cfg.sampler.seed},
        {"mirroring", cfg.sampler.mirroring},
        {"scheduler", cfg.sampler.scheduler_mode == SchedulerMode::kCyclic ? "cyclic" : "random"},
        {"workers", cfg.sampler.workers},
        {"metrics_every", cfg.sampler.metrics_every},
    };
    if (cfg.sampler.schedule.constant_eps())
        samp["const_eps"] = *cfg.sampler.schedule.constant_eps();
    else
        samp["step"] = {{"a", cfg.sampler.schedule.a()}, {"b", cfg.sampler.schedule.b()}};
    if (cfg.sampler.sgld_subsample > 0) samp["sgld_subsample"] = cfg.sampler.sgld_subsample;
    if (cfg.distributed_nodes > 0) samp["distributed_nodes"] = cfg.distributed_nodes;
    j["sampler"] = samp;
    j["holdout"] = {{"fraction", cfg.holdout_fraction}, {"seed", cfg.holdout_seed}};
    j["generate"] = {{"rows", cfg.gen_rows}, {"cols", cfg.gen_cols}, {"density", cfg.gen_density}};
    return j;
}

}  // namespace

int run_generate(const RunConfig& cfg) {
    cfg.validate();
    const SyntheticData data =
        generate_synthetic(cfg.spec, cfg.gen_rows, cfg.gen_cols, cfg.sampler.seed, cfg.gen_density);
    fs::create_directories(cfg.output_dir);
    const fs::path out(cfg.output_dir);
    write_observations((out / "v.mtx").string(), data.v);
    write_matrix_market_array((out / "w_true.mtx").string(), data.factors.w);
    write_matrix_market_array((out / "h_true.mtx").string(), data.factors.h);
    nlohmann::json manifest = config_manifest(cfg);
    manifest["outputs"] = {{"v", "v.mtx"}, {"w_true", "w_true.mtx"}, {"h_true", "h_true.mtx"}};
    atomic_write((out / "manifest.json").string(), manifest.dump(2) + "\n");
    std::cout << "generated " << data.v.rows() << "x" << data.v.cols() << " matrix, "
              << data.v.n_observed() << " observed entries -> " << cfg.output_dir << "\n";
    return 0;
}

int run_experiment(const RunConfig& cfg) {
    cfg.validate();
    IngestResult ing = ingest(cfg.input_path, cfg.format, cfg.zeros);
    ObservationMatrix v = std::move(ing.v);

    IndexPermutation perm;
    const bool permuted = cfg.permute_seed.has_value();
    if (permuted) v = permute_observations(v, *cfg.permute_seed, &perm);

    ObservationMatrix train = v;
    std::optional<ObservationMatrix> test;
    if (cfg.holdout_fraction > 0.0) {
        auto [tr, te] = holdout_split(v, cfg.holdout_fraction, cfg.holdout_seed);
        train = std::move(tr);
        test = std::move(te);
    }

    const int b = cfg.distributed_nodes > 0 ? cfg.distributed_nodes : cfg.blocks;
    const BlockGrid grid = build_grid(train.rows(), train.cols(), b);

    fs::create_directories(cfg.output_dir);
    const fs::path out(cfg.output_dir);

    // Metrics stream: rows are flushed as produced so partial results
    // survive an abort; the finished file is renamed into place.
    const std::string metrics_partial = (out / "metrics.csv.partial").string();
    std::ofstream metrics(metrics_partial, std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot open " + metrics_partial);
    metrics << kMetricsCsvHeader << "\n";
    RunHooks hooks;
    hooks.on_record = [&](const ChainRecord& rec) { metrics << metrics_csv_row(rec) << "\n" << std::flush; };
    if (cfg.save_samples && cfg.distributed_nodes == 0) {
        fs::create_directories(out / "samples");
        hooks.on_sample = [&](std::int64_t t, const FactorPair& f) {
            char name[32];
            std::snprintf(name, sizeof(name), "w_%08lld.mtx", static_cast<long long>(t));
            write_matrix_market_array((out / "samples" / name).string(), f.w);
            std::snprintf(name, sizeof(name), "h_%08lld.mtx", static_cast<long long>(t));
            write_matrix_market_array((out / "samples" / name).string(), f.h);
        };
    }

    RunResult result;
    if (cfg.distributed_nodes > 0) {
        InProcessTransport transport;
        result = run_distributed(train, cfg.spec, grid, cfg.sampler, transport,
                                 test ? &*test : nullptr, &hooks);
    } else {
        result = run_chain(train, cfg.spec, grid, cfg.sampler, test ? &*test : nullptr, &hooks);
    }
    metrics.close();
    fs::rename(metrics_partial, out / "metrics.csv");

    write_matrix_market_array((out / "w_mean.mtx").string(), result.posterior_mean.w);
    write_matrix_market_array((out / "h_mean.mtx").string(), result.posterior_mean.h);
    write_matrix_market_array((out / "w_last.mtx").string(), result.final_state.w);
    write_matrix_market_array((out / "h_last.mtx").string(), result.final_state.h);
    if (!ing.mapping.identity()) {
        write_id_mapping((out / "row_ids.tsv").string(), ing.mapping.row_ids);
        write_id_mapping((out / "col_ids.tsv").string(), ing.mapping.col_ids);
    }
    if (permuted) {
        write_id_mapping((out / "row_perm.tsv").string(), perm.row_perm);
        write_id_mapping((out / "col_perm.tsv").string(), perm.col_perm);
    }

    nlohmann::json manifest = config_manifest(cfg);
    manifest["data"] = {{"rows", train.rows()},
                        {"cols", train.cols()},
                        {"observed", train.n_observed()},
                        {"dense", train.is_dense()}};
    manifest["results"] = {{"kept_samples", result.kept_samples},
                           {"iterations", static_cast<std::int64_t>(result.records.size())}};
    if (!result.records.empty()) {
        const ChainRecord& last = result.records.back();
        manifest["results"]["final_log_post"] = last.log_post;
        manifest["results"]["final_train_rmse"] = last.train_rmse;
        if (last.test_rmse) manifest["results"]["final_test_rmse"] = *last.test_rmse;
    }
    const double mean_train_rmse = rmse(train, result.posterior_mean);
    manifest["results"]["posterior_mean_train_rmse"] = mean_train_rmse;
    std::optional<double> mean_test_rmse;
    if (test && test->n_observed() > 0) {
        mean_test_rmse = rmse(*test, result.posterior_mean);
        manifest["results"]["posterior_mean_test_rmse"] = *mean_test_rmse;
    }
    atomic_write((out / "manifest.json").string(), manifest.dump(2) + "\n");

    std::cout << "algorithm=" << algorithm_name(cfg.sampler.algorithm)
              << " iterations=" << result.records.size()
              << " kept_samples=" << result.kept_samples;
    if (!result.records.empty())
        std::cout << " final_logpost=" << format_double(result.records.back().log_post);
    std::cout << " posterior_mean_train_rmse=" << format_double(mean_train_rmse);
    if (mean_test_rmse)
        std::cout << " posterior_mean_test_rmse=" << format_double(*mean_test_rmse);
    std::cout << "\n";
    return 0;
}

int run_evaluate(const RunConfig& cfg, const std::string& w_path, const std::string& h_path) {
    IngestResult ing = ingest(cfg.input_path, cfg.format, cfg.zeros);
    FactorPair factors{read_matrix_market_array(w_path), read_matrix_market_array(h_path)};
    if (factors.w.rows() != ing.v.rows() || factors.h.cols() != ing.v.cols() ||
        factors.w.cols() != factors.h.rows())
        throw std::runtime_error("evaluate: factor shapes do not match the data");
    ModelSpec spec = cfg.spec;
    spec.k = static_cast<int>(factors.w.cols());
    std::cout << "metric,value\n";
    std::cout << "rmse," << format_double(rmse(ing.v, factors)) << "\n";
    std::cout << "logpost," << format_double(log_posterior_unnorm(ing.v, factors, spec)) << "\n";
    return 0;
}

int run_partition_info(const RunConfig& cfg, std::ostream& out) {
    IngestResult ing = ingest(cfg.input_path, cfg.format, cfg.zeros);
    ObservationMatrix v = std::move(ing.v);
    if (cfg.permute_seed) v = permute_observations(v, *cfg.permute_seed);
    const BlockGrid grid = build_grid(v.rows(), v.cols(), cfg.blocks);
    out << "block_row,block_col,row_start,row_end,col_start,col_end,observed\n";
    for (int r = 0; r < grid.b(); ++r)
        for (int c = 0; c < grid.b(); ++c) {
            const Block blk = grid.block(r, c);
            out << r << "," << c << "," << blk.rows.begin << "," << blk.rows.end << ","
                << blk.cols.begin << "," << blk.cols.end << "," << v.count_in_block(blk) << "\n";
        }
    return 0;
}

}  // namespace psgld
