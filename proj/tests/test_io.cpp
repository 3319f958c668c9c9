#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>

#include "oracles.hpp"
#include "psgld/io.hpp"
#include "psgld/model.hpp"

using namespace psgld;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static std::mt19937_64 rng(std::random_device{}());
        path = fs::temp_directory_path() /
               ("psgld_test_" + std::to_string(rng() & 0xffffffff));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path);
    out << contents;
}

}  // namespace

TEST_SUITE_BEGIN("io");

TEST_CASE("ingest: MatrixMarket coordinate") {
    TempDir dir;
    write_file(dir.file("v.mtx"),
               "%%MatrixMarket matrix coordinate real general\n"
               "% comment line\n"
               "4 5 3\n"
               "1 1 2.5\n"
               "2 3 1.0\n"
               "4 5 7\n");
    auto r = ingest(dir.file("v.mtx"));
    CHECK(r.detected == InputFormat::kMatrixMarketCoordinate);
    CHECK(r.v.rows() == 4);
    CHECK(r.v.cols() == 5);
    CHECK(r.v.n_observed() == 3);
    CHECK(r.v.mask_mode() == ObservationMatrix::MaskMode::kObservedEntriesOnly);
    CHECK(r.mapping.identity());
    CHECK(r.v.entry(0).i == 0);
    CHECK(r.v.entry(0).v == 2.5);
}

TEST_CASE("ingest: MatrixMarket array is dense and column-major") {
    TempDir dir;
    write_file(dir.file("v.mtx"),
               "%%MatrixMarket matrix array real general\n"
               "2 2\n"
               "1\n3\n2\n4\n");
    auto r = ingest(dir.file("v.mtx"));
    CHECK(r.v.mask_mode() == ObservationMatrix::MaskMode::kAllObservedDense);
    CHECK(r.v.n_observed() == 4);
    CHECK(r.v.dense_at(0, 0) == 1.0);
    CHECK(r.v.dense_at(1, 0) == 3.0);  // file order is column-major
    CHECK(r.v.dense_at(0, 1) == 2.0);
    CHECK(r.v.dense_at(1, 1) == 4.0);
}

TEST_CASE("ingest: MovieLens ratings with id reindexing") {
    TempDir dir;
    write_file(dir.file("ratings.dat"),
               "1::10::5.0::978300760\n"
               "1::31::3.5::978302109\n"
               "7::10::4.0::978301968\n");
    auto r = ingest(dir.file("ratings.dat"));
    CHECK(r.detected == InputFormat::kMovieLensRatings);
    // movies are rows: raw ids {10, 31} -> indices {0, 1}
    CHECK(r.mapping.row_ids == std::vector<std::int64_t>{10, 31});
    // users are columns: raw ids {1, 7} -> indices {0, 1}
    CHECK(r.mapping.col_ids == std::vector<std::int64_t>{1, 7});
    CHECK(r.v.rows() == 2);
    CHECK(r.v.cols() == 2);
    CHECK(r.v.n_observed() == 3);
    // `1::10::5.0::...` lands at (row-for-movie-10, col-for-user-1)
    CHECK(r.v.entry(0).i == 0);
    CHECK(r.v.entry(0).j == 0);
    CHECK(r.v.entry(0).v == 5.0);

    // tab-separated variant parses the same
    write_file(dir.file("ratings.tsv"),
               "1\t10\t5.0\t978300760\n"
               "1\t31\t3.5\t978302109\n"
               "7\t10\t4.0\t978301968\n");
    auto rt = ingest(dir.file("ratings.tsv"));
    CHECK(rt.detected == InputFormat::kMovieLensRatings);
    CHECK(rt.v.n_observed() == 3);
    CHECK(rt.mapping.row_ids == r.mapping.row_ids);
}

TEST_CASE("ingest: tsv triplets") {
    TempDir dir;
    write_file(dir.file("t.tsv"), "0\t0\t1.5\n2\t1\t2.5\n");
    auto r = ingest(dir.file("t.tsv"));
    CHECK(r.detected == InputFormat::kTsvTriplets);
    CHECK(r.v.rows() == 2);  // raw row ids {0, 2} reindexed
    CHECK(r.v.cols() == 2);
    CHECK(r.mapping.row_ids == std::vector<std::int64_t>{0, 2});
}

TEST_CASE("ingest: errors carry line numbers; duplicates and negatives rejected") {
    TempDir dir;
    write_file(dir.file("bad.mtx"),
               "%%MatrixMarket matrix coordinate real general\n"
               "2 2 2\n"
               "1 1 1.0\n"
               "1 oops 2.0\n");
    CHECK_THROWS_WITH_AS(ingest(dir.file("bad.mtx")), doctest::Contains(":4:"),
                         std::runtime_error);

    write_file(dir.file("dup.mtx"),
               "%%MatrixMarket matrix coordinate real general\n"
               "2 2 2\n"
               "1 1 1.0\n"
               "1 1 2.0\n");
    CHECK_THROWS_WITH_AS(ingest(dir.file("dup.mtx")), doctest::Contains("duplicate"),
                         std::invalid_argument);

    write_file(dir.file("neg.tsv"), "0\t0\t-3.0\n");
    CHECK_THROWS_WITH_AS(ingest(dir.file("neg.tsv")), doctest::Contains("negative"),
                         std::runtime_error);

    write_file(dir.file("sym.mtx"), "%%MatrixMarket matrix coordinate real symmetric\n1 1 1\n1 1 1\n");
    CHECK_THROWS_AS(ingest(dir.file("sym.mtx")), std::runtime_error);

    CHECK_THROWS_WITH_AS(ingest(dir.file("missing.mtx")), doctest::Contains("open"),
                         std::runtime_error);
}

TEST_CASE("ingest: zeros policy") {
    TempDir dir;
    write_file(dir.file("z.mtx"),
               "%%MatrixMarket matrix coordinate real general\n"
               "2 2 3\n"
               "1 1 1.0\n"
               "1 2 0\n"
               "2 2 2.0\n");
    // the policy concerns unlisted cells: listed entries survive either way
    auto missing = ingest(dir.file("z.mtx"), InputFormat::kAuto, ZerosPolicy::kMissing);
    CHECK(missing.v.n_observed() == 3);  // the explicit zero stays observed
    CHECK_FALSE(missing.v.is_dense());
    auto observed = ingest(dir.file("z.mtx"), InputFormat::kAuto, ZerosPolicy::kObserved);
    CHECK(observed.v.is_dense());
    CHECK(observed.v.n_observed() == 4);  // unlisted cells become observed zeros
    CHECK(observed.v.dense_at(1, 0) == 0.0);
}

TEST_CASE("round trip: ingest -> persist -> ingest is the identity") {
    TempDir dir;
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 2};
    auto data = generate_synthetic(spec, 12, 9, 5, 0.3);
    write_observations(dir.file("v.mtx"), data.v);
    auto r = ingest(dir.file("v.mtx"));
    REQUIRE(r.v.n_observed() == data.v.n_observed());
    for (std::int64_t p = 0; p < r.v.n_observed(); ++p) {
        CHECK(r.v.entry(p).i == data.v.entry(p).i);
        CHECK(r.v.entry(p).j == data.v.entry(p).j);
        CHECK(r.v.entry(p).v == data.v.entry(p).v);
    }

    // dense array round trip, full precision
    auto dense = generate_synthetic(ModelSpec{0.0, 0.7, 1.0, 1.0, 2}, 5, 4, 9);
    write_observations(dir.file("d.mtx"), dense.v);
    auto rd = ingest(dir.file("d.mtx"));
    REQUIRE(rd.v.is_dense());
    bool same = true;
    dense.v.for_each([&](std::int64_t i, std::int64_t j, double val) {
        if (rd.v.dense_at(i, j) != val) same = false;
    });
    CHECK(same);

    // factor matrices round trip through the array writer
    write_matrix_market_array(dir.file("w.mtx"), dense.factors.w);
    auto w = read_matrix_market_array(dir.file("w.mtx"));
    CHECK(w == dense.factors.w);
}

TEST_CASE("id mapping file round trip") {
    TempDir dir;
    std::vector<std::int64_t> ids = {3, 17, 42, 1000};
    write_id_mapping(dir.file("ids.tsv"), ids);
    CHECK(read_id_mapping(dir.file("ids.tsv")) == ids);
}

TEST_CASE("holdout split: counts, determinism, disjoint union") {
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 2};
    auto data = generate_synthetic(spec, 20, 20, 11);

    auto [train0, test0] = holdout_split(data.v, 0.0, 1);
    CHECK(test0.n_observed() == 0);
    CHECK(train0.n_observed() == 400);

    auto [train, test] = holdout_split(data.v, 0.25, 7);
    CHECK(test.n_observed() == 100);
    CHECK(train.n_observed() == 300);
    auto [train2, test2] = holdout_split(data.v, 0.25, 7);
    CHECK(test2.n_observed() == 100);
    bool same = true;
    for (std::int64_t p = 0; p < test.n_observed(); ++p) {
        if (test.entry(p).i != test2.entry(p).i || test.entry(p).j != test2.entry(p).j)
            same = false;
    }
    CHECK(same);

    std::set<std::pair<std::int64_t, std::int64_t>> seen;
    train.for_each([&](std::int64_t i, std::int64_t j, double) { seen.insert({i, j}); });
    test.for_each([&](std::int64_t i, std::int64_t j, double) {
        CHECK(seen.find({i, j}) == seen.end());
        seen.insert({i, j});
    });
    CHECK(seen.size() == 400);

    CHECK_THROWS_AS(holdout_split(data.v, 1.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(holdout_split(data.v, -0.1, 0), std::invalid_argument);
}

TEST_CASE("rmse: trivial values and the brute-force oracle") {
    Eigen::MatrixXd w(1, 1), h(1, 1);
    w << 1.0;
    h << 1.0;
    auto v1 = ObservationMatrix::dense(1, 1, {3.0});
    CHECK(rmse(v1, FactorPair{w, h}) == doctest::Approx(2.0).epsilon(1e-14));

    ModelSpec spec{2.0, 1.0, 1.0, 1.0, 3};
    auto data = generate_synthetic(spec, 8, 8, 21);
    FactorPair state = FactorPair::from_priors(8, 8, spec, 10);
    const double got = rmse(data.v, state);
    const double want = oracle::rmse_brute(data.v, state.w, state.h);
    CHECK(oracle::rel_err(got, want) < 1e-12);

    // exact reconstruction -> 0
    CHECK(rmse(data.v, data.factors) ==
          doctest::Approx(oracle::rmse_brute(data.v, data.factors.w, data.factors.h)));

    auto empty = ObservationMatrix::sparse(2, 2, {});
    CHECK_THROWS_AS(rmse(empty, state), std::domain_error);
}

TEST_CASE("metrics CSV rows") {
    ChainRecord rec;
    rec.iteration = 12;
    rec.epsilon = 0.25;
    rec.log_post = -1.5;
    rec.train_rmse = 0.5;
    rec.wall_ms = 7;
    CHECK(metrics_csv_row(rec) == "12,0.25,-1.5,0.5,,7");
    rec.test_rmse = 0.75;
    CHECK(metrics_csv_row(rec) == "12,0.25,-1.5,0.5,0.75,7");
    CHECK(std::string(kMetricsCsvHeader) == "iter,epsilon,logpost,train_rmse,test_rmse,wall_ms");
}

TEST_CASE("format_double round-trips") {
    for (double x : {0.1, 1.0 / 3.0, 1e-300, -2.5, 12345.6789, 0.0}) {
        const std::string s = format_double(x);
        CHECK(std::stod(s) == x);
    }
}

TEST_CASE("run_experiment: end-to-end with byte-stable outputs") {
    TempDir dir;
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 2};
    auto data = generate_synthetic(spec, 16, 16, 3, 0.5);
    write_observations(dir.file("v.mtx"), data.v);

    RunConfig cfg;
    cfg.spec = spec;
    cfg.blocks = 2;
    cfg.input_path = dir.file("v.mtx");
    cfg.holdout_fraction = 0.2;
    cfg.holdout_seed = 5;
    cfg.output_dir = dir.file("out");
    cfg.sampler.algorithm = Algorithm::kPsgld;
    cfg.sampler.total_iterations = 20;
    cfg.sampler.burn_in = 10;
    cfg.sampler.seed = 77;
    cfg.save_samples = true;
    CHECK(run_experiment(cfg) == 0);

    CHECK(fs::exists(dir.file("out/metrics.csv")));
    CHECK(fs::exists(dir.file("out/manifest.json")));
    CHECK(fs::exists(dir.file("out/w_mean.mtx")));
    CHECK(fs::exists(dir.file("out/h_mean.mtx")));
    CHECK(fs::exists(dir.file("out/samples")));

    std::ifstream metrics(dir.file("out/metrics.csv"));
    std::string line;
    std::getline(metrics, line);
    CHECK(line == kMetricsCsvHeader);
    int rows = 0;
    std::string first_data_row;
    while (std::getline(metrics, line)) {
        if (rows == 0) first_data_row = line;
        ++rows;
    }
    CHECK(rows == 20);
    // test RMSE column is populated under a holdout
    std::stringstream ss(first_data_row);
    std::string field;
    int fields = 0;
    bool test_field_nonempty = false;
    while (std::getline(ss, field, ',')) {
        if (fields == 4) test_field_nonempty = !field.empty();
        ++fields;
    }
    CHECK(fields == 6);
    CHECK(test_field_nonempty);

    // a rerun with the same manifest reproduces every column except wall_ms
    cfg.output_dir = dir.file("out2");
    CHECK(run_experiment(cfg) == 0);
    auto strip_wall = [](const std::string& path) {
        std::ifstream in(path);
        std::string all, row;
        while (std::getline(in, row)) {
            const auto cut = row.rfind(',');
            all += row.substr(0, cut) + "\n";
        }
        return all;
    };
    CHECK(strip_wall(dir.file("out/metrics.csv")) == strip_wall(dir.file("out2/metrics.csv")));

    std::ifstream w1(dir.file("out/w_mean.mtx")), w2(dir.file("out2/w_mean.mtx"));
    std::stringstream b1, b2;
    b1 << w1.rdbuf();
    b2 << w2.rdbuf();
    CHECK(b1.str() == b2.str());
}

TEST_CASE("run_experiment: distributed mode produces the same factors") {
    TempDir dir;
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 2};
    auto data = generate_synthetic(spec, 12, 12, 9);
    write_observations(dir.file("v.mtx"), data.v);

    RunConfig cfg;
    cfg.spec = spec;
    cfg.input_path = dir.file("v.mtx");
    cfg.output_dir = dir.file("ring");
    cfg.distributed_nodes = 3;
    cfg.sampler.total_iterations = 12;
    cfg.sampler.burn_in = 6;
    cfg.sampler.seed = 3;
    cfg.sampler.part_order = {0, 2, 1};
    CHECK(run_experiment(cfg) == 0);

    cfg.output_dir = dir.file("shared");
    cfg.distributed_nodes = 0;
    cfg.blocks = 3;
    CHECK(run_experiment(cfg) == 0);

    auto wr = read_matrix_market_array(dir.file("ring/w_last.mtx"));
    auto ws = read_matrix_market_array(dir.file("shared/w_last.mtx"));
    CHECK(wr == ws);
}

TEST_CASE("run_generate writes a loadable dataset") {
    TempDir dir;
    RunConfig cfg;
    cfg.command = "generate";
    cfg.spec = ModelSpec{1.0, 1.0, 1.0, 1.0, 3};
    cfg.gen_rows = 10;
    cfg.gen_cols = 8;
    cfg.gen_density = 0.5;
    cfg.sampler.seed = 11;
    cfg.output_dir = dir.file("gen");
    CHECK(run_generate(cfg) == 0);
    auto v = ingest(dir.file("gen/v.mtx"));
    CHECK(v.v.rows() == 10);
    CHECK(v.v.n_observed() == 40);
    auto w = read_matrix_market_array(dir.file("gen/w_true.mtx"));
    CHECK(w.rows() == 10);
    CHECK(w.cols() == 3);
}

TEST_CASE("partition-info emits one CSV row per block") {
    TempDir dir;
    ModelSpec spec{1.0, 1.0, 1.0, 1.0, 2};
    auto data = generate_synthetic(spec, 9, 9, 2, 0.4);
    write_observations(dir.file("v.mtx"), data.v);
    RunConfig cfg;
    cfg.input_path = dir.file("v.mtx");
    cfg.blocks = 3;
    std::ostringstream out;
    CHECK(run_partition_info(cfg, out) == 0);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "block_row,block_col,row_start,row_end,col_start,col_end,observed");
    int rows = 0;
    std::int64_t total_observed = 0;
    while (std::getline(in, line)) {
        ++rows;
        total_observed += std::stoll(line.substr(line.rfind(',') + 1));
    }
    CHECK(rows == 9);
    CHECK(total_observed == data.v.n_observed());
}

TEST_SUITE_END();
