#include <doctest.h>

#include <random>
#include <set>
#include <vector>

#include "psgld/model.hpp"
#include "psgld/partition.hpp"

using namespace psgld;

TEST_SUITE_BEGIN("partition");

TEST_CASE("grid: near-equal contiguous ranges") {
    auto g = build_grid(9, 9, 3);
    CHECK(g.row_ranges()[0] == IndexRange{0, 3});
    CHECK(g.row_ranges()[1] == IndexRange{3, 6});
    CHECK(g.row_ranges()[2] == IndexRange{6, 9});

    auto g1 = build_grid(5, 5, 1);
    CHECK(g1.block(0, 0).cell_count() == 25);

    auto g7 = build_grid(7, 7, 3);
    CHECK(g7.row_ranges()[0].size() == 3);
    CHECK(g7.row_ranges()[1].size() == 2);
    CHECK(g7.row_ranges()[2].size() == 2);
    // exhaustive: ranges tile [0, 7)
    std::set<std::int64_t> covered;
    for (const auto& r : g7.row_ranges())
        for (std::int64_t i = r.begin; i < r.end; ++i) covered.insert(i);
    CHECK(covered.size() == 7);

    CHECK_THROWS_AS(build_grid(4, 4, 5), std::invalid_argument);
    CHECK_THROWS_AS(build_grid(4, 4, 0), std::invalid_argument);
}

TEST_CASE("diagonal parts: figure-style layout and exact tiling") {
    auto g = build_grid(9, 9, 3);
    auto parts = diagonal_parts(g);
    REQUIRE(parts.size() == 3);
    // part 0 pairs row b with column b
    for (int b = 0; b < 3; ++b) {
        CHECK(parts[0].blocks[b].rows == g.row_ranges()[b]);
        CHECK(parts[0].blocks[b].cols == g.col_ranges()[b]);
    }

    auto g1 = build_grid(6, 6, 1);
    auto p1 = diagonal_parts(g1);
    CHECK(p1.size() == 1);
    CHECK(p1[0].cell_count == 36);

    // brute-force coverage: every cell of an 8x8 matrix exactly once over
    // the 4 parts
    auto g4 = build_grid(8, 8, 4);
    auto p4 = diagonal_parts(g4);
    std::vector<int> hits(64, 0);
    for (const auto& part : p4)
        for (const auto& blk : part.blocks)
            for (auto i = blk.rows.begin; i < blk.rows.end; ++i)
                for (auto j = blk.cols.begin; j < blk.cols.end; ++j)
                    hits[static_cast<std::size_t>(i * 8 + j)]++;
    for (int h : hits) CHECK(h == 1);
}

TEST_CASE("parts: pairwise disjoint rows/columns, sizes sum to IJ, full coverage of factors") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const std::int64_t rows = 2 + static_cast<std::int64_t>(rng() % 63);
        const std::int64_t cols = 2 + static_cast<std::int64_t>(rng() % 63);
        const int b = 1 + static_cast<int>(rng() % std::min<std::int64_t>(8, std::min(rows, cols)));
        auto g = build_grid(rows, cols, b);
        auto parts = diagonal_parts(g);
        std::int64_t total = 0;
        for (const auto& part : parts) {
            total += part.cell_count;
            std::set<std::int64_t> row_begins, col_begins;
            for (const auto& blk : part.blocks) {
                row_begins.insert(blk.rows.begin);
                col_begins.insert(blk.cols.begin);
            }
            // every row range and column range appears exactly once per part
            CHECK(row_begins.size() == static_cast<std::size_t>(b));
            CHECK(col_begins.size() == static_cast<std::size_t>(b));
        }
        CHECK(total == rows * cols);
    }
}

TEST_CASE("schedule: cyclic order and custom visit order") {
    auto g = build_grid(9, 9, 3);
    auto v = ObservationMatrix::dense(Eigen::MatrixXd::Ones(9, 9));
    PartSchedule sched(diagonal_parts(g, v), SchedulerMode::kCyclic, 0);
    CHECK(sched.part_index_at(1) == 0);
    CHECK(sched.part_index_at(2) == 1);
    CHECK(sched.part_index_at(4) == 0);  // back to the first part after B iterations

    PartSchedule custom(diagonal_parts(g, v), SchedulerMode::kCyclic, 0, {0, 2, 1});
    CHECK(custom.part_index_at(2) == 2);
    CHECK_THROWS_AS(PartSchedule(diagonal_parts(g, v), SchedulerMode::kCyclic, 0, {0, 0, 1}),
                    std::invalid_argument);

    auto g1 = build_grid(4, 4, 1);
    PartSchedule single(diagonal_parts(g1), SchedulerMode::kCyclic, 0);
    CHECK(single.part_index_at(17) == 0);
}

TEST_CASE("schedule: size-proportional random sampling") {
    // equal part sizes -> empirical frequencies within 3 sigma of 1/B
    auto g = build_grid(12, 12, 4);
    auto v = ObservationMatrix::dense(Eigen::MatrixXd::Ones(12, 12));
    PartSchedule sched(diagonal_parts(g, v), SchedulerMode::kSizeProportionalRandom, 99);
    const int draws = 100000;
    std::vector<int> counts(4, 0);
    for (int t = 1; t <= draws; ++t) counts[static_cast<std::size_t>(sched.part_index_at(t))]++;
    const double p = 0.25;
    const double sigma = std::sqrt(p * (1 - p) * draws);
    for (int c : counts) CHECK(std::abs(c - draws * p) < 3.0 * sigma);
    // deterministic in (seed, t)
    CHECK(sched.part_index_at(123) == sched.part_index_at(123));

    // sparse mode: probabilities follow observed counts
    std::vector<Entry> entries;
    for (std::int64_t i = 0; i < 12; ++i) entries.push_back({i, i, 1.0});  // diagonal only
    auto vs = ObservationMatrix::sparse(12, 12, entries);
    PartSchedule sparse_sched(diagonal_parts(g, vs), SchedulerMode::kSizeProportionalRandom, 1);
    for (int t = 1; t <= 200; ++t)
        CHECK(sparse_sched.part_index_at(t) == 0);  // all mass sits on part 0
}

TEST_CASE("sparse observed counts per part") {
    std::vector<Entry> entries = {{0, 0, 1.0}, {0, 5, 2.0}, {3, 3, 1.0}, {5, 1, 4.0}};
    auto v = ObservationMatrix::sparse(6, 6, entries);
    auto g = build_grid(6, 6, 3);
    auto parts = diagonal_parts(g, v);
    std::int64_t total = 0;
    for (const auto& p : parts) total += p.observed_count;
    CHECK(total == 4);
}

TEST_CASE("seeded permutation balances and preserves entries") {
    std::vector<Entry> entries;
    for (std::int64_t i = 0; i < 10; ++i) entries.push_back({0, i, static_cast<double>(i + 1)});
    auto v = ObservationMatrix::sparse(10, 10, entries);
    IndexPermutation perm;
    auto pv = permute_observations(v, 42, &perm);
    CHECK(pv.n_observed() == v.n_observed());
    // multiset of values is preserved
    std::multiset<double> before, after;
    v.for_each([&](std::int64_t, std::int64_t, double val) { before.insert(val); });
    pv.for_each([&](std::int64_t, std::int64_t, double val) { after.insert(val); });
    CHECK(before == after);
    // same seed -> same permutation
    IndexPermutation perm2;
    permute_observations(v, 42, &perm2);
    CHECK(perm.row_perm == perm2.row_perm);
    CHECK(perm.col_perm == perm2.col_perm);
}

TEST_SUITE_END();
