#pragma once

#include <cstdint>
#include <vector>

namespace psgld {

class ObservationMatrix;

// Half-open index range [begin, end).
struct IndexRange {
    std::int64_t begin = 0;
    std::int64_t end = 0;

    std::int64_t size() const { return end - begin; }
    bool contains(std::int64_t i) const { return i >= begin && i < end; }
    bool operator==(const IndexRange&) const = default;
};

// A block is the Cartesian product of one row range and one column range.
struct Block {
    IndexRange rows;
    IndexRange cols;

    std::int64_t cell_count() const { return rows.size() * cols.size(); }
    bool operator==(const Block&) const = default;
};

// B contiguous near-equal ranges over [0, I) x [0, J). Row (column) range
// sizes differ by at most one.
class BlockGrid {
  public:
    BlockGrid(std::int64_t n_rows, std::int64_t n_cols, int n_blocks);

    int b() const { return b_; }
    std::int64_t n_rows() const { return n_rows_; }
    std::int64_t n_cols() const { return n_cols_; }
    const std::vector<IndexRange>& row_ranges() const { return row_ranges_; }
    const std::vector<IndexRange>& col_ranges() const { return col_ranges_; }
    Block block(int row_idx, int col_idx) const;

  private:
    std::int64_t n_rows_;
    std::int64_t n_cols_;
    int b_;
    std::vector<IndexRange> row_ranges_;
    std::vector<IndexRange> col_ranges_;
};

inline BlockGrid build_grid(std::int64_t n_rows, std::int64_t n_cols, int n_blocks) {
    return BlockGrid(n_rows, n_cols, n_blocks);
}

// A part: B blocks pairwise disjoint in rows and in columns, one block per
// row range and per column range. block_row_of[b] = b, block_col_of[b] is a
// permutation of [0, B).
struct Part {
    std::vector<Block> blocks;
    std::vector<int> block_cols;   // column-range index of blocks[b]
    std::int64_t cell_count = 0;
    std::int64_t observed_count = 0;  // filled when built against a matrix
};

// The B diagonal-shift parts of the grid: part d pairs row range b with
// column range (b + d) mod B. Together they tile the full index set.
std::vector<Part> diagonal_parts(const BlockGrid& grid);

// Same, with observed_count filled in from the data (cell counts and
// observed counts coincide for dense matrices).
std::vector<Part> diagonal_parts(const BlockGrid& grid, const ObservationMatrix& v);

enum class SchedulerMode { kCyclic, kSizeProportionalRandom };

// Chooses the part used at each iteration. Cyclic mode walks `order`
// (default 0..B-1); random mode picks part p with probability
// observed(p)/N, independently per iteration, deterministic in (seed, t).
class PartSchedule {
  public:
    PartSchedule(std::vector<Part> parts, SchedulerMode mode, std::uint64_t seed,
                 std::vector<int> order = {});

    const Part& next_part(std::int64_t t) const;  // t >= 1
    int part_index_at(std::int64_t t) const;
    const std::vector<Part>& parts() const { return parts_; }
    SchedulerMode mode() const { return mode_; }
    std::int64_t total_observed() const { return total_observed_; }

  private:
    std::vector<Part> parts_;
    SchedulerMode mode_;
    std::uint64_t seed_;
    std::vector<int> order_;
    std::int64_t total_observed_;
    std::vector<double> cum_weight_;
};

// Seeded permutation of row/column indices, used to balance observed-entry
// counts across blocks for skewed sparse data. perm[old_index] = new_index.
struct IndexPermutation {
    std::vector<std::int64_t> row_perm;
    std::vector<std::int64_t> col_perm;
};

ObservationMatrix permute_observations(const ObservationMatrix& v, std::uint64_t seed,
                                       IndexPermutation* out_perm = nullptr);

}  // namespace psgld
