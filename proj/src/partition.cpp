#include "psgld/partition.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

#include "psgld/model.hpp"
#include "psgld/rng.hpp"

namespace psgld {

namespace {

std::vector<IndexRange> near_equal_ranges(std::int64_t n, int b) {
    std::vector<IndexRange> ranges;
    ranges.reserve(static_cast<std::size_t>(b));
    const std::int64_t base = n / b;
    const std::int64_t rem = n % b;
    std::int64_t pos = 0;
    for (int r = 0; r < b; ++r) {
        const std::int64_t len = base + (r < rem ? 1 : 0);
        ranges.push_back(IndexRange{pos, pos + len});
        pos += len;
    }
    return ranges;
}

}  // namespace

BlockGrid::BlockGrid(std::int64_t n_rows, std::int64_t n_cols, int n_blocks)
    : n_rows_(n_rows), n_cols_(n_cols), b_(n_blocks) {
    if (n_blocks < 1 || n_blocks > std::min(n_rows, n_cols))
        throw std::invalid_argument("BlockGrid: B must satisfy 1 <= B <= min(I, J), got B=" +
                                    std::to_string(n_blocks));
    row_ranges_ = near_equal_ranges(n_rows, n_blocks);
    col_ranges_ = near_equal_ranges(n_cols, n_blocks);
}

Block BlockGrid::block(int row_idx, int col_idx) const {
    return Block{row_ranges_[static_cast<std::size_t>(row_idx)],
                 col_ranges_[static_cast<std::size_t>(col_idx)]};
}

std::vector<Part> diagonal_parts(const BlockGrid& grid) {
    const int b = grid.b();
    std::vector<Part> parts(static_cast<std::size_t>(b));
    for (int d = 0; d < b; ++d) {
        Part& part = parts[static_cast<std::size_t>(d)];
        part.blocks.reserve(static_cast<std::size_t>(b));
        part.block_cols.reserve(static_cast<std::size_t>(b));
        for (int r = 0; r < b; ++r) {
            const int c = (r + d) % b;
            part.blocks.push_back(grid.block(r, c));
            part.block_cols.push_back(c);
            part.cell_count += part.blocks.back().cell_count();
        }
        part.observed_count = part.cell_count;
    }
    return parts;
}

std::vector<Part> diagonal_parts(const BlockGrid& grid, const ObservationMatrix& v) {
    if (v.rows() != grid.n_rows() || v.cols() != grid.n_cols())
        throw std::invalid_argument("diagonal_parts: grid/matrix shape mismatch");
    std::vector<Part> parts = diagonal_parts(grid);
    for (Part& part : parts) {
        part.observed_count = 0;
        for (const Block& blk : part.blocks) part.observed_count += v.count_in_block(blk);
    }
    return parts;
}

PartSchedule::PartSchedule(std::vector<Part> parts, SchedulerMode mode, std::uint64_t seed,
                           std::vector<int> order)
    : parts_(std::move(parts)), mode_(mode), seed_(seed), order_(std::move(order)) {
    if (parts_.empty()) throw std::invalid_argument("PartSchedule: no parts");
    const int b = static_cast<int>(parts_.size());
    if (order_.empty()) {
        order_.resize(static_cast<std::size_t>(b));
        std::iota(order_.begin(), order_.end(), 0);
    }
    if (static_cast<int>(order_.size()) != b)
        throw std::invalid_argument("PartSchedule: order size != part count");
    std::vector<bool> seen(static_cast<std::size_t>(b), false);
    for (int p : order_) {
        if (p < 0 || p >= b || seen[static_cast<std::size_t>(p)])
            throw std::invalid_argument("PartSchedule: order is not a permutation");
        seen[static_cast<std::size_t>(p)] = true;
    }
    total_observed_ = 0;
    for (const Part& p : parts_) total_observed_ += p.observed_count;
    cum_weight_.reserve(parts_.size());
    double acc = 0.0;
    for (const Part& p : parts_) {
        acc += static_cast<double>(p.observed_count);
        cum_weight_.push_back(acc);
    }
}

int PartSchedule::part_index_at(std::int64_t t) const {
    if (t < 1) throw std::invalid_argument("PartSchedule: t must be >= 1");
    const int b = static_cast<int>(parts_.size());
    if (mode_ == SchedulerMode::kCyclic) return order_[static_cast<std::size_t>((t - 1) % b)];
    // Size-proportional draw, deterministic in (seed, t): p(part) = |part|/N.
    auto rng = make_stream(seed_, stream_tag::kSchedule, static_cast<std::uint64_t>(t));
    std::uniform_real_distribution<double> u(0.0, cum_weight_.back());
    const double x = u(rng);
    const auto it = std::upper_bound(cum_weight_.begin(), cum_weight_.end(), x);
    return static_cast<int>(std::min<std::ptrdiff_t>(it - cum_weight_.begin(),
                                                     static_cast<std::ptrdiff_t>(b - 1)));
}

const Part& PartSchedule::next_part(std::int64_t t) const {
    return parts_[static_cast<std::size_t>(part_index_at(t))];
}

ObservationMatrix permute_observations(const ObservationMatrix& v, std::uint64_t seed,
                                       IndexPermutation* out_perm) {
    IndexPermutation perm;
    perm.row_perm.resize(static_cast<std::size_t>(v.rows()));
    perm.col_perm.resize(static_cast<std::size_t>(v.cols()));
    std::iota(perm.row_perm.begin(), perm.row_perm.end(), 0);
    std::iota(perm.col_perm.begin(), perm.col_perm.end(), 0);
    auto rng_r = make_stream(seed, stream_tag::kPermute, 0);
    auto rng_c = make_stream(seed, stream_tag::kPermute, 1);
    std::shuffle(perm.row_perm.begin(), perm.row_perm.end(), rng_r);
    std::shuffle(perm.col_perm.begin(), perm.col_perm.end(), rng_c);

    ObservationMatrix out;
    if (v.is_dense()) {
        std::vector<double> values(static_cast<std::size_t>(v.rows() * v.cols()));
        v.for_each([&](std::int64_t i, std::int64_t j, double val) {
            values[static_cast<std::size_t>(perm.row_perm[static_cast<std::size_t>(i)] * v.cols() +
                                            perm.col_perm[static_cast<std::size_t>(j)])] = val;
        });
        out = ObservationMatrix::dense(v.rows(), v.cols(), std::move(values), true);
    } else {
        std::vector<Entry> entries;
        entries.reserve(static_cast<std::size_t>(v.n_observed()));
        v.for_each([&](std::int64_t i, std::int64_t j, double val) {
            entries.push_back(Entry{perm.row_perm[static_cast<std::size_t>(i)],
                                    perm.col_perm[static_cast<std::size_t>(j)], val});
        });
        out = ObservationMatrix::sparse(v.rows(), v.cols(), std::move(entries), true);
    }
    if (out_perm) *out_perm = std::move(perm);
    return out;
}

}  // namespace psgld
