#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "psgld/metrics.hpp"
#include "psgld/model.hpp"
#include "psgld/sampler.hpp"

namespace psgld {

enum class InputFormat {
    kAuto,
    kMatrixMarketCoordinate,
    kMatrixMarketArray,
    kTsvTriplets,
    kMovieLensRatings,
};

// What a zero value in a sparse listing means: a missing cell (default for
// ratings) or an observed zero (dense semantics; unlisted cells become 0).
enum class ZerosPolicy { kMissing, kObserved };

// Raw-id -> contiguous-index mapping produced by ingestion. ids[index] is
// the raw id of matrix row/column `index`; empty means identity.
struct IdMapping {
    std::vector<std::int64_t> row_ids;
    std::vector<std::int64_t> col_ids;
    bool identity() const { return row_ids.empty() && col_ids.empty(); }
};

struct IngestResult {
    ObservationMatrix v;
    IdMapping mapping;
    InputFormat detected = InputFormat::kAuto;
};

// Reads MatrixMarket coordinate/array, tab-separated triplets, or
// MovieLens-style `user::movie::rating::timestamp` ratings (movies as rows,
// users as columns). Raw ids are reindexed to contiguous 0-based indices in
// ascending raw-id order. Parse errors carry the 1-based line number.
IngestResult ingest(const std::string& path, InputFormat format = InputFormat::kAuto,
                    ZerosPolicy zeros = ZerosPolicy::kMissing);

// Uniform random split of the observed entries; test gets
// round(fraction * n_observed) entries. Both halves are sparse-mask
// matrices with the original dimensions.
std::pair<ObservationMatrix, ObservationMatrix> holdout_split(const ObservationMatrix& v,
                                                              double fraction,
                                                              std::uint64_t seed);

// MatrixMarket writers/readers (values in shortest round-trip decimals;
// writes are atomic via write-then-rename).
void write_matrix_market_array(const std::string& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix_market_array(const std::string& path);
void write_observations(const std::string& path, const ObservationMatrix& v);

void write_id_mapping(const std::string& path, const std::vector<std::int64_t>& ids);
std::vector<std::int64_t> read_id_mapping(const std::string& path);

inline constexpr const char* kMetricsCsvHeader = "iter,epsilon,logpost,train_rmse,test_rmse,wall_ms";
std::string metrics_csv_row(const ChainRecord& rec);

const char* algorithm_name(Algorithm algorithm);
Algorithm parse_algorithm(const std::string& name);

struct RunConfig {
    std::string command = "sample";  // sample | generate | evaluate | partition-info
    // model
    ModelSpec spec;
    // partition
    int blocks = 1;
    std::optional<std::uint64_t> permute_seed;
    // sampler (algorithm, T, burn-in, thin, seed, steps, mirroring, ...)
    SamplerConfig sampler;
    int distributed_nodes = 0;  // > 0: run the ring simulator with B nodes
    // io
    std::string input_path;
    InputFormat format = InputFormat::kAuto;
    ZerosPolicy zeros = ZerosPolicy::kMissing;
    double holdout_fraction = 0.0;
    std::uint64_t holdout_seed = 0;
    std::string output_dir = "psgld-out";
    bool save_samples = false;
    // generate-only
    std::int64_t gen_rows = 64;
    std::int64_t gen_cols = 64;
    double gen_density = 1.0;

    void validate() const;
};

// Orchestrates ingest -> split -> grid/schedule -> algorithm -> metrics CSV
// -> persisted factors and manifest. Returns 0 on success; throws on error.
int run_experiment(const RunConfig& config);

// `generate` subcommand: synthesize V (and the true factors) to output_dir.
int run_generate(const RunConfig& config);

// `evaluate` subcommand: RMSE / log-posterior of stored factors against data.
int run_evaluate(const RunConfig& config, const std::string& w_path, const std::string& h_path);

// `partition-info` subcommand: block boundaries + observed counts as CSV.
int run_partition_info(const RunConfig& config, std::ostream& out);

}  // namespace psgld
