#pragma once

#include <cstdint>
#include <memory>
#include <unordered_map>
#include <vector>

#include "psgld/model.hpp"
#include "psgld/partition.hpp"
#include "psgld/sampler.hpp"

namespace psgld {

// Wire format: every payload starts with a fixed 32-byte little-endian header
//   u32 magic | u64 iteration | u32 block_id | u32 rows | u32 cols | u64 checksum
// followed by rows*cols float64 values in row-major order. The checksum is
// FNV-1a 64 over the body bytes.
inline constexpr std::uint32_t kHBlockMagic = 0x48475350;   // "PSGH"
inline constexpr std::uint32_t kMetricsMagic = 0x4d475350;  // "PSGM"
inline constexpr std::size_t kEnvelopeHeaderBytes = 32;

struct TransportEnvelope {
    int from_node = 0;  // 1-based
    int to_node = 0;
    std::int64_t iteration = 0;
    std::vector<std::uint8_t> payload;
    std::uint64_t checksum = 0;  // body checksum, duplicated from the header
};

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n);

std::vector<std::uint8_t> serialize_matrix(std::uint32_t magic, std::int64_t iteration,
                                           int block_id, const Eigen::MatrixXd& m);

struct ParsedPayload {
    std::uint32_t magic = 0;
    std::int64_t iteration = 0;
    int block_id = 0;
    Eigen::MatrixXd matrix;
};

// Validates the magic and checksum; throws std::runtime_error on corruption.
ParsedPayload parse_payload(const std::vector<std::uint8_t>& payload);

// Reliable, ordered, point-to-point message channel. recv blocks until an
// envelope from `from_node` addressed to `to_node` is available.
class Transport {
  public:
    virtual ~Transport() = default;
    virtual void send(TransportEnvelope env) = 0;
    virtual TransportEnvelope recv(int to_node, int from_node) = 0;
};

struct TransportStats {
    std::int64_t envelopes = 0;
    std::int64_t bytes = 0;
    std::int64_t h_block_envelopes = 0;
    std::int64_t h_block_bytes = 0;
    // body+header bytes of H-block envelopes per iteration
    std::unordered_map<std::int64_t, std::int64_t> h_block_bytes_by_iteration;
};

// Mutex/condvar FIFO queues per (sender, receiver) pair, with traffic
// accounting. recv throws on timeout so a wedged ring aborts with context
// instead of hanging.
class InProcessTransport : public Transport {
  public:
    explicit InProcessTransport(int timeout_ms = 30000);
    ~InProcessTransport() override;

    void send(TransportEnvelope env) override;
    TransportEnvelope recv(int to_node, int from_node) override;

    TransportStats stats() const;

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// One logical node: permanently owns one W row-block and its data
// row-stripe, and currently holds exactly one H column-block.
struct NodeState {
    int node_id = 1;     // 1-based
    int w_block_index = 0;  // fixed: node_id - 1
    int h_block_index = 0;  // rotates each iteration
    Eigen::MatrixXd w_block;  // |rows| x K
    Eigen::MatrixXd h_block;  // K x |cols|
    ObservationMatrix stripe;  // the node's row-stripe of V, global coordinates
    std::int64_t iteration = 0;  // completed iterations
};

// Immutable per-run context shared by all nodes.
struct RingContext {
    BlockGrid grid;
    ModelSpec spec;
    std::uint64_t seed = 0;
    bool mirroring = true;
    bool inject_noise = true;
    std::int64_t n_total_observed = 0;
    std::vector<std::int64_t> block_observed;  // B*B row-major observed counts

    static RingContext make(const ObservationMatrix& v, const BlockGrid& grid,
                            const ModelSpec& spec, std::uint64_t seed, bool mirroring = true,
                            bool inject_noise = true);
    std::int64_t part_observed_at(std::int64_t t) const;  // size of the implicit part
};

// H-block placement implied by the ring at iteration t (1-based):
// node n holds column-block (n-1 - (t-1)) mod B while updating.
int ring_h_index(int node_id, std::int64_t t, int b);

// The implicit part sequence expressed as diagonal-part indices: cyclic
// visits in this order reproduce the ring exactly.
std::vector<int> ring_part_order(int b);

// Scatters an initial full factor pair into B node states (node n takes W
// row-block n-1, H column-block n-1, and its full data row-stripe).
std::vector<NodeState> make_ring_nodes(const ObservationMatrix& v, const FactorPair& init,
                                       const BlockGrid& grid);

// Applies a received H envelope: validates magic, checksum, iteration and
// the expected ring placement, then installs the block.
void apply_h_envelope(NodeState& node, const TransportEnvelope& env, const RingContext& ctx,
                      std::int64_t t);

// Block update for one node at iteration t (no communication).
void ring_node_update(NodeState& node, const RingContext& ctx, double eps, std::int64_t t);

// One synchronous ring iteration over all nodes: update every node, then
// rotate the H blocks to node (n mod B)+1 through serialized envelopes.
void ring_step(std::vector<NodeState>& nodes, const RingContext& ctx, double eps,
               std::int64_t t);

// Reassembles the full factors from the node states.
FactorPair gather_ring_state(const std::vector<NodeState>& nodes, const RingContext& ctx);

// Full chain over the ring: B actor threads, one per node, synchronized only
// by the blocking receive of the incoming H block. Node 1 reduces the
// per-node metrics each iteration (part-local log posterior: likelihood over
// the implicit part plus the exact global prior terms). algorithm must be
// kPsgld or kDsgd.
RunResult run_distributed(const ObservationMatrix& v, const ModelSpec& spec,
                          const BlockGrid& grid, const SamplerConfig& config,
                          Transport& transport, const ObservationMatrix* test = nullptr,
                          const RunHooks* hooks = nullptr);

}  // namespace psgld
