#include "psgld/distributed.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>

#include "psgld/metrics.hpp"
#include "psgld/rng.hpp"

namespace psgld {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t x) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return x;
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return x;
}

}  // namespace

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::uint8_t> serialize_matrix(std::uint32_t magic, std::int64_t iteration,
                                           int block_id, const Eigen::MatrixXd& m) {
    std::vector<std::uint8_t> body;
    body.reserve(static_cast<std::size_t>(m.size()) * 8);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            put_u64(body, std::bit_cast<std::uint64_t>(m(r, c)));
    const std::uint64_t checksum = fnv1a64(body.data(), body.size());

    std::vector<std::uint8_t> out;
    out.reserve(kEnvelopeHeaderBytes + body.size());
    put_u32(out, magic);
    put_u64(out, static_cast<std::uint64_t>(iteration));
    put_u32(out, static_cast<std::uint32_t>(block_id));
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    put_u64(out, checksum);
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

ParsedPayload parse_payload(const std::vector<std::uint8_t>& payload) {
    if (payload.size() < kEnvelopeHeaderBytes)
        throw std::runtime_error("parse_payload: truncated header");
    ParsedPayload p;
    p.magic = get_u32(payload.data());
    if (p.magic != kHBlockMagic && p.magic != kMetricsMagic)
        throw std::runtime_error("parse_payload: bad magic");
    p.iteration = static_cast<std::int64_t>(get_u64(payload.data() + 4));
    p.block_id = static_cast<int>(get_u32(payload.data() + 12));
    const std::uint32_t rows = get_u32(payload.data() + 16);
    const std::uint32_t cols = get_u32(payload.data() + 20);
    const std::uint64_t checksum = get_u64(payload.data() + 24);
    const std::size_t body_bytes = static_cast<std::size_t>(rows) * cols * 8;
    if (payload.size() != kEnvelopeHeaderBytes + body_bytes)
        throw std::runtime_error("parse_payload: body size mismatch");
    if (fnv1a64(payload.data() + kEnvelopeHeaderBytes, body_bytes) != checksum)
        throw std::runtime_error("parse_payload: checksum mismatch");
    p.matrix.resize(rows, cols);
    const std::uint8_t* ptr = payload.data() + kEnvelopeHeaderBytes;
    for (std::uint32_t r = 0; r < rows; ++r)
        for (std::uint32_t c = 0; c < cols; ++c, ptr += 8)
            p.matrix(r, c) = std::bit_cast<double>(get_u64(ptr));
    return p;
}

// ---------------------------------------------------------------------------
// InProcessTransport

struct InProcessTransport::Impl {
    mutable std::mutex mutex;
    std::condition_variable cv;
    std::map<std::pair<int, int>, std::deque<TransportEnvelope>> queues;
    TransportStats stats;
    int timeout_ms;
};

InProcessTransport::InProcessTransport(int timeout_ms) : impl_(std::make_unique<Impl>()) {
    impl_->timeout_ms = timeout_ms;
}

InProcessTransport::~InProcessTransport() = default;

void InProcessTransport::send(TransportEnvelope env) {
    std::lock_guard<std::mutex> lock(impl_->mutex);
    impl_->stats.envelopes += 1;
    impl_->stats.bytes += static_cast<std::int64_t>(env.payload.size());
    if (env.payload.size() >= 4 && get_u32(env.payload.data()) == kHBlockMagic) {
        impl_->stats.h_block_envelopes += 1;
        impl_->stats.h_block_bytes += static_cast<std::int64_t>(env.payload.size());
        impl_->stats.h_block_bytes_by_iteration[env.iteration] +=
            static_cast<std::int64_t>(env.payload.size());
    }
    impl_->queues[{env.from_node, env.to_node}].push_back(std::move(env));
    impl_->cv.notify_all();
}

TransportEnvelope InProcessTransport::recv(int to_node, int from_node) {
    std::unique_lock<std::mutex> lock(impl_->mutex);
    auto& queue = impl_->queues[{from_node, to_node}];
    const bool ok = impl_->cv.wait_for(lock, std::chrono::milliseconds(impl_->timeout_ms),
                                       [&] { return !queue.empty(); });
    if (!ok)
        throw std::runtime_error("transport timeout: node " + std::to_string(to_node) +
                                 " waiting for node " + std::to_string(from_node));
    TransportEnvelope env = std::move(queue.front());
    queue.pop_front();
    return env;
}

TransportStats InProcessTransport::stats() const {
    std::lock_guard<std::mutex> lock(impl_->mutex);
    return impl_->stats;
}

// ---------------------------------------------------------------------------
// Ring protocol

int ring_h_index(int node_id, std::int64_t t, int b) {
    const std::int64_t r = node_id - 1 - (t - 1);
    return static_cast<int>(((r % b) + b) % b);
}

std::vector<int> ring_part_order(int b) {
    std::vector<int> order(static_cast<std::size_t>(b));
    order[0] = 0;
    for (int i = 1; i < b; ++i) order[static_cast<std::size_t>(i)] = b - i;
    return order;
}

RingContext RingContext::make(const ObservationMatrix& v, const BlockGrid& grid,
                              const ModelSpec& spec, std::uint64_t seed, bool mirroring,
                              bool inject_noise) {
    if (v.rows() != grid.n_rows() || v.cols() != grid.n_cols())
        throw std::invalid_argument("RingContext: grid/matrix shape mismatch");
    RingContext ctx{grid, spec, seed, mirroring, inject_noise, v.n_observed(), {}};
    const int b = grid.b();
    ctx.block_observed.resize(static_cast<std::size_t>(b) * b);
    for (int r = 0; r < b; ++r)
        for (int c = 0; c < b; ++c)
            ctx.block_observed[static_cast<std::size_t>(r) * b + c] =
                v.count_in_block(grid.block(r, c));
    return ctx;
}

std::int64_t RingContext::part_observed_at(std::int64_t t) const {
    const int b = grid.b();
    std::int64_t total = 0;
    for (int n = 1; n <= b; ++n)
        total += block_observed[static_cast<std::size_t>(n - 1) * b + ring_h_index(n, t, b)];
    return total;
}

std::vector<NodeState> make_ring_nodes(const ObservationMatrix& v, const FactorPair& init,
                                       const BlockGrid& grid) {
    const int b = grid.b();
    std::vector<NodeState> nodes;
    nodes.reserve(static_cast<std::size_t>(b));
    for (int n = 1; n <= b; ++n) {
        NodeState node;
        node.node_id = n;
        node.w_block_index = n - 1;
        node.h_block_index = n - 1;
        const IndexRange rows = grid.row_ranges()[static_cast<std::size_t>(n - 1)];
        const IndexRange cols = grid.col_ranges()[static_cast<std::size_t>(n - 1)];
        node.w_block = init.w.middleRows(rows.begin, rows.size());
        node.h_block = init.h.middleCols(cols.begin, cols.size());
        // The node's resident data: its full row-stripe, global coordinates.
        std::vector<Entry> stripe_entries;
        v.for_each_in_block(Block{rows, {0, v.cols()}},
                            [&](std::int64_t i, std::int64_t j, double val) {
                                stripe_entries.push_back(Entry{i, j, val});
                            });
        node.stripe = ObservationMatrix::sparse(v.rows(), v.cols(), std::move(stripe_entries),
                                                /*allow_negative=*/true);
        node.iteration = 0;
        nodes.push_back(std::move(node));
    }
    return nodes;
}

void ring_node_update(NodeState& node, const RingContext& ctx, double eps, std::int64_t t) {
    const int b = ctx.grid.b();
    const int expected = ring_h_index(node.node_id, t, b);
    if (node.h_block_index != expected)
        throw std::runtime_error("ring protocol error: node " + std::to_string(node.node_id) +
                                 " holds H block " + std::to_string(node.h_block_index) +
                                 " at iteration " + std::to_string(t) + ", expected " +
                                 std::to_string(expected));
    const Block blk = ctx.grid.block(node.w_block_index, node.h_block_index);
    BlockUpdateOpts opts;
    opts.eps = eps;
    opts.scale = part_scale(ctx.n_total_observed, ctx.part_observed_at(t));
    opts.mirroring = ctx.mirroring;
    opts.inject_noise = ctx.inject_noise;
    auto rng = block_noise_stream(ctx.seed, t, node.w_block_index, node.h_block_index);
    MatRef wb = node.w_block.middleRows(0, node.w_block.rows());
    MatRef hb = node.h_block.middleCols(0, node.h_block.cols());
    update_block(wb, hb, node.stripe, blk, ctx.spec, opts, rng, t);
    node.iteration = t;
}

void apply_h_envelope(NodeState& node, const TransportEnvelope& env, const RingContext& ctx,
                      std::int64_t t) {
    const int b = ctx.grid.b();
    const int pred = node.node_id == 1 ? b : node.node_id - 1;
    ParsedPayload parsed = parse_payload(env.payload);  // magic + checksum validation
    if (parsed.magic != kHBlockMagic)
        throw std::runtime_error("ring protocol error: node " + std::to_string(node.node_id) +
                                 " expected an H-block envelope at iteration " +
                                 std::to_string(t));
    if (env.from_node != pred)
        throw std::runtime_error("ring protocol error: node " + std::to_string(node.node_id) +
                                 " received from node " + std::to_string(env.from_node) +
                                 ", expected node " + std::to_string(pred));
    if (parsed.iteration != t || env.iteration != t)
        throw std::runtime_error("ring protocol error: node " + std::to_string(node.node_id) +
                                 " received an envelope for iteration " +
                                 std::to_string(parsed.iteration) + " while at " +
                                 std::to_string(t) + " (lost or duplicated message)");
    const int expected_block = ring_h_index(node.node_id, t + 1, b);
    if (parsed.block_id != expected_block)
        throw std::runtime_error("ring protocol error: node " + std::to_string(node.node_id) +
                                 " received H block " + std::to_string(parsed.block_id) +
                                 ", expected " + std::to_string(expected_block));
    const IndexRange cols = ctx.grid.col_ranges()[static_cast<std::size_t>(parsed.block_id)];
    if (parsed.matrix.rows() != ctx.spec.k || parsed.matrix.cols() != cols.size())
        throw std::runtime_error("ring protocol error: H block dimension mismatch");
    node.h_block_index = parsed.block_id;
    node.h_block = std::move(parsed.matrix);
}

void ring_step(std::vector<NodeState>& nodes, const RingContext& ctx, double eps,
               std::int64_t t) {
    const int b = ctx.grid.b();
    if (static_cast<int>(nodes.size()) != b)
        throw std::invalid_argument("ring_step: node count != B");
    for (NodeState& node : nodes) ring_node_update(node, ctx, eps, t);
    if (b == 1) return;  // a single node keeps its H block; no messages
    std::vector<TransportEnvelope> envelopes;
    envelopes.reserve(nodes.size());
    for (NodeState& node : nodes) {
        TransportEnvelope env;
        env.from_node = node.node_id;
        env.to_node = node.node_id % b + 1;
        env.iteration = t;
        env.payload = serialize_matrix(kHBlockMagic, t, node.h_block_index, node.h_block);
        env.checksum = get_u64(env.payload.data() + 24);
        envelopes.push_back(std::move(env));
    }
    for (TransportEnvelope& env : envelopes)
        apply_h_envelope(nodes[static_cast<std::size_t>(env.to_node - 1)], env, ctx, t);
}

FactorPair gather_ring_state(const std::vector<NodeState>& nodes, const RingContext& ctx) {
    FactorPair out = FactorPair::zeros(ctx.grid.n_rows(), ctx.grid.n_cols(), ctx.spec.k);
    for (const NodeState& node : nodes) {
        const IndexRange rows =
            ctx.grid.row_ranges()[static_cast<std::size_t>(node.w_block_index)];
        out.w.middleRows(rows.begin, rows.size()) = node.w_block;
        const IndexRange cols =
            ctx.grid.col_ranges()[static_cast<std::size_t>(node.h_block_index)];
        out.h.middleCols(cols.begin, cols.size()) = node.h_block;
    }
    return out;
}

namespace {

struct NodeMetrics {
    double loglik = 0.0;     // -(1/phi) sum d_beta over the node's block (+ Poisson const)
    double prior_w = 0.0;    // lambda_w * sum |w_block|
    double prior_h = 0.0;    // lambda_h * sum |h_block|
    double train_sse = 0.0;
    double train_n = 0.0;
    double test_sse = 0.0;
    double test_n = 0.0;
};

NodeMetrics local_metrics(const NodeState& node, const RingContext& ctx,
                          const ObservationMatrix* test) {
    NodeMetrics m;
    const ModelSpec& spec = ctx.spec;
    const Block blk = ctx.grid.block(node.w_block_index, node.h_block_index);
    const bool exact_poisson = (spec.beta == 1.0 && spec.phi == 1.0);
    const int k = spec.k;
    const std::int64_t r0 = blk.rows.begin;
    const std::int64_t c0 = blk.cols.begin;
    auto mu_at = [&](std::int64_t i, std::int64_t j) {
        double mu = 0.0;
        for (int kk = 0; kk < k; ++kk)
            mu += std::abs(node.w_block(i - r0, kk)) * std::abs(node.h_block(kk, j - c0));
        return mu;
    };
    node.stripe.for_each_in_block(blk, [&](std::int64_t i, std::int64_t j, double val) {
        const double mu = std::max(mu_at(i, j), kMuFloor);
        m.loglik -= beta_divergence(val, mu, spec.beta) / spec.phi;
        if (exact_poisson) m.loglik += poisson_log_constant(val);
        const double d = val - mu_at(i, j);
        m.train_sse += d * d;
        m.train_n += 1.0;
    });
    m.prior_w = spec.lambda_w * node.w_block.array().abs().sum();
    m.prior_h = spec.lambda_h * node.h_block.array().abs().sum();
    if (test) {
        test->for_each_in_block(blk, [&](std::int64_t i, std::int64_t j, double val) {
            const double d = val - mu_at(i, j);
            m.test_sse += d * d;
            m.test_n += 1.0;
        });
    }
    return m;
}

Eigen::MatrixXd metrics_to_matrix(const NodeMetrics& m) {
    Eigen::MatrixXd row(1, 7);
    row << m.loglik, m.prior_w, m.prior_h, m.train_sse, m.train_n, m.test_sse, m.test_n;
    return row;
}

NodeMetrics metrics_from_matrix(const Eigen::MatrixXd& row) {
    NodeMetrics m;
    m.loglik = row(0, 0);
    m.prior_w = row(0, 1);
    m.prior_h = row(0, 2);
    m.train_sse = row(0, 3);
    m.train_n = row(0, 4);
    m.test_sse = row(0, 5);
    m.test_n = row(0, 6);
    return m;
}

}  // namespace

RunResult run_distributed(const ObservationMatrix& v, const ModelSpec& spec,
                          const BlockGrid& grid, const SamplerConfig& config,
                          Transport& transport, const ObservationMatrix* test,
                          const RunHooks* hooks) {
    spec.validate();
    config.validate();
    if (config.algorithm != Algorithm::kPsgld && config.algorithm != Algorithm::kDsgd)
        throw std::invalid_argument("run_distributed: only psgld and dsgd run on the ring");
    const int b = grid.b();
    const bool noise = config.algorithm == Algorithm::kPsgld;
    const RingContext ctx = RingContext::make(v, grid, spec, config.seed, config.mirroring, noise);
    FactorPair init = FactorPair::from_priors(v.rows(), v.cols(), spec, config.seed);
    std::vector<NodeState> nodes = make_ring_nodes(v, init, grid);

    // Kept-sample accumulators. Nodes write disjoint W rows / H columns
    // (the placement is a permutation at every iteration), so no locking.
    Eigen::MatrixXd sum_w = Eigen::MatrixXd::Zero(init.w.rows(), init.w.cols());
    Eigen::MatrixXd sum_h = Eigen::MatrixXd::Zero(init.h.rows(), init.h.cols());
    std::int64_t kept = 0;  // written by node 1's thread only

    std::vector<ChainRecord> records;
    records.reserve(static_cast<std::size_t>(config.total_iterations));
    std::mutex error_mutex;
    std::string first_error;

    const auto t_start = std::chrono::steady_clock::now();
    auto node_loop = [&](int node_id) {
        NodeState& node = nodes[static_cast<std::size_t>(node_id - 1)];
        try {
            for (std::int64_t t = 1; t <= config.total_iterations; ++t) {
                const double eps = config.schedule.at(t);
                ring_node_update(node, ctx, eps, t);
                const NodeMetrics local = local_metrics(node, ctx, test);

                const bool keep =
                    t > config.burn_in && (t - config.burn_in) % config.thin == 0;
                if (keep) {
                    const IndexRange rows =
                        ctx.grid.row_ranges()[static_cast<std::size_t>(node.w_block_index)];
                    sum_w.middleRows(rows.begin, rows.size()) += node.w_block;
                    const IndexRange cols =
                        ctx.grid.col_ranges()[static_cast<std::size_t>(node.h_block_index)];
                    sum_h.middleCols(cols.begin, cols.size()) += node.h_block;
                }

                if (b > 1) {
                    TransportEnvelope env;
                    env.from_node = node_id;
                    env.to_node = node_id % b + 1;
                    env.iteration = t;
                    env.payload =
                        serialize_matrix(kHBlockMagic, t, node.h_block_index, node.h_block);
                    env.checksum = get_u64(env.payload.data() + 24);
                    transport.send(std::move(env));
                }
                if (node_id != 1 && b > 1) {
                    TransportEnvelope env;
                    env.from_node = node_id;
                    env.to_node = 1;
                    env.iteration = t;
                    env.payload =
                        serialize_matrix(kMetricsMagic, t, node_id, metrics_to_matrix(local));
                    env.checksum = get_u64(env.payload.data() + 24);
                    transport.send(std::move(env));
                }
                if (b > 1) {
                    const int pred = node_id == 1 ? b : node_id - 1;
                    TransportEnvelope env = transport.recv(node_id, pred);
                    apply_h_envelope(node, env, ctx, t);
                }
                if (node_id == 1) {
                    NodeMetrics total = local;
                    for (int other = 2; other <= b; ++other) {
                        TransportEnvelope env = transport.recv(1, other);
                        ParsedPayload parsed = parse_payload(env.payload);
                        if (parsed.magic != kMetricsMagic || parsed.iteration != t ||
                            parsed.block_id != other)
                            throw std::runtime_error(
                                "ring protocol error: bad metrics envelope from node " +
                                std::to_string(other) + " at iteration " + std::to_string(t));
                        const NodeMetrics m = metrics_from_matrix(parsed.matrix);
                        total.loglik += m.loglik;
                        total.prior_w += m.prior_w;
                        total.prior_h += m.prior_h;
                        total.train_sse += m.train_sse;
                        total.train_n += m.train_n;
                        total.test_sse += m.test_sse;
                        total.test_n += m.test_n;
                    }
                    ChainRecord rec;
                    rec.iteration = t;
                    rec.epsilon = eps;
                    rec.log_post = total.loglik - total.prior_w - total.prior_h;
                    rec.train_rmse =
                        total.train_n > 0 ? std::sqrt(total.train_sse / total.train_n) : 0.0;
                    if (total.test_n > 0) rec.test_rmse = std::sqrt(total.test_sse / total.test_n);
                    rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                      std::chrono::steady_clock::now() - t_start)
                                      .count();
                    if (keep) ++kept;
                    if (hooks && hooks->on_record) hooks->on_record(rec);
                    records.push_back(std::move(rec));
                }
            }
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (first_error.empty())
                first_error = "node " + std::to_string(node_id) + ": " + e.what();
        }
    };

    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(b));
    for (int n = 1; n <= b; ++n) threads.emplace_back(node_loop, n);
    for (auto& th : threads) th.join();
    if (!first_error.empty()) throw std::runtime_error("run_distributed: " + first_error);

    RunResult result;
    result.records = std::move(records);
    result.final_state = gather_ring_state(nodes, ctx);
    result.kept_samples = kept;
    if (kept > 0) {
        result.posterior_mean.w = sum_w / static_cast<double>(kept);
        result.posterior_mean.h = sum_h / static_cast<double>(kept);
    } else {
        result.posterior_mean = result.final_state;
    }
    return result;
}

}  // namespace psgld
