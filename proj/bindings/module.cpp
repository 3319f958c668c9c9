#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "psgld/baselines.hpp"
#include "psgld/distributed.hpp"
#include "psgld/io.hpp"
#include "psgld/metrics.hpp"
#include "psgld/model.hpp"
#include "psgld/partition.hpp"
#include "psgld/sampler.hpp"

namespace py = pybind11;
using namespace psgld;

namespace {

ObservationMatrix observations_from_dense(const Eigen::MatrixXd& values) {
    return ObservationMatrix::dense(values);
}

ObservationMatrix observations_from_coo(std::int64_t rows, std::int64_t cols,
                                        const std::vector<std::int64_t>& is,
                                        const std::vector<std::int64_t>& js,
                                        const std::vector<double>& vs) {
    if (is.size() != js.size() || js.size() != vs.size())
        throw std::invalid_argument("from_coo: index/value arrays must have equal length");
    std::vector<Entry> entries;
    entries.reserve(is.size());
    for (std::size_t p = 0; p < is.size(); ++p) entries.push_back(Entry{is[p], js[p], vs[p]});
    return ObservationMatrix::sparse(rows, cols, std::move(entries));
}

py::dict result_to_dict(const RunResult& result) {
    const std::size_t n = result.records.size();
    py::array_t<std::int64_t> iters(n);
    py::array_t<double> eps(n), logpost(n), train(n), test(n);
    auto it = iters.mutable_unchecked<1>();
    auto ep = eps.mutable_unchecked<1>();
    auto lp = logpost.mutable_unchecked<1>();
    auto tr = train.mutable_unchecked<1>();
    auto te = test.mutable_unchecked<1>();
    for (std::size_t p = 0; p < n; ++p) {
        const ChainRecord& rec = result.records[p];
        it(p) = rec.iteration;
        ep(p) = rec.epsilon;
        lp(p) = rec.log_post;
        tr(p) = rec.train_rmse;
        te(p) = rec.test_rmse ? *rec.test_rmse : std::numeric_limits<double>::quiet_NaN();
    }
    py::dict d;
    d["iteration"] = iters;
    d["epsilon"] = eps;
    d["log_post"] = logpost;
    d["train_rmse"] = train;
    d["test_rmse"] = test;
    d["w_mean"] = result.posterior_mean.w;
    d["h_mean"] = result.posterior_mean.h;
    d["w_last"] = result.final_state.w;
    d["h_last"] = result.final_state.h;
    d["kept_samples"] = result.kept_samples;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Posterior sampling for Tweedie matrix factorisation models "
              "(parallel stochastic gradient Langevin dynamics)";

    py::class_<ModelSpec>(m, "ModelSpec")
        .def(py::init([](double beta, double phi, double lambda_w, double lambda_h, int k) {
                 ModelSpec spec{beta, phi, lambda_w, lambda_h, k};
                 spec.validate();
                 return spec;
             }),
             py::arg("beta") = 1.0, py::arg("phi") = 1.0, py::arg("lambda_w") = 1.0,
             py::arg("lambda_h") = 1.0, py::arg("k") = 1)
        .def_readwrite("beta", &ModelSpec::beta)
        .def_readwrite("phi", &ModelSpec::phi)
        .def_readwrite("lambda_w", &ModelSpec::lambda_w)
        .def_readwrite("lambda_h", &ModelSpec::lambda_h)
        .def_readwrite("k", &ModelSpec::k);

    py::class_<ObservationMatrix>(m, "ObservationMatrix")
        .def_static("from_dense", &observations_from_dense, py::arg("values"))
        .def_static("from_coo", &observations_from_coo, py::arg("rows"), py::arg("cols"),
                    py::arg("i"), py::arg("j"), py::arg("values"))
        .def_property_readonly("rows", &ObservationMatrix::rows)
        .def_property_readonly("cols", &ObservationMatrix::cols)
        .def_property_readonly("n_observed", &ObservationMatrix::n_observed)
        .def_property_readonly("is_dense", &ObservationMatrix::is_dense);

    py::enum_<Algorithm>(m, "Algorithm")
        .value("PSGLD", Algorithm::kPsgld)
        .value("LD", Algorithm::kLd)
        .value("SGLD", Algorithm::kSgld)
        .value("GIBBS", Algorithm::kGibbs)
        .value("DSGD", Algorithm::kDsgd);

    py::class_<StepSchedule>(m, "StepSchedule")
        .def(py::init<double, double>(), py::arg("a"), py::arg("b"))
        .def_static("constant", &StepSchedule::constant, py::arg("eps"))
        .def("at", &StepSchedule::at, py::arg("t"));

    m.def("beta_divergence", &beta_divergence, py::arg("v"), py::arg("mu"), py::arg("beta"));
    m.def("dloglik_dmu", &dloglik_dmu, py::arg("v"), py::arg("mu"), py::arg("spec"));
    m.def(
        "log_posterior",
        [](const ObservationMatrix& v, const Eigen::MatrixXd& w, const Eigen::MatrixXd& h,
           const ModelSpec& spec) { return log_posterior_unnorm(v, FactorPair{w, h}, spec); },
        py::arg("v"), py::arg("w"), py::arg("h"), py::arg("spec"));
    m.def(
        "rmse",
        [](const ObservationMatrix& v, const Eigen::MatrixXd& w, const Eigen::MatrixXd& h) {
            return rmse(v, FactorPair{w, h});
        },
        py::arg("v"), py::arg("w"), py::arg("h"));

    m.def(
        "generate_synthetic",
        [](const ModelSpec& spec, std::int64_t rows, std::int64_t cols, std::uint64_t seed,
           double density) {
            SyntheticData data = generate_synthetic(spec, rows, cols, seed, density);
            return py::make_tuple(std::move(data.v), data.factors.w, data.factors.h);
        },
        py::arg("spec"), py::arg("rows"), py::arg("cols"), py::arg("seed") = 0,
        py::arg("density") = 1.0);

    m.def(
        "gradient_noise",
        [](const Eigen::MatrixXd& w, const Eigen::MatrixXd& h, const ObservationMatrix& v,
           const ModelSpec& spec, int blocks) {
            const BlockGrid grid = build_grid(v.rows(), v.cols(), blocks);
            const auto diag = gradient_noise_diagnostic(FactorPair{w, h}, grid, v, spec);
            return py::make_tuple(diag.zeta_weighted_mean_norm, diag.full_gradient_norm);
        },
        py::arg("w"), py::arg("h"), py::arg("v"), py::arg("spec"), py::arg("blocks"));

    m.def(
        "run_chain",
        [](const ObservationMatrix& v, const ModelSpec& spec, Algorithm algorithm, int blocks,
           std::int64_t iterations, std::int64_t burn_in, std::int64_t thin, std::uint64_t seed,
           bool mirroring, std::optional<double> step_a, std::optional<double> step_b,
           std::optional<double> const_eps, const std::string& scheduler, int workers,
           std::int64_t sgld_subsample, std::int64_t metrics_every,
           const ObservationMatrix* test) {
            SamplerConfig cfg;
            cfg.algorithm = algorithm;
            cfg.total_iterations = iterations;
            cfg.burn_in = burn_in;
            cfg.thin = thin;
            cfg.seed = seed;
            cfg.mirroring = mirroring;
            cfg.workers = workers;
            cfg.sgld_subsample = sgld_subsample;
            cfg.metrics_every = metrics_every;
            cfg.scheduler_mode = scheduler == "random" ? SchedulerMode::kSizeProportionalRandom
                                                       : SchedulerMode::kCyclic;
            if (const_eps)
                cfg.schedule = StepSchedule::constant(*const_eps);
            else if (algorithm == Algorithm::kLd && !step_a && !step_b)
                cfg.schedule = StepSchedule::constant(0.2);
            else if (algorithm == Algorithm::kSgld && !step_a && !step_b)
                cfg.schedule = StepSchedule(1.0, 0.51);
            else
                cfg.schedule = StepSchedule(step_a.value_or(0.01), step_b.value_or(0.51));
            const BlockGrid grid = build_grid(v.rows(), v.cols(), blocks);
            RunResult result;
            {
                py::gil_scoped_release release;
                result = run_chain(v, spec, grid, cfg, test);
            }
            return result_to_dict(result);
        },
        py::arg("v"), py::arg("spec"), py::arg("algorithm") = Algorithm::kPsgld,
        py::arg("blocks") = 1, py::arg("iterations") = 1000, py::arg("burn_in") = 500,
        py::arg("thin") = 1, py::arg("seed") = 0, py::arg("mirroring") = true,
        py::arg("step_a") = std::nullopt, py::arg("step_b") = std::nullopt,
        py::arg("const_eps") = std::nullopt, py::arg("scheduler") = "cyclic",
        py::arg("workers") = 0, py::arg("sgld_subsample") = 0, py::arg("metrics_every") = 1,
        py::arg("test") = nullptr);

    m.def(
        "run_ring",
        [](const ObservationMatrix& v, const ModelSpec& spec, int nodes,
           std::int64_t iterations, std::int64_t burn_in, std::int64_t thin, std::uint64_t seed,
           bool mirroring, double step_a, double step_b) {
            SamplerConfig cfg;
            cfg.algorithm = Algorithm::kPsgld;
            cfg.total_iterations = iterations;
            cfg.burn_in = burn_in;
            cfg.thin = thin;
            cfg.seed = seed;
            cfg.mirroring = mirroring;
            cfg.schedule = StepSchedule(step_a, step_b);
            const BlockGrid grid = build_grid(v.rows(), v.cols(), nodes);
            RunResult result;
            {
                py::gil_scoped_release release;
                InProcessTransport transport;
                result = run_distributed(v, spec, grid, cfg, transport);
            }
            return result_to_dict(result);
        },
        py::arg("v"), py::arg("spec"), py::arg("nodes"), py::arg("iterations") = 100,
        py::arg("burn_in") = 50, py::arg("thin") = 1, py::arg("seed") = 0,
        py::arg("mirroring") = true, py::arg("step_a") = 0.01, py::arg("step_b") = 0.51);

    m.def(
        "holdout_split",
        [](const ObservationMatrix& v, double fraction, std::uint64_t seed) {
            auto [train, test] = holdout_split(v, fraction, seed);
            return py::make_tuple(std::move(train), std::move(test));
        },
        py::arg("v"), py::arg("fraction"), py::arg("seed") = 0);

    m.def(
        "ingest",
        [](const std::string& path, const std::string& format, const std::string& zeros) {
            InputFormat f = InputFormat::kAuto;
            if (format == "matrixmarket-coordinate") f = InputFormat::kMatrixMarketCoordinate;
            else if (format == "matrixmarket-array") f = InputFormat::kMatrixMarketArray;
            else if (format == "tsv-triplets") f = InputFormat::kTsvTriplets;
            else if (format == "movielens-ratings") f = InputFormat::kMovieLensRatings;
            else if (format != "auto") throw std::invalid_argument("unknown format: " + format);
            IngestResult r = ingest(path, f,
                                    zeros == "observed" ? ZerosPolicy::kObserved
                                                        : ZerosPolicy::kMissing);
            py::dict d;
            d["v"] = std::move(r.v);
            d["row_ids"] = r.mapping.row_ids;
            d["col_ids"] = r.mapping.col_ids;
            return d;
        },
        py::arg("path"), py::arg("format") = "auto", py::arg("zeros") = "missing");

    m.attr("__version__") = "0.1.0";
}
