#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedlora/adam.hpp"
#include "fedlora/client.hpp"
#include "fedlora/hypernet.hpp"
#include "fedlora/ops.hpp"

// Server-side personalized fusion of parameter generators. For each client,
// every other client's generator acts as a teacher on its own uploaded
// feature set, with a parameter-space anchor pulling toward the client's own
// generator:
//
//   minimize  sum_j mean_{x in FS_j} |phi(x) - phi_j(x)|^2
//             + lambda (|W - W_i|_F^2 + |b - b_i|^2)
//
// The generator is affine, so the objective is ridge regression per output
// coordinate; the closed-form path solves it exactly and doubles as the
// oracle for the iterative path.

namespace fedlora {

enum class O2dSolver { kClosedForm, kIterative };

inline std::string solver_name(O2dSolver s) {
    return s == O2dSolver::kClosedForm ? "closed_form" : "iterative";
}

struct O2dOptions {
    O2dSolver solver = O2dSolver::kClosedForm;
    std::size_t iterations = 2500;
    double lr = 0.05;
};

struct O2dResult {
    ParameterGenerator fused;
    double distill_term = 0.0;
    double reg_term = 0.0;
    double objective = 0.0;
    bool had_teachers = true;
};

struct TeacherView {
    const ParameterGenerator* generator = nullptr;
    const FeatureSet* features = nullptr;
};

namespace detail {

// Dense symmetric positive (semi-)definite solve via Cholesky; falls back to
// a tiny diagonal jitter when the matrix is singular (lambda = 0 with
// deficient features), which picks the minimum-energy solution.
inline void cholesky_solve_inplace(std::vector<double>& a, std::vector<double>& rhs, std::size_t n,
                                   std::size_t nrhs) {
    std::vector<double> base = a;
    double jitter = 0.0;
    for (int attempt = 0; attempt < 6; ++attempt) {
        std::vector<double> l = base;
        if (jitter > 0.0)
            for (std::size_t i = 0; i < n; ++i) l[i * n + i] += jitter;
        bool ok = true;
        for (std::size_t i = 0; i < n && ok; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                double acc = l[i * n + j];
                for (std::size_t k = 0; k < j; ++k) acc -= l[i * n + k] * l[j * n + k];
                if (i == j) {
                    if (acc <= 1e-14) {
                        ok = false;
                        break;
                    }
                    l[i * n + i] = std::sqrt(acc);
                } else {
                    l[i * n + j] = acc / l[j * n + j];
                }
            }
        }
        if (!ok) {
            double trace = 0.0;
            for (std::size_t i = 0; i < n; ++i) trace += base[i * n + i];
            jitter = jitter == 0.0 ? std::max(1e-12, 1e-12 * trace / static_cast<double>(n)) : jitter * 100.0;
            continue;
        }
        // forward/backward substitution for every right-hand side
        for (std::size_t c = 0; c < nrhs; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                double acc = rhs[i * nrhs + c];
                for (std::size_t k = 0; k < i; ++k) acc -= l[i * n + k] * rhs[k * nrhs + c];
                rhs[i * nrhs + c] = acc / l[i * n + i];
            }
            for (std::size_t i = n; i-- > 0;) {
                double acc = rhs[i * nrhs + c];
                for (std::size_t k = i + 1; k < n; ++k) acc -= l[k * n + i] * rhs[k * nrhs + c];
                rhs[i * nrhs + c] = acc / l[i * n + i];
            }
        }
        a = std::move(l);
        return;
    }
    throw NumericError("o2d: normal equations are not solvable");
}

}  // namespace detail

// Plain (tape-free) evaluation of an affine generator at one feature vector.
inline std::vector<double> generator_apply(const ParameterGenerator& gen, const double* x) {
    const std::size_t out = gen.out_len(), in = gen.feature_dim();
    const auto& w = gen.weight().data();
    const auto& b = gen.bias().data();
    std::vector<double> y(out);
    for (std::size_t m = 0; m < out; ++m) {
        double acc = b[m];
        for (std::size_t j = 0; j < in; ++j) acc += w[m * in + j] * x[j];
        y[m] = acc;
    }
    return y;
}

// Objective pieces evaluated at an arbitrary candidate generator.
inline double o2d_distill_term(const ParameterGenerator& candidate, const std::vector<TeacherView>& teachers) {
    double total = 0.0;
    for (const TeacherView& t : teachers) {
        if (t.features->rows == 0) continue;
        double acc = 0.0;
        for (std::size_t r = 0; r < t.features->rows; ++r) {
            const double* x = &t.features->data[r * t.features->cols];
            auto ours = generator_apply(candidate, x);
            auto theirs = generator_apply(*t.generator, x);
            for (std::size_t m = 0; m < ours.size(); ++m) {
                const double d = ours[m] - theirs[m];
                acc += d * d;
            }
        }
        total += acc / static_cast<double>(t.features->rows);
    }
    return total;
}

inline double o2d_reg_term(const ParameterGenerator& candidate, const ParameterGenerator& student) {
    double acc = 0.0;
    const auto& w = candidate.weight().data();
    const auto& ws = student.weight().data();
    for (std::size_t i = 0; i < w.size(); ++i) acc += (w[i] - ws[i]) * (w[i] - ws[i]);
    const auto& b = candidate.bias().data();
    const auto& bs = student.bias().data();
    for (std::size_t i = 0; i < b.size(); ++i) acc += (b[i] - bs[i]) * (b[i] - bs[i]);
    return acc;
}

inline double o2d_objective(const ParameterGenerator& candidate, const ParameterGenerator& student,
                            const std::vector<TeacherView>& teachers, double lambda) {
    return o2d_distill_term(candidate, teachers) + lambda * o2d_reg_term(candidate, student);
}

namespace detail {

inline ParameterGenerator o2d_closed_form(const ParameterGenerator& student, const std::vector<TeacherView>& teachers,
                                          double lambda) {
    const std::size_t in = student.feature_dim(), out = student.out_len(), aug = in + 1;
    std::vector<double> a(aug * aug, 0.0);
    std::vector<double> rhs(aug * out, 0.0);
    std::vector<double> xt(aug);
    for (const TeacherView& t : teachers) {
        if (t.features->rows == 0) continue;
        const double wj = 1.0 / static_cast<double>(t.features->rows);
        for (std::size_t r = 0; r < t.features->rows; ++r) {
            const double* x = &t.features->data[r * in];
            for (std::size_t j = 0; j < in; ++j) xt[j] = x[j];
            xt[in] = 1.0;
            auto target = generator_apply(*t.generator, x);
            for (std::size_t j = 0; j < aug; ++j) {
                for (std::size_t k = 0; k <= j; ++k) a[j * aug + k] += wj * xt[j] * xt[k];
                for (std::size_t m = 0; m < out; ++m) rhs[j * out + m] += wj * xt[j] * target[m];
            }
        }
    }
    for (std::size_t j = 0; j < aug; ++j)
        for (std::size_t k = j + 1; k < aug; ++k) a[j * aug + k] = a[k * aug + j];
    for (std::size_t j = 0; j < aug; ++j) a[j * aug + j] += lambda;
    const auto& sw = student.weight().data();
    const auto& sb = student.bias().data();
    for (std::size_t m = 0; m < out; ++m) {
        for (std::size_t j = 0; j < in; ++j) rhs[j * out + m] += lambda * sw[m * in + j];
        rhs[in * out + m] += lambda * sb[m];
    }
    cholesky_solve_inplace(a, rhs, aug, out);

    std::vector<double> w(out * in), b(out);
    for (std::size_t m = 0; m < out; ++m) {
        for (std::size_t j = 0; j < in; ++j) w[m * in + j] = rhs[j * out + m];
        b[m] = rhs[in * out + m];
    }
    return ParameterGenerator::from_tensors(ad::Tensor::constant({out, in}, std::move(w)),
                                            ad::Tensor::constant({out}, std::move(b)), student.seed());
}

inline ParameterGenerator o2d_iterative(const ParameterGenerator& student, const std::vector<TeacherView>& teachers,
                                        double lambda, const O2dOptions& opt) {
    ad::Tape tape;
    ad::Tensor w = ad::Tensor::param(tape, student.weight().shape(), student.weight().data());
    ad::Tensor b = ad::Tensor::param(tape, student.bias().shape(), student.bias().data());
    ad::Tensor w_anchor = student.weight().detached();
    ad::Tensor b_anchor = student.bias().detached();

    struct TeacherBatch {
        ad::Tensor inputs;   // [n, in]
        ad::Tensor targets;  // [n, out]
        double inv_rows;
    };
    std::vector<TeacherBatch> batches;
    for (const TeacherView& t : teachers) {
        if (t.features->rows == 0) continue;
        TeacherBatch tb;
        tb.inputs = t.features->as_tensor();
        std::vector<double> targets(t.features->rows * student.out_len());
        for (std::size_t r = 0; r < t.features->rows; ++r) {
            auto y = generator_apply(*t.generator, &t.features->data[r * student.feature_dim()]);
            std::copy(y.begin(), y.end(), targets.begin() + static_cast<std::ptrdiff_t>(r * student.out_len()));
        }
        tb.targets = ad::Tensor::constant({t.features->rows, student.out_len()}, std::move(targets));
        tb.inv_rows = 1.0 / static_cast<double>(t.features->rows);
        batches.push_back(std::move(tb));
    }

    ad::AdamConfig cfg;
    cfg.lr = opt.lr;
    ad::Adam adam({w, b}, cfg);
    for (std::size_t it = 0; it < opt.iterations; ++it) {
        ad::Tensor loss = ad::Tensor::scalar(0.0);
        for (const TeacherBatch& tb : batches) {
            ad::Tensor pred = ad::linear(tb.inputs, w, b);
            loss = ad::add(loss, ad::scale(ad::squared_distance(pred, tb.targets), tb.inv_rows));
        }
        if (lambda > 0.0) {
            ad::Tensor reg = ad::add(ad::squared_distance(w, w_anchor), ad::squared_distance(b, b_anchor));
            loss = ad::add(loss, ad::scale(reg, lambda));
        }
        tape.backward(loss);
        adam.step();
    }
    return ParameterGenerator::from_tensors(w.detached(), b.detached(), student.seed());
}

}  // namespace detail

// Distills the teachers into a personalized copy of the student. An empty
// teacher list returns the student unchanged (flagged in the result).
inline O2dResult o2d_distill(const ParameterGenerator& student, const std::vector<TeacherView>& teachers,
                             double lambda, const O2dOptions& opt = {}) {
    if (lambda < 0.0) throw ConfigError("o2d: lambda must be non-negative");
    for (const TeacherView& t : teachers) {
        if (t.generator == nullptr || t.features == nullptr) throw ContractError("o2d: null teacher entry");
        if (t.generator->feature_dim() != student.feature_dim() || t.generator->out_len() != student.out_len())
            throw ProtocolError("o2d: teacher generator dimensions disagree with student");
        if (t.features->cols != student.feature_dim())
            throw ProtocolError("o2d: feature dim " + std::to_string(t.features->cols) + " does not match " +
                                std::to_string(student.feature_dim()));
    }
    O2dResult res;
    bool any_rows = false;
    for (const TeacherView& t : teachers) any_rows |= t.features->rows > 0;
    if (teachers.empty() || !any_rows) {
        res.fused = student.frozen_clone();
        res.had_teachers = false;
    } else {
        res.fused = opt.solver == O2dSolver::kClosedForm ? detail::o2d_closed_form(student, teachers, lambda)
                                                         : detail::o2d_iterative(student, teachers, lambda, opt);
    }
    res.distill_term = o2d_distill_term(res.fused, teachers);
    res.reg_term = o2d_reg_term(res.fused, student);
    res.objective = res.distill_term + lambda * res.reg_term;
    return res;
}

// Per-point consensus diagnostic: how far the fused output sits from the
// mean teacher output, and whether it lies in the teachers' coordinate-wise
// bounding box.
struct ConsensusPoint {
    int source_client = 0;
    std::size_t row = 0;
    double dist_to_mean = 0.0;
    bool in_bbox = true;
};

inline std::vector<ConsensusPoint> consensus_diagnostic(const ParameterGenerator& fused,
                                                        const std::vector<TeacherView>& teachers) {
    std::vector<ConsensusPoint> report;
    const std::size_t out = fused.out_len();
    for (const TeacherView& src : teachers) {
        for (std::size_t r = 0; r < src.features->rows; ++r) {
            const double* x = &src.features->data[r * src.features->cols];
            std::vector<double> mean(out, 0.0), lo(out, 1e300), hi(out, -1e300);
            for (const TeacherView& t : teachers) {
                auto z = generator_apply(*t.generator, x);
                for (std::size_t m = 0; m < out; ++m) {
                    mean[m] += z[m];
                    lo[m] = std::min(lo[m], z[m]);
                    hi[m] = std::max(hi[m], z[m]);
                }
            }
            for (double& v : mean) v /= static_cast<double>(teachers.size());
            auto ours = generator_apply(fused, x);
            ConsensusPoint pt;
            pt.source_client = src.features->client_id;
            pt.row = r;
            double acc = 0.0;
            for (std::size_t m = 0; m < out; ++m) {
                const double d = ours[m] - mean[m];
                acc += d * d;
                if (ours[m] < lo[m] - 1e-9 || ours[m] > hi[m] + 1e-9) pt.in_bbox = false;
            }
            pt.dist_to_mean = std::sqrt(acc);
            report.push_back(pt);
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Aggregation round.

struct ServerRoundState {
    std::size_t task_index = 0;
    double lambda = 0.1;
    O2dOptions options;
    std::vector<UploadPayload> uploads;  // generators + feature sets; the server never sees anything else
};

struct ClientRoundReport {
    int client_id = 0;
    double distill_term = 0.0;
    double reg_term = 0.0;
    double objective = 0.0;
    bool had_teachers = true;
    std::size_t consensus_points = 0;
    double consensus_mean_dist = 0.0;
    double consensus_bbox_fraction = 1.0;
    double wall_ms = 0.0;
    std::size_t payload_bytes = 0;    // full serialized upload
    std::size_t envelope_bytes = 0;   // length prefix + JSON header
    std::size_t generator_bytes = 0;  // weight + bias blobs
    std::size_t feature_bytes = 0;    // feature matrix blob
    std::size_t feature_rows = 0;
    std::size_t feature_cols = 0;
};

struct RoundReport {
    std::size_t task_index = 0;
    double lambda = 0.1;
    std::string solver;
    std::vector<ClientRoundReport> clients;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["task_index"] = task_index;
        j["lambda"] = lambda;
        j["solver"] = solver;
        auto arr = nlohmann::ordered_json::array();
        for (const auto& c : clients) {
            nlohmann::ordered_json e;
            e["client_id"] = c.client_id;
            e["distill_term"] = c.distill_term;
            e["reg_term"] = c.reg_term;
            e["objective"] = c.objective;
            e["had_teachers"] = c.had_teachers;
            e["consensus_points"] = c.consensus_points;
            e["consensus_mean_dist"] = c.consensus_mean_dist;
            e["consensus_bbox_fraction"] = c.consensus_bbox_fraction;
            e["wall_ms"] = c.wall_ms;
            e["payload_bytes"] = c.payload_bytes;
            e["envelope_bytes"] = c.envelope_bytes;
            e["generator_bytes"] = c.generator_bytes;
            e["feature_bytes"] = c.feature_bytes;
            e["feature_rows"] = c.feature_rows;
            e["feature_cols"] = c.feature_cols;
            arr.push_back(e);
        }
        j["clients"] = arr;
        return j;
    }
};

// Runs one-by-one distillation for every uploading client. Every distillation
// reads the original uploads only, so per-client results are independent of
// processing order.
inline std::map<int, ParameterGenerator> run_aggregation_round(const ServerRoundState& state,
                                                               RoundReport* report = nullptr) {
    if (state.uploads.empty()) throw ProtocolError("aggregation: no uploads");
    std::map<int, const UploadPayload*> by_id;
    for (const UploadPayload& up : state.uploads) {
        if (!by_id.emplace(up.client_id, &up).second)
            throw ProtocolError("aggregation: duplicate client id " + std::to_string(up.client_id));
    }
    if (report) {
        report->task_index = state.task_index;
        report->lambda = state.lambda;
        report->solver = solver_name(state.options.solver);
    }
    std::map<int, ParameterGenerator> fused;
    for (const auto& [cid, up] : by_id) {
        std::vector<TeacherView> teachers;
        for (const auto& [other_id, other] : by_id)
            if (other_id != cid) teachers.push_back({&other->generator, &other->feature_set});
        const auto start = std::chrono::steady_clock::now();
        O2dOptions opt = state.options;
        O2dResult res = o2d_distill(up->generator, teachers, state.lambda, opt);
        const auto stop = std::chrono::steady_clock::now();
        if (report) {
            ClientRoundReport cr;
            cr.client_id = cid;
            cr.distill_term = res.distill_term;
            cr.reg_term = res.reg_term;
            cr.objective = res.objective;
            cr.had_teachers = res.had_teachers;
            auto consensus = consensus_diagnostic(res.fused, teachers);
            cr.consensus_points = consensus.size();
            double acc = 0.0;
            std::size_t inside = 0;
            for (const auto& p : consensus) {
                acc += p.dist_to_mean;
                inside += p.in_bbox ? 1 : 0;
            }
            cr.consensus_mean_dist = consensus.empty() ? 0.0 : acc / static_cast<double>(consensus.size());
            cr.consensus_bbox_fraction =
                consensus.empty() ? 1.0 : static_cast<double>(inside) / static_cast<double>(consensus.size());
            cr.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
            cr.payload_bytes = up->serialize().size();
            cr.generator_bytes = ad::tensor_blob_size(up->generator.weight().shape()) +
                                 ad::tensor_blob_size(up->generator.bias().shape());
            cr.feature_bytes = ad::tensor_blob_size({up->feature_set.rows, up->feature_set.cols});
            cr.envelope_bytes = cr.payload_bytes - cr.generator_bytes - cr.feature_bytes;
            cr.feature_rows = up->feature_set.rows;
            cr.feature_cols = up->feature_set.cols;
            report->clients.push_back(cr);
        }
        fused.emplace(cid, std::move(res.fused));
    }
    return fused;
}

// Ablation arm: one uniform elementwise average returned to every client.
inline ParameterGenerator ablation_aggregate_uniform(const std::vector<UploadPayload>& uploads) {
    if (uploads.empty()) throw ProtocolError("uniform aggregation: no uploads");
    const auto& first = uploads.front().generator;
    std::vector<double> w(first.weight().numel(), 0.0), b(first.bias().numel(), 0.0);
    for (const UploadPayload& up : uploads) {
        if (up.generator.weight().shape() != first.weight().shape() ||
            up.generator.bias().shape() != first.bias().shape())
            throw ProtocolError("uniform aggregation: generator shape mismatch");
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += up.generator.weight().data()[i];
        for (std::size_t i = 0; i < b.size(); ++i) b[i] += up.generator.bias().data()[i];
    }
    const double inv = 1.0 / static_cast<double>(uploads.size());
    for (auto& v : w) v *= inv;
    for (auto& v : b) v *= inv;
    return ParameterGenerator::from_tensors(ad::Tensor::constant(first.weight().shape(), std::move(w)),
                                            ad::Tensor::constant(first.bias().shape(), std::move(b)),
                                            first.seed());
}

}  // namespace fedlora
