#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedlora/common.hpp"
#include "fedlora/server.hpp"

// Run bookkeeping: append-only event log, accuracy matrices, forgetting and
// payload accounting. Every aggregate is recomputable from the persisted
// per-sample prediction logs.

namespace fedlora {

struct Event {
    std::string type;
    nlohmann::ordered_json data;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["type"] = type;
        for (auto it = data.begin(); it != data.end(); ++it) j[it.key()] = it.value();
        return j;
    }
};

using EventLog = std::vector<Event>;

// Lower-triangular accuracy table: rows[n-1][t-1] is the accuracy on task t's
// test split after completing task n (t <= n).
struct AccuracyMatrix {
    int client_id = 0;
    std::vector<std::vector<double>> rows;

    std::size_t num_tasks() const { return rows.size(); }

    double cell(std::size_t after_task, std::size_t eval_task) const {
        if (after_task == 0 || after_task > rows.size() || eval_task == 0 || eval_task > after_task)
            throw ContractError("accuracy matrix: cell (" + std::to_string(after_task) + "," +
                                std::to_string(eval_task) + ") outside the lower triangle");
        return rows[after_task - 1][eval_task - 1];
    }

    // mean of the final row: back-tested accuracy over all tasks
    double final_mean() const {
        if (rows.empty()) throw ContractError("accuracy matrix: empty");
        const auto& last = rows.back();
        double acc = 0.0;
        for (double v : last) acc += v;
        return acc / static_cast<double>(last.size());
    }
};

inline double recount_accuracy(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted) {
    if (truth.size() != predicted.size()) throw ContractError("recount: prediction log length mismatch");
    if (truth.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (truth[i] == predicted[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(truth.size());
}

// Builds a client's matrix from its "evaluate" events. Every lower-triangle
// cell must be present exactly once.
inline AccuracyMatrix compute_accuracy_matrix(const EventLog& events, int client_id, std::size_t num_tasks) {
    AccuracyMatrix m;
    m.client_id = client_id;
    m.rows.resize(num_tasks);
    for (std::size_t n = 1; n <= num_tasks; ++n) m.rows[n - 1].assign(n, -1.0);
    for (const Event& e : events) {
        if (e.type != "evaluate" || e.data.at("client").get<int>() != client_id) continue;
        const std::size_t n = e.data.at("after_task");
        const std::size_t t = e.data.at("eval_task");
        if (n == 0 || n > num_tasks || t == 0 || t > n)
            throw ContractError("accuracy matrix: evaluation outside the lower triangle");
        if (m.rows[n - 1][t - 1] >= 0.0) throw ContractError("accuracy matrix: duplicate evaluation event");
        m.rows[n - 1][t - 1] = e.data.at("accuracy");
    }
    for (std::size_t n = 1; n <= num_tasks; ++n)
        for (std::size_t t = 1; t <= n; ++t)
            if (m.rows[n - 1][t - 1] < 0.0)
                throw ContractError("accuracy matrix: incomplete run, missing cell (" + std::to_string(n) + "," +
                                    std::to_string(t) + ") for client " + std::to_string(client_id));
    return m;
}

// forgetting(t) = max_{n >= t} A[n][t] - A[N][t]; empty when N < 2.
inline std::vector<double> compute_forgetting(const AccuracyMatrix& m) {
    const std::size_t n_tasks = m.num_tasks();
    if (n_tasks < 2) return {};
    std::vector<double> out(n_tasks);
    for (std::size_t t = 1; t <= n_tasks; ++t) {
        double best = 0.0;
        for (std::size_t n = t; n <= n_tasks; ++n) best = std::max(best, m.cell(n, t));
        out[t - 1] = best - m.cell(n_tasks, t);
    }
    return out;
}

// Upload byte accounting from the server round reports. Validates that every
// reported payload decomposes into envelope + generator blobs + feature blob
// with the feature blob exactly rows*cols*8 plus its 24-byte header.
struct PayloadCell {
    int client_id = 0;
    std::size_t task_index = 0;
    std::size_t total_bytes = 0;
    std::size_t generator_bytes = 0;
    std::size_t feature_bytes = 0;
};

inline std::vector<PayloadCell> payload_accounting(const std::vector<RoundReport>& reports) {
    std::vector<PayloadCell> out;
    for (const RoundReport& r : reports) {
        for (const ClientRoundReport& c : r.clients) {
            PayloadCell cell;
            cell.client_id = c.client_id;
            cell.task_index = r.task_index;
            cell.total_bytes = c.payload_bytes;
            cell.generator_bytes = c.generator_bytes;
            cell.feature_bytes = c.feature_bytes;
            const std::size_t expected_features = 8 * 3 + 8 * c.feature_rows * c.feature_cols;
            if (cell.feature_bytes != expected_features)
                throw ContractError("payload accounting: feature blob of client " + std::to_string(c.client_id) +
                                    " is " + std::to_string(cell.feature_bytes) + " bytes, expected " +
                                    std::to_string(expected_features));
            if (cell.total_bytes != c.envelope_bytes + cell.generator_bytes + cell.feature_bytes)
                throw ContractError("payload accounting: byte breakdown does not sum for client " +
                                    std::to_string(c.client_id));
            out.push_back(cell);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Result bundle and writers.

struct LossTracePoint {
    int client = 0;
    std::size_t task = 0;
    std::size_t round = 0;
    std::string stage;
    double mean_loss = 0.0;
};

struct ResultBundle {
    std::uint64_t seed = 0;
    std::string config_echo;  // canonical config dump
    std::string config_hash;  // sha256 of the echo
    std::string backbone_hash_pre;
    std::string backbone_hash_post;
    std::vector<AccuracyMatrix> accuracy;  // one per client, client id order
    std::vector<LossTracePoint> loss_traces;
    std::vector<RoundReport> round_reports;
    // per-point consensus diagnostics of the final aggregation round
    std::vector<std::pair<int, std::vector<ConsensusPoint>>> final_consensus;
    EventLog events;
    double wall_seconds = 0.0;

    const AccuracyMatrix& matrix_for(int client_id) const {
        for (const auto& m : accuracy)
            if (m.client_id == client_id) return m;
        throw ContractError("bundle: no accuracy matrix for client " + std::to_string(client_id));
    }

    double mean_final_backtest() const {
        double acc = 0.0;
        for (const auto& m : accuracy) acc += m.final_mean();
        return acc / static_cast<double>(accuracy.size());
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["seed"] = seed;
        j["config_hash"] = config_hash;
        j["config"] = nlohmann::ordered_json::parse(config_echo);
        j["backbone_hash_pre"] = backbone_hash_pre;
        j["backbone_hash_post"] = backbone_hash_post;
        auto acc = nlohmann::ordered_json::array();
        for (const auto& m : accuracy) {
            nlohmann::ordered_json e;
            e["client"] = m.client_id;
            e["rows"] = m.rows;
            e["final_mean"] = m.final_mean();
            e["forgetting"] = compute_forgetting(m);
            acc.push_back(e);
        }
        j["accuracy"] = acc;
        j["mean_final_backtest"] = mean_final_backtest();
        auto losses = nlohmann::ordered_json::array();
        for (const auto& p : loss_traces) {
            nlohmann::ordered_json e;
            e["client"] = p.client;
            e["task"] = p.task;
            e["round"] = p.round;
            e["stage"] = p.stage;
            e["mean_loss"] = p.mean_loss;
            losses.push_back(e);
        }
        j["loss_traces"] = losses;
        auto rounds = nlohmann::ordered_json::array();
        for (const auto& r : round_reports) rounds.push_back(r.to_json());
        j["server_rounds"] = rounds;
        auto payloads = nlohmann::ordered_json::array();
        for (const auto& cell : payload_accounting(round_reports)) {
            nlohmann::ordered_json e;
            e["client"] = cell.client_id;
            e["task"] = cell.task_index;
            e["total_bytes"] = cell.total_bytes;
            e["generator_bytes"] = cell.generator_bytes;
            e["feature_bytes"] = cell.feature_bytes;
            payloads.push_back(e);
        }
        j["payload_bytes"] = payloads;
        j["wall_seconds"] = wall_seconds;
        return j;
    }
};

namespace detail {
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
}  // namespace detail

// metrics.csv: one row per accuracy cell. Deterministic: repeated runs with
// the same config and seed must produce byte-identical output.
inline void write_metrics_csv(std::ostream& os, const ResultBundle& bundle) {
    os << "seed,client,after_task,eval_task,accuracy\n";
    for (const auto& m : bundle.accuracy)
        for (std::size_t n = 1; n <= m.num_tasks(); ++n)
            for (std::size_t t = 1; t <= n; ++t)
                os << bundle.seed << ',' << m.client_id << ',' << n << ',' << t << ','
                   << detail::format_double(m.cell(n, t)) << '\n';
}

inline void write_events_jsonl(std::ostream& os, const EventLog& events) {
    for (const Event& e : events) os << e.to_json().dump() << '\n';
}

// Cross-seed aggregation: mean and standard deviation per accuracy cell plus
// the final back-test summary.
struct SeedStats {
    double mean = 0.0;
    double stddev = 0.0;
};

inline SeedStats seed_stats(const std::vector<double>& values) {
    SeedStats s;
    if (values.empty()) return s;
    bool all_equal = true;
    for (double v : values) all_equal &= v == values.front();
    if (all_equal) {  // identical entries have exactly zero spread
        s.mean = values.front();
        return s;
    }
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(values.size()));
    return s;
}

inline nlohmann::ordered_json summarize_bundles(const std::vector<ResultBundle>& bundles) {
    if (bundles.empty()) throw ContractError("summary: no bundles");
    nlohmann::ordered_json j;
    auto seeds = nlohmann::ordered_json::array();
    for (const auto& b : bundles) seeds.push_back(b.seed);
    j["seeds"] = seeds;

    auto cells = nlohmann::ordered_json::array();
    const auto& ref = bundles.front();
    for (const auto& m : ref.accuracy) {
        for (std::size_t n = 1; n <= m.num_tasks(); ++n)
            for (std::size_t t = 1; t <= n; ++t) {
                std::vector<double> values;
                for (const auto& b : bundles) values.push_back(b.matrix_for(m.client_id).cell(n, t));
                auto st = seed_stats(values);
                nlohmann::ordered_json e;
                e["client"] = m.client_id;
                e["after_task"] = n;
                e["eval_task"] = t;
                e["mean"] = st.mean;
                e["std"] = st.stddev;
                cells.push_back(e);
            }
    }
    j["accuracy_cells"] = cells;

    std::vector<double> finals;
    for (const auto& b : bundles) finals.push_back(b.mean_final_backtest());
    auto fstat = seed_stats(finals);
    j["mean_final_backtest"] = {{"mean", fstat.mean}, {"std", fstat.stddev}};

    auto per_client = nlohmann::ordered_json::array();
    for (const auto& m : ref.accuracy) {
        std::vector<double> values;
        for (const auto& b : bundles) values.push_back(b.matrix_for(m.client_id).final_mean());
        auto st = seed_stats(values);
        nlohmann::ordered_json e;
        e["client"] = m.client_id;
        e["mean"] = st.mean;
        e["std"] = st.stddev;
        per_client.push_back(e);
    }
    j["final_backtest_per_client"] = per_client;
    return j;
}

}  // namespace fedlora
