#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedlora/backbone.hpp"
#include "fedlora/client.hpp"
#include "fedlora/data.hpp"
#include "fedlora/metrics.hpp"
#include "fedlora/server.hpp"

namespace fedlora {

struct FederationConfig {
    std::size_t clients = 5;
    std::size_t tasks = 5;
    std::size_t classes_per_task = 2;
    std::size_t rounds_per_task = 5;
    std::size_t public_classes = 0;  // zero models extreme spatial heterogeneity
    double dirichlet_beta = 0.5;
    std::vector<std::uint64_t> seeds = {42, 1999, 2024};
    std::vector<std::string> encoder_archs = {"mlp"};  // cycled across clients
    BackboneConfig backbone;
    EncoderConfig encoder;  // arch field is overridden per client
    HyperParams hyper;
    DatasetConfig dataset;
    struct Ablations {
        bool collab = true;
        bool smcf = true;
        bool o2d = true;
    } ablations;
    O2dSolver server_solver = O2dSolver::kClosedForm;

    std::size_t private_per_client() const {
        return tasks * classes_per_task - public_classes;
    }
    std::size_t required_classes() const { return clients * private_per_client() + public_classes; }

    void validate() const {
        if (clients == 0 || tasks == 0 || classes_per_task == 0 || rounds_per_task == 0)
            throw ConfigError("federation: clients, tasks, classes_per_task and rounds_per_task must be positive");
        if (seeds.empty()) throw ConfigError("federation: at least one seed is required");
        if (encoder_archs.empty()) throw ConfigError("federation: at least one encoder architecture tag");
        for (const auto& tag : encoder_archs) parse_encoder_arch(tag);
        if (public_classes > tasks * classes_per_task)
            throw ConfigError("federation: infeasible partition, " + std::to_string(public_classes) +
                              " public classes exceed the " + std::to_string(tasks * classes_per_task) +
                              " class slots per client (need " + std::to_string(required_classes()) +
                              " synthetic classes total)");
        if (public_classes > 0 && dirichlet_beta <= 0.0)
            throw ConfigError("federation: dirichlet_beta must be positive when public classes exist");
        backbone.validate();
        hyper.validate();
        if (dataset.image_size != backbone.image_size || dataset.channels != backbone.channels)
            throw ConfigError("federation: dataset and backbone disagree on the image shape");
        if (encoder.image_size != dataset.image_size || encoder.channels != dataset.channels)
            throw ConfigError("federation: encoder and dataset disagree on the image shape");
    }

    EncoderArch arch_for(std::size_t client) const {
        return parse_encoder_arch(encoder_archs[client % encoder_archs.size()]);
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["federation"] = {{"clients", clients},
                           {"tasks", tasks},
                           {"classes_per_task", classes_per_task},
                           {"rounds_per_task", rounds_per_task},
                           {"public_classes", public_classes},
                           {"dirichlet_beta", dirichlet_beta},
                           {"seeds", seeds},
                           {"encoder_archs", encoder_archs}};
        j["backbone"] = {{"image_size", backbone.image_size},
                         {"patch_size", backbone.patch_size},
                         {"channels", backbone.channels},
                         {"embed_dim", backbone.embed_dim},
                         {"num_blocks", backbone.num_blocks},
                         {"num_heads", backbone.num_heads},
                         {"mlp_ratio", backbone.mlp_ratio},
                         {"adapted_block", backbone.adapted_block},
                         {"lora_rank", backbone.lora_rank},
                         {"lora_alpha", backbone.lora_alpha}};
        j["encoder"] = {{"feature_dim", encoder.feature_dim},
                        {"mlp_hidden", encoder.mlp_hidden},
                        {"conv_channels1", encoder.conv_channels1},
                        {"conv_channels2", encoder.conv_channels2}};
        j["hyperparams"] = {{"lambda_e", hyper.lambda_e},
                            {"lambda_w", hyper.lambda_w},
                            {"server_lambda", hyper.server_lambda},
                            {"stage1_epochs", hyper.stage1_epochs},
                            {"stage2_epochs", hyper.stage2_epochs},
                            {"batch_size", hyper.batch_size},
                            {"buffer_per_class", hyper.buffer_per_class},
                            {"learning_rate", hyper.learning_rate}};
        j["dataset"] = {{"image_size", dataset.image_size},
                        {"channels", dataset.channels},
                        {"train_per_class", dataset.train_per_class},
                        {"test_per_class", dataset.test_per_class},
                        {"prototype_scale", dataset.prototype_scale},
                        {"noise_scale", dataset.noise_scale}};
        j["ablations"] = {{"collab", ablations.collab}, {"smcf", ablations.smcf}, {"o2d", ablations.o2d}};
        j["server_solver"] = solver_name(server_solver);
        return j;
    }

    static FederationConfig from_json(const nlohmann::json& j) {
        FederationConfig c;
        if (j.contains("federation")) {
            const auto& f = j.at("federation");
            if (f.contains("clients")) c.clients = f.at("clients");
            if (f.contains("tasks")) c.tasks = f.at("tasks");
            if (f.contains("classes_per_task")) c.classes_per_task = f.at("classes_per_task");
            if (f.contains("rounds_per_task")) c.rounds_per_task = f.at("rounds_per_task");
            if (f.contains("public_classes")) c.public_classes = f.at("public_classes");
            if (f.contains("dirichlet_beta")) c.dirichlet_beta = f.at("dirichlet_beta");
            if (f.contains("seeds")) c.seeds = f.at("seeds").get<std::vector<std::uint64_t>>();
            if (f.contains("encoder_archs")) c.encoder_archs = f.at("encoder_archs").get<std::vector<std::string>>();
        }
        if (j.contains("backbone")) {
            const auto& b = j.at("backbone");
            if (b.contains("image_size")) c.backbone.image_size = b.at("image_size");
            if (b.contains("patch_size")) c.backbone.patch_size = b.at("patch_size");
            if (b.contains("channels")) c.backbone.channels = b.at("channels");
            if (b.contains("embed_dim")) c.backbone.embed_dim = b.at("embed_dim");
            if (b.contains("num_blocks")) c.backbone.num_blocks = b.at("num_blocks");
            if (b.contains("num_heads")) c.backbone.num_heads = b.at("num_heads");
            if (b.contains("mlp_ratio")) c.backbone.mlp_ratio = b.at("mlp_ratio");
            if (b.contains("adapted_block")) c.backbone.adapted_block = b.at("adapted_block");
            if (b.contains("lora_rank")) c.backbone.lora_rank = b.at("lora_rank");
            if (b.contains("lora_alpha")) c.backbone.lora_alpha = b.at("lora_alpha");
        }
        if (j.contains("encoder")) {
            const auto& e = j.at("encoder");
            if (e.contains("feature_dim")) c.encoder.feature_dim = e.at("feature_dim");
            if (e.contains("mlp_hidden")) c.encoder.mlp_hidden = e.at("mlp_hidden");
            if (e.contains("conv_channels1")) c.encoder.conv_channels1 = e.at("conv_channels1");
            if (e.contains("conv_channels2")) c.encoder.conv_channels2 = e.at("conv_channels2");
        }
        if (j.contains("hyperparams")) {
            const auto& h = j.at("hyperparams");
            if (h.contains("lambda_e")) c.hyper.lambda_e = h.at("lambda_e");
            if (h.contains("lambda_w")) c.hyper.lambda_w = h.at("lambda_w");
            if (h.contains("server_lambda")) c.hyper.server_lambda = h.at("server_lambda");
            if (h.contains("stage1_epochs")) c.hyper.stage1_epochs = h.at("stage1_epochs");
            if (h.contains("stage2_epochs")) c.hyper.stage2_epochs = h.at("stage2_epochs");
            if (h.contains("batch_size")) c.hyper.batch_size = h.at("batch_size");
            if (h.contains("buffer_per_class")) c.hyper.buffer_per_class = h.at("buffer_per_class");
            if (h.contains("learning_rate")) c.hyper.learning_rate = h.at("learning_rate");
        }
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            if (d.contains("image_size")) c.dataset.image_size = d.at("image_size");
            if (d.contains("channels")) c.dataset.channels = d.at("channels");
            if (d.contains("train_per_class")) c.dataset.train_per_class = d.at("train_per_class");
            if (d.contains("test_per_class")) c.dataset.test_per_class = d.at("test_per_class");
            if (d.contains("prototype_scale")) c.dataset.prototype_scale = d.at("prototype_scale");
            if (d.contains("noise_scale")) c.dataset.noise_scale = d.at("noise_scale");
        }
        if (j.contains("ablations")) {
            const auto& a = j.at("ablations");
            if (a.contains("collab")) c.ablations.collab = a.at("collab");
            if (a.contains("smcf")) c.ablations.smcf = a.at("smcf");
            if (a.contains("o2d")) c.ablations.o2d = a.at("o2d");
        }
        if (j.contains("server_solver"))
            c.server_solver =
                j.at("server_solver") == "iterative" ? O2dSolver::kIterative : O2dSolver::kClosedForm;
        // keep dependent image shapes in sync unless explicitly overridden
        c.encoder.image_size = c.dataset.image_size;
        c.encoder.channels = c.dataset.channels;
        return c;
    }
};

// The desk-scale reference configuration used throughout the test suites:
// three clients with mixed encoder architectures, three tasks of two classes.
inline FederationConfig reference_desk_config() {
    FederationConfig cfg;
    cfg.clients = 3;
    cfg.tasks = 3;
    cfg.classes_per_task = 2;
    cfg.rounds_per_task = 5;
    cfg.public_classes = 0;
    cfg.encoder_archs = {"mlp", "tinyconv", "mlp"};
    cfg.dataset.train_per_class = 24;
    cfg.dataset.test_per_class = 16;
    cfg.dataset.noise_scale = 1.0;
    cfg.hyper.stage1_epochs = 1;  // per round; five rounds per task
    cfg.hyper.stage2_epochs = 1;
    cfg.hyper.batch_size = 8;
    cfg.hyper.buffer_per_class = 10;
    cfg.hyper.learning_rate = 0.01;  // desk-scale step budget needs a larger step than the full-scale default
    cfg.hyper.server_lambda = 0.5;
    return cfg;
}

// ---------------------------------------------------------------------------
// Class partition and task streams.

struct ClassPartition {
    std::vector<std::vector<std::size_t>> private_classes;        // per client, disjoint
    std::vector<std::size_t> public_class_ids;                    // shared classes
    // per public class: per client, the train/test sample indices it owns
    std::map<std::size_t, std::vector<std::vector<std::size_t>>> public_train;
    std::map<std::size_t, std::vector<std::vector<std::size_t>>> public_test;
};

struct Federation {
    std::unique_ptr<SyntheticDataset> dataset;
    ClassPartition partition;
    std::vector<std::vector<TaskSpec>> task_streams;  // [client][task]
};

namespace detail {

// Largest-remainder apportionment of n items under the given proportions.
inline std::vector<std::size_t> apportion(const std::vector<double>& proportions, std::size_t n) {
    const std::size_t k = proportions.size();
    std::vector<std::size_t> counts(k, 0);
    std::vector<std::pair<double, std::size_t>> remainders(k);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < k; ++i) {
        const double exact = proportions[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(exact);
        assigned += counts[i];
        remainders[i] = {exact - std::floor(exact), i};
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[remainders[i % k].second];
    return counts;
}

}  // namespace detail

inline Federation build_federation(const FederationConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Federation fed;
    fed.dataset = std::make_unique<SyntheticDataset>(cfg.dataset, cfg.required_classes(),
                                                     mix_seed(seed, "dataset"));

    // class ids: publics first, then per-client private ranges
    for (std::size_t c = 0; c < cfg.public_classes; ++c) fed.partition.public_class_ids.push_back(c);
    std::size_t next_class = cfg.public_classes;
    fed.partition.private_classes.resize(cfg.clients);
    for (std::size_t i = 0; i < cfg.clients; ++i)
        for (std::size_t p = 0; p < cfg.private_per_client(); ++p)
            fed.partition.private_classes[i].push_back(next_class++);

    // Dirichlet split of public-class instances: strictly disjoint subsets
    for (std::size_t c : fed.partition.public_class_ids) {
        Rng rng(mix_seed(seed, "dirichlet", c));
        const auto proportions = rng.dirichlet(cfg.dirichlet_beta, cfg.clients);
        auto train_counts = detail::apportion(proportions, cfg.dataset.train_per_class);
        auto test_counts = detail::apportion(proportions, cfg.dataset.test_per_class);
        std::vector<std::vector<std::size_t>> train_split(cfg.clients), test_split(cfg.clients);
        std::size_t train_cursor = 0, test_cursor = 0;
        for (std::size_t i = 0; i < cfg.clients; ++i) {
            for (std::size_t s = 0; s < train_counts[i]; ++s) train_split[i].push_back(train_cursor++);
            for (std::size_t s = 0; s < test_counts[i]; ++s) test_split[i].push_back(test_cursor++);
        }
        fed.partition.public_train[c] = std::move(train_split);
        fed.partition.public_test[c] = std::move(test_split);
    }

    // task streams: shuffle each client's class universe, chunk into tasks
    fed.task_streams.resize(cfg.clients);
    for (std::size_t i = 0; i < cfg.clients; ++i) {
        std::vector<std::size_t> universe = fed.partition.private_classes[i];
        universe.insert(universe.end(), fed.partition.public_class_ids.begin(),
                        fed.partition.public_class_ids.end());
        Rng rng(mix_seed(seed, "task_shuffle", i));
        rng.shuffle(universe);
        for (std::size_t n = 1; n <= cfg.tasks; ++n) {
            TaskSpec t;
            t.client_id = static_cast<int>(i);
            t.task_index = n;
            for (std::size_t s = 0; s < cfg.classes_per_task; ++s)
                t.classes.push_back(universe[(n - 1) * cfg.classes_per_task + s]);
            for (std::size_t cls : t.classes) {
                const bool is_public = cls < cfg.public_classes;
                if (is_public) {
                    for (std::size_t idx : fed.partition.public_train.at(cls)[i]) t.train.push_back({cls, idx, false});
                    for (std::size_t idx : fed.partition.public_test.at(cls)[i]) t.test.push_back({cls, idx, true});
                } else {
                    for (std::size_t idx = 0; idx < cfg.dataset.train_per_class; ++idx)
                        t.train.push_back({cls, idx, false});
                    for (std::size_t idx = 0; idx < cfg.dataset.test_per_class; ++idx)
                        t.test.push_back({cls, idx, true});
                }
            }
            fed.task_streams[i].push_back(std::move(t));
        }
    }

    // partition sanity: private disjointness and public instance disjointness
    std::vector<bool> seen(cfg.required_classes(), false);
    for (const auto& plist : fed.partition.private_classes)
        for (std::size_t c : plist) {
            if (seen[c]) throw ContractError("partition: private class overlap");
            seen[c] = true;
        }
    for (const auto& [c, split] : fed.partition.public_train) {
        std::vector<bool> taken(cfg.dataset.train_per_class, false);
        for (const auto& idxs : split)
            for (std::size_t idx : idxs) {
                if (taken[idx]) throw ContractError("partition: public sample overlap");
                taken[idx] = true;
            }
    }
    return fed;
}

// ---------------------------------------------------------------------------
// Experiment driver.

namespace detail {

inline void log_event(EventLog& log, std::string type, nlohmann::ordered_json data) {
    log.push_back({std::move(type), std::move(data)});
}

}  // namespace detail

inline ResultBundle run_experiment(const FederationConfig& cfg_in, std::uint64_t seed) {
    const auto wall_start = std::chrono::steady_clock::now();
    FederationConfig cfg = cfg_in;
    cfg.validate();

    ResultBundle bundle;
    bundle.seed = seed;

    // the no-collaboration arm trains encoder + head locally: there is no
    // generator to distill or replay against, so the other toggles fall away
    if (!cfg.ablations.collab && (cfg.ablations.smcf || cfg.ablations.o2d)) {
        cfg.ablations.smcf = false;
        cfg.ablations.o2d = false;
        detail::log_event(bundle.events, "note",
                          {{"message", "collab disabled: forcing smcf and o2d off for the local baseline"}});
    }

    bundle.config_echo = cfg.to_json().dump();
    bundle.config_hash = sha256_hex(bundle.config_echo);

    Federation fed = build_federation(cfg, seed);
    const SyntheticDataset& ds = *fed.dataset;

    std::unique_ptr<FrozenBackbone> bb;
    if (cfg.ablations.collab) {
        bb = std::make_unique<FrozenBackbone>(build_frozen_backbone(cfg.backbone, mix_seed(seed, "backbone")));
        bundle.backbone_hash_pre = bb->weights_hash();
    }

    std::vector<std::unique_ptr<Client>> clients;
    for (std::size_t i = 0; i < cfg.clients; ++i) {
        EncoderConfig ecfg = cfg.encoder;
        ecfg.image_size = cfg.dataset.image_size;
        ecfg.channels = cfg.dataset.channels;
        clients.push_back(std::make_unique<Client>(static_cast<int>(i), cfg.arch_for(i), seed, ecfg,
                                                   &cfg.backbone, cfg.hyper, cfg.ablations.collab));
    }

    for (std::size_t n = 1; n <= cfg.tasks; ++n) {
        for (std::size_t i = 0; i < cfg.clients; ++i) {
            const TaskSpec& task = fed.task_streams[i][n - 1];
            clients[i]->begin_task(task);
            detail::log_event(bundle.events, "begin_task",
                              {{"client", static_cast<int>(i)}, {"task", n}, {"classes", task.classes}});
        }

        std::vector<UploadPayload> uploads;
        for (std::size_t i = 0; i < cfg.clients; ++i) {
            Client& c = *clients[i];
            const TaskSpec& task = fed.task_streams[i][n - 1];
            for (std::size_t r = 1; r <= cfg.rounds_per_task; ++r) {
                StageLog log = c.train_stage1(bb.get(), ds, task);
                bundle.loss_traces.push_back({c.id(), n, r, "stage1", log.mean()});
                detail::log_event(bundle.events, "stage1",
                                  {{"client", c.id()}, {"task", n}, {"round", r}, {"mean_loss", log.mean()}});
            }
            if (cfg.ablations.smcf) {
                if (c.buffer().empty()) {
                    detail::log_event(bundle.events, "stage2_skipped",
                                      {{"client", c.id()}, {"task", n}, {"reason", "empty buffer"}});
                } else {
                    for (std::size_t r = 1; r <= cfg.rounds_per_task; ++r) {
                        auto log = c.train_stage2(bb.get(), ds);
                        bundle.loss_traces.push_back({c.id(), n, r, "stage2", log->mean()});
                        detail::log_event(bundle.events, "stage2",
                                          {{"client", c.id()}, {"task", n}, {"round", r}, {"mean_loss", log->mean()}});
                    }
                }
            }
            c.update_buffer(bb.get(), ds, task);
            {
                nlohmann::ordered_json sel = nlohmann::ordered_json::array();
                for (std::size_t cls : task.classes) {
                    nlohmann::ordered_json e;
                    e["class"] = cls;
                    auto idxs = nlohmann::ordered_json::array();
                    auto scores = nlohmann::ordered_json::array();
                    for (const auto& entry : c.buffer().entries(cls)) {
                        idxs.push_back(entry.ref.index);
                        scores.push_back(entry.score);
                    }
                    e["indices"] = idxs;
                    e["scores"] = scores;
                    sel.push_back(e);
                }
                detail::log_event(bundle.events, "update_buffer",
                                  {{"client", c.id()}, {"task", n}, {"selected", sel}});
            }
            FeatureSet fs = c.finalize_feature_set(ds);
            detail::log_event(bundle.events, "construct_feature_set",
                              {{"client", c.id()}, {"task", n}, {"rows", fs.rows}, {"cols", fs.cols}});
            if (cfg.ablations.collab) {
                UploadPayload up = c.make_upload();
                detail::log_event(bundle.events, "upload",
                                  {{"client", c.id()}, {"task", n}, {"bytes", up.serialize().size()}});
                uploads.push_back(std::move(up));
            }
        }

        if (cfg.ablations.collab) {
            ServerRoundState state;
            state.task_index = n;
            state.lambda = cfg.hyper.server_lambda;
            state.options.solver = cfg.server_solver;
            state.uploads = std::move(uploads);
            RoundReport report;
            std::map<int, ParameterGenerator> fused;
            if (cfg.ablations.o2d) {
                fused = run_aggregation_round(state, &report);
                if (n == cfg.tasks) {
                    for (const UploadPayload& up : state.uploads) {
                        std::vector<TeacherView> teachers;
                        for (const UploadPayload& other : state.uploads)
                            if (other.client_id != up.client_id)
                                teachers.push_back({&other.generator, &other.feature_set});
                        bundle.final_consensus.emplace_back(up.client_id,
                                                            consensus_diagnostic(fused.at(up.client_id), teachers));
                    }
                }
            } else {
                ParameterGenerator avg = ablation_aggregate_uniform(state.uploads);
                report.task_index = n;
                report.lambda = state.lambda;
                report.solver = "uniform_average";
                for (const UploadPayload& up : state.uploads) {
                    ClientRoundReport cr;
                    cr.client_id = up.client_id;
                    std::vector<TeacherView> teachers;
                    for (const UploadPayload& other : state.uploads)
                        if (other.client_id != up.client_id)
                            teachers.push_back({&other.generator, &other.feature_set});
                    cr.distill_term = o2d_distill_term(avg, teachers);
                    cr.reg_term = o2d_reg_term(avg, up.generator);
                    cr.objective = cr.distill_term + state.lambda * cr.reg_term;
                    cr.had_teachers = state.uploads.size() > 1;
                    cr.payload_bytes = up.serialize().size();
                    cr.generator_bytes = ad::tensor_blob_size(up.generator.weight().shape()) +
                                         ad::tensor_blob_size(up.generator.bias().shape());
                    cr.feature_bytes = ad::tensor_blob_size({up.feature_set.rows, up.feature_set.cols});
                    cr.envelope_bytes = cr.payload_bytes - cr.generator_bytes - cr.feature_bytes;
                    cr.feature_rows = up.feature_set.rows;
                    cr.feature_cols = up.feature_set.cols;
                    report.clients.push_back(cr);
                    fused.emplace(up.client_id, avg.frozen_clone());
                }
            }
            detail::log_event(bundle.events, "server_round", report.to_json());
            bundle.round_reports.push_back(std::move(report));
            for (std::size_t i = 0; i < cfg.clients; ++i) {
                clients[i]->install_generator(fused.at(static_cast<int>(i)));
                detail::log_event(bundle.events, "receive", {{"client", static_cast<int>(i)}, {"task", n}});
            }
        }

        for (std::size_t i = 0; i < cfg.clients; ++i) clients[i]->snapshot_for_next_task();

        for (std::size_t i = 0; i < cfg.clients; ++i) {
            std::vector<TaskSpec> seen(fed.task_streams[i].begin(),
                                       fed.task_streams[i].begin() + static_cast<std::ptrdiff_t>(n));
            std::vector<EvalRecord> trace;
            clients[i]->evaluate(bb.get(), ds, seen, &trace);
            for (const EvalRecord& rec : trace) {
                detail::log_event(bundle.events, "evaluate",
                                  {{"client", static_cast<int>(i)},
                                   {"after_task", n},
                                   {"eval_task", rec.eval_task},
                                   {"accuracy", rec.accuracy},
                                   {"truth", rec.truth},
                                   {"predicted", rec.predicted}});
            }
        }
    }

    for (std::size_t i = 0; i < cfg.clients; ++i)
        bundle.accuracy.push_back(compute_accuracy_matrix(bundle.events, static_cast<int>(i), cfg.tasks));
    if (bb) bundle.backbone_hash_post = bb->weights_hash();
    bundle.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    return bundle;
}

struct SweepResult {
    std::vector<ResultBundle> bundles;
    nlohmann::ordered_json summary;
};

inline SweepResult run_seed_sweep(const FederationConfig& cfg) {
    cfg.validate();
    SweepResult sweep;
    for (std::uint64_t seed : cfg.seeds) sweep.bundles.push_back(run_experiment(cfg, seed));
    sweep.summary = summarize_bundles(sweep.bundles);
    return sweep;
}

}  // namespace fedlora
