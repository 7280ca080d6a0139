#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedlora/adam.hpp"
#include "fedlora/backbone.hpp"
#include "fedlora/data.hpp"
#include "fedlora/hypernet.hpp"
#include "fedlora/ops.hpp"
#include "fedlora/rng.hpp"

namespace fedlora {

struct HyperParams {
    double lambda_e = 1.0;        // feature-consistency weight
    double lambda_w = 1.0;        // adapter-consistency weight
    double server_lambda = 0.1;   // server distillation anchor weight
    std::size_t stage1_epochs = 3;
    std::size_t stage2_epochs = 1;
    std::size_t batch_size = 8;
    std::size_t buffer_per_class = 20;
    double learning_rate = 1e-3;

    void validate() const {
        if (lambda_e < 0.0 || lambda_w < 0.0 || server_lambda < 0.0)
            throw ConfigError("hyperparams: lambda weights must be non-negative");
        if (stage1_epochs == 0 || batch_size == 0 || buffer_per_class == 0 || learning_rate <= 0.0)
            throw ConfigError("hyperparams: epochs, batch size, buffer size and learning rate must be positive");
    }
};

struct BufferEntry {
    SampleRef ref;
    double score = 0.0;  // stage-scoring cross-entropy, kept for audit
};

// Class-balanced replay store: at most M entries per seen class, lowest
// cross-entropy first, ties broken by dataset index.
class ReplayBuffer {
public:
    bool empty() const { return per_class_.empty(); }
    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& [c, v] : per_class_) n += v.size();
        return n;
    }
    bool has_class(std::size_t c) const { return per_class_.count(c) > 0; }
    const std::vector<BufferEntry>& entries(std::size_t c) const { return per_class_.at(c); }
    const std::map<std::size_t, std::vector<BufferEntry>>& per_class() const { return per_class_; }

    void set_class(std::size_t c, std::vector<BufferEntry> entries) {
        if (has_class(c)) throw ProtocolError("buffer: class " + std::to_string(c) + " already buffered");
        per_class_[c] = std::move(entries);
    }

    // class id ascending, stored entry order within a class
    std::vector<SampleRef> ordered_refs() const {
        std::vector<SampleRef> out;
        for (const auto& [c, v] : per_class_)
            for (const auto& e : v) out.push_back(e.ref);
        return out;
    }

private:
    std::map<std::size_t, std::vector<BufferEntry>> per_class_;
};

// Encoder features of the buffered samples; the only data-derived artifact
// that is ever uploaded. Carries no labels and no raw samples.
struct FeatureSet {
    int client_id = 0;
    std::size_t task_index = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major [rows, cols]

    ad::Tensor as_tensor() const { return ad::Tensor::constant({rows, cols}, data); }
};

// Exactly what travels to the server: envelope metadata, the generator and
// the feature matrix. Nothing else is serialized.
struct UploadPayload {
    int client_id = 0;
    std::size_t task_index = 0;
    ParameterGenerator generator;
    FeatureSet feature_set;

    std::vector<std::uint8_t> serialize() const {
        nlohmann::ordered_json env;
        env["client_id"] = client_id;
        env["task_index"] = task_index;
        env["generator"] = generator.manifest();
        env["feature_set"] = {{"rows", feature_set.rows}, {"cols", feature_set.cols}};
        const std::string header = env.dump();
        std::vector<std::uint8_t> out;
        append_u64le(out, header.size());
        out.insert(out.end(), header.begin(), header.end());
        ad::append_tensor_blob(out, generator.weight());
        ad::append_tensor_blob(out, generator.bias());
        ad::append_tensor_blob(out, feature_set.as_tensor());
        return out;
    }

    static UploadPayload deserialize(const std::vector<std::uint8_t>& bytes) {
        std::size_t offset = 0;
        if (bytes.size() < 8) throw ContractError("upload: truncated envelope");
        const std::uint64_t hlen = read_u64le(&bytes[0]);
        offset = 8;
        if (offset + hlen > bytes.size()) throw ContractError("upload: truncated envelope header");
        auto env = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + static_cast<std::ptrdiff_t>(8 + hlen));
        offset += hlen;
        UploadPayload p;
        p.client_id = env.at("client_id");
        p.task_index = env.at("task_index");
        ad::Tensor w = ad::read_tensor_blob(bytes, offset);
        ad::Tensor b = ad::read_tensor_blob(bytes, offset);
        p.generator = ParameterGenerator::from_tensors(std::move(w), std::move(b), env.at("generator").at("seed"));
        ad::Tensor feats = ad::read_tensor_blob(bytes, offset);
        if (offset != bytes.size()) throw ContractError("upload: trailing bytes");
        p.feature_set.client_id = p.client_id;
        p.feature_set.task_index = p.task_index;
        p.feature_set.rows = feats.dim(0);
        p.feature_set.cols = feats.dim(1);
        p.feature_set.data = feats.data();
        if (p.feature_set.rows != env.at("feature_set").at("rows").get<std::size_t>() ||
            p.feature_set.cols != env.at("feature_set").at("cols").get<std::size_t>())
            throw ContractError("upload: feature dims disagree with envelope");
        return p;
    }
};

struct StageLog {
    std::vector<double> batch_losses;

    double first() const { return batch_losses.front(); }
    double last() const { return batch_losses.back(); }
    double mean() const {
        double acc = 0.0;
        for (double v : batch_losses) acc += v;
        return batch_losses.empty() ? 0.0 : acc / static_cast<double>(batch_losses.size());
    }
};

// Per-sample predictions of one evaluation pass, kept so accuracy cells can
// be recounted independently.
struct EvalRecord {
    std::size_t eval_task = 0;
    std::vector<std::size_t> truth;
    std::vector<std::size_t> predicted;
    double accuracy = 0.0;
};

// Per-client protocol engine. Owns its private autodiff tape; clients never
// share mutable state, so separate instances may run on separate threads.
class Client {
public:
    Client(int id, EncoderArch arch, std::uint64_t seed, EncoderConfig enc_cfg, const BackboneConfig* bb_cfg,
           HyperParams hp, bool collab_enabled)
        : id_(id),
          hp_(hp),
          collab_(collab_enabled),
          rng_(mix_seed(seed, "client", static_cast<std::uint64_t>(id))),
          seed_(seed) {
        hp_.validate();
        enc_cfg.arch = arch;
        enc_cfg.validate();
        if (collab_ && bb_cfg == nullptr) throw ContractError("client: collaborative path needs a backbone config");
        const std::size_t gen_out = collab_ ? bb_cfg->lora_len() : 0;
        const std::size_t head_in = collab_ ? bb_cfg->embed_dim : enc_cfg.feature_dim;
        Rng init_rng(mix_seed(seed, "client_init", static_cast<std::uint64_t>(id)));
        encoder_ = SmallEncoder::create(enc_cfg, tape_, init_rng);
        if (collab_)
            generator_ = ParameterGenerator::create(enc_cfg.feature_dim, gen_out,
                                                    mix_seed(seed, "client_gen", static_cast<std::uint64_t>(id)),
                                                    tape_);
        head_ = ClassifierHead::create(head_in, tape_);
    }

    int id() const { return id_; }
    bool collab_enabled() const { return collab_; }
    const SmallEncoder& encoder() const { return encoder_; }
    const ParameterGenerator& generator() const { return generator_; }
    const ClassifierHead& head() const { return head_; }
    const ReplayBuffer& buffer() const { return buffer_; }
    const HyperParams& hyperparams() const { return hp_; }
    bool has_snapshots() const { return encoder_prev_.defined(); }
    const std::map<std::size_t, int>& class_map() const { return class_map_; }
    ad::Tape& tape() { return tape_; }

    // Registers the task's classes (head rows are appended) and resets the
    // optimizer over the current parameter set.
    void begin_task(const TaskSpec& task) {
        for (std::size_t c : task.classes) {
            if (class_map_.count(c))
                throw ProtocolError("client " + std::to_string(id_) + ": class " + std::to_string(c) +
                                    " appears in two tasks");
            const int row = static_cast<int>(class_map_.size());
            class_map_[c] = row;
            inverse_map_.push_back(c);
        }
        head_.extend(class_map_.size(), rng_);
        rebuild_optimizer();
        current_task_ = task.task_index;
    }

    StageLog train_stage1(const FrozenBackbone* bb, const SyntheticDataset& ds, const TaskSpec& task) {
        if (task.train.empty()) throw ProtocolError("stage1: task has no training samples");
        StageLog log;
        for (std::size_t epoch = 0; epoch < hp_.stage1_epochs; ++epoch) {
            std::vector<SampleRef> order = task.train;
            rng_.shuffle(order);
            for (std::size_t start = 0; start < order.size(); start += hp_.batch_size) {
                const std::size_t stop = std::min(order.size(), start + hp_.batch_size);
                std::vector<SampleRef> chunk(order.begin() + static_cast<std::ptrdiff_t>(start),
                                             order.begin() + static_cast<std::ptrdiff_t>(stop));
                auto [images, labels] = make_batch(ds, chunk);
                ad::Tensor logits = forward_logits(bb, images);
                ad::Tensor loss = ad::mean_all(ad::cross_entropy_logits(logits, local_labels(labels)));
                log.batch_losses.push_back(loss.item());
                tape_.backward(loss);
                optimizer_->step();
            }
        }
        return log;
    }

    // Replay with feature/adapter consistency against the frozen previous-task
    // snapshots. Returns nothing when the buffer is empty (first task).
    std::optional<StageLog> train_stage2(const FrozenBackbone* bb, const SyntheticDataset& ds) {
        if (!collab_) throw ContractError("stage2: requires the collaborative path");
        if (buffer_.empty()) return std::nullopt;
        if (!encoder_prev_.defined() || !generator_prev_.defined())
            throw ProtocolError("stage2: buffer is non-empty but snapshots are missing");
        StageLog log;
        const std::vector<SampleRef> all = buffer_.ordered_refs();
        for (std::size_t epoch = 0; epoch < hp_.stage2_epochs; ++epoch) {
            std::vector<SampleRef> order = all;
            rng_.shuffle(order);
            for (std::size_t start = 0; start < order.size(); start += hp_.batch_size) {
                const std::size_t stop = std::min(order.size(), start + hp_.batch_size);
                std::vector<SampleRef> chunk(order.begin() + static_cast<std::ptrdiff_t>(start),
                                             order.begin() + static_cast<std::ptrdiff_t>(stop));
                auto [images, labels] = make_batch(ds, chunk);
                const double inv_batch = 1.0 / static_cast<double>(chunk.size());

                ad::Tensor feats = encoder_.forward(images);
                ad::Tensor lora = generator_.forward(feats);
                ad::Tensor rep = forward_adapted(*bb, images, lora);
                ad::Tensor ce = ad::mean_all(ad::cross_entropy_logits(head_.forward(rep), local_labels(labels)));
                ad::Tensor loss = ce;
                if (hp_.lambda_e > 0.0 || hp_.lambda_w > 0.0) {
                    ad::Tensor feats_prev = encoder_prev_.forward(images);  // constant: snapshot is frozen
                    ad::Tensor lora_prev = generator_prev_.forward(feats_prev);
                    ad::Tensor keep_e = ad::scale(ad::squared_distance(feats, feats_prev), hp_.lambda_e * inv_batch);
                    ad::Tensor keep_w = ad::scale(ad::squared_distance(lora, lora_prev), hp_.lambda_w * inv_batch);
                    loss = ad::add(ad::add(ce, keep_e), keep_w);
                }
                log.batch_losses.push_back(loss.item());
                tape_.backward(loss);
                optimizer_->step();
            }
        }
        return log;
    }

    // Keeps the buffer_per_class lowest-loss samples of each task class under
    // the current model; earlier classes are untouched.
    void update_buffer(const FrozenBackbone* bb, const SyntheticDataset& ds, const TaskSpec& task) {
        ad::NoGradScope ng(tape_);
        for (std::size_t cls : task.classes) {
            std::vector<SampleRef> refs;
            for (const SampleRef& r : task.train)
                if (r.class_id == cls) refs.push_back(r);
            std::vector<BufferEntry> scored;
            scored.reserve(refs.size());
            for (std::size_t start = 0; start < refs.size(); start += hp_.batch_size) {
                const std::size_t stop = std::min(refs.size(), start + hp_.batch_size);
                std::vector<SampleRef> chunk(refs.begin() + static_cast<std::ptrdiff_t>(start),
                                             refs.begin() + static_cast<std::ptrdiff_t>(stop));
                auto [images, labels] = make_batch(ds, chunk);
                ad::Tensor losses = ad::cross_entropy_logits(forward_logits(bb, images), local_labels(labels));
                for (std::size_t i = 0; i < chunk.size(); ++i) scored.push_back({chunk[i], losses.data()[i]});
            }
            std::sort(scored.begin(), scored.end(), [](const BufferEntry& a, const BufferEntry& b) {
                if (a.score != b.score) return a.score < b.score;
                return a.ref.index < b.ref.index;  // deterministic tie-break
            });
            if (scored.size() > hp_.buffer_per_class) scored.resize(hp_.buffer_per_class);
            buffer_.set_class(cls, std::move(scored));
        }
    }

    // Rows are current-encoder features of the buffered samples, class id
    // ascending then stored order. No labels are included.
    FeatureSet construct_feature_set(const SyntheticDataset& ds) {
        FeatureSet fs;
        fs.client_id = id_;
        fs.task_index = current_task_;
        fs.cols = encoder_.config().feature_dim;
        const std::vector<SampleRef> refs = buffer_.ordered_refs();
        fs.rows = refs.size();
        if (refs.empty()) return fs;
        ad::NoGradScope ng(tape_);
        fs.data.reserve(fs.rows * fs.cols);
        for (std::size_t start = 0; start < refs.size(); start += hp_.batch_size) {
            const std::size_t stop = std::min(refs.size(), start + hp_.batch_size);
            std::vector<SampleRef> chunk(refs.begin() + static_cast<std::ptrdiff_t>(start),
                                         refs.begin() + static_cast<std::ptrdiff_t>(stop));
            auto [images, labels] = make_batch(ds, chunk);
            (void)labels;
            ad::Tensor feats = encoder_.forward(images);
            fs.data.insert(fs.data.end(), feats.data().begin(), feats.data().end());
        }
        return fs;
    }

    UploadPayload make_upload() const {
        if (!collab_) throw ContractError("upload: requires the collaborative path");
        UploadPayload p;
        p.client_id = id_;
        p.task_index = current_task_;
        p.generator = generator_.frozen_clone();
        p.feature_set = last_feature_set_;
        return p;
    }

    FeatureSet finalize_feature_set(const SyntheticDataset& ds) {
        last_feature_set_ = construct_feature_set(ds);
        return last_feature_set_;
    }

    // Installs the personalized fused generator as the live generator.
    void install_generator(const ParameterGenerator& fused) {
        if (!collab_) throw ContractError("install_generator: requires the collaborative path");
        if (fused.out_len() != generator_.out_len() || fused.feature_dim() != generator_.feature_dim())
            throw ProtocolError("install_generator: dimension mismatch");
        generator_ = ParameterGenerator::from_tensors(
            ad::Tensor::param(tape_, fused.weight().shape(), fused.weight().data()),
            ad::Tensor::param(tape_, fused.bias().shape(), fused.bias().data()), generator_.seed());
        rebuild_optimizer();
    }

    // Freezes the anchors for the next task: the current encoder and the
    // generator as returned by the server.
    void snapshot_for_next_task() {
        encoder_prev_ = encoder_.frozen_clone();
        if (collab_) generator_prev_ = generator_.frozen_clone();
    }

    const SmallEncoder& snapshot_encoder() const { return encoder_prev_; }
    const ParameterGenerator& snapshot_generator() const { return generator_prev_; }

    // Accuracy on each task's held-out split under the current model.
    std::vector<double> evaluate(const FrozenBackbone* bb, const SyntheticDataset& ds,
                                 const std::vector<TaskSpec>& tasks, std::vector<EvalRecord>* trace = nullptr) {
        ad::NoGradScope ng(tape_);
        std::vector<double> accuracies;
        for (const TaskSpec& task : tasks) {
            EvalRecord rec;
            rec.eval_task = task.task_index;
            std::size_t correct = 0;
            for (std::size_t start = 0; start < task.test.size(); start += hp_.batch_size) {
                const std::size_t stop = std::min(task.test.size(), start + hp_.batch_size);
                std::vector<SampleRef> chunk(task.test.begin() + static_cast<std::ptrdiff_t>(start),
                                             task.test.begin() + static_cast<std::ptrdiff_t>(stop));
                auto [images, labels] = make_batch(ds, chunk);
                for (int y : labels)
                    if (!class_map_.count(static_cast<std::size_t>(y)))
                        throw ProtocolError("evaluate: class " + std::to_string(y) + " was never trained");
                ad::Tensor logits = forward_logits(bb, images);
                const std::size_t classes = head_.num_classes();
                for (std::size_t i = 0; i < chunk.size(); ++i) {
                    std::size_t best = 0;
                    for (std::size_t c = 1; c < classes; ++c)
                        if (logits.data()[i * classes + c] > logits.data()[i * classes + best]) best = c;
                    const std::size_t pred_global = inverse_map_[best];
                    rec.truth.push_back(static_cast<std::size_t>(labels[i]));
                    rec.predicted.push_back(pred_global);
                    if (pred_global == static_cast<std::size_t>(labels[i])) ++correct;
                }
            }
            rec.accuracy = task.test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(task.test.size());
            accuracies.push_back(rec.accuracy);
            if (trace) trace->push_back(std::move(rec));
        }
        return accuracies;
    }

private:
    void rebuild_optimizer() {
        std::vector<ad::Tensor> params = encoder_.parameters();
        if (collab_)
            for (auto& p : generator_.parameters()) params.push_back(p);
        for (auto& p : head_.parameters()) params.push_back(p);
        ad::AdamConfig cfg;
        cfg.lr = hp_.learning_rate;
        optimizer_ = std::make_unique<ad::Adam>(std::move(params), cfg);
    }

    std::vector<int> local_labels(const std::vector<int>& global) const {
        std::vector<int> out(global.size());
        for (std::size_t i = 0; i < global.size(); ++i) {
            auto it = class_map_.find(static_cast<std::size_t>(global[i]));
            if (it == class_map_.end())
                throw ProtocolError("client " + std::to_string(id_) + ": label " + std::to_string(global[i]) +
                                    " outside the class map");
            out[i] = it->second;
        }
        return out;
    }

    ad::Tensor forward_logits(const FrozenBackbone* bb, const ad::Tensor& images) {
        ad::Tensor feats = encoder_.forward(images);
        if (!collab_) return head_.forward(feats);
        if (bb == nullptr) throw ContractError("client: collaborative path needs a backbone");
        ad::Tensor lora = generator_.forward(feats);
        ad::Tensor rep = forward_adapted(*bb, images, lora);
        return head_.forward(rep);
    }

    int id_;
    HyperParams hp_;
    bool collab_;
    ad::Tape tape_;
    Rng rng_;
    std::uint64_t seed_;
    SmallEncoder encoder_;
    ParameterGenerator generator_;
    ClassifierHead head_;
    SmallEncoder encoder_prev_;
    ParameterGenerator generator_prev_;
    ReplayBuffer buffer_;
    std::map<std::size_t, int> class_map_;
    std::vector<std::size_t> inverse_map_;
    std::unique_ptr<ad::Adam> optimizer_;
    std::size_t current_task_ = 0;
    FeatureSet last_feature_set_;
};

}  // namespace fedlora
