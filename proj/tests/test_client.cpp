#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "fedlora/client.hpp"
#include "test_support.hpp"

using namespace fedlora;
using namespace fedlora::ad;
using fedlora::testing::micro_backbone_config;
using fedlora::testing::shared_backbone;

namespace {

struct MicroWorld {
    BackboneConfig bcfg = micro_backbone_config();
    DatasetConfig dcfg;
    EncoderConfig ecfg;
    HyperParams hp;

    MicroWorld() {
        dcfg.image_size = 8;
        dcfg.train_per_class = 16;
        dcfg.test_per_class = 8;
        dcfg.prototype_scale = 2.0;
        dcfg.noise_scale = 0.4;
        ecfg.image_size = 8;
        ecfg.feature_dim = 8;
        ecfg.mlp_hidden = 12;
        ecfg.conv_channels1 = 3;
        ecfg.conv_channels2 = 4;
        hp.learning_rate = 0.02;
        hp.stage1_epochs = 2;
        hp.stage2_epochs = 1;
        hp.batch_size = 4;
        hp.buffer_per_class = 4;
    }

    TaskSpec task(std::size_t index, std::vector<std::size_t> classes, const SyntheticDataset& ds) const {
        TaskSpec t;
        t.client_id = 0;
        t.task_index = index;
        t.classes = classes;
        for (std::size_t c : classes) {
            for (std::size_t i = 0; i < ds.config().train_per_class; ++i) t.train.push_back({c, i, false});
            for (std::size_t i = 0; i < ds.config().test_per_class; ++i) t.test.push_back({c, i, true});
        }
        return t;
    }

    Client make_client(std::uint64_t seed, bool collab = true) const {
        return Client(0, EncoderArch::kMlp, seed, ecfg, &bcfg, hp, collab);
    }
};

// train-split accuracy, computed through evaluate() by aliasing train refs
double train_accuracy(Client& c, const FrozenBackbone& bb, const SyntheticDataset& ds, const TaskSpec& task) {
    TaskSpec alias = task;
    alias.test = task.train;
    return c.evaluate(&bb, ds, {alias}).front();
}

}  // namespace

TEST_CASE("stage1: a separable 2-class micro-task reaches 90% train accuracy in one epoch") {
    MicroWorld w;
    w.dcfg.noise_scale = 0.1;  // analytically separable: prototypes ~2.0 apart per pixel, noise 0.1
    w.dcfg.train_per_class = 24;
    w.hp.stage1_epochs = 1;
    w.hp.batch_size = 2;
    w.hp.learning_rate = 0.05;
    SyntheticDataset ds(w.dcfg, 2, 7);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 7);
    Client c = w.make_client(11);
    TaskSpec t = w.task(1, {0, 1}, ds);
    c.begin_task(t);
    c.train_stage1(&bb, ds, t);
    CHECK(train_accuracy(c, bb, ds, t) >= 0.9);
}

TEST_CASE("stage1: backbone hash is untouched by training") {
    MicroWorld w;
    SyntheticDataset ds(w.dcfg, 2, 3);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    const std::string before = bb.weights_hash();
    Client c = w.make_client(1);
    TaskSpec t = w.task(1, {0, 1}, ds);
    c.begin_task(t);
    c.train_stage1(&bb, ds, t);
    CHECK(bb.weights_hash() == before);
}

TEST_CASE("stage1: overfitting one repeated batch decreases the loss") {
    MicroWorld w;
    w.hp.stage1_epochs = 10;
    w.hp.batch_size = 8;
    w.hp.learning_rate = 0.05;
    w.dcfg.train_per_class = 4;  // one batch of 8, replayed each epoch
    SyntheticDataset ds(w.dcfg, 2, 9);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(2);
    TaskSpec t = w.task(1, {0, 1}, ds);
    c.begin_task(t);
    StageLog log = c.train_stage1(&bb, ds, t);
    REQUIRE(log.batch_losses.size() == 10);
    CHECK(log.last() <= log.first());
}

TEST_CASE("stage1: labels outside the class map are rejected") {
    MicroWorld w;
    SyntheticDataset ds(w.dcfg, 3, 3);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(3);
    TaskSpec t = w.task(1, {0, 1}, ds);
    c.begin_task(t);
    TaskSpec rogue = w.task(1, {2}, ds);  // class 2 never registered
    rogue.task_index = 1;
    CHECK_THROWS_AS(c.train_stage1(&bb, ds, rogue), ProtocolError);
}

TEST_CASE("stage2: zero lambdas and self-distillation agree bit-exactly with plain replay") {
    // One stage-2 step from a state where the snapshots equal the live model:
    // the consistency terms are exactly zero, so a lambda=1 run must match a
    // plain-replay (lambda=0) run bit for bit.
    MicroWorld w;
    w.hp.batch_size = 8;  // whole buffer in one batch, one optimizer step
    w.hp.stage2_epochs = 1;
    SyntheticDataset ds(w.dcfg, 2, 13);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);

    auto prepare = [&](double le, double lw) {
        MicroWorld local = w;
        local.hp.batch_size = 8;
        local.hp.stage2_epochs = 1;
        local.hp.lambda_e = le;
        local.hp.lambda_w = lw;
        auto c = std::make_unique<Client>(0, EncoderArch::kMlp, 21, local.ecfg, &local.bcfg, local.hp, true);
        TaskSpec t = local.task(1, {0, 1}, ds);
        c->begin_task(t);
        c->train_stage1(&bb, ds, t);
        c->update_buffer(&bb, ds, t);
        c->snapshot_for_next_task();  // snapshots equal the current model
        return c;
    };

    auto replay_only = prepare(0.0, 0.0);
    auto self_distill = prepare(1.0, 1.0);

    {
        // the distillation terms themselves are exactly zero at this state
        Client& c = *self_distill;
        NoGradScope ng(c.tape());
        auto refs = c.buffer().ordered_refs();
        auto [images, labels] = make_batch(ds, refs);
        (void)labels;
        Tensor e_now = c.encoder().forward(images);
        Tensor e_prev = c.snapshot_encoder().forward(images);
        CHECK(squared_distance(e_now, e_prev).item() == 0.0);
        Tensor w_now = c.generator().forward(e_now);
        Tensor w_prev = c.snapshot_generator().forward(e_prev);
        CHECK(squared_distance(w_now, w_prev).item() == 0.0);
    }

    auto log_a = replay_only->train_stage2(&bb, ds);
    auto log_b = self_distill->train_stage2(&bb, ds);
    REQUIRE(log_a.has_value());
    REQUIRE(log_b.has_value());
    REQUIRE(log_a->batch_losses.size() == 1);
    CHECK(log_a->batch_losses == log_b->batch_losses);
    CHECK(replay_only->generator().weight().data() == self_distill->generator().weight().data());
    CHECK(replay_only->encoder().parameters()[0].data() == self_distill->encoder().parameters()[0].data());
}

TEST_CASE("stage2: skipped on an empty buffer, rejected without snapshots") {
    MicroWorld w;
    SyntheticDataset ds(w.dcfg, 2, 17);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(4);
    TaskSpec t = w.task(1, {0, 1}, ds);
    c.begin_task(t);
    CHECK_FALSE(c.train_stage2(&bb, ds).has_value());  // first task: nothing buffered
    c.train_stage1(&bb, ds, t);
    c.update_buffer(&bb, ds, t);
    CHECK_THROWS_AS(c.train_stage2(&bb, ds), ProtocolError);  // buffered but never snapshotted
}

TEST_CASE("stage2: consistency terms shrink the adapter drift") {
    MicroWorld w;
    w.hp.stage2_epochs = 4;
    SyntheticDataset ds(w.dcfg, 4, 19);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(5);
    TaskSpec t1 = w.task(1, {0, 1}, ds);
    c.begin_task(t1);
    c.train_stage1(&bb, ds, t1);
    c.update_buffer(&bb, ds, t1);
    c.snapshot_for_next_task();

    TaskSpec t2 = w.task(2, {2, 3}, ds);
    c.begin_task(t2);
    c.train_stage1(&bb, ds, t2);  // drift away from the snapshot

    auto adapter_drift = [&] {
        NoGradScope ng(c.tape());
        auto refs = c.buffer().ordered_refs();
        auto [images, labels] = make_batch(ds, refs);
        (void)labels;
        Tensor now = c.generator().forward(c.encoder().forward(images));
        Tensor then = c.snapshot_generator().forward(c.snapshot_encoder().forward(images));
        return squared_distance(now, then).item() / static_cast<double>(refs.size());
    };

    const double before = adapter_drift();
    c.train_stage2(&bb, ds);
    const double after = adapter_drift();
    CHECK(after <= before);
    CHECK(before > 0.0);
}

TEST_CASE("update_buffer: matches the brute-force bottom-M selection with deterministic ties") {
    MicroWorld w;
    SyntheticDataset ds(w.dcfg, 4, 23);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(6);
    TaskSpec t = w.task(1, {0, 1}, ds);
    c.begin_task(t);
    c.train_stage1(&bb, ds, t);

    // independent oracle: score everything, sort by (loss, index), keep M
    auto oracle = [&](std::size_t cls) {
        NoGradScope ng(c.tape());
        std::vector<std::pair<double, std::size_t>> scored;
        for (const SampleRef& r : t.train) {
            if (r.class_id != cls) continue;
            auto [img, labels] = make_batch(ds, {r});
            Tensor feats = c.encoder().forward(img);
            Tensor rep = forward_adapted(bb, img, c.generator().forward(feats));
            Tensor losses = cross_entropy_logits(c.head().forward(rep), {c.class_map().at(cls)});
            scored.push_back({losses.data()[0], r.index});
        }
        std::sort(scored.begin(), scored.end());
        scored.resize(std::min(scored.size(), w.hp.buffer_per_class));
        std::vector<std::size_t> idx;
        for (auto& [s, i] : scored) idx.push_back(i);
        return idx;
    };

    c.update_buffer(&bb, ds, t);
    for (std::size_t cls : t.classes) {
        auto expect = oracle(cls);
        const auto& got = c.buffer().entries(cls);
        REQUIRE(got.size() == expect.size());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].ref.index == expect[i]);
    }

    SUBCASE("class smaller than M keeps every sample") {
        MicroWorld w2;
        w2.hp.buffer_per_class = 50;  // larger than the class
        SyntheticDataset ds2(w2.dcfg, 2, 29);
        Client c2(0, EncoderArch::kMlp, 31, w2.ecfg, &w2.bcfg, w2.hp, true);
        TaskSpec t2 = w2.task(1, {0, 1}, ds2);
        c2.begin_task(t2);
        c2.train_stage1(&bb, ds2, t2);
        c2.update_buffer(&bb, ds2, t2);
        CHECK(c2.buffer().entries(0).size() == w2.dcfg.train_per_class);
        CHECK(c2.buffer().entries(1).size() == w2.dcfg.train_per_class);
    }

    SUBCASE("exact ties break by ascending dataset index") {
        MicroWorld w3;
        w3.dcfg.noise_scale = 0.0;  // every sample equals its prototype: all losses tie
        w3.hp.buffer_per_class = 3;
        SyntheticDataset ds3(w3.dcfg, 2, 31);
        Client c3(0, EncoderArch::kMlp, 33, w3.ecfg, &w3.bcfg, w3.hp, true);
        TaskSpec t3 = w3.task(1, {0, 1}, ds3);
        c3.begin_task(t3);
        c3.train_stage1(&bb, ds3, t3);
        c3.update_buffer(&bb, ds3, t3);
        for (std::size_t cls : {0u, 1u}) {
            const auto& got = c3.buffer().entries(cls);
            REQUIRE(got.size() == 3);
            CHECK(got[0].ref.index == 0);
            CHECK(got[1].ref.index == 1);
            CHECK(got[2].ref.index == 2);
        }
    }
}

TEST_CASE("update_buffer: earlier classes stay untouched and balanced") {
    MicroWorld w;
    SyntheticDataset ds(w.dcfg, 4, 37);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(7);
    TaskSpec t1 = w.task(1, {0, 1}, ds);
    c.begin_task(t1);
    c.train_stage1(&bb, ds, t1);
    c.update_buffer(&bb, ds, t1);
    auto class0_before = c.buffer().entries(0);

    c.snapshot_for_next_task();
    TaskSpec t2 = w.task(2, {2, 3}, ds);
    c.begin_task(t2);
    c.train_stage1(&bb, ds, t2);
    c.update_buffer(&bb, ds, t2);

    REQUIRE(c.buffer().entries(0).size() == class0_before.size());
    for (std::size_t i = 0; i < class0_before.size(); ++i) {
        CHECK(c.buffer().entries(0)[i].ref.index == class0_before[i].ref.index);
        CHECK(c.buffer().entries(0)[i].score == class0_before[i].score);
    }
    for (std::size_t cls : {0u, 1u, 2u, 3u}) CHECK(c.buffer().entries(cls).size() == w.hp.buffer_per_class);
}

TEST_CASE("feature set: definitional properties") {
    MicroWorld w;
    SyntheticDataset ds(w.dcfg, 2, 41);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(8);
    TaskSpec t = w.task(1, {0, 1}, ds);
    c.begin_task(t);
    c.train_stage1(&bb, ds, t);
    c.update_buffer(&bb, ds, t);

    FeatureSet fs = c.construct_feature_set(ds);
    CHECK(fs.rows == c.buffer().size());
    CHECK(fs.cols == w.ecfg.feature_dim);

    FeatureSet again = c.construct_feature_set(ds);
    CHECK(fs.data == again.data);  // purity

    // first row equals encode(theta, x) for the first buffered sample
    auto refs = c.buffer().ordered_refs();
    NoGradScope ng(c.tape());
    auto [img, labels] = make_batch(ds, {refs[0]});
    (void)labels;
    Tensor e = c.encoder().forward(img);
    for (std::size_t j = 0; j < fs.cols; ++j) CHECK(fs.data[j] == e.data()[j]);
}

TEST_CASE("feature set: empty buffer yields an empty set") {
    MicroWorld w;
    SyntheticDataset ds(w.dcfg, 2, 43);
    Client c = w.make_client(9);
    TaskSpec t = w.task(1, {0, 1}, ds);
    c.begin_task(t);
    FeatureSet fs = c.construct_feature_set(ds);
    CHECK(fs.rows == 0);
    CHECK(fs.data.empty());
}

TEST_CASE("snapshots: frozen copies with the server-returned generator") {
    MicroWorld w;
    SyntheticDataset ds(w.dcfg, 4, 47);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(10);
    TaskSpec t1 = w.task(1, {0, 1}, ds);
    c.begin_task(t1);
    c.train_stage1(&bb, ds, t1);

    // server returns some fused generator; install then snapshot
    Tape side;
    ParameterGenerator fused = ParameterGenerator::create(w.ecfg.feature_dim, w.bcfg.lora_len(), 999, side);
    c.install_generator(fused);
    c.snapshot_for_next_task();
    CHECK(c.snapshot_generator().weight().data() == fused.weight().data());
    CHECK(c.snapshot_generator().bias().data() == fused.bias().data());

    auto enc_snap_before = c.snapshot_encoder().parameters()[0].data();
    const std::string snap_sig = sha256_hex(reinterpret_cast<const char*>(enc_snap_before.data()),
                                            enc_snap_before.size() * sizeof(double));

    TaskSpec t2 = w.task(2, {2, 3}, ds);
    c.begin_task(t2);
    c.train_stage1(&bb, ds, t2);
    CHECK(c.snapshot_encoder().parameters()[0].data() == enc_snap_before);  // training never touches snapshots

    c.snapshot_for_next_task();
    auto enc_snap_after = c.snapshot_encoder().parameters()[0].data();
    const std::string snap_sig2 = sha256_hex(reinterpret_cast<const char*>(enc_snap_after.data()),
                                             enc_snap_after.size() * sizeof(double));
    CHECK(snap_sig != snap_sig2);  // a trained task produces a different snapshot
    side.clear();
}

TEST_CASE("upload payload: round trip, determinism and privacy surface") {
    MicroWorld w;
    SyntheticDataset ds(w.dcfg, 2, 53);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);

    auto run_to_upload = [&](std::uint64_t seed) {
        Client c(0, EncoderArch::kMlp, seed, w.ecfg, &w.bcfg, w.hp, true);
        TaskSpec t = w.task(1, {0, 1}, ds);
        c.begin_task(t);
        c.train_stage1(&bb, ds, t);
        c.update_buffer(&bb, ds, t);
        c.finalize_feature_set(ds);
        return c.make_upload();
    };

    UploadPayload up = run_to_upload(61);
    auto bytes = up.serialize();

    SUBCASE("byte-identical payloads for identical seeds") {
        UploadPayload up2 = run_to_upload(61);
        CHECK(bytes == up2.serialize());
        UploadPayload up3 = run_to_upload(62);
        CHECK(bytes != up3.serialize());
    }

    SUBCASE("round trip") {
        UploadPayload back = UploadPayload::deserialize(bytes);
        CHECK(back.client_id == up.client_id);
        CHECK(back.task_index == up.task_index);
        CHECK(back.generator.weight().data() == up.generator.weight().data());
        CHECK(back.feature_set.data == up.feature_set.data);
    }

    SUBCASE("payload carries only the envelope, the generator and the features") {
        const std::uint64_t hlen = read_u64le(&bytes[0]);
        auto env = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + static_cast<std::ptrdiff_t>(8 + hlen));
        std::set<std::string> keys;
        for (auto it = env.begin(); it != env.end(); ++it) keys.insert(it.key());
        CHECK(keys == std::set<std::string>{"client_id", "task_index", "generator", "feature_set"});
        std::set<std::string> gen_keys;
        for (auto it = env["generator"].begin(); it != env["generator"].end(); ++it) gen_keys.insert(it.key());
        CHECK(gen_keys == std::set<std::string>{"feature_dim", "out_len", "seed"});
        std::set<std::string> fs_keys;
        for (auto it = env["feature_set"].begin(); it != env["feature_set"].end(); ++it) fs_keys.insert(it.key());
        CHECK(fs_keys == std::set<std::string>{"rows", "cols"});

        // byte accounting proves no hidden fields: envelope + generator blobs + feature blob
        const std::size_t expected = 8 + hlen + ad::tensor_blob_size(up.generator.weight().shape()) +
                                     ad::tensor_blob_size(up.generator.bias().shape()) +
                                     ad::tensor_blob_size({up.feature_set.rows, up.feature_set.cols});
        CHECK(bytes.size() == expected);

        // the upload must be far smaller than any image or head payload would be
        CHECK(env["feature_set"]["cols"] == w.ecfg.feature_dim);
    }
}

TEST_CASE("evaluate: chance level for an untrained model on a balanced 8-class task") {
    MicroWorld w;
    w.dcfg.test_per_class = 40;
    w.dcfg.noise_scale = 6.0;  // noise-dominated samples: predictions are per-sample coin flips
    SyntheticDataset ds(w.dcfg, 8, 59);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(12);
    TaskSpec t = w.task(1, {0, 1, 2, 3, 4, 5, 6, 7}, ds);
    c.begin_task(t);  // head initialized, never trained
    double acc = c.evaluate(&bb, ds, {t}).front();
    CHECK(std::abs(acc - 0.125) <= 0.1);
}

TEST_CASE("evaluate: a 4-sample task can be memorized to accuracy 1.0") {
    MicroWorld w;
    w.dcfg.train_per_class = 2;
    w.hp.stage1_epochs = 60;
    w.hp.batch_size = 4;
    w.hp.learning_rate = 0.05;
    SyntheticDataset ds(w.dcfg, 2, 61);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(13);
    TaskSpec t = w.task(1, {0, 1}, ds);
    c.begin_task(t);
    c.train_stage1(&bb, ds, t);
    CHECK(train_accuracy(c, bb, ds, t) == 1.0);
}

TEST_CASE("evaluate: one accuracy per task seen, unseen test classes rejected") {
    MicroWorld w;
    SyntheticDataset ds(w.dcfg, 4, 67);
    const FrozenBackbone& bb = shared_backbone(w.bcfg, 5);
    Client c = w.make_client(14);
    TaskSpec t1 = w.task(1, {0, 1}, ds);
    c.begin_task(t1);
    c.train_stage1(&bb, ds, t1);
    CHECK(c.evaluate(&bb, ds, {t1}).size() == 1);
    TaskSpec t2 = w.task(2, {2, 3}, ds);
    CHECK_THROWS_AS(c.evaluate(&bb, ds, {t1, t2}), ProtocolError);
    c.begin_task(t2);
    c.train_stage1(&bb, ds, t2);
    CHECK(c.evaluate(&bb, ds, {t1, t2}).size() == 2);
}
