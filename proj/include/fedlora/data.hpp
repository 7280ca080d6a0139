#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedlora/common.hpp"
#include "fedlora/rng.hpp"
#include "fedlora/tensor.hpp"

namespace fedlora {

struct DatasetConfig {
    std::size_t image_size = 16;
    std::size_t channels = 1;
    std::size_t train_per_class = 20;
    std::size_t test_per_class = 10;
    double prototype_scale = 1.0;
    double noise_scale = 1.0;

    std::size_t pixel_count() const { return image_size * image_size * channels; }
};

// Gaussian-prototype image classes. Every sample is a pure function of
// (seed, class, index, split), so generation order never affects results and
// nothing but the prototypes needs to be stored.
class SyntheticDataset {
public:
    SyntheticDataset(DatasetConfig cfg, std::size_t num_classes, std::uint64_t seed)
        : cfg_(cfg), num_classes_(num_classes), seed_(seed) {
        if (num_classes == 0) throw ConfigError("SyntheticDataset: need at least one class");
        prototypes_.resize(num_classes);
        for (std::size_t c = 0; c < num_classes; ++c) {
            Rng rng(mix_seed(seed, "proto", c));
            prototypes_[c].resize(cfg.pixel_count());
            for (auto& v : prototypes_[c]) v = cfg.prototype_scale * rng.normal();
        }
        // prototypes must be pairwise distinct
        for (std::size_t a = 0; a < num_classes; ++a)
            for (std::size_t b = a + 1; b < num_classes; ++b)
                if (prototypes_[a] == prototypes_[b])
                    throw NumericError("SyntheticDataset: duplicate class prototypes");
    }

    const DatasetConfig& config() const { return cfg_; }
    std::size_t num_classes() const { return num_classes_; }
    std::size_t pixel_count() const { return cfg_.pixel_count(); }
    std::uint64_t seed() const { return seed_; }
    const std::vector<double>& prototype(std::size_t c) const { return prototypes_.at(c); }

    std::vector<double> train_image(std::size_t cls, std::size_t index) const {
        if (index >= cfg_.train_per_class)
            throw ContractError("SyntheticDataset: train index " + std::to_string(index) + " out of range");
        return sample(cls, index, /*test=*/false);
    }

    std::vector<double> test_image(std::size_t cls, std::size_t index) const {
        if (index >= cfg_.test_per_class)
            throw ContractError("SyntheticDataset: test index " + std::to_string(index) + " out of range");
        return sample(cls, index, /*test=*/true);
    }

private:
    std::vector<double> sample(std::size_t cls, std::size_t index, bool test) const {
        if (cls >= num_classes_) throw ContractError("SyntheticDataset: class " + std::to_string(cls) + " out of range");
        Rng rng(mix_seed(seed_, test ? "test_sample" : "train_sample", cls, index));
        std::vector<double> img = prototypes_[cls];
        for (auto& v : img) v += cfg_.noise_scale * rng.normal();
        return img;
    }

    DatasetConfig cfg_;
    std::size_t num_classes_;
    std::uint64_t seed_;
    std::vector<std::vector<double>> prototypes_;
};

// Reference to one sample (class id is dataset-global).
struct SampleRef {
    std::size_t class_id = 0;
    std::size_t index = 0;
    bool test = false;

    bool operator==(const SampleRef&) const = default;
};

// One task of a client's stream: a fixed class list plus its train/test
// sample references. Task indices are 1-based; class sets are disjoint
// across a client's tasks.
struct TaskSpec {
    int client_id = 0;
    std::size_t task_index = 1;
    std::vector<std::size_t> classes;
    std::vector<SampleRef> train;
    std::vector<SampleRef> test;
};

inline std::vector<double> fetch_image(const SyntheticDataset& ds, const SampleRef& ref) {
    return ref.test ? ds.test_image(ref.class_id, ref.index) : ds.train_image(ref.class_id, ref.index);
}

// Assembles [batch, pixels] plus global labels.
inline std::pair<ad::Tensor, std::vector<int>> make_batch(const SyntheticDataset& ds,
                                                          const std::vector<SampleRef>& refs) {
    const std::size_t px = ds.pixel_count();
    std::vector<double> flat(refs.size() * px);
    std::vector<int> labels(refs.size());
    for (std::size_t i = 0; i < refs.size(); ++i) {
        auto img = fetch_image(ds, refs[i]);
        std::copy(img.begin(), img.end(), flat.begin() + static_cast<std::ptrdiff_t>(i * px));
        labels[i] = static_cast<int>(refs[i].class_id);
    }
    return {ad::Tensor::constant({refs.size(), px}, std::move(flat)), std::move(labels)};
}

}  // namespace fedlora
