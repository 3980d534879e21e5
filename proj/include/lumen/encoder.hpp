#pragma once

// Feature encoder: a small conv classifier trained to predict the phantom
// class, whose 64-dim penultimate layer is the feature map used for FID,
// t-SNE and the downstream class-accuracy checks. It stands in for a large
// pretrained feature network, which keeps the metric values internally
// comparable only.
//
//   conv(1->8) silu pool | conv(8->16) silu pool | conv(16->16) silu pool
//   flatten -> linear(64) silu  [features]  -> linear(5) logits

#include <cmath>
#include <vector>

#include "lumen/nn.hpp"
#include "lumen/parallel.hpp"
#include "lumen/rng.hpp"
#include "lumen/tensor.hpp"

namespace lumen {

inline constexpr int kFeatureDim = 64;

template <typename T>
struct FeatureEncoder {
    int image_size = 64;
    Tensor<T> c1w, c1b, c2w, c2b, c3w, c3b;
    Tensor<T> f1w, f1b, f2w, f2b;
    double held_out_accuracy = 0.0;

    std::vector<Tensor<T>*> tensors() {
        return {&c1w, &c1b, &c2w, &c2b, &c3w, &c3b, &f1w, &f1b, &f2w, &f2b};
    }
};

struct EncoderTrainConfig {
    int epochs = 24;
    int batch_size = 16;
    double lr = 1e-3;
    double noise_aug = 0.03;  // uniform noise-level augmentation ceiling
    std::uint64_t seed = 0;
    double abort_below = 0.6;  // features unusable under this accuracy
};

namespace detail {

template <typename T>
struct EncCache {
    Tensor<T> x, a1, h1, p1, a2, h2, p2, a3, h3, p3, flat, z1, hf, logits;
};

template <typename T>
void encoder_forward(FeatureEncoder<T>& e, const Tensor<T>& img, EncCache<T>& c) {
    c.x = Tensor<T>({1, img.shape[0], img.shape[1]}, img.data);
    conv2d_forward(c.x, e.c1w, e.c1b, c.a1);
    c.h1 = silu_forward(c.a1);
    c.p1 = avgpool2_forward(c.h1);
    conv2d_forward(c.p1, e.c2w, e.c2b, c.a2);
    c.h2 = silu_forward(c.a2);
    c.p2 = avgpool2_forward(c.h2);
    conv2d_forward(c.p2, e.c3w, e.c3b, c.a3);
    c.h3 = silu_forward(c.a3);
    c.p3 = avgpool2_forward(c.h3);
    c.flat = Tensor<T>({c.p3.size()}, c.p3.data);
    linear_forward(c.flat, e.f1w, e.f1b, c.z1);
    c.hf = silu_forward(c.z1);
    linear_forward(c.hf, e.f2w, e.f2b, c.logits);
}

template <typename T>
void encoder_backward(FeatureEncoder<T>& e, const EncCache<T>& c, const Tensor<T>& glogits,
                      FeatureEncoder<T>& g) {
    Tensor<T> ghf(c.hf.shape);
    linear_backward(c.hf, e.f2w, glogits, &ghf, &g.f2w, &g.f2b);
    Tensor<T> gz1 = silu_backward(c.z1, ghf);
    Tensor<T> gflat(c.flat.shape);
    linear_backward(c.flat, e.f1w, gz1, &gflat, &g.f1w, &g.f1b);
    Tensor<T> gp3(c.p3.shape, gflat.data);
    Tensor<T> gh3 = avgpool2_backward(gp3, c.h3.shape);
    Tensor<T> ga3 = silu_backward(c.a3, gh3);
    Tensor<T> gp2(c.p2.shape);
    conv2d_backward(c.p2, e.c3w, ga3, &gp2, &g.c3w, &g.c3b);
    Tensor<T> gh2 = avgpool2_backward(gp2, c.h2.shape);
    Tensor<T> ga2 = silu_backward(c.a2, gh2);
    Tensor<T> gp1(c.p1.shape);
    conv2d_backward(c.p1, e.c2w, ga2, &gp1, &g.c2w, &g.c2b);
    Tensor<T> gh1 = avgpool2_backward(gp1, c.h1.shape);
    Tensor<T> ga1 = silu_backward(c.a1, gh1);
    conv2d_backward(c.x, e.c1w, ga1, static_cast<Tensor<T>*>(nullptr), &g.c1w, &g.c1b);
}

}  // namespace detail

template <typename T>
FeatureEncoder<T> init_encoder(int image_size, Rng rng) {
    if (image_size % 8 != 0) throw std::invalid_argument("encoder: image size must be /8");
    FeatureEncoder<T> e;
    e.image_size = image_size;
    const std::size_t s8 = static_cast<std::size_t>(image_size / 8);
    e.c1w = Tensor<T>({8, 1, 3, 3});
    e.c1b = Tensor<T>({8});
    e.c2w = Tensor<T>({16, 8, 3, 3});
    e.c2b = Tensor<T>({16});
    e.c3w = Tensor<T>({16, 16, 3, 3});
    e.c3b = Tensor<T>({16});
    e.f1w = Tensor<T>({kFeatureDim, 16 * s8 * s8});
    e.f1b = Tensor<T>({kFeatureDim});
    e.f2w = Tensor<T>({5, kFeatureDim});
    e.f2b = Tensor<T>({5});
    init_he(e.c1w, 9, rng);
    init_he(e.c2w, 8 * 9, rng);
    init_he(e.c3w, 16 * 9, rng);
    init_he(e.f1w, 16 * s8 * s8, rng);
    init_he(e.f2w, kFeatureDim, rng);
    return e;
}

// 64-dim penultimate activations
template <typename T>
std::vector<double> encoder_features(const FeatureEncoder<T>& e, const Tensor<T>& img) {
    detail::EncCache<T> c;
    detail::encoder_forward(const_cast<FeatureEncoder<T>&>(e), img, c);
    std::vector<double> f(c.hf.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<double>(c.hf[i]);
    return f;
}

// predicted class id 1..5
template <typename T>
int encoder_classify(const FeatureEncoder<T>& e, const Tensor<T>& img) {
    detail::EncCache<T> c;
    detail::encoder_forward(const_cast<FeatureEncoder<T>&>(e), img, c);
    std::size_t best = 0;
    for (std::size_t i = 1; i < c.logits.size(); ++i)
        if (c.logits[i] > c.logits[best]) best = i;
    return static_cast<int>(best) + 1;
}

template <typename T>
double encoder_accuracy(const FeatureEncoder<T>& e, const std::vector<Tensor<T>>& images,
                        const std::vector<int>& labels) {
    std::vector<int> hit(images.size(), 0);
    parallel_for(images.size(), [&](std::size_t i) {
        hit[i] = encoder_classify(e, images[i]) == labels[i] ? 1 : 0;
    });
    std::size_t correct = 0;
    for (int h : hit) correct += static_cast<std::size_t>(h);
    return images.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(images.size());
}

// Trains on the train split, measures held-out accuracy, and refuses to
// return an encoder whose features would be unusable for FID.
template <typename T>
FeatureEncoder<T> train_feature_encoder(const std::vector<Tensor<T>>& train_images,
                                        const std::vector<int>& train_labels,
                                        const std::vector<Tensor<T>>& eval_images,
                                        const std::vector<int>& eval_labels,
                                        const EncoderTrainConfig& cfg) {
    if (train_images.empty() || train_images.size() != train_labels.size())
        throw std::invalid_argument("train_feature_encoder: bad training set");
    const int size = static_cast<int>(train_images[0].shape[0]);
    FeatureEncoder<T> enc = init_encoder<T>(size, Rng(cfg.seed, 0xEC0));
    FlatAdam<T> adam;

    std::vector<std::size_t> order(train_images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(cfg.seed, 0xEC100u + static_cast<std::uint64_t>(epoch));
        rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));

            // pre-draw augmentation noise sequentially, then batch in parallel
            std::vector<Tensor<T>> batch(stop - start);
            std::vector<int> targets(stop - start);
            for (std::size_t i = start; i < stop; ++i) {
                const auto& img = train_images[order[i]];
                Tensor<T> aug = img;
                const double level = rng.uniform(0.0, cfg.noise_aug);
                for (auto& v : aug.data)
                    v = static_cast<T>(
                        std::min(1.0, std::max(0.0, static_cast<double>(v) + level * rng.gaussian())));
                batch[i - start] = std::move(aug);
                targets[i - start] = train_labels[order[i]] - 1;
            }

            std::vector<FeatureEncoder<T>> grads(batch.size());
            parallel_for(batch.size(), [&](std::size_t b) {
                grads[b] = init_encoder<T>(size, Rng(0));
                for (auto* t : grads[b].tensors()) t->fill(T(0));
                detail::EncCache<T> cache;
                detail::encoder_forward(enc, batch[b], cache);
                Tensor<T> glogits;
                softmax_ce(cache.logits, targets[b], glogits);
                const T scale = T(1) / T(batch.size());
                for (auto& v : glogits.data) v *= scale;
                detail::encoder_backward(enc, cache, glogits, grads[b]);
            });
            FeatureEncoder<T> total = init_encoder<T>(size, Rng(0));
            for (auto* t : total.tensors()) t->fill(T(0));
            for (auto& g : grads) {
                auto tt = total.tensors();
                auto gt = g.tensors();
                for (std::size_t k = 0; k < tt.size(); ++k)
                    for (std::size_t j = 0; j < tt[k]->size(); ++j)
                        (*tt[k])[j] += (*gt[k])[j];
            }
            adam.update(enc.tensors(), total.tensors(), cfg.lr);
        }
    }

    enc.held_out_accuracy = encoder_accuracy(enc, eval_images, eval_labels);
    if (enc.held_out_accuracy < cfg.abort_below)
        throw std::runtime_error("train_feature_encoder: held-out accuracy " +
                                 std::to_string(enc.held_out_accuracy) +
                                 " below " + std::to_string(cfg.abort_below) +
                                 ", features unusable");
    return enc;
}

}  // namespace lumen
