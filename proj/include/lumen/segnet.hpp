#pragma once

// Miniature encoder-decoder segmentation net with skip connections,
// widths (8,16,32), 4-class per-pixel output (bg/TL/FL/FLT). Trained on
// real phantoms only; used to probe whether synthetic images carry
// detectable class structures.

#include <array>
#include <map>
#include <sstream>
#include <vector>

#include "lumen/denoiser.hpp"  // build_input_planes
#include "lumen/metrics.hpp"
#include "lumen/nn.hpp"
#include "lumen/parallel.hpp"
#include "lumen/phantom.hpp"

namespace lumen {

inline constexpr int kSegClasses = 4;

template <typename T>
struct SegParams {
    Tensor<T> e1w, e1b;  // 6 -> 8
    Tensor<T> e2w, e2b;  // 8 -> 16
    Tensor<T> bw, bb;    // 16 -> 32
    Tensor<T> d2w, d2b;  // 48 -> 16
    Tensor<T> d1w, d1b;  // 24 -> 8
    Tensor<T> hw, hb;    // 8 -> 4

    std::vector<Tensor<T>*> tensors() {
        return {&e1w, &e1b, &e2w, &e2b, &bw, &bb, &d2w, &d2b, &d1w, &d1b, &hw, &hb};
    }
};

struct SegTrainConfig {
    int epochs = 10;
    int batch_size = 8;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

namespace detail {

template <typename T>
struct SegCache {
    Tensor<T> planes;
    Tensor<T> a1, e1, p1;
    Tensor<T> a2, e2, p2;
    Tensor<T> ab, hb;
    Tensor<T> u2, cat2, a_d2, d2;
    Tensor<T> u1, cat1, a_d1, d1;
    Tensor<T> logits;
};

template <typename T>
void seg_forward(SegParams<T>& s, const Tensor<T>& img, SegCache<T>& c) {
    c.planes = build_input_planes(img);
    conv2d_forward(c.planes, s.e1w, s.e1b, c.a1);
    c.e1 = silu_forward(c.a1);
    c.p1 = avgpool2_forward(c.e1);
    conv2d_forward(c.p1, s.e2w, s.e2b, c.a2);
    c.e2 = silu_forward(c.a2);
    c.p2 = avgpool2_forward(c.e2);
    conv2d_forward(c.p2, s.bw, s.bb, c.ab);
    c.hb = silu_forward(c.ab);
    c.u2 = upsample2_forward(c.hb);
    c.cat2 = concat_channels(c.u2, c.e2);
    conv2d_forward(c.cat2, s.d2w, s.d2b, c.a_d2);
    c.d2 = silu_forward(c.a_d2);
    c.u1 = upsample2_forward(c.d2);
    c.cat1 = concat_channels(c.u1, c.e1);
    conv2d_forward(c.cat1, s.d1w, s.d1b, c.a_d1);
    c.d1 = silu_forward(c.a_d1);
    conv2d_forward(c.d1, s.hw, s.hb, c.logits);
}

template <typename T>
void seg_backward(SegParams<T>& s, const SegCache<T>& c, const Tensor<T>& glogits,
                  SegParams<T>& g) {
    Tensor<T> gd1(c.d1.shape);
    conv2d_backward(c.d1, s.hw, glogits, &gd1, &g.hw, &g.hb);
    Tensor<T> ga_d1 = silu_backward(c.a_d1, gd1);
    Tensor<T> gcat1(c.cat1.shape);
    conv2d_backward(c.cat1, s.d1w, ga_d1, &gcat1, &g.d1w, &g.d1b);
    Tensor<T> gu1(c.u1.shape), ge1_skip(c.e1.shape);
    split_channels(gcat1, gu1, ge1_skip);
    Tensor<T> gd2 = upsample2_backward(gu1);

    Tensor<T> ga_d2 = silu_backward(c.a_d2, gd2);
    Tensor<T> gcat2(c.cat2.shape);
    conv2d_backward(c.cat2, s.d2w, ga_d2, &gcat2, &g.d2w, &g.d2b);
    Tensor<T> gu2(c.u2.shape), ge2_skip(c.e2.shape);
    split_channels(gcat2, gu2, ge2_skip);
    Tensor<T> ghb = upsample2_backward(gu2);

    Tensor<T> gab = silu_backward(c.ab, ghb);
    Tensor<T> gp2(c.p2.shape);
    conv2d_backward(c.p2, s.bw, gab, &gp2, &g.bw, &g.bb);

    Tensor<T> ge2 = avgpool2_backward(gp2, c.e2.shape);
    for (std::size_t i = 0; i < ge2.size(); ++i) ge2[i] += ge2_skip[i];
    Tensor<T> ga2 = silu_backward(c.a2, ge2);
    Tensor<T> gp1(c.p1.shape);
    conv2d_backward(c.p1, s.e2w, ga2, &gp1, &g.e2w, &g.e2b);

    Tensor<T> ge1 = avgpool2_backward(gp1, c.e1.shape);
    for (std::size_t i = 0; i < ge1.size(); ++i) ge1[i] += ge1_skip[i];
    Tensor<T> ga1 = silu_backward(c.a1, ge1);
    conv2d_backward(c.planes, s.e1w, ga1, static_cast<Tensor<T>*>(nullptr), &g.e1w, &g.e1b);
}

}  // namespace detail

template <typename T>
SegParams<T> init_segnet(Rng rng) {
    SegParams<T> s;
    s.e1w = Tensor<T>({8, 6, 3, 3});
    s.e1b = Tensor<T>({8});
    s.e2w = Tensor<T>({16, 8, 3, 3});
    s.e2b = Tensor<T>({16});
    s.bw = Tensor<T>({32, 16, 3, 3});
    s.bb = Tensor<T>({32});
    s.d2w = Tensor<T>({16, 48, 3, 3});
    s.d2b = Tensor<T>({16});
    s.d1w = Tensor<T>({8, 24, 3, 3});
    s.d1b = Tensor<T>({8});
    s.hw = Tensor<T>({4, 8, 3, 3});
    s.hb = Tensor<T>({4});
    init_he(s.e1w, 6 * 9, rng);
    init_he(s.e2w, 8 * 9, rng);
    init_he(s.bw, 16 * 9, rng);
    init_he(s.d2w, 48 * 9, rng);
    init_he(s.d1w, 24 * 9, rng);
    init_he(s.hw, 8 * 9, rng);
    return s;
}

// per-pixel argmax labels
template <typename T>
Tensor<int> segment(const SegParams<T>& s, const Tensor<T>& image) {
    detail::SegCache<T> c;
    detail::seg_forward(const_cast<SegParams<T>&>(s), image, c);
    const std::size_t h = image.shape[0], w = image.shape[1];
    Tensor<int> mask({h, w});
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            int best = 0;
            for (int ch = 1; ch < kSegClasses; ++ch)
                if (c.logits.at(static_cast<std::size_t>(ch), i, j) >
                    c.logits.at(static_cast<std::size_t>(best), i, j))
                    best = ch;
            mask.at(i, j) = best;
        }
    return mask;
}

template <typename T>
struct SegTrainOutput {
    SegParams<T> params;
    std::vector<double> loss_curve;
    // test-split Dice per label, images lacking the label in ground truth
    // are excluded from that label's average
    std::map<int, double> test_dice;
};

template <typename T>
SegTrainOutput<T> train_segnet(const std::vector<PhantomSample>& train_split,
                               const std::vector<PhantomSample>& test_split,
                               const SegTrainConfig& cfg) {
    if (train_split.empty()) throw std::invalid_argument("train_segnet: empty train split");
    SegTrainOutput<T> out;
    out.params = init_segnet<T>(Rng(cfg.seed, 0x5E6));
    FlatAdam<T> adam;

    std::vector<Tensor<T>> images;
    std::vector<Tensor<int>> masks;
    for (const auto& ph : train_split) {
        images.push_back(ph.image.cast<T>());
        masks.push_back(ph.mask);
    }
    std::vector<std::size_t> order(images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double initial_loss = -1;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(cfg.seed, 0x5E6100u + static_cast<std::uint64_t>(epoch));
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t bn = stop - start;
            std::vector<SegParams<T>> grads(bn);
            std::vector<double> losses(bn);
            parallel_for(bn, [&](std::size_t b) {
                grads[b] = init_segnet<T>(Rng(0));
                for (auto* t : grads[b].tensors()) t->fill(T(0));
                detail::SegCache<T> cache;
                detail::seg_forward(out.params, images[order[start + b]], cache);
                Tensor<T> glogits;
                losses[b] = static_cast<double>(
                    softmax_ce_map(cache.logits, masks[order[start + b]], glogits));
                const T scale = T(1) / T(bn);
                for (auto& v : glogits.data) v *= scale;
                detail::seg_backward(out.params, cache, glogits, grads[b]);
            });
            SegParams<T> total = init_segnet<T>(Rng(0));
            for (auto* t : total.tensors()) t->fill(T(0));
            for (auto& g : grads) {
                auto tt = total.tensors();
                auto gt = g.tensors();
                for (std::size_t k = 0; k < tt.size(); ++k)
                    for (std::size_t j = 0; j < tt[k]->size(); ++j) (*tt[k])[j] += (*gt[k])[j];
            }
            adam.update(out.params.tensors(), total.tensors(), cfg.lr);
            for (double l : losses) epoch_loss += l / static_cast<double>(bn);
            ++batches;
        }
        epoch_loss /= static_cast<double>(batches);
        out.loss_curve.push_back(epoch_loss);
        if (initial_loss < 0) initial_loss = epoch_loss;
        if (epoch_loss > 10 * initial_loss)
            throw std::runtime_error("train_segnet: diverged at epoch " + std::to_string(epoch));
    }

    // held-out Dice per label
    for (int label : {kMaskTrueLumen, kMaskFalseLumen, kMaskThrombosis}) {
        double sum = 0;
        int count = 0;
        for (const auto& ph : test_split) {
            bool gt_has = false;
            for (int v : ph.mask.data)
                if (v == label) gt_has = true;
            if (!gt_has) continue;
            const auto pred = segment(out.params, ph.image.cast<T>());
            sum += dice(pred, ph.mask, label).value;
            ++count;
        }
        if (count > 0) out.test_dice[label] = sum / count;
    }
    return out;
}

// ----------------------------- utility probe -----------------------------

struct ClassProbe {
    int class_id = 0;
    int n = 0;
    std::array<double, 4> label_detect_frac{};  // index = label
    double consistent_frac = 0;  // required labels found (class 5: none found)
};

struct UtilityReport {
    std::vector<ClassProbe> per_class;  // classes 1..5 in order
    int min_pixels = 25;

    std::string to_csv() const {
        std::ostringstream os;
        os << "class,n,frac_tl,frac_fl,frac_flt,consistent\n";
        for (const auto& c : per_class)
            os << c.class_id << "," << c.n << "," << c.label_detect_frac[1] << ","
               << c.label_detect_frac[2] << "," << c.label_detect_frac[3] << ","
               << c.consistent_frac << "\n";
        return os.str();
    }
};

inline const std::vector<int>& required_labels(int class_id) {
    static const std::vector<int> req[6] = {
        {}, {kMaskTrueLumen}, {kMaskFalseLumen}, {kMaskThrombosis},
        {kMaskTrueLumen, kMaskFalseLumen}, {}};
    return req[static_cast<std::size_t>(class_id)];
}

// A structure counts as detected when at least `min_pixels` pixels carry its
// label (~0.6% of a 64x64 frame, above speckle).
template <typename T>
UtilityReport utility_probe(const SegParams<T>& seg,
                            const std::map<int, std::vector<Tensor<T>>>& synth_by_class,
                            int min_pixels = 25) {
    UtilityReport rep;
    rep.min_pixels = min_pixels;
    for (int class_id = 1; class_id <= 5; ++class_id) {
        ClassProbe probe;
        probe.class_id = class_id;
        const auto it = synth_by_class.find(class_id);
        if (it == synth_by_class.end() || it->second.empty())
            throw std::invalid_argument("utility_probe: empty batch for class " +
                                        std::to_string(class_id));
        const auto& images = it->second;
        probe.n = static_cast<int>(images.size());
        std::vector<std::array<bool, 4>> detected(images.size());
        parallel_for(images.size(), [&](std::size_t i) {
            const auto mask = segment(seg, images[i]);
            std::array<int, 4> counts{};
            for (int v : mask.data) counts[static_cast<std::size_t>(v)]++;
            for (int l = 0; l < 4; ++l) detected[i][static_cast<std::size_t>(l)] =
                counts[static_cast<std::size_t>(l)] >= min_pixels;
        });
        int consistent = 0;
        std::array<int, 4> label_counts{};
        for (const auto& d : detected) {
            for (int l = 1; l < 4; ++l)
                if (d[static_cast<std::size_t>(l)]) label_counts[static_cast<std::size_t>(l)]++;
            const auto& req = required_labels(class_id);
            if (req.empty()) {
                // class 5: consistent means nothing detected
                if (!d[1] && !d[2] && !d[3]) ++consistent;
            } else {
                bool all = true;
                for (int l : req) all = all && d[static_cast<std::size_t>(l)];
                if (all) ++consistent;
            }
        }
        for (int l = 1; l < 4; ++l)
            probe.label_detect_frac[static_cast<std::size_t>(l)] =
                static_cast<double>(label_counts[static_cast<std::size_t>(l)]) / probe.n;
        probe.consistent_frac = static_cast<double>(consistent) / probe.n;
        rep.per_class.push_back(probe);
    }
    return rep;
}

// color-coded mask overlay: green TL, red FL, blue FLT over the grayscale
template <typename T>
Tensor<double> mask_overlay(const Tensor<T>& image, const Tensor<int>& mask) {
    const std::size_t h = image.shape[0], w = image.shape[1];
    Tensor<double> rgb({3, h, w});
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const double v = static_cast<double>(image.at(i, j));
            double r = v, g = v, b = v;
            switch (mask.at(i, j)) {
                case kMaskTrueLumen: g = 0.5 + 0.5 * v; r *= 0.4; b *= 0.4; break;
                case kMaskFalseLumen: r = 0.5 + 0.5 * v; g *= 0.4; b *= 0.4; break;
                case kMaskThrombosis: b = 0.5 + 0.5 * v; r *= 0.4; g *= 0.4; break;
                default: break;
            }
            rgb.at(0, i, j) = r;
            rgb.at(1, i, j) = g;
            rgb.at(2, i, j) = b;
        }
    return rgb;
}

}  // namespace lumen
