#pragma once

// Procedural CTA-slice phantoms with ground-truth lumen masks, plus the
// five-class dataset builder. A slice shows an axial body cross-section:
// air background, soft-tissue body with a brighter outline ring, a spine
// blob, and (classes 1-4) a contrast-bright aorta. The dissection geometry
// per class:
//   1  true lumen only          - small bright disc
//   2  false lumen only         - larger bright crescent
//   3  false lumen thrombosis   - bright lumen with a dim thrombus lens
//                                 (thrombus pixels always inside the lumen
//                                  ellipse, remaining lumen keeps label 2)
//   4  true + false lumen       - ellipse split by a dark intimal flap,
//                                 smaller anterior side is the true lumen
//   5  no dissection structures - body and spine only
// Mask labels: 0 background, 1 TL, 2 FL, 3 FLT. Geometry is anchored to a
// canonical anatomy with per-sample jitter so class layouts stay learnable
// at desk scale.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lumen/rng.hpp"
#include "lumen/tensor.hpp"

namespace lumen {

struct PhantomSample {
    Tensor<double> image;  // HxW in [0,1]; cast at the training boundary
    Tensor<int> mask;      // HxW labels {0,1,2,3}
    int class_id = 0;      // 1..5
    std::uint64_t seed = 0;
};

inline constexpr int kMaskBackground = 0;
inline constexpr int kMaskTrueLumen = 1;
inline constexpr int kMaskFalseLumen = 2;
inline constexpr int kMaskThrombosis = 3;

// conditioning-token id for a class; token 0 is reserved for the
// null/unconditional token
inline int class_token(int class_id) {
    if (class_id < 1 || class_id > 5)
        throw std::invalid_argument("class_token: class_id must be in 1..5");
    return class_id;
}

inline constexpr int kNullToken = 0;
inline constexpr int kNumClasses = 5;
inline constexpr int kNumTokens = 6;  // null + 5 classes

namespace detail {

struct Ellipse {
    double cy, cx, ry, rx;
    bool contains(double y, double x) const {
        const double dy = (y - cy) / ry;
        const double dx = (x - cx) / rx;
        return dy * dy + dx * dx <= 1.0;
    }
};

struct PhantomGeometry {
    Ellipse body, body_inner, spine;
    Ellipse aorta;       // classes 1-4
    Ellipse bite;        // classes 2,3: crescent / thrombus carving disc
    double flap_nx = 0;  // class 4 flap normal (unit), offset, half-width
    double flap_ny = 0;
    double flap_offset = 0;
    double flap_halfw = 0;
    bool has_aorta = false;
};

// one 4-connected component per lumen label, required for every mask
inline bool label_connected(const Tensor<int>& mask, int label) {
    const int h = static_cast<int>(mask.shape[0]);
    const int w = static_cast<int>(mask.shape[1]);
    std::vector<char> seen(static_cast<std::size_t>(h * w), 0);
    int found = -1;
    for (int i = 0; i < h * w && found < 0; ++i)
        if (mask.data[static_cast<std::size_t>(i)] == label) found = i;
    if (found < 0) return true;  // absent label is vacuously fine
    std::vector<int> stack{found};
    seen[static_cast<std::size_t>(found)] = 1;
    std::size_t reached = 0;
    while (!stack.empty()) {
        const int idx = stack.back();
        stack.pop_back();
        ++reached;
        const int y = idx / w, x = idx % w;
        const int dy[4] = {1, -1, 0, 0}, dx[4] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
            const int ny = y + dy[k], nx = x + dx[k];
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const int nidx = ny * w + nx;
            if (!seen[static_cast<std::size_t>(nidx)] &&
                mask.data[static_cast<std::size_t>(nidx)] == label) {
                seen[static_cast<std::size_t>(nidx)] = 1;
                stack.push_back(nidx);
            }
        }
    }
    std::size_t total = 0;
    for (int v : mask.data)
        if (v == label) ++total;
    return reached == total;
}

}  // namespace detail

// Deterministic per (seed, class); the image gets additive Gaussian noise,
// the mask comes from exact geometry.
inline PhantomSample gen_phantom(std::uint64_t seed, int class_id, int size = 64) {
    if (class_id < 1 || class_id > 5)
        throw std::invalid_argument("gen_phantom: class_id must be in 1..5");
    if (size < 32)
        throw std::invalid_argument("gen_phantom: size must be >= 32, geometry degenerates");

    Rng rng(seed, 0xF0A0u + static_cast<std::uint64_t>(class_id));
    const double S = static_cast<double>(size);

    detail::PhantomGeometry g;
    g.body = {0.52 * S + rng.uniform(-0.015, 0.015) * S,
              0.50 * S + rng.uniform(-0.015, 0.015) * S,
              0.36 * S + rng.uniform(-0.02, 0.02) * S,
              0.42 * S + rng.uniform(-0.02, 0.02) * S};
    const double rim = 0.035 * S;
    g.body_inner = {g.body.cy, g.body.cx, g.body.ry - rim, g.body.rx - rim};
    g.spine = {0.72 * S + rng.uniform(-0.01, 0.01) * S,
               0.54 * S + rng.uniform(-0.01, 0.01) * S,
               0.065 * S, 0.085 * S};

    const double aorta_cy = 0.52 * S + rng.uniform(-0.03, 0.03) * S;
    const double aorta_cx = 0.34 * S + rng.uniform(-0.03, 0.03) * S;

    if (class_id == 1) {
        const double r = rng.uniform(0.085, 0.115) * S;
        g.aorta = {aorta_cy, aorta_cx, r * rng.uniform(0.9, 1.1), r};
        g.has_aorta = true;
    } else if (class_id == 2 || class_id == 3) {
        const double r = rng.uniform(0.14, 0.18) * S;
        g.aorta = {aorta_cy, aorta_cx, r * rng.uniform(0.85, 1.1), r};
        g.has_aorta = true;
        const double rmin = std::min(g.aorta.ry, g.aorta.rx);
        const double phi = rng.uniform(-0.7, 0.7);  // bite direction, medial-ish
        double off, br;
        if (class_id == 2) {
            // crescent: the bite crosses the lumen boundary
            off = rng.uniform(0.5, 0.7) * rmin;
            br = rng.uniform(0.55, 0.7) * rmin;
        } else {
            // thrombus lens stays strictly interior, enclosed by flowing lumen
            off = rng.uniform(0.20, 0.38) * rmin;
            br = rng.uniform(0.35, 0.50) * rmin;
        }
        g.bite = {g.aorta.cy + off * std::sin(phi), g.aorta.cx + off * std::cos(phi), br, br};
    } else if (class_id == 4) {
        const double r = rng.uniform(0.13, 0.17) * S;
        g.aorta = {aorta_cy, aorta_cx, r * rng.uniform(0.9, 1.1), r};
        g.has_aorta = true;
        const double theta = rng.uniform(-0.45, 0.45);  // flap tilt from horizontal
        // normal points anterior (up); the smaller cap above the flap is TL
        g.flap_nx = std::sin(theta);
        g.flap_ny = -std::cos(theta);
        g.flap_offset = rng.uniform(0.12, 0.30) * std::min(g.aorta.ry, g.aorta.rx);
        g.flap_halfw = std::max(0.8, 0.014 * S);
    }

    // intensities
    const double v_air = 0.03;
    const double v_tissue = 0.18 + rng.uniform(-0.02, 0.02);
    const double v_rim = 0.32 + rng.uniform(-0.02, 0.02);
    const double v_spine = 0.55 + rng.uniform(-0.03, 0.03);
    const double v_lumen = 0.85 + rng.uniform(-0.04, 0.04);  // TL == FL, contrast-bright
    const double v_flt = 0.45 + rng.uniform(-0.03, 0.03);
    const double v_flap = 0.12;

    PhantomSample out;
    out.class_id = class_id;
    out.seed = seed;
    out.image = Tensor<double>({static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
    out.mask = Tensor<int>({static_cast<std::size_t>(size), static_cast<std::size_t>(size)});

    // Coarse rasterization can erase a label or pinch a lumen into two
    // pieces (thin crescent tips, sliver caps). Retry with gentler geometry
    // until every required label exists and is connected.
    double flap_offset = g.flap_offset;
    for (int attempt = 0; attempt < 10; ++attempt) {
        int count_tl = 0, count_fl = 0, count_flt = 0;
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double py = y + 0.5, px = x + 0.5;
                double v = v_air;
                int label = kMaskBackground;
                if (g.body.contains(py, px)) v = g.body_inner.contains(py, px) ? v_tissue : v_rim;
                if (g.spine.contains(py, px)) v = v_spine;
                if (g.has_aorta && g.aorta.contains(py, px)) {
                    if (class_id == 1) {
                        v = v_lumen;
                        label = kMaskTrueLumen;
                    } else if (class_id == 2) {
                        if (!g.bite.contains(py, px)) {  // crescent
                            v = v_lumen;
                            label = kMaskFalseLumen;
                        }
                    } else if (class_id == 3) {
                        if (g.bite.contains(py, px)) {  // thrombus lens inside the lumen
                            v = v_flt;
                            label = kMaskThrombosis;
                        } else {
                            v = v_lumen;
                            label = kMaskFalseLumen;
                        }
                    } else {  // class 4
                        const double d = g.flap_nx * (px - g.aorta.cx) + g.flap_ny * (py - g.aorta.cy);
                        if (std::abs(d - flap_offset) <= g.flap_halfw) {
                            v = v_flap;  // intimal flap, background label
                        } else if (d > flap_offset) {
                            v = v_lumen;
                            label = kMaskTrueLumen;
                        } else {
                            v = v_lumen;
                            label = kMaskFalseLumen;
                        }
                    }
                }
                out.image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = v;
                out.mask.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = label;
                if (label == kMaskTrueLumen) ++count_tl;
                if (label == kMaskFalseLumen) ++count_fl;
                if (label == kMaskThrombosis) ++count_flt;
            }
        }
        bool ok = (class_id == 1 && count_tl > 0) ||
                  (class_id == 2 && count_fl > 0) ||
                  (class_id == 3 && count_fl > 0 && count_flt > 0) ||
                  (class_id == 4 && count_tl > 0 && count_fl > 0) ||
                  class_id == 5;
        if (ok)
            for (int label : {kMaskTrueLumen, kMaskFalseLumen, kMaskThrombosis})
                ok = ok && detail::label_connected(out.mask, label);
        if (ok) break;
        if (class_id == 4) flap_offset *= 0.6;
        if (class_id == 3) {
            // pull the lens toward the center and shrink it a touch
            g.bite = {0.7 * g.bite.cy + 0.3 * g.aorta.cy, 0.7 * g.bite.cx + 0.3 * g.aorta.cx,
                      g.bite.ry * 0.9, g.bite.rx * 0.9};
        }
        if (class_id == 2) g.bite = {g.bite.cy, g.bite.cx, g.bite.ry * 0.85, g.bite.rx * 0.85};
    }

    // acquisition noise on the image only
    for (auto& v : out.image.data) {
        v += 0.02 * rng.gaussian();
        v = std::min(1.0, std::max(0.0, v));
    }
    return out;
}

// ----------------------------- dataset -----------------------------

struct DatasetConfig {
    int total = 200;
    int size = 64;
    std::uint64_t seed = 0;
    int min_per_class = 20;
};

struct ManifestRow {
    std::uint64_t seed;
    int class_id;
    std::string split;  // train | val | test
};

struct DatasetSplit {
    std::vector<PhantomSample> train, val, test;
    std::map<int, int> per_class_counts;
    std::vector<ManifestRow> manifest;
    int size = 64;
};

// class frequencies of the modeled corpus; heavily imbalanced on purpose
inline const std::array<double, 5>& class_proportions() {
    static const std::array<double, 5> p = {501.0, 387.0, 121.0, 13544.0, 3582.0};
    return p;
}

inline std::array<int, 5> class_counts_for_total(int total, int min_per_class) {
    const auto& p = class_proportions();
    const double sum = 501.0 + 387.0 + 121.0 + 13544.0 + 3582.0;
    std::array<int, 5> counts{};
    int assigned = 0;
    for (int k = 0; k < 5; ++k) {
        counts[k] = std::max(min_per_class, static_cast<int>(std::lround(total * p[k] / sum)));
        assigned += counts[k];
    }
    // keep the grand total exact by adjusting the largest class
    int largest = 0;
    for (int k = 1; k < 5; ++k)
        if (counts[k] > counts[largest]) largest = k;
    counts[largest] += total - assigned;
    if (counts[largest] < min_per_class)
        throw std::invalid_argument("class_counts_for_total: proportions leave a class empty");
    return counts;
}

// deterministic per-sample seed; distinct by construction for one build
inline std::uint64_t sample_seed(std::uint64_t dataset_seed, int global_index) {
    return dataset_seed * 1000003ull + static_cast<std::uint64_t>(global_index);
}

inline DatasetSplit build_dataset(const DatasetConfig& cfg) {
    if (cfg.total < 100) throw std::invalid_argument("build_dataset: total must be >= 100");
    const auto counts = class_counts_for_total(cfg.total, cfg.min_per_class);

    DatasetSplit ds;
    ds.size = cfg.size;
    int global_index = 0;
    for (int k = 0; k < 5; ++k) {
        const int class_id = k + 1;
        const int n = counts[k];
        ds.per_class_counts[class_id] = n;
        const int n_train = static_cast<int>(std::lround(0.8 * n));
        const int n_val = static_cast<int>(std::lround(0.1 * n));
        for (int i = 0; i < n; ++i, ++global_index) {
            const std::uint64_t s = sample_seed(cfg.seed, global_index);
            PhantomSample ph = gen_phantom(s, class_id, cfg.size);
            const char* split = (i < n_train) ? "train" : (i < n_train + n_val) ? "val" : "test";
            ds.manifest.push_back({s, class_id, split});
            if (i < n_train)
                ds.train.push_back(std::move(ph));
            else if (i < n_train + n_val)
                ds.val.push_back(std::move(ph));
            else
                ds.test.push_back(std::move(ph));
        }
    }
    return ds;
}

inline std::string manifest_to_text(const DatasetSplit& ds) {
    std::ostringstream os;
    os << "# seed,class,split\n";
    os << "# size=" << ds.size << "\n";
    for (const auto& row : ds.manifest)
        os << row.seed << "," << row.class_id << "," << row.split << "\n";
    return os.str();
}

// Rebuild samples from a manifest, restricted to the named splits. This is
// the only dataset entry point the pipeline uses, so a subcommand physically
// cannot touch a split it did not declare.
inline DatasetSplit dataset_from_manifest(const std::string& text,
                                          const std::vector<std::string>& allowed_splits) {
    DatasetSplit ds;
    std::istringstream is(text);
    std::string line;
    auto allowed = [&](const std::string& s) {
        return std::find(allowed_splits.begin(), allowed_splits.end(), s) != allowed_splits.end();
    };
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find("size=");
            if (eq != std::string::npos) ds.size = std::stoi(line.substr(eq + 5));
            continue;
        }
        std::istringstream ls(line);
        std::string seed_s, class_s, split_s;
        if (!std::getline(ls, seed_s, ',') || !std::getline(ls, class_s, ',') ||
            !std::getline(ls, split_s))
            throw std::runtime_error("dataset_from_manifest: malformed line: " + line);
        ManifestRow row{std::stoull(seed_s), std::stoi(class_s), split_s};
        ds.manifest.push_back(row);
        ds.per_class_counts[row.class_id] += 1;
        if (!allowed(row.split)) continue;
        PhantomSample ph = gen_phantom(row.seed, row.class_id, ds.size);
        if (row.split == "train")
            ds.train.push_back(std::move(ph));
        else if (row.split == "val")
            ds.val.push_back(std::move(ph));
        else if (row.split == "test")
            ds.test.push_back(std::move(ph));
        else
            throw std::runtime_error("dataset_from_manifest: unknown split: " + row.split);
    }
    return ds;
}

}  // namespace lumen
