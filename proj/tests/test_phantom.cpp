#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <deque>
#include <set>
#include <vector>

#include "lumen/phantom.hpp"

using namespace lumen;

namespace {

std::array<int, 4> label_counts(const Tensor<int>& mask) {
    std::array<int, 4> c{};
    for (int v : mask.data) c[static_cast<std::size_t>(v)]++;
    return c;
}

// 4-connectivity component count for one label
int component_count(const Tensor<int>& mask, int label) {
    const int h = static_cast<int>(mask.shape[0]);
    const int w = static_cast<int>(mask.shape[1]);
    std::vector<char> seen(static_cast<std::size_t>(h * w), 0);
    int comps = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t idx = static_cast<std::size_t>(y * w + x);
            if (seen[idx] || mask.data[idx] != label) continue;
            ++comps;
            std::deque<std::pair<int, int>> q{{y, x}};
            seen[idx] = 1;
            while (!q.empty()) {
                auto [cy, cx] = q.front();
                q.pop_front();
                const int dy[4] = {1, -1, 0, 0};
                const int dx[4] = {0, 0, 1, -1};
                for (int k = 0; k < 4; ++k) {
                    const int ny = cy + dy[k], nx = cx + dx[k];
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    const std::size_t nidx = static_cast<std::size_t>(ny * w + nx);
                    if (!seen[nidx] && mask.data[nidx] == label) {
                        seen[nidx] = 1;
                        q.emplace_back(ny, nx);
                    }
                }
            }
        }
    }
    return comps;
}

// Andrew monotone chain; returns hull vertices counter-clockwise
using Pt = std::pair<double, double>;

double cross(const Pt& o, const Pt& a, const Pt& b) {
    return (a.first - o.first) * (b.second - o.second) -
           (a.second - o.second) * (b.first - o.first);
}

std::vector<Pt> convex_hull(std::vector<Pt> pts) {
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    const std::size_t n = pts.size();
    if (n < 3) return pts;
    std::vector<Pt> hull(2 * n);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    const std::size_t lower = k + 1;
    for (std::size_t i = n - 1; i-- > 0;) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

bool inside_hull(const std::vector<Pt>& hull, const Pt& p, double eps = 1e-9) {
    if (hull.size() < 3) return false;
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const Pt& a = hull[i];
        const Pt& b = hull[(i + 1) % hull.size()];
        if (cross(a, b, p) < -eps) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("gen_phantom: class 5 carries only background labels") {
    auto ph = gen_phantom(0, 5, 64);
    auto c = label_counts(ph.mask);
    REQUIRE(c[1] == 0);
    REQUIRE(c[2] == 0);
    REQUIRE(c[3] == 0);
}

TEST_CASE("gen_phantom: class 4 has TL and FL, never FLT") {
    for (std::uint64_t k : {1ull, 7ull, 23ull, 512ull}) {
        auto ph = gen_phantom(k, 4, 64);
        auto c = label_counts(ph.mask);
        REQUIRE(c[1] > 0);
        REQUIRE(c[2] > 0);
        REQUIRE(c[3] == 0);
    }
}

TEST_CASE("gen_phantom: thrombus pixels lie inside the lumen hull") {
    // brute force: convex hull of FL pixels must contain every FLT pixel
    for (std::uint64_t k : {3ull, 11ull, 77ull, 1009ull, 4242ull}) {
        auto ph = gen_phantom(k, 3, 64);
        std::vector<Pt> fl;
        std::vector<Pt> flt;
        for (std::size_t y = 0; y < ph.mask.shape[0]; ++y)
            for (std::size_t x = 0; x < ph.mask.shape[1]; ++x) {
                const int v = ph.mask.at(y, x);
                if (v == kMaskFalseLumen) fl.emplace_back(double(x), double(y));
                if (v == kMaskThrombosis) flt.emplace_back(double(x), double(y));
            }
        REQUIRE(!fl.empty());
        REQUIRE(!flt.empty());
        auto hull = convex_hull(fl);
        for (const auto& p : flt) {
            INFO("seed " << k << " flt pixel (" << p.first << "," << p.second << ")");
            REQUIRE(inside_hull(hull, p, 1e-9));
        }
    }
}

TEST_CASE("gen_phantom: determinism and argument validation") {
    auto a = gen_phantom(12345, 2, 64);
    auto b = gen_phantom(12345, 2, 64);
    REQUIRE(a.image.data == b.image.data);
    REQUIRE(a.mask.data == b.mask.data);
    REQUIRE_THROWS_AS(gen_phantom(1, 0, 64), std::invalid_argument);
    REQUIRE_THROWS_AS(gen_phantom(1, 6, 64), std::invalid_argument);
    REQUIRE_THROWS_AS(gen_phantom(1, 1, 31), std::invalid_argument);
}

TEST_CASE("gen_phantom: 1000 random phantoms satisfy all class invariants") {
    for (int i = 0; i < 1000; ++i) {
        const int class_id = (i % 5) + 1;
        const std::uint64_t seed = 90000ull + static_cast<std::uint64_t>(i);
        const int size = (i % 3 == 0) ? 48 : 64;
        auto ph = gen_phantom(seed, class_id, size);
        auto c = label_counts(ph.mask);
        INFO("seed " << seed << " class " << class_id << " size " << size);
        switch (class_id) {
            case 1:
                REQUIRE(c[1] > 0);
                REQUIRE(c[2] == 0);
                REQUIRE(c[3] == 0);
                break;
            case 2:
                REQUIRE(c[1] == 0);
                REQUIRE(c[2] > 0);
                REQUIRE(c[3] == 0);
                break;
            case 3:
                REQUIRE(c[1] == 0);
                REQUIRE(c[3] > 0);
                REQUIRE(c[2] > 0);  // thrombosed lumen keeps flowing FL pixels
                break;
            case 4:
                REQUIRE(c[1] > 0);
                REQUIRE(c[2] > 0);
                REQUIRE(c[3] == 0);
                break;
            case 5:
                REQUIRE(c[1] + c[2] + c[3] == 0);
                break;
        }
        // each lumen label forms one connected component
        for (int label : {1, 2, 3})
            if (c[static_cast<std::size_t>(label)] > 0)
                REQUIRE(component_count(ph.mask, label) == 1);

        // thrombus dimmer than flowing lumen
        if (class_id == 3) {
            double mean_fl = 0, mean_flt = 0;
            for (std::size_t j = 0; j < ph.mask.size(); ++j) {
                if (ph.mask[j] == kMaskFalseLumen) mean_fl += ph.image[j];
                if (ph.mask[j] == kMaskThrombosis) mean_flt += ph.image[j];
            }
            mean_fl /= c[2];
            mean_flt /= c[3];
            REQUIRE(mean_flt < mean_fl);
        }

        // non-degenerate histogram: dark background and bright foreground both present
        int dark = 0, bright = 0;
        for (double v : ph.image.data) {
            if (v < 0.1) ++dark;
            if (v > 0.5) ++bright;
        }
        REQUIRE(dark >= static_cast<int>(ph.image.size() * 5 / 100));
        REQUIRE(bright >= static_cast<int>(ph.image.size() / 100));

        // image range
        for (double v : ph.image.data) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
    }
}

TEST_CASE("class_token: injective map with reserved null") {
    std::set<int> seen;
    for (int c = 1; c <= 5; ++c) {
        const int tok = class_token(c);
        REQUIRE(tok == c);
        REQUIRE(tok != kNullToken);
        seen.insert(tok);
    }
    REQUIRE(seen.size() == 5);
    REQUIRE_THROWS_AS(class_token(0), std::invalid_argument);
    REQUIRE_THROWS_AS(class_token(6), std::invalid_argument);
}

TEST_CASE("build_dataset: totals, class-4 dominance, split sizes") {
    DatasetConfig cfg;
    cfg.total = 1000;
    cfg.seed = 5;
    auto ds = build_dataset(cfg);
    int total = 0;
    for (const auto& [cls, n] : ds.per_class_counts) total += n;
    REQUIRE(total == 1000);
    int largest_class = 0, largest = -1;
    for (const auto& [cls, n] : ds.per_class_counts)
        if (n > largest) {
            largest = n;
            largest_class = cls;
        }
    REQUIRE(largest_class == 4);
    for (const auto& [cls, n] : ds.per_class_counts) REQUIRE(n >= 20);
    REQUIRE(ds.train.size() + ds.val.size() + ds.test.size() == 1000);
    REQUIRE(ds.manifest.size() == 1000);
    REQUIRE_THROWS_AS(build_dataset(DatasetConfig{99, 64, 1, 20}), std::invalid_argument);
}

TEST_CASE("build_dataset: deterministic manifests and disjoint split seeds") {
    DatasetConfig cfg;
    cfg.total = 200;
    cfg.seed = 42;
    auto a = build_dataset(cfg);
    auto b = build_dataset(cfg);
    REQUIRE(manifest_to_text(a) == manifest_to_text(b));

    std::set<std::uint64_t> train_seeds, test_seeds, all_seeds;
    for (const auto& row : a.manifest) {
        all_seeds.insert(row.seed);
        if (row.split == "train") train_seeds.insert(row.seed);
        if (row.split == "test") test_seeds.insert(row.seed);
    }
    REQUIRE(all_seeds.size() == a.manifest.size());  // globally distinct
    for (std::uint64_t s : train_seeds) REQUIRE(test_seeds.count(s) == 0);
}

TEST_CASE("dataset_from_manifest: restores splits and respects the access list") {
    DatasetConfig cfg;
    cfg.total = 120;
    cfg.seed = 9;
    cfg.size = 48;
    auto ds = build_dataset(cfg);
    const std::string text = manifest_to_text(ds);

    auto train_only = dataset_from_manifest(text, {"train"});
    REQUIRE(train_only.train.size() == ds.train.size());
    REQUIRE(train_only.val.empty());
    REQUIRE(train_only.test.empty());
    REQUIRE(train_only.size == 48);

    auto full = dataset_from_manifest(text, {"train", "val", "test"});
    REQUIRE(full.test.size() == ds.test.size());
    // identical regeneration
    REQUIRE(full.train[0].image.data == ds.train[0].image.data);
}
