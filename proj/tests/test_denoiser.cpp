#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "lumen/denoiser.hpp"
#include "lumen/rng.hpp"

using namespace lumen;

namespace {

DenoiserConfig tiny_cfg(int width = 4, int rank = 0) {
    DenoiserConfig c;
    c.width = width;
    c.temb_dim = 8;
    c.cemb_dim = 8;
    c.mlp_hidden = 8;
    c.lora_rank = rank;
    return c;
}

}  // namespace

TEST_CASE("init_params: deterministic, zero biases") {
    auto a = init_params<double>(Rng(7), tiny_cfg());
    auto b = init_params<double>(Rng(7), tiny_cfg());
    bool equal = true;
    for_each_param(a, [&](const char* name, const Tensor<double>& t, ParamKind) {
        for_each_param(b, [&](const char* bname, const Tensor<double>& bt, ParamKind) {
            if (std::string(name) == bname && t.data != bt.data) equal = false;
        });
    });
    REQUIRE(equal);
    for (double v : a.conv1_b.data) REQUIRE(v == 0.0);
    for (double v : a.conv2_b.data) REQUIRE(v == 0.0);
    for (double v : a.mlp1_b.data) REQUIRE(v == 0.0);
    for (double v : a.mlp2_b.data) REQUIRE(v == 0.0);
}

TEST_CASE("init_params: He variance within 20% for width >= 64") {
    DenoiserConfig cfg = tiny_cfg(64);
    cfg.mlp_hidden = 128;
    cfg.temb_dim = 64;
    cfg.cemb_dim = 64;
    auto p = init_params<double>(Rng(5), cfg);
    auto check = [&](const Tensor<double>& w, std::size_t fan_in) {
        double sum2 = 0;
        for (double v : w.data) sum2 += v * v;
        const double var = sum2 / static_cast<double>(w.size());
        const double expect = 2.0 / static_cast<double>(fan_in);
        REQUIRE(var == Catch::Approx(expect).epsilon(0.20));
    };
    check(p.conv1_w, 6 * 9);
    check(p.conv2_w, 64 * 9);
    check(p.mlp1_w, 128);
    check(p.mlp2_w, 128);
}

TEST_CASE("forward: all-zero params give exactly zero output") {
    auto p = init_params<double>(Rng(1), tiny_cfg(8));
    for_each_param(p, [&](const char*, Tensor<double>& t, ParamKind) { t.fill(0.0); });
    Rng rng(2);
    auto x = gaussian<double>(rng, {16, 16});
    auto eps = forward(p, x, 10, 3);
    for (double v : eps.data) REQUIRE(v == 0.0);
}

TEST_CASE("forward: fresh LoRA adapters are exact no-ops") {
    auto base = init_params<double>(Rng(3), tiny_cfg(8));
    auto with = base;
    Rng lrng(4);
    attach_lora(with, lrng, 4, 4.0);
    Rng rng(5);
    auto x = gaussian<double>(rng, {12, 12});
    auto e0 = forward(base, x, 100, 2);
    auto e1 = forward(with, x, 100, 2);
    REQUIRE(e0.data == e1.data);  // B = 0 makes the adapter path vanish
}

TEST_CASE("forward: output shape equals input shape for 5 random shapes") {
    auto p = init_params<double>(Rng(6), tiny_cfg(4));
    Rng rng(7);
    for (auto [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{
             {8, 8}, {9, 13}, {16, 12}, {20, 20}, {11, 32}}) {
        auto x = gaussian<double>(rng, {h, w});
        auto e = forward(p, x, 50, 1);
        REQUIRE(e.shape == x.shape);
    }
    REQUIRE_THROWS_AS(forward(p, gaussian<double>(rng, {4, 4, 4}), 1, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(forward(p, gaussian<double>(rng, {8, 8}), 1, 7), std::invalid_argument);
}

TEST_CASE("time embedding at t=0 is (0,1,0,1,...)") {
    auto e = time_embedding<double>(0, 32);
    for (std::size_t i = 0; i < e.size(); i += 2) {
        REQUIRE(e[i] == 0.0);
        REQUIRE(e[i + 1] == 1.0);
    }
}

TEST_CASE("backward: unused class-embedding rows get zero gradient") {
    auto p = init_params<double>(Rng(8), tiny_cfg(4));
    Rng rng(9);
    auto x = gaussian<double>(rng, {8, 8});
    ForwardCache<double> cache;
    auto eps = forward(p, x, 5, 3, &cache);
    auto grads = zeros_like_grads(p);
    backward(p, cache, eps, grads);
    for (std::size_t row = 0; row < 6; ++row) {
        double s = 0;
        for (std::size_t j = 0; j < grads.cemb.shape[1]; ++j)
            s += std::abs(grads.cemb.at(row, j));
        if (row == 3)
            REQUIRE(s > 0.0);
        else
            REQUIRE(s == 0.0);
    }
}

TEST_CASE("backward: frozen base leaves base gradient slots absent") {
    auto p = init_params<double>(Rng(10), tiny_cfg(4, 2));
    p.frozen_base = true;
    auto grads = zeros_like_grads(p);
    REQUIRE(grads.conv1_w.empty());
    REQUIRE(grads.mlp2_w.empty());
    REQUIRE(!grads.cemb.empty());
    REQUIRE(!grads.lora_conv1.a.empty());

    Rng rng(11);
    auto x = gaussian<double>(rng, {8, 8});
    ForwardCache<double> cache;
    auto eps = forward(p, x, 5, 1, &cache);
    backward(p, cache, eps, grads);  // must not touch the absent slots
    REQUIRE(grads.conv1_w.empty());
}

TEST_CASE("backward: rejects a stale cache") {
    auto p = init_params<double>(Rng(12), tiny_cfg(4));
    auto grads = zeros_like_grads(p);
    ForwardCache<double> cache;  // never produced by forward
    Tensor<double> go({8, 8}, 1.0);
    REQUIRE_THROWS_AS(backward(p, cache, go, grads), std::invalid_argument);
}

TEST_CASE("grad_check: full model matches finite differences below 1e-4") {
    auto p = init_params<double>(Rng(13), tiny_cfg(4));
    Rng data_rng(14);
    auto x = gaussian<double>(data_rng, {8, 8});
    Rng pick(15);
    const double err = grad_check(p, x, 17, 2, pick, 0.05);
    REQUIRE(err < 1e-4);
}

TEST_CASE("grad_check: lora-only parameters meet the same bound") {
    auto p = init_params<double>(Rng(16), tiny_cfg(4, 3));
    // make the adapters active (B nonzero), then freeze the base
    Rng brng(17);
    for (Tensor<double>* b :
         {&p.lora_conv1.b, &p.lora_conv2.b, &p.lora_mlp1.b, &p.lora_mlp2.b})
        for (auto& v : b->data) v = 0.3 * brng.gaussian();
    p.frozen_base = true;
    Rng data_rng(18);
    auto x = gaussian<double>(data_rng, {8, 8});
    Rng pick(19);
    const double err = grad_check(p, x, 400, 1, pick, 0.2);
    REQUIRE(err < 1e-4);
}

TEST_CASE("grad_check: zero input image stays guarded") {
    auto p = init_params<double>(Rng(20), tiny_cfg(4));
    Tensor<double> x({8, 8});
    Rng pick(21);
    const double err = grad_check(p, x, 3, 0, pick, 0.1);
    REQUIRE(err < 1e-4);
}

TEST_CASE("merge_lora: adapter forward equals merged forward to 1e-5") {
    auto p = init_params<double>(Rng(22), tiny_cfg(8, 4));
    Rng brng(23);
    for (Tensor<double>* b :
         {&p.lora_conv1.b, &p.lora_conv2.b, &p.lora_mlp1.b, &p.lora_mlp2.b})
        for (auto& v : b->data) v = 0.5 * brng.gaussian();

    auto merged = merge_lora(p);
    REQUIRE(!merged.has_lora());
    Rng rng(24);
    for (int trial = 0; trial < 3; ++trial) {
        auto x = gaussian<double>(rng, {16, 16});
        const int t = 1 + trial * 100;
        auto ea = forward(p, x, t, trial % 6);
        auto em = forward(merged, x, t, trial % 6);
        REQUIRE(max_abs_diff(ea, em) < 1e-5);
    }
}

TEST_CASE("checkpoint round-trip restores config and adapters") {
    auto p = init_params<float>(Rng(25), tiny_cfg(8, 4));
    Rng brng(26);
    for (auto& v : p.lora_conv1.b.data) v = static_cast<float>(brng.gaussian());
    auto ck = params_to_checkpoint(p);
    auto q = params_from_checkpoint<float>(ck);
    REQUIRE(q.cfg.width == 8);
    REQUIRE(q.cfg.lora_rank == 4);
    REQUIRE(q.lora_conv1.b.data == p.lora_conv1.b.data);
    REQUIRE(q.conv1_w.data == p.conv1_w.data);
}
