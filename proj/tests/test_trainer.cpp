#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "lumen/phantom.hpp"
#include "lumen/trainer.hpp"

using namespace lumen;

namespace {

DenoiserConfig small_arch(int width = 4, int rank = 0) {
    DenoiserConfig c;
    c.width = width;
    c.temb_dim = 8;
    c.cemb_dim = 8;
    c.mlp_hidden = 8;
    c.lora_rank = rank;
    return c;
}

std::vector<TrainItem<double>> phantom_items(int n, int class_id, int size,
                                             std::uint64_t seed0 = 1000) {
    std::vector<TrainItem<double>> items;
    for (int i = 0; i < n; ++i)
        items.push_back(to_train_item<double>(gen_phantom(seed0 + static_cast<std::uint64_t>(i),
                                                          class_id, size)));
    return items;
}

}  // namespace

TEST_CASE("diffusion_loss: perfect predictor on zero signal gives zero loss") {
    auto sched = make_schedule<double>(ScheduleKind::linear, 50, 1e-3, 0.02);
    // x0 = 0 makes x_t = sqrt(1-abar)*eps, so the ideal predictor is
    // recoverable from (x_t, t) alone
    std::vector<TrainItem<double>> batch(3);
    for (auto& it : batch) {
        it.x0 = Tensor<double>({8, 8});
        it.token = 2;
    }
    Rng rng(1);
    const double loss = diffusion_loss_eval(
        [&](const Tensor<double>& x_t, int t, int) {
            const double b = std::sqrt(1.0 - sched.alpha_bar[t]);
            Tensor<double> eps = x_t;
            for (auto& v : eps.data) v /= b;
            return eps;
        },
        batch, sched, rng);
    REQUIRE(loss < 1e-24);
}

TEST_CASE("diffusion_loss: zero-params model lands at the noise variance") {
    auto sched = make_schedule<double>(ScheduleKind::linear, 100, 1e-4, 0.02);
    auto p = init_params<double>(Rng(2), small_arch());
    for_each_param(p, [&](const char*, Tensor<double>& t, ParamKind) { t.fill(0.0); });
    auto batch = phantom_items(16, 4, 32);  // 16 * 1024 noise draws
    Rng rng(3);
    auto res = diffusion_loss(p, batch, sched, rng);
    REQUIRE(res.loss == Catch::Approx(1.0).epsilon(0.05));
}

TEST_CASE("diffusion_loss: gradient matches finite differences") {
    auto sched = make_schedule<double>(ScheduleKind::linear, 30, 1e-3, 0.02);
    auto p = init_params<double>(Rng(4), small_arch());
    auto batch = phantom_items(2, 1, 32);
    const std::uint64_t seed = 77;

    Rng rng_a(seed);
    auto res = diffusion_loss(p, batch, sched, rng_a, 0.0);

    Rng pick(5);
    double max_rel = 0;
    const double h = 1e-5;
    for_each_param(p, [&](const char* name, Tensor<double>& theta, ParamKind) {
        Tensor<double>* gslot = nullptr;
        for_each_param(res.grads, [&](const char* gname, Tensor<double>& g, ParamKind) {
            if (std::string(gname) == name) gslot = &g;
        });
        for (std::size_t i = 0; i < theta.size(); ++i) {
            if (pick.uniform01() > 0.05) continue;
            const double orig = theta[i];
            auto eval = [&]() {
                Rng r(seed);
                return diffusion_loss_eval(
                    [&](const Tensor<double>& x_t, int t, int token) {
                        return forward(p, x_t, t, token);
                    },
                    batch, sched, r, 0.0);
            };
            theta[i] = orig + h;
            const double lp = eval();
            theta[i] = orig - h;
            const double lm = eval();
            theta[i] = orig;
            const double numeric = (lp - lm) / (2 * h);
            const double analytic = (*gslot)[i];
            const double denom = std::max(std::abs(numeric) + std::abs(analytic), 1e-6);
            max_rel = std::max(max_rel, std::abs(numeric - analytic) / denom);
        }
    });
    REQUIRE(max_rel < 1e-4);
}

TEST_CASE("prior_preservation_loss: lambda 0 reduces to diffusion_loss exactly") {
    auto sched = make_schedule<double>(ScheduleKind::linear, 40, 1e-3, 0.02);
    auto p = init_params<double>(Rng(6), small_arch());
    auto subject = phantom_items(3, 3, 32);
    auto prior = phantom_items(3, 3, 32, 5000);

    Rng r1(11), r2(11);
    auto pp = prior_preservation_loss(p, subject, prior, sched, r1, 0.0);
    auto dl = diffusion_loss(p, subject, sched, r2);
    REQUIRE(pp.loss == dl.loss);
    REQUIRE(r1.counter() == r2.counter());
}

TEST_CASE("prior_preservation_loss: identical batches double the loss at lambda 1") {
    auto sched = make_schedule<double>(ScheduleKind::linear, 40, 1e-3, 0.02);
    auto p = init_params<double>(Rng(7), small_arch());
    auto subject = phantom_items(4, 2, 32);

    Rng r1(13), r2(13);
    auto pp = prior_preservation_loss(p, subject, subject, sched, r1, 1.0);
    auto single = diffusion_loss(p, subject, sched, r2);
    REQUIRE(pp.loss == Catch::Approx(2.0 * single.loss).epsilon(1e-12));
}

TEST_CASE("prior_preservation_loss: empty prior with positive lambda rejected") {
    auto sched = make_schedule<double>(ScheduleKind::linear, 10, 1e-3, 0.02);
    auto p = init_params<double>(Rng(8), small_arch());
    auto subject = phantom_items(2, 1, 32);
    Rng rng(1);
    REQUIRE_THROWS_AS(prior_preservation_loss(p, subject, {}, sched, rng, 1.0),
                      std::invalid_argument);
}

TEST_CASE("prior_preservation_loss: gradient passes finite differences") {
    auto sched = make_schedule<double>(ScheduleKind::linear, 20, 1e-3, 0.02);
    auto p = init_params<double>(Rng(9), small_arch());
    auto subject = phantom_items(2, 3, 32);
    auto prior = phantom_items(2, 3, 32, 7000);
    const std::uint64_t seed = 21;
    const double lambda = 0.7;

    Rng rng_a(seed);
    auto res = prior_preservation_loss(p, subject, prior, sched, rng_a, lambda);

    Rng pick(10);
    double max_rel = 0;
    const double h = 1e-5;
    auto eval = [&]() {
        Rng r(seed);
        Rng rp = r;
        double l = diffusion_loss_eval(
            [&](const Tensor<double>& x_t, int t, int token) { return forward(p, x_t, t, token); },
            subject, sched, r, 0.0);
        l += lambda * diffusion_loss_eval(
                 [&](const Tensor<double>& x_t, int t, int token) {
                     return forward(p, x_t, t, token);
                 },
                 prior, sched, rp, 0.0);
        return l;
    };
    for_each_param(p, [&](const char* name, Tensor<double>& theta, ParamKind) {
        Tensor<double>* gslot = nullptr;
        for_each_param(res.grads, [&](const char* gname, Tensor<double>& g, ParamKind) {
            if (std::string(gname) == name) gslot = &g;
        });
        for (std::size_t i = 0; i < theta.size(); ++i) {
            if (pick.uniform01() > 0.04) continue;
            const double orig = theta[i];
            theta[i] = orig + h;
            const double lp = eval();
            theta[i] = orig - h;
            const double lm = eval();
            theta[i] = orig;
            const double numeric = (lp - lm) / (2 * h);
            const double analytic = (*gslot)[i];
            const double denom = std::max(std::abs(numeric) + std::abs(analytic), 1e-6);
            max_rel = std::max(max_rel, std::abs(numeric - analytic) / denom);
        }
    });
    REQUIRE(max_rel < 1e-4);
}

// ----------------------------- AdamW -----------------------------

namespace {

// minimal single-tensor params for optimizer tests
ModelParams<double> vector_params(const std::vector<double>& init) {
    DenoiserConfig cfg;
    cfg.width = 1;
    cfg.temb_dim = 2;
    cfg.cemb_dim = 1;
    cfg.mlp_hidden = 1;
    auto p = init_params<double>(Rng(0), cfg);
    for_each_param(p, [&](const char*, Tensor<double>& t, ParamKind) { t.fill(0.0); });
    p.cemb = Tensor<double>({6, 1});
    for (std::size_t i = 0; i < std::min<std::size_t>(6, init.size()); ++i)
        p.cemb[i] = init[i];
    return p;
}

}  // namespace

TEST_CASE("adamw_step: first step closed form") {
    // g=1, m=v=0, lr=1e-3, no decay: delta = -lr * mhat/(sqrt(vhat)+eps) ~ -1e-3
    auto p = vector_params({0.0});
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    auto st = init_opt_state(p, cfg);
    auto g = zeros_like_grads(p);
    g.cemb[0] = 1.0;
    REQUIRE(adamw_step(st, p, g, 1e-3));
    const double expect = -1e-3 * 1.0 / (1.0 + 1e-8);
    REQUIRE(p.cemb[0] == Catch::Approx(expect).epsilon(1e-9));
}

TEST_CASE("adamw_step: zero gradient and zero decay is a fixed point") {
    auto p = vector_params({0.5, -1.5, 2.0});
    auto before = p.cemb.data;
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    auto st = init_opt_state(p, cfg);
    auto g = zeros_like_grads(p);
    for (int i = 0; i < 10; ++i) REQUIRE(adamw_step(st, p, g, 1e-2));
    REQUIRE(p.cemb.data == before);
}

TEST_CASE("adamw_step: non-finite gradient rejected and counted") {
    auto p = vector_params({1.0});
    auto before = p.cemb.data;
    TrainConfig cfg;
    auto st = init_opt_state(p, cfg);
    auto g = zeros_like_grads(p);
    g.cemb[0] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE(!adamw_step(st, p, g, 1e-3));
    REQUIRE(st.rejected == 1);
    REQUIRE(st.step == 0);
    REQUIRE(p.cemb.data == before);
}

TEST_CASE("adamw_step: q8 state tracks fp32 on a 1-D quadratic") {
    // single parameter: minimize 0.5 * theta^2 for 200 steps in both modes
    auto p_fp = vector_params({2.0});
    auto p_q8 = p_fp;
    TrainConfig cfg_fp, cfg_q8;
    cfg_fp.weight_decay = 0.0;
    cfg_q8.weight_decay = 0.0;
    cfg_q8.q8_state = true;
    auto st_fp = init_opt_state(p_fp, cfg_fp);
    auto st_q8 = init_opt_state(p_q8, cfg_q8);
    for (int step = 0; step < 200; ++step) {
        auto g_fp = zeros_like_grads(p_fp);
        auto g_q8 = zeros_like_grads(p_q8);
        g_fp.cemb[0] = p_fp.cemb[0];
        g_q8.cemb[0] = p_q8.cemb[0];
        adamw_step(st_fp, p_fp, g_fp, 1e-2);
        adamw_step(st_q8, p_q8, g_q8, 1e-2);
    }
    REQUIRE(std::abs(p_fp.cemb[0] - p_q8.cemb[0]) < 1e-2);
}

TEST_CASE("adamw_step: q8 state stays close on a full-width quadratic") {
    // conv1 weights (216 values, several quantization blocks) on a diagonal
    // quadratic with same-scale curvatures
    DenoiserConfig arch;
    arch.width = 4;
    arch.temb_dim = 8;
    arch.cemb_dim = 8;
    arch.mlp_hidden = 8;
    auto p_fp = init_params<double>(Rng(40), arch);
    auto p_q8 = p_fp;
    Rng curv_rng(41);
    std::vector<double> curv(p_fp.conv1_w.size());
    for (auto& c : curv) c = curv_rng.uniform(0.5, 2.0);

    TrainConfig cfg_fp, cfg_q8;
    cfg_fp.weight_decay = 0.0;
    cfg_q8.weight_decay = 0.0;
    cfg_q8.q8_state = true;
    auto st_fp = init_opt_state(p_fp, cfg_fp);
    auto st_q8 = init_opt_state(p_q8, cfg_q8);
    for (int step = 0; step < 200; ++step) {
        auto g_fp = zeros_like_grads(p_fp);
        auto g_q8 = zeros_like_grads(p_q8);
        for (std::size_t i = 0; i < curv.size(); ++i) {
            g_fp.conv1_w[i] = curv[i] * p_fp.conv1_w[i];
            g_q8.conv1_w[i] = curv[i] * p_q8.conv1_w[i];
        }
        adamw_step(st_fp, p_fp, g_fp, 1e-2);
        adamw_step(st_q8, p_q8, g_q8, 1e-2);
    }
    double max_diff = 0;
    for (std::size_t i = 0; i < curv.size(); ++i)
        max_diff = std::max(max_diff, std::abs(p_fp.conv1_w[i] - p_q8.conv1_w[i]));
    REQUIRE(max_diff < 1e-2);
}

// ----------------------------- training loops -----------------------------

TEST_CASE("train_base: loss falls and reruns are bit-identical") {
    auto sched = make_schedule<double>(ScheduleKind::linear, 200, 1e-4, 0.02);
    std::vector<TrainItem<double>> train_items, val_items;
    for (int i = 0; i < 40; ++i)
        train_items.push_back(to_train_item<double>(
            gen_phantom(static_cast<std::uint64_t>(i), (i % 5) + 1, 32)));
    for (int i = 0; i < 8; ++i)
        val_items.push_back(to_train_item<double>(
            gen_phantom(static_cast<std::uint64_t>(900 + i), (i % 5) + 1, 32)));

    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 4;
    cfg.lr = 2e-3;
    cfg.seed = 123;

    auto out1 = train_base(train_items, val_items, small_arch(8), cfg, sched);
    REQUIRE(out1.curve.train.size() == 4);
    REQUIRE(out1.curve.train.back() < out1.curve.train.front());
    REQUIRE(out1.curve.val.back() < out1.curve.val.front());

    auto out2 = train_base(train_items, val_items, small_arch(8), cfg, sched);
    REQUIRE(out1.curve.train == out2.curve.train);
    REQUIRE(out1.curve.val == out2.curve.val);
    REQUIRE(out1.params.conv1_w.data == out2.params.conv1_w.data);
}

TEST_CASE("train_lora: frozen base bit-identical, adapters start as no-ops") {
    auto sched = make_schedule<double>(ScheduleKind::linear, 100, 1e-4, 0.02);
    auto base = init_params<double>(Rng(31), small_arch(8));
    auto subject = phantom_items(6, 3, 32);
    auto prior = phantom_items(6, 3, 32, 8000);

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.lr = 1e-3;
    cfg.lora = true;
    cfg.lora_rank = 2;
    cfg.seed = 77;

    const auto hash_before = base_weights_hash(base);
    auto ft = train_lora(base, subject, class_token(3), prior, cfg, sched);
    REQUIRE(ft.base_hash_before == ft.base_hash_after);
    REQUIRE(base_weights_hash(ft.params) == hash_before);
    REQUIRE(ft.params.has_lora());

    // only the subject embedding row moved
    for (std::size_t row = 0; row < 6; ++row)
        for (std::size_t j = 0; j < base.cemb.shape[1]; ++j) {
            if (static_cast<int>(row) == class_token(3)) continue;
            REQUIRE(ft.params.cemb.at(row, j) == base.cemb.at(row, j));
        }

    TrainConfig no_lora = cfg;
    no_lora.lora = false;
    REQUIRE_THROWS_AS(train_lora(base, subject, 3, prior, no_lora, sched),
                      std::invalid_argument);
}

TEST_CASE("checkpoints: fp32 bit-identical, fp16 bounded, truncation clean") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "lumen_trainer_ckpt";
    fs::create_directories(dir);
    auto p = init_params<float>(Rng(51), small_arch(8, 2));

    const std::string fp32_path = (dir / "m32.ckpt").string();
    save_checkpoint(p, fp32_path, TnsDtype::fp32);
    auto q = load_checkpoint<float>(fp32_path);
    bool identical = true;
    for_each_param(p, [&](const char* name, const Tensor<float>& t, ParamKind) {
        for_each_param(q, [&](const char* qname, const Tensor<float>& qt, ParamKind) {
            if (std::string(name) == qname && t.data != qt.data) identical = false;
        });
    });
    REQUIRE(identical);

    const std::string fp16_path = (dir / "m16.ckpt").string();
    std::size_t overflow = 0;
    save_checkpoint(p, fp16_path, TnsDtype::fp16, &overflow);
    REQUIRE(overflow == 0);
    auto h = load_checkpoint<float>(fp16_path);
    float max_rel = 0;
    for (std::size_t i = 0; i < p.conv1_w.size(); ++i) {
        const float denom = std::max(std::abs(p.conv1_w[i]), 6.10352e-5f);
        max_rel = std::max(max_rel, std::abs(h.conv1_w[i] - p.conv1_w[i]) / denom);
    }
    REQUIRE(max_rel <= std::pow(2.0f, -11.0f));

    const std::string text = read_text_file(fp32_path);
    write_text_file(fp32_path, text.substr(0, text.size() - 10));
    REQUIRE_THROWS_WITH(load_checkpoint<float>(fp32_path),
                        Catch::Matchers::ContainsSubstring("truncated"));
    fs::remove_all(dir);
}
