#pragma once

// Conditional noise predictor eps_hat(x_t, t, token). Small conv+MLP hybrid:
//
//   planes  = [x_t, X, Y, X^2, Y^2, XY]          fixed coordinate features
//   a1      = conv1(planes)                       (C,H,W)
//   film    = mlp2(silu(mlp1([temb(t), cemb[token]])))   -> scale s, shift b
//   h1      = silu(a1 * (1 + s) + b)              per-channel modulation
//   eps_hat = conv2(h1)                           (1,H,W)
//
// The coordinate planes give the translation-equivariant convs access to
// absolute position, so class-dependent anatomy is representable; a hidden
// unit over [1, X, Y, X^2, Y^2, XY] is a smooth conic indicator. The time
// embedding is fixed sinusoidal (sin/cos interleaved, so t=0 embeds as
// 0,1,0,1,...); the 6-row class-embedding table (null token + 5 classes) is
// learned.
//
// Every dense/conv layer optionally carries a LoRA pair (A: r x in,
// B: out x r, scaling alpha/r). B starts at zero so fresh adapters are
// exact no-ops, and merging W <- W + (alpha/r) B.A reproduces the adapter
// forward exactly.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>

#include "lumen/io.hpp"
#include "lumen/nn.hpp"
#include "lumen/phantom.hpp"
#include "lumen/rng.hpp"
#include "lumen/tensor.hpp"

namespace lumen {

struct DenoiserConfig {
    int width = 16;       // conv channels
    int temb_dim = 32;    // sinusoidal time embedding size (even)
    int cemb_dim = 32;    // class embedding size
    int mlp_hidden = 32;  // conditioning MLP hidden width
    int kernel = 3;
    int lora_rank = 0;  // 0 = no adapters
    double lora_alpha = 4.0;

    int in_planes() const { return 6; }  // image + 5 coordinate features

    std::string to_meta() const {
        std::ostringstream os;
        os << "width = " << width << "\ntemb_dim = " << temb_dim << "\ncemb_dim = " << cemb_dim
           << "\nmlp_hidden = " << mlp_hidden << "\nkernel = " << kernel
           << "\nlora_rank = " << lora_rank << "\nlora_alpha = " << lora_alpha << "\n";
        return os.str();
    }

    static DenoiserConfig from_meta(const std::string& meta) {
        DenoiserConfig c;
        std::istringstream is(meta);
        std::string line;
        while (std::getline(is, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(0, eq);
            key.erase(key.find_last_not_of(" \t") + 1);
            const std::string val = line.substr(eq + 1);
            if (key == "width") c.width = std::stoi(val);
            else if (key == "temb_dim") c.temb_dim = std::stoi(val);
            else if (key == "cemb_dim") c.cemb_dim = std::stoi(val);
            else if (key == "mlp_hidden") c.mlp_hidden = std::stoi(val);
            else if (key == "kernel") c.kernel = std::stoi(val);
            else if (key == "lora_rank") c.lora_rank = std::stoi(val);
            else if (key == "lora_alpha") c.lora_alpha = std::stod(val);
        }
        return c;
    }
};

template <typename T>
struct LoraPair {
    Tensor<T> a;  // (r, in)
    Tensor<T> b;  // (out, r)
    bool present() const { return !a.empty(); }
};

template <typename T>
struct ModelParams {
    DenoiserConfig cfg;
    bool frozen_base = false;

    Tensor<T> conv1_w, conv1_b;  // (C, 6, K, K), (C)
    Tensor<T> conv2_w, conv2_b;  // (1, C, K, K), (1)
    Tensor<T> mlp1_w, mlp1_b;    // (H, temb+cemb), (H)
    Tensor<T> mlp2_w, mlp2_b;    // (2C, H), (2C)
    Tensor<T> cemb;              // (6, cemb_dim)

    LoraPair<T> lora_conv1, lora_conv2, lora_mlp1, lora_mlp2;

    bool has_lora() const { return lora_conv1.present(); }
};

enum class ParamKind { base, bias, adapter, embedding };

// fixed structural iteration order; serialization and the optimizer rely on it
template <typename T, typename F>
void for_each_param(ModelParams<T>& p, F&& f) {
    f("conv1.w", p.conv1_w, ParamKind::base);
    f("conv1.b", p.conv1_b, ParamKind::bias);
    f("conv2.w", p.conv2_w, ParamKind::base);
    f("conv2.b", p.conv2_b, ParamKind::bias);
    f("mlp1.w", p.mlp1_w, ParamKind::base);
    f("mlp1.b", p.mlp1_b, ParamKind::bias);
    f("mlp2.w", p.mlp2_w, ParamKind::base);
    f("mlp2.b", p.mlp2_b, ParamKind::bias);
    f("cemb", p.cemb, ParamKind::embedding);
    if (p.lora_conv1.present()) {
        f("lora.conv1.a", p.lora_conv1.a, ParamKind::adapter);
        f("lora.conv1.b", p.lora_conv1.b, ParamKind::adapter);
        f("lora.conv2.a", p.lora_conv2.a, ParamKind::adapter);
        f("lora.conv2.b", p.lora_conv2.b, ParamKind::adapter);
        f("lora.mlp1.a", p.lora_mlp1.a, ParamKind::adapter);
        f("lora.mlp1.b", p.lora_mlp1.b, ParamKind::adapter);
        f("lora.mlp2.a", p.lora_mlp2.a, ParamKind::adapter);
        f("lora.mlp2.b", p.lora_mlp2.b, ParamKind::adapter);
    }
}

template <typename T, typename F>
void for_each_param(const ModelParams<T>& p, F&& f) {
    for_each_param(const_cast<ModelParams<T>&>(p),
                   [&](const char* n, Tensor<T>& t, ParamKind k) {
                       f(n, static_cast<const Tensor<T>&>(t), k);
                   });
}

template <typename T>
bool params_trainable(const ModelParams<T>& p, ParamKind kind) {
    if (!p.frozen_base) return true;
    return kind == ParamKind::adapter || kind == ParamKind::embedding;
}

// weight decay only touches weight matrices; biases and the embedding table
// are exempt, so zero-gradient embedding rows stay put
inline bool params_decayable(ParamKind kind) {
    return kind == ParamKind::base || kind == ParamKind::adapter;
}

template <typename T>
ModelParams<T> init_params(Rng rng, const DenoiserConfig& cfg) {
    if (cfg.width < 1 || cfg.mlp_hidden < 1) throw std::invalid_argument("init_params: width must be >= 1");
    if (cfg.temb_dim % 2) throw std::invalid_argument("init_params: temb_dim must be even");
    ModelParams<T> p;
    p.cfg = cfg;
    const std::size_t c = static_cast<std::size_t>(cfg.width);
    const std::size_t k = static_cast<std::size_t>(cfg.kernel);
    const std::size_t in = static_cast<std::size_t>(cfg.in_planes());
    const std::size_t cond = static_cast<std::size_t>(cfg.temb_dim + cfg.cemb_dim);
    const std::size_t hid = static_cast<std::size_t>(cfg.mlp_hidden);

    p.conv1_w = Tensor<T>({c, in, k, k});
    p.conv1_b = Tensor<T>({c});
    p.conv2_w = Tensor<T>({1, c, k, k});
    p.conv2_b = Tensor<T>({1});
    p.mlp1_w = Tensor<T>({hid, cond});
    p.mlp1_b = Tensor<T>({hid});
    p.mlp2_w = Tensor<T>({2 * c, hid});
    p.mlp2_b = Tensor<T>({2 * c});
    p.cemb = Tensor<T>({6, static_cast<std::size_t>(cfg.cemb_dim)});

    init_he(p.conv1_w, in * k * k, rng);
    init_he(p.conv2_w, c * k * k, rng);
    init_he(p.mlp1_w, cond, rng);
    init_he(p.mlp2_w, hid, rng);
    for (auto& v : p.cemb.data) v = static_cast<T>(0.5 * rng.gaussian());

    if (cfg.lora_rank > 0) attach_lora(p, rng, cfg.lora_rank, cfg.lora_alpha);
    return p;
}

// A gets a small Gaussian init, B starts at zero: adapters begin as no-ops
template <typename T>
void attach_lora(ModelParams<T>& p, Rng& rng, int rank, double alpha) {
    if (rank < 1) throw std::invalid_argument("attach_lora: rank must be >= 1");
    p.cfg.lora_rank = rank;
    p.cfg.lora_alpha = alpha;
    const auto r = static_cast<std::size_t>(rank);
    auto make = [&](LoraPair<T>& lp, std::size_t out_dim, std::size_t in_dim) {
        lp.a = Tensor<T>({r, in_dim});
        lp.b = Tensor<T>({out_dim, r});
        const double std = std::sqrt(1.0 / static_cast<double>(in_dim));
        for (auto& v : lp.a.data) v = static_cast<T>(std * rng.gaussian());
    };
    const std::size_t c = static_cast<std::size_t>(p.cfg.width);
    const std::size_t k = static_cast<std::size_t>(p.cfg.kernel);
    make(p.lora_conv1, c, static_cast<std::size_t>(p.cfg.in_planes()) * k * k);
    make(p.lora_conv2, 1, c * k * k);
    make(p.lora_mlp1, static_cast<std::size_t>(p.cfg.mlp_hidden),
         static_cast<std::size_t>(p.cfg.temb_dim + p.cfg.cemb_dim));
    make(p.lora_mlp2, 2 * c, static_cast<std::size_t>(p.cfg.mlp_hidden));
}

// gradient holder with the same structure; frozen base leaves base slots absent
template <typename T>
ModelParams<T> zeros_like_grads(const ModelParams<T>& p) {
    ModelParams<T> g;
    g.cfg = p.cfg;
    g.frozen_base = p.frozen_base;
    auto alloc = [&](const Tensor<T>& src, Tensor<T>& dst, ParamKind kind) {
        if (params_trainable(p, kind)) dst = Tensor<T>(src.shape);
    };
    alloc(p.conv1_w, g.conv1_w, ParamKind::base);
    alloc(p.conv1_b, g.conv1_b, ParamKind::bias);
    alloc(p.conv2_w, g.conv2_w, ParamKind::base);
    alloc(p.conv2_b, g.conv2_b, ParamKind::bias);
    alloc(p.mlp1_w, g.mlp1_w, ParamKind::base);
    alloc(p.mlp1_b, g.mlp1_b, ParamKind::bias);
    alloc(p.mlp2_w, g.mlp2_w, ParamKind::base);
    alloc(p.mlp2_b, g.mlp2_b, ParamKind::bias);
    alloc(p.cemb, g.cemb, ParamKind::embedding);
    if (p.has_lora()) {
        auto alloc_pair = [&](const LoraPair<T>& src, LoraPair<T>& dst) {
            dst.a = Tensor<T>(src.a.shape);
            dst.b = Tensor<T>(src.b.shape);
        };
        alloc_pair(p.lora_conv1, g.lora_conv1);
        alloc_pair(p.lora_conv2, g.lora_conv2);
        alloc_pair(p.lora_mlp1, g.lora_mlp1);
        alloc_pair(p.lora_mlp2, g.lora_mlp2);
    }
    return g;
}

// ----------------------------- time embedding -----------------------------

// interleaved sin/cos with geometric frequencies; temb(0) = (0,1,0,1,...)
template <typename T>
Tensor<T> time_embedding(int t, int dim) {
    Tensor<T> e({static_cast<std::size_t>(dim)});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq =
            (half == 1) ? 1.0 : std::pow(10000.0, -static_cast<double>(i) / (half - 1));
        e[static_cast<std::size_t>(2 * i)] = static_cast<T>(std::sin(t * freq));
        e[static_cast<std::size_t>(2 * i + 1)] = static_cast<T>(std::cos(t * freq));
    }
    return e;
}

// [x, X, Y, X^2, Y^2, XY] with X,Y in [-1,1]
template <typename T>
Tensor<T> build_input_planes(const Tensor<T>& x) {
    if (x.shape.size() != 2) throw std::invalid_argument("build_input_planes: want HxW image");
    const std::size_t h = x.shape[0], w = x.shape[1];
    Tensor<T> planes({6, h, w});
    for (std::size_t i = 0; i < h; ++i) {
        const T yy = static_cast<T>(2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(h) - 1.0);
        for (std::size_t j = 0; j < w; ++j) {
            const T xx = static_cast<T>(2.0 * (static_cast<double>(j) + 0.5) / static_cast<double>(w) - 1.0);
            planes.at(0, i, j) = x.at(i, j);
            planes.at(1, i, j) = xx;
            planes.at(2, i, j) = yy;
            planes.at(3, i, j) = xx * xx;
            planes.at(4, i, j) = yy * yy;
            planes.at(5, i, j) = xx * yy;
        }
    }
    return planes;
}

// ----------------------------- forward -----------------------------

template <typename T>
struct ForwardCache {
    int t = -1;
    int token = -1;
    Tensor<T> planes;            // (6,H,W)
    Tensor<T> cond_in;           // (temb+cemb)
    Tensor<T> mlp1_pre, mlp1_h;  // pre/post SiLU
    Tensor<T> film;              // (2C)
    Tensor<T> a1;                // conv1 output before FiLM
    Tensor<T> h1_pre, h1;        // FiLM output pre/post SiLU
    // adapter intermediates
    Tensor<T> u_conv1, u_conv2;  // (r,H,W)
    Tensor<T> u_mlp1, u_mlp2;    // (r)
    bool valid = false;
};

namespace detail {

// y += (alpha/r) * B(1x1) ( A(conv) x ); caches u = A*x
template <typename T>
void lora_conv_apply(const Tensor<T>& x, const LoraPair<T>& lp, double scale, std::size_t k,
                     Tensor<T>& u, Tensor<T>& y) {
    const std::size_t r = lp.a.shape[0];
    const std::size_t ic = x.shape[0];
    Tensor<T> a_kernel({r, ic, k, k}, lp.a.data);  // row-major view matches
    Tensor<T> none;
    conv2d_forward(x, a_kernel, none, u);
    const std::size_t hw = x.shape[1] * x.shape[2];
    const std::size_t oc = lp.b.shape[0];
    for (std::size_t o = 0; o < oc; ++o)
        for (std::size_t rr = 0; rr < r; ++rr) {
            const T w = static_cast<T>(scale) * lp.b.at(o, rr);
            const T* ur = &u.data[rr * hw];
            T* yr = &y.data[o * hw];
            for (std::size_t i = 0; i < hw; ++i) yr[i] += w * ur[i];
        }
}

template <typename T>
void lora_conv_backward(const Tensor<T>& x, const LoraPair<T>& lp, double scale, std::size_t k,
                        const Tensor<T>& u, const Tensor<T>& gy, Tensor<T>* gx, LoraPair<T>* glp) {
    const std::size_t r = lp.a.shape[0];
    const std::size_t ic = x.shape[0];
    const std::size_t hw = x.shape[1] * x.shape[2];
    const std::size_t oc = lp.b.shape[0];
    // grad wrt B and u
    Tensor<T> gu({r, x.shape[1], x.shape[2]});
    for (std::size_t o = 0; o < oc; ++o)
        for (std::size_t rr = 0; rr < r; ++rr) {
            const T* gyr = &gy.data[o * hw];
            const T* ur = &u.data[rr * hw];
            T* gur = &gu.data[rr * hw];
            T acc = 0;
            const T w = static_cast<T>(scale) * lp.b.at(o, rr);
            for (std::size_t i = 0; i < hw; ++i) {
                acc += gyr[i] * ur[i];
                gur[i] += w * gyr[i];
            }
            if (glp) glp->b.at(o, rr) += static_cast<T>(scale) * acc;
        }
    Tensor<T> a_kernel({r, ic, k, k}, lp.a.data);
    Tensor<T> ga_kernel({r, ic, k, k});
    conv2d_backward(x, a_kernel, gu, gx, glp ? &ga_kernel : nullptr,
                    static_cast<Tensor<T>*>(nullptr));
    if (glp)
        for (std::size_t i = 0; i < ga_kernel.size(); ++i) glp->a[i] += ga_kernel[i];
}

template <typename T>
void lora_linear_apply(const Tensor<T>& x, const LoraPair<T>& lp, double scale, Tensor<T>& u,
                       Tensor<T>& y) {
    Tensor<T> none;
    linear_forward(x, lp.a, none, u);
    const std::size_t oc = lp.b.shape[0], r = lp.b.shape[1];
    for (std::size_t o = 0; o < oc; ++o) {
        T acc = 0;
        for (std::size_t rr = 0; rr < r; ++rr) acc += lp.b.at(o, rr) * u[rr];
        y[o] += static_cast<T>(scale) * acc;
    }
}

template <typename T>
void lora_linear_backward(const Tensor<T>& x, const LoraPair<T>& lp, double scale,
                          const Tensor<T>& u, const Tensor<T>& gy, Tensor<T>* gx, LoraPair<T>* glp) {
    const std::size_t oc = lp.b.shape[0], r = lp.b.shape[1];
    Tensor<T> gu({r});
    for (std::size_t o = 0; o < oc; ++o) {
        const T g = static_cast<T>(scale) * gy[o];
        for (std::size_t rr = 0; rr < r; ++rr) {
            if (glp) glp->b.at(o, rr) += g * u[rr];
            gu[rr] += g * lp.b.at(o, rr);
        }
    }
    linear_backward(x, lp.a, gu, gx, glp ? &glp->a : nullptr, static_cast<Tensor<T>*>(nullptr));
}

}  // namespace detail

template <typename T>
Tensor<T> forward(const ModelParams<T>& p, const Tensor<T>& x_t, int t, int token,
                  ForwardCache<T>* cache = nullptr) {
    if (token < 0 || token >= kNumTokens)
        throw std::invalid_argument("forward: token must be in 0..5");
    if (x_t.shape.size() != 2)
        throw std::invalid_argument("forward: want HxW input, got " + shape_str(x_t.shape));
    const std::size_t c = static_cast<std::size_t>(p.cfg.width);
    const std::size_t k = static_cast<std::size_t>(p.cfg.kernel);
    const double lscale = p.has_lora() ? p.cfg.lora_alpha / p.cfg.lora_rank : 0.0;

    ForwardCache<T> local;
    ForwardCache<T>& cc = cache ? *cache : local;
    cc = ForwardCache<T>{};
    cc.t = t;
    cc.token = token;

    cc.planes = build_input_planes(x_t);

    // conditioning vector
    auto temb = time_embedding<T>(t, p.cfg.temb_dim);
    cc.cond_in = Tensor<T>({temb.size() + static_cast<std::size_t>(p.cfg.cemb_dim)});
    std::copy(temb.data.begin(), temb.data.end(), cc.cond_in.data.begin());
    for (int i = 0; i < p.cfg.cemb_dim; ++i)
        cc.cond_in[temb.size() + static_cast<std::size_t>(i)] =
            p.cemb.at(static_cast<std::size_t>(token), static_cast<std::size_t>(i));

    linear_forward(cc.cond_in, p.mlp1_w, p.mlp1_b, cc.mlp1_pre);
    if (p.has_lora())
        detail::lora_linear_apply(cc.cond_in, p.lora_mlp1, lscale, cc.u_mlp1, cc.mlp1_pre);
    cc.mlp1_h = silu_forward(cc.mlp1_pre);

    linear_forward(cc.mlp1_h, p.mlp2_w, p.mlp2_b, cc.film);
    if (p.has_lora())
        detail::lora_linear_apply(cc.mlp1_h, p.lora_mlp2, lscale, cc.u_mlp2, cc.film);

    conv2d_forward(cc.planes, p.conv1_w, p.conv1_b, cc.a1);
    if (p.has_lora())
        detail::lora_conv_apply(cc.planes, p.lora_conv1, lscale, k, cc.u_conv1, cc.a1);

    // FiLM: per-channel scale (1+s) and shift
    const std::size_t hw = x_t.size();
    cc.h1_pre = cc.a1;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T s = cc.film[ch];
        const T sh = cc.film[c + ch];
        T* row = &cc.h1_pre.data[ch * hw];
        for (std::size_t i = 0; i < hw; ++i) row[i] = row[i] * (T(1) + s) + sh;
    }
    cc.h1 = silu_forward(cc.h1_pre);

    Tensor<T> out;
    conv2d_forward(cc.h1, p.conv2_w, p.conv2_b, out);
    if (p.has_lora()) detail::lora_conv_apply(cc.h1, p.lora_conv2, lscale, k, cc.u_conv2, out);
    cc.valid = true;

    Tensor<T> eps(x_t.shape, std::move(out.data));
    return eps;
}

// Exact reverse-mode gradients for all trainable parameters; accumulates
// into `grads` (from zeros_like_grads). The cache must come from a matching
// forward on the same params.
template <typename T>
void backward(const ModelParams<T>& p, const ForwardCache<T>& cc, const Tensor<T>& grad_out,
              ModelParams<T>& grads) {
    if (!cc.valid) throw std::invalid_argument("backward: stale or missing forward cache");
    const std::size_t c = static_cast<std::size_t>(p.cfg.width);
    const std::size_t k = static_cast<std::size_t>(p.cfg.kernel);
    const std::size_t h = cc.planes.shape[1], w = cc.planes.shape[2];
    const std::size_t hw = h * w;
    const double lscale = p.has_lora() ? p.cfg.lora_alpha / p.cfg.lora_rank : 0.0;
    const bool base = !p.frozen_base;

    Tensor<T> go({1, h, w}, grad_out.data);

    // conv2 and its adapter
    Tensor<T> gh1({c, h, w});
    conv2d_backward(cc.h1, p.conv2_w, go, &gh1, base ? &grads.conv2_w : nullptr,
                    base ? &grads.conv2_b : nullptr);
    if (p.has_lora())
        detail::lora_conv_backward(cc.h1, p.lora_conv2, lscale, k, cc.u_conv2, go, &gh1,
                                   &grads.lora_conv2);

    // SiLU then FiLM
    Tensor<T> gh1_pre = silu_backward(cc.h1_pre, gh1);
    Tensor<T> ga1({c, h, w});
    Tensor<T> gfilm({2 * c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T s = cc.film[ch];
        const T* gpre = &gh1_pre.data[ch * hw];
        const T* a1r = &cc.a1.data[ch * hw];
        T* gar = &ga1.data[ch * hw];
        T gs = 0, gsh = 0;
        for (std::size_t i = 0; i < hw; ++i) {
            gar[i] = gpre[i] * (T(1) + s);
            gs += gpre[i] * a1r[i];
            gsh += gpre[i];
        }
        gfilm[ch] = gs;
        gfilm[c + ch] = gsh;
    }

    // conv1 and its adapter (input gradient not needed)
    conv2d_backward(cc.planes, p.conv1_w, ga1, static_cast<Tensor<T>*>(nullptr),
                    base ? &grads.conv1_w : nullptr, base ? &grads.conv1_b : nullptr);
    if (p.has_lora())
        detail::lora_conv_backward(cc.planes, p.lora_conv1, lscale, k, cc.u_conv1, ga1,
                                   static_cast<Tensor<T>*>(nullptr), &grads.lora_conv1);

    // conditioning MLP
    Tensor<T> gmlp1_h(cc.mlp1_h.shape);
    linear_backward(cc.mlp1_h, p.mlp2_w, gfilm, &gmlp1_h, base ? &grads.mlp2_w : nullptr,
                    base ? &grads.mlp2_b : nullptr);
    if (p.has_lora())
        detail::lora_linear_backward(cc.mlp1_h, p.lora_mlp2, lscale, cc.u_mlp2, gfilm, &gmlp1_h,
                                     &grads.lora_mlp2);

    Tensor<T> gmlp1_pre = silu_backward(cc.mlp1_pre, gmlp1_h);
    Tensor<T> gcond(cc.cond_in.shape);
    linear_backward(cc.cond_in, p.mlp1_w, gmlp1_pre, &gcond, base ? &grads.mlp1_w : nullptr,
                    base ? &grads.mlp1_b : nullptr);
    if (p.has_lora())
        detail::lora_linear_backward(cc.cond_in, p.lora_mlp1, lscale, cc.u_mlp1, gmlp1_pre, &gcond,
                                     &grads.lora_mlp1);

    // only the active class-embedding row receives gradient
    const std::size_t temb_n = static_cast<std::size_t>(p.cfg.temb_dim);
    for (int i = 0; i < p.cfg.cemb_dim; ++i)
        grads.cemb.at(static_cast<std::size_t>(cc.token), static_cast<std::size_t>(i)) +=
            gcond[temb_n + static_cast<std::size_t>(i)];
}

// fold adapters into the base weights: W <- W + (alpha/r) B.A
template <typename T>
ModelParams<T> merge_lora(const ModelParams<T>& p) {
    if (!p.has_lora()) return p;
    ModelParams<T> m = p;
    const double scale = p.cfg.lora_alpha / p.cfg.lora_rank;
    auto fold = [&](Tensor<T>& w, const LoraPair<T>& lp) {
        const std::size_t out_n = lp.b.shape[0], r = lp.b.shape[1], in_n = lp.a.shape[1];
        for (std::size_t o = 0; o < out_n; ++o)
            for (std::size_t i = 0; i < in_n; ++i) {
                T acc = 0;
                for (std::size_t rr = 0; rr < r; ++rr) acc += lp.b.at(o, rr) * lp.a.at(rr, i);
                w.data[o * in_n + i] += static_cast<T>(scale) * acc;
            }
    };
    fold(m.conv1_w, p.lora_conv1);
    fold(m.conv2_w, p.lora_conv2);
    fold(m.mlp1_w, p.lora_mlp1);
    fold(m.mlp2_w, p.lora_mlp2);
    m.lora_conv1 = m.lora_conv2 = m.lora_mlp1 = m.lora_mlp2 = LoraPair<T>{};
    m.cfg.lora_rank = 0;
    return m;
}

// fingerprint of the base weights, for frozen-base guarantees
template <typename T>
std::uint64_t base_weights_hash(const ModelParams<T>& p) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for_each_param(p, [&](const char*, const Tensor<T>& t, ParamKind kind) {
        if (kind == ParamKind::base)
            h = fnv1a64(t.data.data(), t.data.size() * sizeof(T), h);
    });
    return h;
}

// ----------------------------- gradient check -----------------------------

// Central finite differences on a random parameter subset against the
// analytic gradient of L = 0.5 * sum(eps_hat^2). Relative error uses a
// guarded denominator so zero-gradient entries cannot blow up.
template <typename T>
double grad_check(ModelParams<T>& p, const Tensor<T>& x, int t, int token, Rng& rng,
                  double subset_frac = 0.05, double fd_step = 1e-5) {
    static_assert(std::is_same_v<T, double>, "grad_check requires fp64 mode");
    ForwardCache<T> cache;
    auto eps = forward(p, x, t, token, &cache);
    auto grads = zeros_like_grads(p);
    backward(p, cache, eps, grads);  // dL/deps = eps for L = 0.5 sum eps^2

    auto loss_at = [&]() {
        auto e = forward(p, x, t, token);
        double l = 0;
        for (double v : e.data) l += 0.5 * v * v;
        return l;
    };

    double max_rel = 0.0;
    for_each_param(p, [&](const char* name, Tensor<T>& theta, ParamKind kind) {
        if (!params_trainable(p, kind)) return;
        Tensor<T>* gslot = nullptr;
        for_each_param(grads, [&](const char* gname, Tensor<T>& gt, ParamKind) {
            if (std::string(gname) == name) gslot = &gt;
        });
        for (std::size_t i = 0; i < theta.size(); ++i) {
            if (rng.uniform01() > subset_frac) continue;
            const T orig = theta[i];
            theta[i] = orig + static_cast<T>(fd_step);
            const double lp = loss_at();
            theta[i] = orig - static_cast<T>(fd_step);
            const double lm = loss_at();
            theta[i] = orig;
            const double numeric = (lp - lm) / (2.0 * fd_step);
            const double analytic = (*gslot)[i];
            const double denom = std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
            max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
        }
    });
    return max_rel;
}

// ----------------------------- serialization -----------------------------

template <typename T>
CheckpointFile params_to_checkpoint(const ModelParams<T>& p) {
    CheckpointFile ck;
    ck.meta = p.cfg.to_meta();
    for_each_param(p, [&](const char* name, const Tensor<T>& t, ParamKind) {
        ckpt_add(ck, name, t);
    });
    return ck;
}

template <typename T>
ModelParams<T> params_from_checkpoint(const CheckpointFile& ck) {
    DenoiserConfig cfg = DenoiserConfig::from_meta(ck.meta);
    ModelParams<T> p = init_params<T>(Rng(0), cfg);
    for_each_param(p, [&](const char* name, Tensor<T>& t, ParamKind) {
        const Tensor<double>* src = ck.find(name);
        if (!src) throw std::runtime_error(std::string("checkpoint: missing entry ") + name);
        if (src->shape != t.shape)
            throw std::runtime_error(std::string("checkpoint: shape mismatch for ") + name);
        t = src->template cast<T>();
    });
    return p;
}

}  // namespace lumen
