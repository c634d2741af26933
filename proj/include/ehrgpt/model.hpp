#pragma once

// Decoder-only transformer language model over timeline tokens.
//
// GPT-2 family layout: learned positional embeddings, pre-LayerNorm blocks,
// tanh-GELU MLP with 4x widening, output projection tied to the token
// embedding. Templated on the scalar so training runs in float and gradient
// checking in double through the same code.
//
// Computation is organised per position: every output row depends only on
// its own inputs and on cached keys/values of earlier positions. A full
// forward and an incremental (append-only) forward therefore produce
// bitwise-identical results.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ehrgpt/errors.hpp"
#include "ehrgpt/rng.hpp"
#include "ehrgpt/vocab.hpp"

namespace ehrgpt {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t context = 513;
    std::size_t vocab_size = 0;
    double dropout = 0.1;
    std::uint64_t seed = 0;
    double init_std = 0.02;

    /// Hidden 384, 4 layers, 8 heads, 513-token context.
    static ModelConfig full_scale(std::size_t vocab_size) {
        return ModelConfig{384, 4, 8, 513, vocab_size, 0.1, 0, 0.02};
    }
    static ModelConfig desk_scale(std::size_t vocab_size) {
        return ModelConfig{64, 2, 4, 513, vocab_size, 0.1, 0, 0.02};
    }

    std::size_t head_dim() const { return d_model / n_heads; }

    void validate(std::size_t min_vocab = 1) const {
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
            throw ConfigError("d_model must be a positive multiple of n_heads");
        }
        if (n_layers == 0) {
            throw ConfigError("n_layers must be >= 1");
        }
        if (context < 2) {
            throw ConfigError("context must be >= 2");
        }
        if (vocab_size < std::max<std::size_t>(min_vocab, 1)) {
            throw ConfigError("vocab_size smaller than the special-token registry");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) {
            throw ConfigError("dropout must lie in [0, 1)");
        }
        if (!(init_std >= 0.0)) {
            throw ConfigError("init_std must be >= 0");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One parameter tensor inside the flat parameter vector.
struct TensorSpec {
    enum class Init : std::uint8_t { normal, residual, zeros, ones };

    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool decay = false;  // decoupled weight decay applies (matrices, not biases/norms)
    Init init = Init::zeros;
    std::size_t offset = 0;

    std::size_t size() const { return rows * cols; }
};

/// Fixed tensor order: wte, wpe, per layer (ln1.g, ln1.b, attn.wq, attn.bq,
/// attn.wk, attn.wv, attn.bv, attn.wo, attn.bo, ln2.g, ln2.b,
/// mlp.wfc, mlp.bfc, mlp.wproj, mlp.bproj), lnf.g, lnf.b. Matrices are stored
/// [in, out] row-major except wte/wpe which are [row, d_model]. Keys carry no
/// bias: softmax is invariant to the constant score shift it would add.
inline std::vector<TensorSpec> parameter_layout(const ModelConfig& c) {
    using I = TensorSpec::Init;
    const std::size_t d = c.d_model;
    std::vector<TensorSpec> specs;
    auto add = [&](std::string name, std::size_t rows, std::size_t cols, bool decay, I init) {
        const std::size_t offset = specs.empty() ? 0 : specs.back().offset + specs.back().size();
        specs.push_back(TensorSpec{std::move(name), rows, cols, decay, init, offset});
    };
    add("wte", c.vocab_size, d, true, I::normal);
    add("wpe", c.context, d, true, I::normal);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "h." + std::to_string(l) + ".";
        add(p + "ln1.g", 1, d, false, I::ones);
        add(p + "ln1.b", 1, d, false, I::zeros);
        add(p + "attn.wq", d, d, true, I::normal);
        add(p + "attn.bq", 1, d, false, I::zeros);
        add(p + "attn.wk", d, d, true, I::normal);
        add(p + "attn.wv", d, d, true, I::normal);
        add(p + "attn.bv", 1, d, false, I::zeros);
        add(p + "attn.wo", d, d, true, I::residual);
        add(p + "attn.bo", 1, d, false, I::zeros);
        add(p + "ln2.g", 1, d, false, I::ones);
        add(p + "ln2.b", 1, d, false, I::zeros);
        add(p + "mlp.wfc", d, 4 * d, true, I::normal);
        add(p + "mlp.bfc", 1, 4 * d, false, I::zeros);
        add(p + "mlp.wproj", 4 * d, d, true, I::residual);
        add(p + "mlp.bproj", 1, d, false, I::zeros);
    }
    add("lnf.g", 1, d, false, I::ones);
    add("lnf.b", 1, d, false, I::zeros);
    return specs;
}

inline std::size_t parameter_count(const ModelConfig& c) {
    const auto specs = parameter_layout(c);
    return specs.back().offset + specs.back().size();
}

namespace detail {

inline constexpr std::size_t kTensorsPerLayer = 15;
inline constexpr double kLayerNormEps = 1e-5;

template <class T>
T gelu(T x) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T u = c * (x + static_cast<T>(0.044715) * x * x * x);
    return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::tanh(u));
}

template <class T>
T gelu_grad(T x) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T u = c * (x + static_cast<T>(0.044715) * x * x * x);
    const T th = std::tanh(u);
    const T du = c * (static_cast<T>(1) + static_cast<T>(3 * 0.044715) * x * x);
    return static_cast<T>(0.5) * (static_cast<T>(1) + th) + static_cast<T>(0.5) * x * (static_cast<T>(1) - th * th) * du;
}

// out[j] = b[j] + sum_i x[i] * W[i, j]
template <class T>
void affine(T* out, const T* x, const T* w, const T* b, std::size_t in, std::size_t out_dim) {
    std::copy(b, b + out_dim, out);
    for (std::size_t i = 0; i < in; ++i) {
        const T xi = x[i];
        const T* row = w + i * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) {
            out[j] += xi * row[j];
        }
    }
}

template <class T>
void linear(T* out, const T* x, const T* w, std::size_t in, std::size_t out_dim) {
    std::fill(out, out + out_dim, T{0});
    for (std::size_t i = 0; i < in; ++i) {
        const T xi = x[i];
        const T* row = w + i * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) {
            out[j] += xi * row[j];
        }
    }
}

template <class T>
void linear_backward(const T* dout, const T* x, const T* w, T* dx, T* dw, std::size_t in, std::size_t out_dim) {
    for (std::size_t i = 0; i < in; ++i) {
        const T* row = w + i * out_dim;
        T* drow = dw + i * out_dim;
        const T xi = x[i];
        T acc = 0;
        for (std::size_t j = 0; j < out_dim; ++j) {
            acc += dout[j] * row[j];
            drow[j] += xi * dout[j];
        }
        dx[i] += acc;
    }
}

// dx[i] += sum_j dout[j] * W[i, j];  dW[i, j] += x[i] * dout[j];  db[j] += dout[j]
template <class T>
void affine_backward(const T* dout, const T* x, const T* w, T* dx, T* dw, T* db, std::size_t in,
                     std::size_t out_dim) {
    for (std::size_t j = 0; j < out_dim; ++j) {
        db[j] += dout[j];
    }
    for (std::size_t i = 0; i < in; ++i) {
        const T* row = w + i * out_dim;
        T* drow = dw + i * out_dim;
        const T xi = x[i];
        T acc = 0;
        for (std::size_t j = 0; j < out_dim; ++j) {
            acc += dout[j] * row[j];
            drow[j] += xi * dout[j];
        }
        dx[i] += acc;
    }
}

template <class T>
void layer_norm(T* out, T* xhat, T& rstd, const T* x, const T* g, const T* b, std::size_t d) {
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) {
        mean += x[i];
    }
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) {
        const T c = x[i] - mean;
        var += c * c;
    }
    var /= static_cast<T>(d);
    rstd = static_cast<T>(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t i = 0; i < d; ++i) {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = xhat[i] * g[i] + b[i];
    }
}

// Accumulates into dx, dg, db.
template <class T>
void layer_norm_backward(const T* dout, const T* xhat, T rstd, const T* g, T* dx, T* dg, T* db, std::size_t d) {
    T mean_dxhat = 0;
    T mean_dxhat_xhat = 0;
    for (std::size_t i = 0; i < d; ++i) {
        const T dxh = dout[i] * g[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
        dg[i] += dout[i] * xhat[i];
        db[i] += dout[i];
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    for (std::size_t i = 0; i < d; ++i) {
        const T dxh = dout[i] * g[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

}  // namespace detail

/// Per-layer cached intermediates, one row per position.
template <class T>
struct LayerActivations {
    std::vector<T> ln1_xhat, ln1_rstd, ln1_out;
    std::vector<T> q, k, v;
    std::vector<T> att;  // triangular: position t, head h -> offset H*t(t+1)/2 + h(t+1), length t+1
    std::vector<T> y;
    std::vector<T> attn_drop;  // dropout scale per element (empty when no dropout)
    std::vector<T> ln2_xhat, ln2_rstd, ln2_out;
    std::vector<T> fc_pre, fc_act;
    std::vector<T> mlp_drop;
};

/// Everything the backward pass (or the next incremental step) needs.
template <class T>
struct Activations {
    std::vector<TokenId> tokens;
    std::vector<T> emb_drop;
    std::vector<LayerActivations<T>> layers;
    std::vector<T> residual;  // final residual stream, [n, d]
    std::vector<T> lnf_xhat, lnf_rstd, lnf_out;
    std::vector<T> logits;  // [n, vocab]

    std::size_t size() const { return tokens.size(); }
};

/// Dropout switch for a training forward. rate 0 or no rng = inference.
struct DropoutPlan {
    double rate = 0.0;
    Rng* rng = nullptr;
};

template <class T>
class Transformer {
public:
    Transformer() = default;

    /// All parameters zero.
    explicit Transformer(const ModelConfig& config, std::size_t min_vocab = 1)
        : config_(config), layout_(parameter_layout(config)) {
        config_.validate(min_vocab);
        params_.assign(layout_.back().offset + layout_.back().size(), T{0});
    }

    /// GPT-2 style initialisation: N(0, init_std), residual projections scaled
    /// by 1/sqrt(2 * n_layers), LayerNorm gains 1, biases 0.
    void init_random(std::uint64_t seed) {
        Rng rng(seed, "init");
        const double residual_std = config_.init_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
        for (const auto& spec : layout_) {
            T* p = params_.data() + spec.offset;
            for (std::size_t i = 0; i < spec.size(); ++i) {
                switch (spec.init) {
                    case TensorSpec::Init::normal: p[i] = static_cast<T>(rng.normal(0.0, config_.init_std)); break;
                    case TensorSpec::Init::residual: p[i] = static_cast<T>(rng.normal(0.0, residual_std)); break;
                    case TensorSpec::Init::zeros: p[i] = T{0}; break;
                    case TensorSpec::Init::ones: p[i] = T{1}; break;
                }
            }
        }
    }

    const ModelConfig& config() const { return config_; }
    const std::vector<TensorSpec>& layout() const { return layout_; }
    std::vector<T>& parameters() { return params_; }
    const std::vector<T>& parameters() const { return params_; }

    std::span<const T> tensor(std::size_t index) const {
        return {params_.data() + layout_[index].offset, layout_[index].size()};
    }
    std::span<const T> token_embedding(TokenId id) const {
        return {params_.data() + static_cast<std::size_t>(id) * config_.d_model, config_.d_model};
    }

    /// Runs positions [start, tokens.size()) given cached state for [0, start).
    /// Throws DataError for out-of-range ids or sequences longer than the context.
    void forward(Activations<T>& acts, std::span<const TokenId> tokens, std::size_t start,
                 DropoutPlan dropout = {}) const {
        const std::size_t n = tokens.size();
        const std::size_t d = config_.d_model;
        const std::size_t nh = config_.n_heads;
        const std::size_t hd = config_.head_dim();
        const std::size_t V = config_.vocab_size;
        if (n > config_.context) {
            throw DataError("sequence of " + std::to_string(n) + " tokens exceeds the context of " +
                            std::to_string(config_.context));
        }
        if (start > acts.size() || start > n) {
            throw Error("forward: cached prefix shorter than the requested start");
        }
        for (std::size_t t = start; t < n; ++t) {
            if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= V) {
                throw DataError("token id " + std::to_string(tokens[t]) + " outside the vocabulary");
            }
        }
        const bool drop = dropout.rate > 0.0 && dropout.rng != nullptr;
        const T keep_scale = drop ? static_cast<T>(1.0 / (1.0 - dropout.rate)) : T{1};
        auto fill_mask = [&](std::vector<T>& mask) {
            if (!drop) {
                mask.clear();
                return;
            }
            mask.resize(n * d);
            for (std::size_t i = start * d; i < n * d; ++i) {
                mask[i] = dropout.rng->bernoulli(dropout.rate) ? T{0} : keep_scale;
            }
        };

        resize(acts, n);
        acts.tokens.assign(tokens.begin(), tokens.end());

        // Embeddings into the residual stream.
        const T* wte = params_.data() + layout_[0].offset;
        const T* wpe = params_.data() + layout_[1].offset;
        fill_mask(acts.emb_drop);
        for (std::size_t t = start; t < n; ++t) {
            T* x = acts.residual.data() + t * d;
            const T* te = wte + static_cast<std::size_t>(tokens[t]) * d;
            const T* pe = wpe + t * d;
            for (std::size_t i = 0; i < d; ++i) {
                x[i] = te[i] + pe[i];
                if (drop) {
                    x[i] *= acts.emb_drop[t * d + i];
                }
            }
        }

        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
        std::vector<T> tmp(4 * d);
        std::vector<T> scores(n);
        for (std::size_t l = 0; l < config_.n_layers; ++l) {
            const LayerParams p = layer(l);
            LayerActivations<T>& a = acts.layers[l];
            fill_mask(a.attn_drop);
            fill_mask(a.mlp_drop);
            for (std::size_t t = start; t < n; ++t) {
                T* x = acts.residual.data() + t * d;
                detail::layer_norm(&a.ln1_out[t * d], &a.ln1_xhat[t * d], a.ln1_rstd[t], x, p.ln1_g, p.ln1_b, d);
                detail::affine(&a.q[t * d], &a.ln1_out[t * d], p.wq, p.bq, d, d);
                detail::linear(&a.k[t * d], &a.ln1_out[t * d], p.wk, d, d);
                detail::affine(&a.v[t * d], &a.ln1_out[t * d], p.wv, p.bv, d, d);

                T* y = &a.y[t * d];
                std::fill(y, y + d, T{0});
                for (std::size_t h = 0; h < nh; ++h) {
                    const T* qh = &a.q[t * d + h * hd];
                    T maxv = -std::numeric_limits<T>::infinity();
                    for (std::size_t j = 0; j <= t; ++j) {
                        const T* kh = &a.k[j * d + h * hd];
                        T s = 0;
                        for (std::size_t c = 0; c < hd; ++c) {
                            s += qh[c] * kh[c];
                        }
                        scores[j] = s * scale;
                        maxv = std::max(maxv, scores[j]);
                    }
                    T* row = &a.att[att_offset(t, h)];
                    T denom = 0;
                    for (std::size_t j = 0; j <= t; ++j) {
                        row[j] = std::exp(scores[j] - maxv);
                        denom += row[j];
                    }
                    for (std::size_t j = 0; j <= t; ++j) {
                        row[j] /= denom;
                    }
                    T* yh = y + h * hd;
                    for (std::size_t j = 0; j <= t; ++j) {
                        const T* vh = &a.v[j * d + h * hd];
                        const T w = row[j];
                        for (std::size_t c = 0; c < hd; ++c) {
                            yh[c] += w * vh[c];
                        }
                    }
                }
                detail::affine(tmp.data(), y, p.wo, p.bo, d, d);
                for (std::size_t i = 0; i < d; ++i) {
                    x[i] += drop ? tmp[i] * a.attn_drop[t * d + i] : tmp[i];
                }

                detail::layer_norm(&a.ln2_out[t * d], &a.ln2_xhat[t * d], a.ln2_rstd[t], x, p.ln2_g, p.ln2_b, d);
                detail::affine(&a.fc_pre[t * 4 * d], &a.ln2_out[t * d], p.wfc, p.bfc, d, 4 * d);
                for (std::size_t i = 0; i < 4 * d; ++i) {
                    a.fc_act[t * 4 * d + i] = detail::gelu(a.fc_pre[t * 4 * d + i]);
                }
                detail::affine(tmp.data(), &a.fc_act[t * 4 * d], p.wproj, p.bproj, 4 * d, d);
                for (std::size_t i = 0; i < d; ++i) {
                    x[i] += drop ? tmp[i] * a.mlp_drop[t * d + i] : tmp[i];
                }
            }
        }

        const T* lnf_g = params_.data() + layout_[layout_.size() - 2].offset;
        const T* lnf_b = params_.data() + layout_[layout_.size() - 1].offset;
        for (std::size_t t = start; t < n; ++t) {
            T* z = &acts.lnf_out[t * d];
            detail::layer_norm(z, &acts.lnf_xhat[t * d], acts.lnf_rstd[t], &acts.residual[t * d], lnf_g, lnf_b, d);
            T* logits = &acts.logits[t * V];
            for (std::size_t vi = 0; vi < V; ++vi) {
                const T* e = wte + vi * d;
                T s = 0;
                for (std::size_t i = 0; i < d; ++i) {
                    s += z[i] * e[i];
                }
                logits[vi] = s;
            }
        }
    }

    /// Gradients of sum_t <dlogits[t], logits[t]> accumulated into `grads`
    /// (same layout as the parameters). Requires a full forward from start 0
    /// on the same activations.
    void backward(const Activations<T>& acts, std::span<const T> dlogits, std::span<T> grads) const {
        const std::size_t n = acts.size();
        const std::size_t d = config_.d_model;
        const std::size_t nh = config_.n_heads;
        const std::size_t hd = config_.head_dim();
        const std::size_t V = config_.vocab_size;
        if (dlogits.size() != n * V || grads.size() != params_.size()) {
            throw Error("backward: gradient buffers do not match the model");
        }
        const T* wte = params_.data() + layout_[0].offset;
        T* dwte = grads.data() + layout_[0].offset;
        T* dwpe = grads.data() + layout_[1].offset;

        // Output projection (tied) and final LayerNorm.
        std::vector<T> dx(n * d, T{0});
        std::vector<T> dz(d);
        const std::size_t nl = layout_.size();
        const T* lnf_g = params_.data() + layout_[nl - 2].offset;
        T* dlnf_g = grads.data() + layout_[nl - 2].offset;
        T* dlnf_b = grads.data() + layout_[nl - 1].offset;
        for (std::size_t t = 0; t < n; ++t) {
            std::fill(dz.begin(), dz.end(), T{0});
            const T* dl = &dlogits[t * V];
            const T* z = &acts.lnf_out[t * d];
            for (std::size_t vi = 0; vi < V; ++vi) {
                const T g = dl[vi];
                if (g == T{0}) {
                    continue;
                }
                const T* e = wte + vi * d;
                T* de = dwte + vi * d;
                for (std::size_t i = 0; i < d; ++i) {
                    dz[i] += g * e[i];
                    de[i] += g * z[i];
                }
            }
            detail::layer_norm_backward(dz.data(), &acts.lnf_xhat[t * d], acts.lnf_rstd[t], lnf_g, &dx[t * d], dlnf_g,
                                        dlnf_b, d);
        }

        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
        std::vector<T> dtmp(4 * d);
        std::vector<T> dy(n * d);
        std::vector<T> dq(n * d), dk(n * d), dv(n * d);
        std::vector<T> dln(d);
        std::vector<T> dm(d);
        std::vector<T> dp(n);
        for (std::size_t li = config_.n_layers; li-- > 0;) {
            const LayerParams p = layer(li);
            const LayerGrads g = layer_grads(grads, li);
            const LayerActivations<T>& a = acts.layers[li];
            const bool drop = !a.mlp_drop.empty();

            // MLP sublayer, residual branch.
            for (std::size_t t = 0; t < n; ++t) {
                T* dxt = &dx[t * d];
                for (std::size_t i = 0; i < d; ++i) {
                    dm[i] = drop ? dxt[i] * a.mlp_drop[t * d + i] : dxt[i];
                }
                std::fill(dtmp.begin(), dtmp.end(), T{0});
                detail::affine_backward(dm.data(), &a.fc_act[t * 4 * d], p.wproj, dtmp.data(), g.wproj, g.bproj, 4 * d, d);
                for (std::size_t i = 0; i < 4 * d; ++i) {
                    dtmp[i] *= detail::gelu_grad(a.fc_pre[t * 4 * d + i]);
                }
                std::fill(dln.begin(), dln.end(), T{0});
                detail::affine_backward(dtmp.data(), &a.ln2_out[t * d], p.wfc, dln.data(), g.wfc, g.bfc, d, 4 * d);
                detail::layer_norm_backward(dln.data(), &a.ln2_xhat[t * d], a.ln2_rstd[t], p.ln2_g, dxt, g.ln2_g,
                                            g.ln2_b, d);
            }

            // Attention output projection.
            std::fill(dy.begin(), dy.end(), T{0});
            for (std::size_t t = 0; t < n; ++t) {
                const T* dxt = &dx[t * d];
                for (std::size_t i = 0; i < d; ++i) {
                    dtmp[i] = drop ? dxt[i] * a.attn_drop[t * d + i] : dxt[i];
                }
                detail::affine_backward(dtmp.data(), &a.y[t * d], p.wo, &dy[t * d], g.wo, g.bo, d, d);
            }

            // Scaled dot-product attention.
            std::fill(dq.begin(), dq.end(), T{0});
            std::fill(dk.begin(), dk.end(), T{0});
            std::fill(dv.begin(), dv.end(), T{0});
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t h = 0; h < nh; ++h) {
                    const T* row = &a.att[att_offset(t, h)];
                    const T* dyh = &dy[t * d + h * hd];
                    T dot = 0;
                    for (std::size_t j = 0; j <= t; ++j) {
                        const T* vh = &a.v[j * d + h * hd];
                        T* dvh = &dv[j * d + h * hd];
                        T s = 0;
                        for (std::size_t c = 0; c < hd; ++c) {
                            s += dyh[c] * vh[c];
                            dvh[c] += row[j] * dyh[c];
                        }
                        dp[j] = s;
                        dot += row[j] * s;
                    }
                    const T* qh = &a.q[t * d + h * hd];
                    T* dqh = &dq[t * d + h * hd];
                    for (std::size_t j = 0; j <= t; ++j) {
                        const T ds = row[j] * (dp[j] - dot) * scale;
                        const T* kh = &a.k[j * d + h * hd];
                        T* dkh = &dk[j * d + h * hd];
                        for (std::size_t c = 0; c < hd; ++c) {
                            dqh[c] += ds * kh[c];
                            dkh[c] += ds * qh[c];
                        }
                    }
                }
            }

            // Q/K/V projections and LayerNorm 1.
            for (std::size_t t = 0; t < n; ++t) {
                std::fill(dln.begin(), dln.end(), T{0});
                const T* in = &a.ln1_out[t * d];
                detail::affine_backward(&dq[t * d], in, p.wq, dln.data(), g.wq, g.bq, d, d);
                detail::linear_backward(&dk[t * d], in, p.wk, dln.data(), g.wk, d, d);
                detail::affine_backward(&dv[t * d], in, p.wv, dln.data(), g.wv, g.bv, d, d);
                detail::layer_norm_backward(dln.data(), &a.ln1_xhat[t * d], a.ln1_rstd[t], p.ln1_g, &dx[t * d],
                                            g.ln1_g, g.ln1_b, d);
            }
        }

        // Embeddings.
        const bool drop = !acts.emb_drop.empty();
        for (std::size_t t = 0; t < n; ++t) {
            T* de = dwte + static_cast<std::size_t>(acts.tokens[t]) * d;
            T* dp_row = dwpe + t * d;
            for (std::size_t i = 0; i < d; ++i) {
                const T gval = drop ? dx[t * d + i] * acts.emb_drop[t * d + i] : dx[t * d + i];
                de[i] += gval;
                dp_row[i] += gval;
            }
        }
    }

    /// Attention row of `head` at query position `t` in `layer` (length t + 1).
    std::span<const T> attention_row(const Activations<T>& acts, std::size_t layer_index, std::size_t head,
                                     std::size_t t) const {
        return {acts.layers[layer_index].att.data() + att_offset(t, head), t + 1};
    }

    /// Drops cached positions beyond n (for incremental decoding after divergence).
    void truncate(Activations<T>& acts, std::size_t n) const {
        if (n < acts.size()) {
            resize(acts, n);
            acts.tokens.resize(n);
        }
    }

private:
    struct LayerParams {
        const T *ln1_g, *ln1_b, *wq, *bq, *wk, *wv, *bv, *wo, *bo, *ln2_g, *ln2_b, *wfc, *bfc, *wproj, *bproj;
    };
    struct LayerGrads {
        T *ln1_g, *ln1_b, *wq, *bq, *wk, *wv, *bv, *wo, *bo, *ln2_g, *ln2_b, *wfc, *bfc, *wproj, *bproj;
    };

    LayerParams layer(std::size_t l) const {
        const std::size_t base = 2 + l * detail::kTensorsPerLayer;
        auto at = [&](std::size_t k) { return params_.data() + layout_[base + k].offset; };
        return {at(0), at(1), at(2), at(3), at(4), at(5), at(6), at(7),
                at(8), at(9), at(10), at(11), at(12), at(13), at(14)};
    }

    LayerGrads layer_grads(std::span<T> grads, std::size_t l) const {
        const std::size_t base = 2 + l * detail::kTensorsPerLayer;
        auto at = [&](std::size_t k) { return grads.data() + layout_[base + k].offset; };
        return {at(0), at(1), at(2), at(3), at(4), at(5), at(6), at(7),
                at(8), at(9), at(10), at(11), at(12), at(13), at(14)};
    }

    std::size_t att_offset(std::size_t t, std::size_t h) const {
        return config_.n_heads * (t * (t + 1) / 2) + h * (t + 1);
    }

    void resize(Activations<T>& acts, std::size_t n) const {
        const std::size_t d = config_.d_model;
        acts.layers.resize(config_.n_layers);
        for (auto& a : acts.layers) {
            a.ln1_xhat.resize(n * d);
            a.ln1_rstd.resize(n);
            a.ln1_out.resize(n * d);
            a.q.resize(n * d);
            a.k.resize(n * d);
            a.v.resize(n * d);
            a.att.resize(config_.n_heads * (n * (n + 1) / 2));
            a.y.resize(n * d);
            a.ln2_xhat.resize(n * d);
            a.ln2_rstd.resize(n);
            a.ln2_out.resize(n * d);
            a.fc_pre.resize(n * 4 * d);
            a.fc_act.resize(n * 4 * d);
            if (!a.attn_drop.empty()) {
                a.attn_drop.resize(n * d);
                a.mlp_drop.resize(n * d);
            }
        }
        if (!acts.emb_drop.empty()) {
            acts.emb_drop.resize(n * d);
        }
        acts.residual.resize(n * d);
        acts.lnf_xhat.resize(n * d);
        acts.lnf_rstd.resize(n);
        acts.lnf_out.resize(n * d);
        acts.logits.resize(n * config_.vocab_size);
    }

    ModelConfig config_;
    std::vector<TensorSpec> layout_;
    std::vector<T> params_;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Sum over positions with mask[t] != 0 of -log softmax(logits[t])[targets[t]].
/// When `dlogits` is nonempty, accumulates weight * d(sum)/d(logits) into it.
template <class T>
double cross_entropy_sum(std::span<const T> logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask,
                         std::size_t vocab, std::span<T> dlogits = {}, T weight = T{1}) {
    double total = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (!mask.empty() && mask[t] == 0) {
            continue;
        }
        const T* row = logits.data() + t * vocab;
        const T maxv = *std::max_element(row, row + vocab);
        T denom = 0;
        for (std::size_t v = 0; v < vocab; ++v) {
            denom += std::exp(row[v] - maxv);
        }
        const T log_denom = std::log(denom);
        const auto target = static_cast<std::size_t>(targets[t]);
        total += static_cast<double>(log_denom - (row[target] - maxv));
        if (!dlogits.empty()) {
            T* drow = dlogits.data() + t * vocab;
            for (std::size_t v = 0; v < vocab; ++v) {
                drow[v] += weight * std::exp(row[v] - maxv - log_denom);
            }
            drow[target] -= weight;
        }
    }
    return total;
}

/// Mean next-token negative log-likelihood over unmasked positions.
/// Throws DataError when every position is masked.
template <class T>
double lm_loss(std::span<const T> logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask,
               std::size_t vocab) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        count += mask.empty() || mask[t] != 0 ? 1 : 0;
    }
    if (count == 0) {
        throw DataError("lm_loss: every position is masked");
    }
    return cross_entropy_sum<T>(logits, targets, mask, vocab) / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Batched forward with a right-padding mask
// ---------------------------------------------------------------------------

template <class T>
struct BatchOutput {
    std::size_t batch = 0, length = 0, vocab = 0, layers = 0, heads = 0;
    std::vector<T> logits;     // [B, T, V], zero at padded positions
    std::vector<T> attention;  // [B, L, H, T, T], zero above the diagonal and at padded positions

    T logit(std::size_t b, std::size_t t, std::size_t v) const { return logits[(b * length + t) * vocab + v]; }
    T attention_weight(std::size_t b, std::size_t l, std::size_t h, std::size_t i, std::size_t j) const {
        return attention[(((b * layers + l) * heads + h) * length + i) * length + j];
    }
};

/// tokens and mask are [batch, length] row-major; each mask row must be a run
/// of ones followed by zeros. Padded positions are never attended to.
template <class T>
BatchOutput<T> forward_batch(const Transformer<T>& model, std::span<const TokenId> tokens,
                             std::span<const std::uint8_t> mask, std::size_t batch, std::size_t length) {
    if (tokens.size() != batch * length || mask.size() != batch * length) {
        throw DataError("forward_batch: token/mask shape mismatch");
    }
    const ModelConfig& c = model.config();
    BatchOutput<T> out{batch, length, c.vocab_size, c.n_layers, c.n_heads, {}, {}};
    out.logits.assign(batch * length * c.vocab_size, T{0});
    out.attention.assign(batch * c.n_layers * c.n_heads * length * length, T{0});
    Activations<T> acts;
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t real = 0;
        while (real < length && mask[b * length + real] != 0) {
            ++real;
        }
        for (std::size_t t = real; t < length; ++t) {
            if (mask[b * length + t] != 0) {
                throw DataError("forward_batch: padding must be a suffix of each row");
            }
        }
        model.forward(acts, tokens.subspan(b * length, real), 0);
        std::copy(acts.logits.begin(), acts.logits.end(), out.logits.begin() + static_cast<std::ptrdiff_t>(b * length * c.vocab_size));
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                for (std::size_t i = 0; i < real; ++i) {
                    const auto row = model.attention_row(acts, l, h, i);
                    for (std::size_t j = 0; j <= i; ++j) {
                        out.attention[(((b * c.n_layers + l) * c.n_heads + h) * length + i) * length + j] = row[j];
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace ehrgpt
