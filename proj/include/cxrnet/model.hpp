#pragma once

// The classifier: a stack of conv blocks (conv -> batch norm -> ReLU -> 2x2
// max-pool), flatten, hidden dense layers (dropout -> dense -> ReLU) and a
// single-logit head read through a sigmoid.

#include <string>
#include <utility>
#include <vector>

#include "cxrnet/config.hpp"
#include "cxrnet/error.hpp"
#include "cxrnet/layers.hpp"
#include "cxrnet/optim.hpp"
#include "cxrnet/rng.hpp"
#include "cxrnet/tensor.hpp"

namespace cxr {

enum class Label : int { normal = 0, pneumonia = 1 };

inline const char* label_name(Label l) { return l == Label::pneumonia ? "Pneumonia" : "Normal"; }

// Pneumonia iff p > 0.5 (strict).
inline Label classify(double probability) {
    return probability > 0.5 ? Label::pneumonia : Label::normal;
}

// Spatial extents through the block chain, or a config error if a pool would
// collapse the map.
struct BlockGeometry {
    int conv_extent;    // post-activation map size
    int pooled_extent;  // after the 2x2 pool
};

inline std::vector<BlockGeometry> block_geometry(const ModelConfig& cfg) {
    require(!cfg.block_filters.empty(), ErrorKind::parameter, "model needs at least one conv block");
    require(cfg.kernel >= 1, ErrorKind::parameter, "kernel must be >= 1");
    require(cfg.input_size >= 1, ErrorKind::parameter, "input_size must be >= 1");
    require(cfg.dropout >= 0 && cfg.dropout < 1, ErrorKind::parameter, "dropout must be in [0,1)");
    std::vector<BlockGeometry> geo;
    int extent = cfg.input_size;
    for (std::size_t b = 0; b < cfg.block_filters.size(); ++b) {
        require(cfg.block_filters[b] >= 1, ErrorKind::parameter, "block filters must be >= 1");
        require(extent + 2 * cfg.pad() >= cfg.kernel, ErrorKind::parameter,
                "spatial collapse: block " + std::to_string(b) + " kernel exceeds its input");
        const int conv = static_cast<int>(conv_out_extent(extent, cfg.kernel, 1, cfg.pad()));
        require(conv >= 2, ErrorKind::parameter,
                "spatial collapse: block " + std::to_string(b) + " map of " + std::to_string(conv) +
                    " cannot be pooled");
        geo.push_back({conv, conv / 2});
        extent = conv / 2;
    }
    for (int w : cfg.dense_widths)
        require(w >= 1, ErrorKind::parameter, "dense widths must be >= 1");
    return geo;
}

// Closed-form trainable parameter count, independent of any instantiated model.
inline long long count_parameters(const ModelConfig& cfg) {
    const auto geo = block_geometry(cfg);
    long long total = 0;
    long long in_ch = 1;
    const long long k2 = static_cast<long long>(cfg.kernel) * cfg.kernel;
    for (int f : cfg.block_filters) {
        if (cfg.conv_flavor == ConvFlavor::standard)
            total += f * in_ch * k2 + f;
        else
            total += in_ch * k2 + f * in_ch + f;
        if (cfg.batchnorm) total += 2LL * f;
        in_ch = f;
    }
    long long width = static_cast<long long>(geo.back().pooled_extent) * geo.back().pooled_extent * in_ch;
    for (int w : cfg.dense_widths) {
        total += width * w + w;
        width = w;
    }
    return total + width + 1;
}

template <typename Real>
class Model {
public:
    struct Block {
        ConvParams<Real> conv;
        SepConvParams<Real> sep;
        bool has_bn = false;
        BatchNormParams<Real> bn;

        Tensor<Real> grad_kernels, grad_depthwise, grad_pointwise, grad_bias;
        Tensor<Real> grad_gamma, grad_beta;

        ConvCache<Real> conv_cache;
        SepConvCache<Real> sep_cache;
        BatchNormCache<Real> bn_cache;
        ReluCache<Real> relu_cache;
        PoolCache pool_cache;
        Tensor<Real> activation;       // post-ReLU, pre-pool
        Tensor<Real> activation_grad;  // d(logit sum)/d(activation) from the last backward
    };

    struct DenseLayer {
        DenseParams<Real> p;
        Tensor<Real> grad_weights, grad_bias;
        bool dropout_before = false;
        bool relu_after = false;
        DropoutCache<Real> dropout_cache;
        DenseCache<Real> cache;
        ReluCache<Real> relu_cache;
    };

    Model(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        geometry_ = block_geometry(cfg);
        const Extent k = cfg.kernel;
        Extent in_ch = 1;
        for (int filters : cfg.block_filters) {
            Block b;
            const Extent f = filters;
            if (separable()) {
                b.sep.depthwise = he_init<Real>({in_ch, 1, k, k}, k * k, rng);
                b.sep.pointwise = he_init<Real>({f, in_ch, 1, 1}, in_ch, rng);
                b.sep.bias = Tensor<Real>({f}, Real(0));
                b.sep.stride = 1;
                b.sep.padding = cfg.pad();
                b.grad_depthwise = Tensor<Real>(b.sep.depthwise.shape(), Real(0));
                b.grad_pointwise = Tensor<Real>(b.sep.pointwise.shape(), Real(0));
            } else {
                b.conv.kernels = he_init<Real>({f, in_ch, k, k}, in_ch * k * k, rng);
                b.conv.bias = Tensor<Real>({f}, Real(0));
                b.conv.stride = 1;
                b.conv.padding = cfg.pad();
                b.grad_kernels = Tensor<Real>(b.conv.kernels.shape(), Real(0));
            }
            b.grad_bias = Tensor<Real>({f}, Real(0));
            b.has_bn = cfg.batchnorm;
            if (b.has_bn) {
                b.bn = BatchNormParams<Real>::make(f, cfg.bn_momentum, cfg.bn_epsilon);
                b.grad_gamma = Tensor<Real>({f}, Real(0));
                b.grad_beta = Tensor<Real>({f}, Real(0));
            }
            blocks_.push_back(std::move(b));
            in_ch = f;
        }
        Extent width = Extent(geometry_.back().pooled_extent) * geometry_.back().pooled_extent * in_ch;
        for (int w : cfg.dense_widths) {
            dense_.push_back(make_dense(width, w, rng));
            dense_.back().dropout_before = true;
            dense_.back().relu_after = true;
            width = w;
        }
        dense_.push_back(make_dense(width, 1, rng));
        dense_.back().dropout_before = cfg.dense_widths.empty();
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    std::size_t block_count() const noexcept { return blocks_.size(); }
    const Block& block(std::size_t i) const { return blocks_.at(i); }
    Block& block(std::size_t i) { return blocks_.at(i); }
    const std::vector<DenseLayer>& dense_layers() const noexcept { return dense_; }
    std::vector<DenseLayer>& dense_layers() noexcept { return dense_; }
    const std::vector<BlockGeometry>& geometry() const noexcept { return geometry_; }

    // Logits [batch] for input [batch, 1, s, s]. Caches everything backward needs.
    Tensor<Real> forward(const Tensor<Real>& input, Mode mode, Rng* rng = nullptr) {
        const Shape want{input.rank() == 4 ? input.dim(0) : 0, 1, cfg_.input_size, cfg_.input_size};
        require(input.rank() == 4 && input.shape() == want, ErrorKind::shape,
                "model input must be [batch, 1, " + std::to_string(cfg_.input_size) + ", " +
                    std::to_string(cfg_.input_size) + "], got " + shape_str(input.shape()));
        return run(input, 0, false, mode, rng);
    }

    // Logits computed from a supplied post-activation map of `block_index`,
    // skipping the earlier stages. Inference mode.
    Tensor<Real> forward_from_activation(std::size_t block_index, const Tensor<Real>& activation) {
        require(block_index < blocks_.size(), ErrorKind::parameter, "block index out of range");
        return run(activation, block_index, true, Mode::infer, nullptr);
    }

    Tensor<Real> predict_proba(const Tensor<Real>& input) {
        return sigmoid(forward(input, Mode::infer));
    }

    // Backpropagates d(loss)/d(logits) [batch]; overwrites every gradient slot
    // and each block's activation_grad.
    void backward(const Tensor<Real>& grad_logits) {
        require(!dense_.empty() && grad_logits.size() == static_cast<std::size_t>(dense_.back().cache.input.dim(0)),
                ErrorKind::shape, "backward grad_logits does not match last forward batch");
        Tensor<Real> g = grad_logits.reshaped({static_cast<Extent>(grad_logits.size()), 1});
        for (auto it = dense_.rbegin(); it != dense_.rend(); ++it) {
            if (it->relu_after) g = relu_backward(g, it->relu_cache);
            auto dg = dense_backward(g, it->cache, it->p);
            it->grad_weights = std::move(dg.weights);
            it->grad_bias = std::move(dg.bias);
            g = std::move(dg.input);
            if (it->dropout_before) g = dropout_backward(g, it->dropout_cache);
        }
        g = g.reshaped(pooled_shape_);
        for (std::size_t bi = blocks_.size(); bi-- > first_block_;) {
            Block& b = blocks_[bi];
            g = maxpool2_backward(g, b.pool_cache);
            b.activation_grad = g;
            if (bi == first_block_ && started_from_activation_) break;
            g = relu_backward(g, b.relu_cache);
            if (b.has_bn) {
                auto bg = batchnorm_backward(g, b.bn_cache, b.bn);
                b.grad_gamma = std::move(bg.gamma);
                b.grad_beta = std::move(bg.beta);
                g = std::move(bg.input);
            }
            if (separable()) {
                auto sg = sepconv_backward(g, b.sep_cache, b.sep);
                b.grad_depthwise = std::move(sg.depthwise);
                b.grad_pointwise = std::move(sg.pointwise);
                b.grad_bias = std::move(sg.bias);
                g = std::move(sg.input);
            } else {
                auto cg = conv2d_backward(g, b.conv_cache, b.conv);
                b.grad_kernels = std::move(cg.kernels);
                b.grad_bias = std::move(cg.bias);
                g = std::move(cg.input);
            }
        }
        input_grad_ = std::move(g);
    }

    const Tensor<Real>& input_grad() const noexcept { return input_grad_; }

    // Trainable tensors in declaration order.
    std::vector<ParamRef<Real>> parameters() {
        std::vector<ParamRef<Real>> out;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            Block& b = blocks_[i];
            const std::string pre = "block" + std::to_string(i) + ".";
            if (separable()) {
                out.push_back({pre + "depthwise", &b.sep.depthwise, &b.grad_depthwise});
                out.push_back({pre + "pointwise", &b.sep.pointwise, &b.grad_pointwise});
                out.push_back({pre + "bias", &b.sep.bias, &b.grad_bias});
            } else {
                out.push_back({pre + "kernels", &b.conv.kernels, &b.grad_kernels});
                out.push_back({pre + "bias", &b.conv.bias, &b.grad_bias});
            }
            if (b.has_bn) {
                out.push_back({pre + "bn.gamma", &b.bn.gamma, &b.grad_gamma});
                out.push_back({pre + "bn.beta", &b.bn.beta, &b.grad_beta});
            }
        }
        for (std::size_t i = 0; i < dense_.size(); ++i) {
            const std::string pre = "dense" + std::to_string(i) + ".";
            out.push_back({pre + "weights", &dense_[i].p.weights, &dense_[i].grad_weights});
            out.push_back({pre + "bias", &dense_[i].p.bias, &dense_[i].grad_bias});
        }
        return out;
    }

    // Every persisted tensor (trainables plus batch-norm running statistics) in
    // declaration order.
    std::vector<std::pair<std::string, Tensor<Real>*>> state_tensors() {
        std::vector<std::pair<std::string, Tensor<Real>*>> out;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            Block& b = blocks_[i];
            const std::string pre = "block" + std::to_string(i) + ".";
            if (separable()) {
                out.emplace_back(pre + "depthwise", &b.sep.depthwise);
                out.emplace_back(pre + "pointwise", &b.sep.pointwise);
                out.emplace_back(pre + "bias", &b.sep.bias);
            } else {
                out.emplace_back(pre + "kernels", &b.conv.kernels);
                out.emplace_back(pre + "bias", &b.conv.bias);
            }
            if (b.has_bn) {
                out.emplace_back(pre + "bn.gamma", &b.bn.gamma);
                out.emplace_back(pre + "bn.beta", &b.bn.beta);
                out.emplace_back(pre + "bn.running_mean", &b.bn.running_mean);
                out.emplace_back(pre + "bn.running_var", &b.bn.running_var);
            }
        }
        for (std::size_t i = 0; i < dense_.size(); ++i) {
            const std::string pre = "dense" + std::to_string(i) + ".";
            out.emplace_back(pre + "weights", &dense_[i].p.weights);
            out.emplace_back(pre + "bias", &dense_[i].p.bias);
        }
        return out;
    }

    std::vector<Tensor<Real>> snapshot() {
        std::vector<Tensor<Real>> out;
        for (auto& [name, t] : state_tensors()) out.push_back(*t);
        return out;
    }

    void restore(const std::vector<Tensor<Real>>& snap) {
        auto st = state_tensors();
        require(snap.size() == st.size(), ErrorKind::shape, "snapshot tensor count mismatch");
        for (std::size_t i = 0; i < st.size(); ++i) {
            require_same_shape(st[i].second->shape(), snap[i].shape(), st[i].first.c_str());
            *st[i].second = snap[i];
        }
    }

    long long parameter_count() {
        long long n = 0;
        for (const auto& p : parameters()) n += static_cast<long long>(p.value->size());
        return n;
    }

private:
    bool separable() const { return cfg_.conv_flavor == ConvFlavor::separable; }

    static DenseLayer make_dense(Extent in, Extent out, Rng& rng) {
        DenseLayer d;
        d.p.weights = he_init<Real>({in, out}, in, rng);
        d.p.bias = Tensor<Real>({out}, Real(0));
        d.grad_weights = Tensor<Real>(d.p.weights.shape(), Real(0));
        d.grad_bias = Tensor<Real>(d.p.bias.shape(), Real(0));
        return d;
    }

    Tensor<Real> run(const Tensor<Real>& input, std::size_t first, bool from_activation, Mode mode,
                     Rng* rng) {
        first_block_ = first;
        started_from_activation_ = from_activation;
        Tensor<Real> x = input;
        for (std::size_t bi = first; bi < blocks_.size(); ++bi) {
            Block& b = blocks_[bi];
            if (!(from_activation && bi == first)) {
                if (separable()) {
                    auto [y, c] = sepconv_forward(x, b.sep);
                    b.sep_cache = std::move(c);
                    x = std::move(y);
                } else {
                    auto [y, c] = conv2d_forward(x, b.conv);
                    b.conv_cache = std::move(c);
                    x = std::move(y);
                }
                if (b.has_bn) {
                    auto [y, c] = batchnorm_forward(x, b.bn, mode);
                    b.bn_cache = std::move(c);
                    x = std::move(y);
                }
                auto [y, c] = relu(x);
                b.relu_cache = std::move(c);
                x = std::move(y);
            }
            b.activation = x;
            auto [pooled, pc] = maxpool2(x);
            b.pool_cache = std::move(pc);
            x = std::move(pooled);
        }
        pooled_shape_ = x.shape();
        const Extent batch = x.dim(0);
        x = x.reshaped({batch, static_cast<Extent>(x.size()) / batch});
        for (DenseLayer& d : dense_) {
            if (d.dropout_before) {
                Rng fallback(0);
                auto [y, c] = dropout(x, cfg_.dropout, mode, rng ? *rng : fallback);
                require(mode == Mode::infer || rng != nullptr || cfg_.dropout == 0.0,
                        ErrorKind::parameter, "train-mode forward needs an Rng for dropout");
                d.dropout_cache = std::move(c);
                x = std::move(y);
            }
            auto [y, c] = dense_forward(x, d.p);
            d.cache = std::move(c);
            x = std::move(y);
            if (d.relu_after) {
                auto [r, rc] = relu(x);
                d.relu_cache = std::move(rc);
                x = std::move(r);
            }
        }
        return x.reshaped({batch});
    }

    ModelConfig cfg_;
    std::vector<BlockGeometry> geometry_;
    std::vector<Block> blocks_;
    std::vector<DenseLayer> dense_;
    Shape pooled_shape_;
    std::size_t first_block_ = 0;
    bool started_from_activation_ = false;
    Tensor<Real> input_grad_;
};

}  // namespace cxr
