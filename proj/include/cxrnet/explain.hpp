#pragma once

// Feature-map extraction and Grad-CAM heatmaps.

#include <algorithm>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "cxrnet/error.hpp"
#include "cxrnet/imaging.hpp"
#include "cxrnet/model.hpp"
#include "cxrnet/tensor.hpp"

namespace cxr {

template <typename Real>
struct Heatmap {
    Tensor<Real> values;  // [h, w] in [0, 1]
    Tensor<Real> raw;     // [h, w] before normalization
    std::size_t source_layer = 0;
    std::string input_ref;
    bool constant = false;  // raw map had no spread; see normalize rules below
};

// Min-max scaling to [0, 1]. A map with no spread becomes all zeros, or all
// ones when `constant_positive_to_one` is set and the constant is > 0.
template <typename Real>
Tensor<Real> minmax_normalize(const Tensor<Real>& map, bool constant_positive_to_one, bool* constant = nullptr) {
    const auto [lo_it, hi_it] = std::minmax_element(map.span().begin(), map.span().end());
    const double lo = *lo_it, hi = *hi_it;
    Tensor<Real> out(map.shape(), Real(0));
    if (!(hi > lo)) {
        if (constant) *constant = true;
        if (constant_positive_to_one && hi > 0) out.fill(Real(1));
        return out;
    }
    if (constant) *constant = false;
    for (std::size_t i = 0; i < map.size(); ++i)
        out[i] = static_cast<Real>((map[i] - lo) / (hi - lo));
    return out;
}

inline void require_block(std::size_t block_index, std::size_t depth) {
    require(block_index < depth, ErrorKind::parameter,
            "block index " + std::to_string(block_index) + " out of range (model has " +
                std::to_string(depth) + " blocks)");
}

// Post-activation maps (pre-pool) of one block for a single image [1, 1, s, s],
// each min-max normalized on its own. Inference mode; parameters are untouched.
template <typename Real>
std::vector<Tensor<Real>> feature_maps(Model<Real>& model, const Tensor<Real>& image, std::size_t block_index) {
    require_block(block_index, model.block_count());
    require(image.rank() == 4 && image.dim(0) == 1, ErrorKind::shape, "feature_maps takes a single image [1,1,s,s]");
    model.forward(image, Mode::infer);
    const Tensor<Real>& act = model.block(block_index).activation;
    const Extent ch = act.dim(1), h = act.dim(2), w = act.dim(3);
    std::vector<Tensor<Real>> maps;
    for (Extent c = 0; c < ch; ++c) {
        Tensor<Real> m({h, w}, Real(0));
        std::copy_n(act.data() + c * h * w, h * w, m.data());
        maps.push_back(minmax_normalize(m, false));
    }
    return maps;
}

// Raw class-activation map at the block's resolution: ReLU(sum_k w_k A_k) with
// w_k the spatial mean of d(logit)/dA_k.
template <typename Real>
Tensor<Real> grad_cam_raw(Model<Real>& model, const Tensor<Real>& image, std::size_t block_index) {
    require_block(block_index, model.block_count());
    require(image.rank() == 4 && image.dim(0) == 1, ErrorKind::shape, "grad_cam takes a single image [1,1,s,s]");
    model.forward(image, Mode::infer);
    model.backward(Tensor<Real>({1}, Real(1)));
    const auto& blk = model.block(block_index);
    const Tensor<Real>& act = blk.activation;
    const Tensor<Real>& grad = blk.activation_grad;
    const Extent ch = act.dim(1), h = act.dim(2), w = act.dim(3), plane = h * w;
    Tensor<Real> cam({h, w}, Real(0));
    for (Extent c = 0; c < ch; ++c) {
        double weight = 0;
        for (Extent j = 0; j < plane; ++j) weight += grad.data()[c * plane + j];
        weight /= static_cast<double>(plane);
        for (Extent j = 0; j < plane; ++j)
            cam.data()[j] = static_cast<Real>(cam.data()[j] + weight * act.data()[c * plane + j]);
    }
    for (auto& v : cam.span()) v = v > Real(0) ? v : Real(0);
    return cam;
}

// Grad-CAM targeting the pre-sigmoid logit, upsampled to the model input size.
// Defaults to the last conv block.
template <typename Real>
Heatmap<Real> grad_cam(Model<Real>& model, const Tensor<Real>& image, std::optional<std::size_t> block = {},
                       std::string input_ref = {}) {
    const std::size_t bi = block.value_or(model.block_count() - 1);
    const Tensor<Real> cam = grad_cam_raw(model, image, bi);
    const int s = model.config().input_size;
    Heatmap<Real> hm;
    hm.raw = resize_bilinear(cam, s, s);
    hm.values = minmax_normalize(hm.raw, true, &hm.constant);
    hm.source_layer = bi;
    hm.input_ref = std::move(input_ref);
    return hm;
}

template <typename Real>
GrayImage map_to_image(const Tensor<Real>& map) {
    require(map.rank() == 2, ErrorKind::shape, "map_to_image expects [h, w]");
    GrayImage img(static_cast<int>(map.dim(1)), static_cast<int>(map.dim(0)));
    for (std::size_t i = 0; i < map.size(); ++i) img.pixels[i] = clamp_round_u8(255.0 * map[i]);
    return img;
}

// Row-major reals, one map row per line.
template <typename Real>
std::string map_text(const Tensor<Real>& map) {
    std::string s;
    char buf[32];
    for (Extent y = 0; y < map.dim(0); ++y) {
        for (Extent x = 0; x < map.dim(1); ++x) {
            std::snprintf(buf, sizeof buf, x ? " %.9g" : "%.9g", static_cast<double>(map(y, x)));
            s += buf;
        }
        s += "\n";
    }
    return s;
}

}  // namespace cxr
