#pragma once
// Synthetic anomalous training samples: smooth multi-octave value noise is
// quantile-thresholded into a blob mask, and foreign texture is opacity
// blended into the normal image inside the mask. Outside the mask the image
// is unchanged bit-exactly.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "costfilter/errors.hpp"
#include "costfilter/tensor.hpp"

namespace costfilter {

template <class T>
struct TrainingSample {
    Tensor<T> image;  // (3,H,W)
    Tensor<T> mask;   // (H,W) in {0,1}
    std::size_t label = 0;
    bool is_anomalous = false;
    std::string base_id;
};

struct SynthParams {
    double anomaly_probability = 0.5;
    double min_area = 0.01;
    double max_area = 0.2;
    double min_opacity = 0.4;
    double max_opacity = 1.0;
    int noise_octaves = 3;
    int base_grid = 4;   // coarsest noise grid
    int max_retries = 10;

    void validate() const {
        if (!(min_area > 0 && min_area <= max_area && max_area < 1))
            throw ConfigError("SynthParams: need 0 < min_area <= max_area < 1");
        if (anomaly_probability < 0 || anomaly_probability > 1)
            throw ConfigError("SynthParams: anomaly_probability out of [0,1]");
    }
};

namespace synth_detail {

// Multi-octave value noise in [0,1), bilinearly interpolated from random
// coarse grids.
template <class T>
Tensor<T> smooth_noise(std::size_t H, std::size_t W, const SynthParams& p,
                       std::mt19937_64& rng) {
    Tensor<T> out(Shape{H, W}, T(0));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    double weight = 1.0, wsum = 0.0;
    for (int o = 0; o < p.noise_octaves; ++o) {
        std::size_t g = static_cast<std::size_t>(p.base_grid) << o;
        std::vector<double> grid((g + 1) * (g + 1));
        for (auto& v : grid) v = uni(rng);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double fy = static_cast<double>(y) * g / H;
                double fx = static_cast<double>(x) * g / W;
                std::size_t gy = static_cast<std::size_t>(fy), gx = static_cast<std::size_t>(fx);
                double ty = fy - gy, tx = fx - gx;
                double v00 = grid[gy * (g + 1) + gx], v01 = grid[gy * (g + 1) + gx + 1];
                double v10 = grid[(gy + 1) * (g + 1) + gx], v11 = grid[(gy + 1) * (g + 1) + gx + 1];
                double v = (1 - ty) * ((1 - tx) * v00 + tx * v01) +
                           ty * ((1 - tx) * v10 + tx * v11);
                out(y, x) += static_cast<T>(weight * v);
            }
        wsum += weight;
        weight *= 0.5;
    }
    for (auto& v : out.vec()) v = static_cast<T>(v / wsum);
    return out;
}

}  // namespace synth_detail

// Deterministic given (inputs, seed). A degenerate (empty) mask is resampled
// up to max_retries; after that the sample degrades to a plain normal one.
template <class T>
TrainingSample<T> synthesize(const Tensor<T>& normal, const Tensor<T>& source_texture,
                             const SynthParams& params, std::uint64_t seed,
                             std::size_t label = 0) {
    params.validate();
    if (normal.ndim() != 3 || normal.dim(0) != 3)
        throw ShapeError("synthesize: normal image must be (3,H,W)");
    std::size_t H = normal.dim(1), W = normal.dim(2);

    TrainingSample<T> out;
    out.image = normal;
    out.mask = Tensor<T>(Shape{H, W}, T(0));
    out.label = label;

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    if (uni(rng) >= params.anomaly_probability) return out;  // normal sample

    for (int attempt = 0; attempt < params.max_retries; ++attempt) {
        Tensor<T> noise = synth_detail::smooth_noise<T>(H, W, params, rng);
        double area = params.min_area + uni(rng) * (params.max_area - params.min_area);
        std::size_t target = static_cast<std::size_t>(area * static_cast<double>(H * W));
        if (target == 0) continue;
        // threshold at the (1-area) quantile so the mask hits the target area
        std::vector<T> sorted(noise.vec());
        std::nth_element(sorted.begin(), sorted.end() - target, sorted.end());
        T thresh = sorted[sorted.size() - target];
        Tensor<T> mask(Shape{H, W}, T(0));
        std::size_t count = 0;
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (noise[i] >= thresh && count < target) {
                mask[i] = T(1);
                ++count;
            }
        if (count == 0) continue;

        T beta = static_cast<T>(params.min_opacity +
                                uni(rng) * (params.max_opacity - params.min_opacity));
        Tensor<T> img = normal;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < H * W; ++i)
                if (mask[i] != T(0)) {
                    std::size_t o = c * H * W + i;
                    T tex = source_texture.size() == normal.size()
                                ? source_texture[o]
                                : source_texture[o % source_texture.size()];
                    img[o] = (T(1) - beta) * normal[o] + beta * tex;
                }
        out.image = std::move(img);
        out.mask = std::move(mask);
        out.is_anomalous = true;
        return out;
    }
    return out;  // degraded to normal with a zero mask
}

template <class T>
struct NormalPoolEntry {
    Tensor<T> image;
    std::size_t label = 0;
    std::string id;
};

// One epoch worth of samples; anomalous/normal mix follows
// params.anomaly_probability, textures default to other pool images
// (preferring another category). Per-sample seeds are seed + index.
template <class T>
std::vector<TrainingSample<T>> build_epoch(const std::vector<NormalPoolEntry<T>>& pool,
                                           const SynthParams& params, std::uint64_t seed,
                                           std::size_t samples_per_epoch = 0) {
    if (pool.empty()) throw ConfigError("build_epoch: empty normal pool");
    std::size_t n = samples_per_epoch ? samples_per_epoch : pool.size();
    std::vector<TrainingSample<T>> out;
    out.reserve(n);
    std::mt19937_64 order_rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t base = order_rng() % pool.size();
        // texture: prefer a pool image from a different category
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < pool.size(); ++j)
            if (pool[j].label != pool[base].label) others.push_back(j);
        std::size_t tex;
        if (!others.empty())
            tex = others[order_rng() % others.size()];
        else
            tex = (base + 1 + order_rng() % std::max<std::size_t>(1, pool.size() - 1)) %
                  pool.size();
        TrainingSample<T> s = synthesize(pool[base].image, pool[tex].image, params,
                                         seed + i, pool[base].label);
        s.base_id = pool[base].id;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace costfilter
