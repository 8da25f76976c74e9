#pragma once
// Feature encoders, diffusion-step reconstruction, and template sampling.
//
// Images are (3,H,W) tensors with values in [0,1]. Multi-layer features are
// L grids of identical (C,H',W'); any backbone goes behind FeatureEncoder,
// which owns the resampling of its native layer resolutions to a common grid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "costfilter/errors.hpp"
#include "costfilter/tensor.hpp"

namespace costfilter {

template <class T>
struct MultiLayerFeatures {
    std::vector<Tensor<T>> layers;  // each (C, H', W')
    std::string source_id;

    std::size_t num_layers() const { return layers.size(); }
    std::size_t channels() const { return layers.at(0).dim(0); }
    std::size_t height() const { return layers.at(0).dim(1); }
    std::size_t width() const { return layers.at(0).dim(2); }

    void validate() const {
        if (layers.empty()) throw ShapeError("MultiLayerFeatures: no layers");
        const Shape& s0 = layers[0].shape();
        for (const auto& l : layers) {
            if (l.shape() != s0)
                throw ShapeError("MultiLayerFeatures: mismatched layer shapes " +
                                 shape_str(l.shape()) + " vs " + shape_str(s0));
            if (!l.all_finite())
                throw NumericError("MultiLayerFeatures: non-finite activations in " + source_id);
        }
    }
};

template <class T>
class FeatureEncoder {
public:
    virtual ~FeatureEncoder() = default;
    virtual MultiLayerFeatures<T> extract(const Tensor<T>& image,
                                          const std::vector<int>& layer_indices) const = 0;
    virtual std::string name() const = 0;
};

template <class T>
MultiLayerFeatures<T> extract_features(const Tensor<T>& image, const FeatureEncoder<T>& encoder,
                                       const std::vector<int>& layer_indices) {
    if (!image.all_finite()) throw NumericError("extract_features: non-finite image");
    MultiLayerFeatures<T> f = encoder.extract(image, layer_indices);
    if (f.layers.size() != layer_indices.size())
        throw ShapeError("extract_features: encoder returned wrong layer count");
    f.validate();
    return f;
}

namespace detail {

template <class T>
Tensor<T> box_blur_image(const Tensor<T>& img, int radius) {
    if (radius <= 0) return img;
    std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor<T> out(img.shape());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                T acc = 0;
                int n = 0;
                for (int dy = -radius; dy <= radius; ++dy)
                    for (int dx = -radius; dx <= radius; ++dx) {
                        std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
                        std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
                        if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(H) ||
                            xx >= static_cast<std::ptrdiff_t>(W))
                            continue;
                        acc += img(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                        ++n;
                    }
                out(c, y, x) = acc / static_cast<T>(n);
            }
    return out;
}

}  // namespace detail

// Copies the image into every requested layer (C=3). Test stub.
template <class T>
class IdentityEncoder : public FeatureEncoder<T> {
public:
    MultiLayerFeatures<T> extract(const Tensor<T>& image,
                                  const std::vector<int>& layer_indices) const override {
        MultiLayerFeatures<T> out;
        for (std::size_t i = 0; i < layer_indices.size(); ++i) out.layers.push_back(image);
        return out;
    }
    std::string name() const override { return "identity"; }
};

// Patch-statistics encoder: divides the image into a grid_h x grid_w grid and
// emits per-cell channel means, intensity std, and mean gradient magnitudes
// (C = 6). Layer index k selects the smoothing radius of the source image,
// so deeper layers see a coarser version of the same content.
template <class T>
class PatchifyEncoder : public FeatureEncoder<T> {
public:
    PatchifyEncoder(std::size_t grid_h, std::size_t grid_w)
        : grid_h_(grid_h), grid_w_(grid_w) {}

    static constexpr std::size_t kChannels = 6;

    MultiLayerFeatures<T> extract(const Tensor<T>& image,
                                  const std::vector<int>& layer_indices) const override {
        MultiLayerFeatures<T> out;
        for (int k : layer_indices)
            out.layers.push_back(patch_stats(detail::box_blur_image(image, k), image));
        return out;
    }

    std::string name() const override { return "patchify"; }

private:
    Tensor<T> patch_stats(const Tensor<T>& img, const Tensor<T>& /*orig*/) const {
        std::size_t H = img.dim(1), W = img.dim(2);
        Tensor<T> out(Shape{kChannels, grid_h_, grid_w_});
        for (std::size_t gy = 0; gy < grid_h_; ++gy)
            for (std::size_t gx = 0; gx < grid_w_; ++gx) {
                std::size_t y0 = gy * H / grid_h_, y1 = (gy + 1) * H / grid_h_;
                std::size_t x0 = gx * W / grid_w_, x1 = (gx + 1) * W / grid_w_;
                y1 = std::max(y1, y0 + 1);
                x1 = std::max(x1, x0 + 1);
                T n = static_cast<T>((y1 - y0) * (x1 - x0));
                T mr = 0, mg = 0, mb = 0, m2 = 0, gx_acc = 0, gy_acc = 0;
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t x = x0; x < x1; ++x) {
                        T r = img(0, y, x), g = img(1, y, x), b = img(2, y, x);
                        T lum = (r + g + b) / T(3);
                        mr += r;
                        mg += g;
                        mb += b;
                        m2 += lum * lum;
                        if (x + 1 < W) {
                            T l2 = (img(0, y, x + 1) + img(1, y, x + 1) + img(2, y, x + 1)) / T(3);
                            gx_acc += std::abs(l2 - lum);
                        }
                        if (y + 1 < H) {
                            T l2 = (img(0, y + 1, x) + img(1, y + 1, x) + img(2, y + 1, x)) / T(3);
                            gy_acc += std::abs(l2 - lum);
                        }
                    }
                T mlum = (mr + mg + mb) / (T(3) * n);
                out(0, gy, gx) = mr / n;
                out(1, gy, gx) = mg / n;
                out(2, gy, gx) = mb / n;
                out(3, gy, gx) = std::sqrt(std::max(T(0), m2 / n - mlum * mlum));
                out(4, gy, gx) = gx_acc / n;
                out(5, gy, gx) = gy_acc / n;
            }
        return out;
    }

    std::size_t grid_h_, grid_w_;
};

// Small untrained convolutional stack with fixed-seed random weights. Each
// requested layer index selects the activation after that many conv stages;
// all layers are average-pooled to the coarsest stage's grid.
template <class T>
class RandomConvEncoder : public FeatureEncoder<T> {
public:
    RandomConvEncoder(std::size_t channels, std::size_t num_stages, std::uint64_t seed)
        : channels_(channels), num_stages_(num_stages) {
        std::size_t cin = 3;
        for (std::size_t s = 0; s < num_stages_; ++s) {
            weights_.push_back(
                Tensor<T>::randn(Shape{channels_, cin, 3, 3}, seed + 17 * s + 1,
                                 static_cast<T>(std::sqrt(2.0 / (cin * 9.0)))));
            cin = channels_;
        }
    }

    MultiLayerFeatures<T> extract(const Tensor<T>& image,
                                  const std::vector<int>& layer_indices) const override {
        // run the stack once; stage s output is at stride 2^(s+1)
        std::vector<Tensor<T>> stages;
        Tensor<T> x = image;
        for (std::size_t s = 0; s < num_stages_; ++s) {
            x = conv_relu_pool(x, weights_[s]);
            stages.push_back(x);
        }
        std::size_t gh = stages.back().dim(1), gw = stages.back().dim(2);
        MultiLayerFeatures<T> out;
        for (int k : layer_indices) {
            std::size_t s = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)),
                                                  num_stages_ - 1);
            out.layers.push_back(avg_to_grid(stages[s], gh, gw));
        }
        return out;
    }

    std::string name() const override { return "randconv"; }

private:
    static Tensor<T> conv_relu_pool(const Tensor<T>& x, const Tensor<T>& w) {
        std::size_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
        std::size_t Cout = w.dim(0);
        Tensor<T> y(Shape{Cout, H, W});
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t yy = 0; yy < H; ++yy)
                for (std::size_t xx = 0; xx < W; ++xx) {
                    T acc = 0;
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(yy) + dy;
                                std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + dx;
                                if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(H) ||
                                    sx >= static_cast<std::ptrdiff_t>(W))
                                    continue;
                                acc += x(ci, static_cast<std::size_t>(sy),
                                         static_cast<std::size_t>(sx)) *
                                       w(co, ci, static_cast<std::size_t>(dy + 1),
                                         static_cast<std::size_t>(dx + 1));
                            }
                    y(co, yy, xx) = std::max(T(0), acc);
                }
        // 2x average pool
        std::size_t Ho = std::max<std::size_t>(1, H / 2), Wo = std::max<std::size_t>(1, W / 2);
        Tensor<T> p(Shape{Cout, Ho, Wo});
        for (std::size_t c = 0; c < Cout; ++c)
            for (std::size_t yy = 0; yy < Ho; ++yy)
                for (std::size_t xx = 0; xx < Wo; ++xx)
                    p(c, yy, xx) = (y(c, 2 * yy, 2 * xx) + y(c, 2 * yy, std::min(2 * xx + 1, W - 1)) +
                                    y(c, std::min(2 * yy + 1, H - 1), 2 * xx) +
                                    y(c, std::min(2 * yy + 1, H - 1), std::min(2 * xx + 1, W - 1))) /
                                   T(4);
        return p;
    }

    static Tensor<T> avg_to_grid(const Tensor<T>& x, std::size_t gh, std::size_t gw) {
        std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
        if (H == gh && W == gw) return x;
        Tensor<T> out(Shape{C, gh, gw});
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t gy = 0; gy < gh; ++gy)
                for (std::size_t gx = 0; gx < gw; ++gx) {
                    std::size_t y0 = gy * H / gh, y1 = std::max((gy + 1) * H / gh, y0 + 1);
                    std::size_t x0 = gx * W / gw, x1 = std::max((gx + 1) * W / gw, x0 + 1);
                    T acc = 0;
                    for (std::size_t y = y0; y < y1; ++y)
                        for (std::size_t xx = x0; xx < x1; ++xx) acc += x(c, y, xx);
                    out(c, gy, gx) = acc / static_cast<T>((y1 - y0) * (x1 - x0));
                }
        return out;
    }

    std::size_t channels_, num_stages_;
    std::vector<Tensor<T>> weights_;
};

// ---- diffusion-step reconstruction -----------------------------------------

struct DiffusionSchedule {
    std::map<int, double> alpha_bar;  // step -> alpha_bar_t, non-increasing in t
    int max_step = 0;

    void validate() const {
        double prev = 1.0;
        int prev_t = -1;
        for (auto& [t, a] : alpha_bar) {
            if (a <= 0.0 || a > 1.0)
                throw ConfigError("DiffusionSchedule: alpha_bar out of (0,1] at t=" +
                                  std::to_string(t));
            if (prev_t >= 0 && a > prev)
                throw ConfigError("DiffusionSchedule: alpha_bar must be non-increasing in t");
            prev = a;
            prev_t = t;
        }
    }

    static DiffusionSchedule linear(int max_step, double alpha_min = 0.05) {
        DiffusionSchedule s;
        s.max_step = max_step;
        for (int t = 0; t <= max_step; ++t) {
            double frac = max_step == 0 ? 0.0 : static_cast<double>(t) / max_step;
            s.alpha_bar[t] = 1.0 - (1.0 - alpha_min) * frac;
        }
        return s;
    }
};

// Noise-predictor interface: eps(I_t, t) with the same shape as I_t.
template <class T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>&, int)>;

// step-t reconstruction: (I_t - sqrt(1 - a_t) * eps(I_t, t)) / sqrt(a_t)
template <class T>
Tensor<T> reconstruct_at_step(const Tensor<T>& I_t, int t, const NoisePredictor<T>& eps,
                              const DiffusionSchedule& sched) {
    if (t > sched.max_step) throw ConfigError("reconstruct_at_step: t > max_step");
    auto it = sched.alpha_bar.find(t);
    if (it == sched.alpha_bar.end())
        throw ConfigError("reconstruct_at_step: no alpha_bar for t=" + std::to_string(t));
    double a = it->second;
    if (a <= 0.0) throw NumericError("reconstruct_at_step: alpha_bar must be > 0");
    Tensor<T> noise = eps(I_t, t);
    if (!noise.same_shape(I_t)) throw ShapeError("reconstruct_at_step: predictor shape mismatch");
    if (!noise.all_finite()) throw NumericError("reconstruct_at_step: non-finite predictor output");
    T sa = static_cast<T>(std::sqrt(a));
    T sb = static_cast<T>(std::sqrt(1.0 - a));
    Tensor<T> out(I_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (I_t[i] - sb * noise[i]) / sa;
    return out;
}

// ---- template sampling -----------------------------------------------------

enum class TemplateMode { Reconstruction, Embedding, Hybrid };

inline const char* to_string(TemplateMode m) {
    switch (m) {
        case TemplateMode::Reconstruction: return "reconstruction";
        case TemplateMode::Embedding: return "embedding";
        case TemplateMode::Hybrid: return "hybrid";
    }
    return "?";
}

template <class T>
struct TemplateEntry {
    Tensor<T> image;        // (3,H,W)
    std::string provenance;  // "step_12" or "train_003"
    TemplateMode source = TemplateMode::Embedding;
};

template <class T>
struct TemplateSet {
    std::vector<TemplateEntry<T>> templates;
    TemplateMode mode = TemplateMode::Embedding;
};

template <class T>
struct TemplatePool {
    std::map<int, Tensor<T>> reconstructions;        // denoising step -> image
    std::map<std::string, Tensor<T>> normal_images;  // image id -> image
    std::string category;
};

// Draws exactly N templates. Reconstruction mode always includes the
// final-step (t smallest key, i.e. most-denoised) reconstruction; remaining
// steps are drawn uniformly without replacement. Embedding mode draws normal
// images uniformly, never the input itself. Hybrid resolves to one source per
// call from the seed's parity, so a per-step alternating schedule falls out
// of the caller passing the step index parity through the seed.
template <class T>
TemplateSet<T> sample_templates(TemplateMode mode, const std::string& input_id,
                                const TemplatePool<T>& pool, std::size_t N,
                                std::uint64_t seed) {
    if (N < 1) throw ConfigError("sample_templates: N must be >= 1");
    TemplateMode resolved = mode;
    if (mode == TemplateMode::Hybrid)
        resolved = (seed % 2 == 0) ? TemplateMode::Reconstruction : TemplateMode::Embedding;

    TemplateSet<T> out;
    out.mode = resolved;
    std::mt19937_64 rng(seed);

    if (resolved == TemplateMode::Reconstruction) {
        if (pool.reconstructions.size() < N)
            throw ConfigError("sample_templates: reconstruction pool smaller than N");
        // the final denoising step is the fully denoised image, step 0
        int final_step = pool.reconstructions.begin()->first;
        std::vector<int> rest;
        for (auto& [t, img] : pool.reconstructions)
            if (t != final_step) rest.push_back(t);
        std::shuffle(rest.begin(), rest.end(), rng);
        std::vector<int> chosen = {final_step};
        for (std::size_t i = 0; i + 1 < N; ++i) chosen.push_back(rest[i]);
        for (int t : chosen)
            out.templates.push_back({pool.reconstructions.at(t), "step_" + std::to_string(t),
                                     TemplateMode::Reconstruction});
    } else {
        std::vector<std::string> ids;
        for (auto& [id, img] : pool.normal_images)
            if (id != input_id) ids.push_back(id);
        if (ids.size() < N)
            throw ConfigError("sample_templates: embedding pool smaller than N (excluding input)");
        std::shuffle(ids.begin(), ids.end(), rng);
        for (std::size_t i = 0; i < N; ++i)
            out.templates.push_back({pool.normal_images.at(ids[i]), ids[i],
                                     TemplateMode::Embedding});
    }
    return out;
}

}  // namespace costfilter
