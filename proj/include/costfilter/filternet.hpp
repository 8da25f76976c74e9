#pragma once
// Learned cost-volume filter: encoder-decoder 3D U-Net over
// (matching-channel x layer-depth x spatial) volumes with residual
// channel-spatial attention (RCSA) guidance at each scale, a class-aware
// adaptor on the bottleneck, and the min-pool + conv + softmax output head.

#include <cstdint>
#include <string>
#include <vector>

#include "costfilter/costvol.hpp"
#include "costfilter/errors.hpp"
#include "costfilter/nn.hpp"

namespace costfilter {

enum class DnMapping { Channel, Depth };

inline const char* to_string(DnMapping m) {
    return m == DnMapping::Channel ? "channel" : "depth";
}

struct FilterConfig {
    std::size_t base_channels = 32;
    std::size_t num_scales = 4;          // encoder depth = decoder depth
    bool guidance_sg = true;             // input-feature guidance
    bool guidance_mg = true;             // initial-map guidance
    DnMapping dn_mapping = DnMapping::Channel;
    std::size_t num_classes = 1;
    std::size_t K = 0;                   // matching channels fed to the net
    std::size_t guidance_channels = 4;   // per guidance stream after projection
    std::size_t attn_reduction = 4;
    std::size_t spatial_attn_kernel = 7;
    std::size_t head_kernel = 3;
    std::uint64_t seed = 1;

    void validate() const {
        if (num_scales < 2) throw ConfigError("FilterConfig: num_scales must be >= 2");
        if (num_classes < 1) throw ConfigError("FilterConfig: num_classes must be >= 1");
        if (K < 1) throw ConfigError("FilterConfig: K must be >= 1");
    }

    std::size_t scale_channels(std::size_t s) const {
        std::size_t mult = std::min<std::size_t>(std::size_t{1} << s, 4);
        return base_channels * mult;
    }
};

template <class T>
struct GuidanceBundle {
    MultiLayerFeatures<T> input_features;  // f_S
    InitialAnomalyMap<T> initial_map;      // M-bar
};

template <class T>
struct FilterOutput {
    ag::Var<T> score_map;     // (B, 2, H', W') after softmax: [normal, anomaly]
    ag::Var<T> class_logits;  // (B, num_classes)
    ag::Var<T> min_map;       // (B, 1, 1, H', W') min-pooled refined volume
};

// Residual channel-spatial attention over a 5-d feature volume.
//
//   x'   = cat(x, projected guidance...)
//   x_ca = sigmoid(conv(MP(x')) + conv(AP(x'))) * x' + x'
//   x_sa = sigmoid(conv(cat(mean_c(x_ca), max_c(x_ca)))) * x_ca + x_ca
//
// Channel attention broadcasts as (B,C',1,1,1), spatial as (B,1,D,H,W).
template <class T>
struct RcsaBlock {
    nn::Conv3d<T> ca_fc1, ca_fc2;  // shared MLP for MP and AP paths, 1x1x1 convs
    nn::Conv3d<T> sa_conv;

    RcsaBlock() = default;
    RcsaBlock(nn::ParamStore<T>& ps, nn::SeedSequence& seeds, const std::string& name,
              std::size_t channels, std::size_t reduction, std::size_t sa_kernel) {
        std::size_t hidden = std::max<std::size_t>(1, channels / reduction);
        ca_fc1 = nn::Conv3d<T>(ps, seeds, name + ".ca_fc1", channels, hidden, 1, 1, 1);
        ca_fc2 = nn::Conv3d<T>(ps, seeds, name + ".ca_fc2", hidden, channels, 1, 1, 1);
        sa_conv = nn::Conv3d<T>(ps, seeds, name + ".sa_conv", 2, 1, 1, sa_kernel, sa_kernel);
    }

    // guidance entries are pre-projected to this block's (depth, H, W); the
    // concatenation happens here so the residual adds the concatenated x'.
    ag::Var<T> forward(const ag::Var<T>& x, const std::vector<ag::Var<T>>& guidance) const {
        ag::Var<T> xp = x;
        if (!guidance.empty()) {
            std::vector<ag::Var<T>> cat = {x};
            for (auto& g : guidance) cat.push_back(g);
            xp = ag::concat_channels(cat);
        }
        auto mlp = [&](const ag::Var<T>& pooled) { return ca_fc2(ag::leaky_relu(ca_fc1(pooled))); };
        ag::Var<T> w_ca =
            ag::sigmoid(ag::add(mlp(ag::global_max_pool(xp)), mlp(ag::global_avg_pool(xp))));
        ag::Var<T> x_ca = ag::add(ag::mul_broadcast(xp, w_ca), xp);
        ag::Var<T> stats =
            ag::concat_channels<T>({ag::channel_mean(x_ca), ag::channel_max(x_ca)});
        ag::Var<T> w_sa = ag::sigmoid(sa_conv(stats));
        return ag::add(ag::mul_broadcast(x_ca, w_sa), x_ca);
    }
};

template <class T>
class FilterNet {
public:
    // in_channels/in_depth describe the network-facing volume layout, i.e.
    // (K, L) for DN->channel mapping and (L, K) for DN->depth.
    FilterNet(FilterConfig cfg, std::size_t in_channels, std::size_t in_depth,
              std::size_t feat_channels, std::size_t num_feat_layers)
        : cfg_(cfg), in_channels_(in_channels), in_depth_(in_depth),
          num_feat_layers_(num_feat_layers) {
        cfg_.validate();
        nn::SeedSequence seeds(cfg_.seed);
        std::size_t S = cfg_.num_scales;
        std::size_t cg = cfg_.guidance_channels;
        std::size_t g_extra = (cfg_.guidance_sg ? cg : 0) + (cfg_.guidance_mg ? cg : 0);

        std::size_t cin = in_channels_;
        for (std::size_t s = 0; s < S; ++s) {
            std::size_t cout = cfg_.scale_channels(s);
            enc_.emplace_back(params_, seeds, "enc" + std::to_string(s), cin, cout, 3, 3, 3, 1,
                              s == 0 ? 1 : 2);
            if (s + 1 < S) {
                if (cfg_.guidance_sg)
                    sg_proj_.emplace_back(params_, seeds, "sg_proj" + std::to_string(s),
                                          feat_channels, cg, 1, 1, 1);
                if (cfg_.guidance_mg)
                    mg_proj_.emplace_back(params_, seeds, "mg_proj" + std::to_string(s), 1, cg, 1,
                                          1, 1);
                rcsa_.emplace_back(params_, seeds, "rcsa" + std::to_string(s), cout + g_extra,
                                   cfg_.attn_reduction, cfg_.spatial_attn_kernel);
                cin = cout + g_extra;
            } else {
                cin = cout;
            }
            skip_channels_.push_back(cin);
        }

        // decoder: upsample, concat skip, conv
        std::size_t cur = skip_channels_.back();
        for (std::size_t s = S - 1; s-- > 0;) {
            std::size_t cout = cfg_.scale_channels(s);
            dec_.emplace_back(params_, seeds, "dec" + std::to_string(s),
                              cur + skip_channels_[s], cout, 3, 3, 3, 1, 1);
            cur = cout;
        }

        // depth condense: full-depth valid kernel -> depth 1
        condense_ = nn::Conv3d<T>(params_, seeds, "condense", cur, cur, in_depth_, 1, 1, 1, 1,
                                  /*same_pad=*/false);
        head_ = nn::Conv3d<T>(params_, seeds, "head", 1, 2, 1, cfg_.head_kernel,
                              cfg_.head_kernel);
        adaptor_ = nn::Linear<T>(params_, seeds, "adaptor",
                                 cfg_.scale_channels(S - 1), cfg_.num_classes);
    }

    nn::ParamStore<T>& params() { return params_; }
    const nn::ParamStore<T>& params() const { return params_; }
    const FilterConfig& config() const { return cfg_; }

    // volume: (B, in_channels, in_depth, H', W')
    // f_layers: per feature layer (B, C_feat, 1, H', W'); m_bar: (B, 1, L, H', W')
    FilterOutput<T> forward(const ag::Var<T>& volume, const std::vector<ag::Var<T>>& f_layers,
                            const ag::Var<T>& m_bar, bool check_finite = true) const {
        const Shape& s = volume.value().shape();
        if (s.size() != 5 || s[1] != in_channels_ || s[2] != in_depth_)
            throw ShapeError("FilterNet: volume shape " + shape_str(s) + " does not match net (" +
                             std::to_string(in_channels_) + "," + std::to_string(in_depth_) + ")");
        if (cfg_.guidance_sg && f_layers.size() != num_feat_layers_)
            throw ShapeError("FilterNet: guidance layer count mismatch");

        std::size_t S = cfg_.num_scales;
        std::vector<ag::Var<T>> skips;
        ag::Var<T> x = volume;
        for (std::size_t sc = 0; sc < S; ++sc) {
            x = ag::leaky_relu(enc_[sc](x));
            if (check_finite && !x.value().all_finite())
                throw NumericError("FilterNet: non-finite activations at encoder scale " +
                                   std::to_string(sc));
            if (sc + 1 < S) {
                x = rcsa_[sc].forward(x, project_guidance(sc, x.value().shape(), f_layers, m_bar));
                skips.push_back(x);
            }
        }

        ag::Var<T> bottleneck = x;
        for (std::size_t i = 0; i < S - 1; ++i) {
            std::size_t sc = S - 2 - i;
            const Shape& target = skips[sc].value().shape();
            x = ag::resize_bilinear_spatial(x, target[3], target[4]);
            x = ag::concat_channels<T>({x, skips[sc]});
            x = ag::leaky_relu(dec_[i](x));
            if (check_finite && !x.value().all_finite())
                throw NumericError("FilterNet: non-finite activations at decoder scale " +
                                   std::to_string(sc));
        }

        x = condense_(x);                       // depth -> 1
        ag::Var<T> mn = ag::channel_min(x);     // matching-dimension min pool
        ag::Var<T> logits = head_(mn);          // (B,2,1,H,W)
        ag::Var<T> probs = ag::softmax2_channels(logits);
        const Shape& ps = probs.value().shape();

        FilterOutput<T> out;
        out.score_map = ag::reshape(probs, Shape{ps[0], ps[1], ps[3], ps[4]});
        out.min_map = mn;
        out.class_logits = adaptor_logits(bottleneck);
        return out;
    }

    // spatial average pooling over the bottleneck, then a linear projection
    ag::Var<T> adaptor_logits(const ag::Var<T>& deep_features) const {
        ag::Var<T> pooled = ag::global_avg_pool(deep_features);
        const Shape& s = pooled.value().shape();
        return adaptor_(ag::reshape(pooled, Shape{s[0], s[1]}));
    }

    // Projects guidance streams to a scale's (channels_g, depth, H, W) so they
    // concatenate with that scale's volume features.
    std::vector<ag::Var<T>> project_guidance(std::size_t scale, const Shape& target,
                                             const std::vector<ag::Var<T>>& f_layers,
                                             const ag::Var<T>& m_bar) const {
        std::vector<ag::Var<T>> out;
        std::size_t depth = target[2], H = target[3], W = target[4];
        if (cfg_.guidance_mg) {
            ag::Var<T> g = mg_proj_[scale](m_bar);
            g = ag::resize_bilinear_spatial(g, H, W);
            if (g.value().dim(2) != depth) g = ag::resize_depth_nearest(g, depth);
            out.push_back(g);
        }
        if (cfg_.guidance_sg) {
            std::size_t lsel = std::min(scale, num_feat_layers_ - 1);
            ag::Var<T> g = sg_proj_[scale](f_layers[lsel]);
            g = ag::resize_bilinear_spatial(g, H, W);
            if (g.value().dim(2) != depth) g = ag::resize_depth_nearest(g, depth);
            out.push_back(g);
        }
        return out;
    }

    const RcsaBlock<T>& rcsa(std::size_t s) const { return rcsa_.at(s); }

private:
    FilterConfig cfg_;
    std::size_t in_channels_, in_depth_, num_feat_layers_;
    nn::ParamStore<T> params_;
    std::vector<nn::Conv3d<T>> enc_, dec_;
    std::vector<nn::Conv3d<T>> sg_proj_, mg_proj_;
    std::vector<RcsaBlock<T>> rcsa_;
    std::vector<std::size_t> skip_channels_;
    nn::Conv3d<T> condense_, head_;
    nn::Linear<T> adaptor_;
};

// Arranges a (possibly trimmed) cost volume for the network: DN->channel
// keeps (K, L, H, W); DN->depth transposes to (L, K, H, W).
template <class T>
Tensor<T> network_volume_layout(const AnomalyCostVolume<T>& C, DnMapping mapping) {
    std::size_t M = C.channels(), L = C.L(), H = C.grid_h(), W = C.grid_w();
    if (mapping == DnMapping::Channel) return C.values;
    Tensor<T> out(Shape{L, M, H, W});
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t l = 0; l < L; ++l)
            std::copy_n(C.values.data() + (m * L + l) * H * W, H * W,
                        out.data() + (l * M + m) * H * W);
    return out;
}

}  // namespace costfilter
