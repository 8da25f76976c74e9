#pragma once
// Anomaly cost volume construction: global cosine matching between input and
// template features, similarity -> cost conversion, dimension merge, top-K
// trimming, and min-pooled initial anomaly map.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "costfilter/encoders.hpp"
#include "costfilter/errors.hpp"
#include "costfilter/tensor.hpp"

namespace costfilter {

static_assert(std::endian::native == std::endian::little,
              "volume dump format assumes a little-endian host");

// V(j,n,l,i): cosine similarity between the input vector at spatial index i
// and template n's vector at index j, both at layer l. Stored (j,n,l,i),
// D = H'*W'.
template <class T>
struct SimilarityVolume {
    Tensor<T> values;  // (D, N, L, D)
    std::size_t grid_h = 0, grid_w = 0;
    std::size_t zero_norm_events = 0;  // diagnostics: epsilon-guarded vectors

    std::size_t D() const { return values.dim(0); }
    std::size_t N() const { return values.dim(1); }
    std::size_t L() const { return values.dim(2); }
};

template <class T>
struct AnomalyCostVolume {
    Tensor<T> values;  // (DN or K, L, H', W'); per-column sorted ascending when trimmed
    std::size_t D = 0, N = 0;
    bool trimmed = false;
    std::size_t K = 0;  // retained channels when trimmed

    std::size_t channels() const { return values.dim(0); }
    std::size_t L() const { return values.dim(1); }
    std::size_t grid_h() const { return values.dim(2); }
    std::size_t grid_w() const { return values.dim(3); }

    // merged index convention: m = n * D + j
    static std::size_t merge_index(std::size_t n, std::size_t j, std::size_t D) {
        return n * D + j;
    }
    std::pair<std::size_t, std::size_t> unmerge_index(std::size_t m) const {
        return {m / D, m % D};
    }
};

template <class T>
struct InitialAnomalyMap {
    Tensor<T> values;  // (L, H', W')
};

inline constexpr double kNormEpsilon = 1e-8;

// Eq-style global matching: every input index i against every template index
// j, per template n and layer l. Zero-norm vectors get an epsilon added to
// the norm and are counted in diagnostics.
template <class T>
SimilarityVolume<T> similarity_volume(const MultiLayerFeatures<T>& f_S,
                                      const std::vector<MultiLayerFeatures<T>>& f_T) {
    f_S.validate();
    if (f_T.empty()) throw ConfigError("similarity_volume: no templates");
    for (const auto& t : f_T) {
        t.validate();
        if (t.layers[0].shape() != f_S.layers[0].shape() || t.num_layers() != f_S.num_layers())
            throw ShapeError("similarity_volume: template/input feature shape mismatch");
    }
    std::size_t L = f_S.num_layers(), C = f_S.channels();
    std::size_t H = f_S.height(), W = f_S.width();
    std::size_t D = H * W, N = f_T.size();

    SimilarityVolume<T> out;
    out.grid_h = H;
    out.grid_w = W;
    out.values = Tensor<T>(Shape{D, N, L, D});

    // Normalize every feature vector up front (epsilon-guarded), then compute
    // the cosine as 1 - ||u - w||^2 / 2. The two forms agree to fp rounding,
    // but the distance form is exactly 1 when the vectors are identical, so a
    // self-template match produces a cost of exactly zero.
    auto normalized = [&](const Tensor<T>& layer, std::size_t& events) {
        Tensor<T> u = layer;
        for (std::size_t i = 0; i < D; ++i) {
            double s = 0;
            for (std::size_t c = 0; c < C; ++c) {
                double v = layer[c * D + i];
                s += v * v;
            }
            double norm = std::sqrt(s);
            if (norm == 0.0) ++events;
            T inv = static_cast<T>(1.0 / (norm + kNormEpsilon));
            for (std::size_t c = 0; c < C; ++c) u[c * D + i] *= inv;
        }
        return u;
    };

    for (std::size_t l = 0; l < L; ++l) {
        Tensor<T> u_s = normalized(f_S.layers[l], out.zero_norm_events);
        for (std::size_t n = 0; n < N; ++n) {
            Tensor<T> u_t = normalized(f_T[n].layers[l], out.zero_norm_events);
            for (std::size_t j = 0; j < D; ++j) {
                T* row = out.values.data() + ((j * N + n) * L + l) * D;
                for (std::size_t i = 0; i < D; ++i) {
                    T d2 = 0;
                    for (std::size_t c = 0; c < C; ++c) {
                        T diff = u_s[c * D + i] - u_t[c * D + j];
                        d2 += diff * diff;
                    }
                    row[i] = T(1) - d2 / T(2);
                }
            }
        }
    }
    return out;
}

// Pre-merge cost volume, same (j,n,l,i) indexing as the similarity volume.
template <class T>
struct PreMergeCostVolume {
    Tensor<T> values;  // (D, N, L, D)
    std::size_t grid_h = 0, grid_w = 0;

    std::size_t D() const { return values.dim(0); }
    std::size_t N() const { return values.dim(1); }
    std::size_t L() const { return values.dim(2); }
};

// cost = 1 - similarity, elementwise.
template <class T>
PreMergeCostVolume<T> cost_from_similarity(const SimilarityVolume<T>& V) {
    PreMergeCostVolume<T> out;
    out.grid_h = V.grid_h;
    out.grid_w = V.grid_w;
    out.values = Tensor<T>(V.values.shape());
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = T(1) - V.values[i];
    return out;
}

// Merge (D, N) into m = n*D + j and unfold spatial index i row-major to (y,x),
// yielding the network layout (DN, L, H', W').
template <class T>
AnomalyCostVolume<T> merge_and_layout(const PreMergeCostVolume<T>& pre) {
    std::size_t D = pre.D(), N = pre.N(), L = pre.L();
    std::size_t H = pre.grid_h, W = pre.grid_w;
    AnomalyCostVolume<T> out;
    out.D = D;
    out.N = N;
    out.values = Tensor<T>(Shape{D * N, L, H, W});
    for (std::size_t j = 0; j < D; ++j)
        for (std::size_t n = 0; n < N; ++n) {
            std::size_t m = AnomalyCostVolume<T>::merge_index(n, j, D);
            for (std::size_t l = 0; l < L; ++l) {
                const T* src = pre.values.data() + ((j * N + n) * L + l) * D;
                T* dst = out.values.data() + (m * L + l) * H * W;
                std::copy_n(src, D, dst);
            }
        }
    return out;
}

// Inverse of merge_and_layout for untrimmed volumes.
template <class T>
PreMergeCostVolume<T> unmerge(const AnomalyCostVolume<T>& C) {
    if (C.trimmed) throw ConfigError("unmerge: trimmed volumes have no pre-merge view");
    std::size_t D = C.D, N = C.N, L = C.L();
    std::size_t H = C.grid_h(), W = C.grid_w();
    PreMergeCostVolume<T> out;
    out.grid_h = H;
    out.grid_w = W;
    out.values = Tensor<T>(Shape{D, N, L, D});
    for (std::size_t m = 0; m < D * N; ++m) {
        auto [n, j] = C.unmerge_index(m);
        for (std::size_t l = 0; l < L; ++l)
            std::copy_n(C.values.data() + (m * L + l) * H * W, D,
                        out.values.data() + ((j * N + n) * L + l) * D);
    }
    return out;
}

// Convenience: similarity -> cost -> merged layout in one call.
template <class T>
AnomalyCostVolume<T> cost_volume_from_similarity(const SimilarityVolume<T>& V) {
    return merge_and_layout(cost_from_similarity(V));
}

// Per (l,y,x) column keep the K smallest costs, sorted ascending.
template <class T>
AnomalyCostVolume<T> trim_topk(const AnomalyCostVolume<T>& C, std::size_t K) {
    if (K == 0) throw ConfigError("trim_topk: K must be >= 1");
    std::size_t M = C.channels();
    if (K > M) throw ConfigError("trim_topk: K exceeds channel count");
    std::size_t L = C.L(), H = C.grid_h(), W = C.grid_w();
    AnomalyCostVolume<T> out;
    out.D = C.D;
    out.N = C.N;
    out.trimmed = true;
    out.K = K;
    out.values = Tensor<T>(Shape{K, L, H, W});
    std::size_t inner = L * H * W;
    std::vector<T> column(M);
    for (std::size_t p = 0; p < inner; ++p) {
        for (std::size_t m = 0; m < M; ++m) column[m] = C.values[m * inner + p];
        std::partial_sort(column.begin(), column.begin() + K, column.end());
        for (std::size_t k = 0; k < K; ++k) out.values[k * inner + p] = column[k];
    }
    return out;
}

// Min over the matching dimension.
template <class T>
InitialAnomalyMap<T> initial_anomaly_map(const AnomalyCostVolume<T>& C) {
    std::size_t M = C.channels(), L = C.L(), H = C.grid_h(), W = C.grid_w();
    InitialAnomalyMap<T> out;
    out.values = Tensor<T>(Shape{L, H, W});
    std::size_t inner = L * H * W;
    for (std::size_t p = 0; p < inner; ++p) {
        T best = C.values[p];
        for (std::size_t m = 1; m < M; ++m) best = std::min(best, C.values[m * inner + p]);
        out.values[p] = best;
    }
    return out;
}

// ---- binary dump/load ------------------------------------------------------
//
// Layout (little-endian):
//   magic   8 bytes "CFADVOL1"
//   version u32 = 1
//   DN, L, H, W  u32 each (DN is the stored channel count)
//   trimmed u8, pad 3 bytes
//   K       u32
//   data    DN*L*H*W float32, row-major
//
// Score maps reuse the container with DN = L = 1.

inline constexpr char kVolumeMagic[8] = {'C', 'F', 'A', 'D', 'V', 'O', 'L', '1'};

template <class T>
void dump_volume(const AnomalyCostVolume<T>& C, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("dump_volume: cannot open " + path);
    f.write(kVolumeMagic, 8);
    auto w32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    w32(1);
    w32(static_cast<std::uint32_t>(C.channels()));
    w32(static_cast<std::uint32_t>(C.L()));
    w32(static_cast<std::uint32_t>(C.grid_h()));
    w32(static_cast<std::uint32_t>(C.grid_w()));
    std::uint8_t trimmed = C.trimmed ? 1 : 0;
    char pad[3] = {0, 0, 0};
    f.write(reinterpret_cast<const char*>(&trimmed), 1);
    f.write(pad, 3);
    w32(static_cast<std::uint32_t>(C.K));
    for (std::size_t i = 0; i < C.values.size(); ++i) {
        float v = static_cast<float>(C.values[i]);
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    if (!f) throw IoError("dump_volume: write failed for " + path);
}

template <class T>
AnomalyCostVolume<T> load_volume(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_volume: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kVolumeMagic, 8) != 0)
        throw IoError("load_volume: bad magic in " + path);
    auto r32 = [&]() {
        std::uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    std::uint32_t version = r32();
    if (version != 1) throw IoError("load_volume: unsupported version");
    std::uint32_t DN = r32(), L = r32(), H = r32(), W = r32();
    std::uint8_t trimmed = 0;
    char pad[3];
    f.read(reinterpret_cast<char*>(&trimmed), 1);
    f.read(pad, 3);
    std::uint32_t K = r32();
    AnomalyCostVolume<T> out;
    out.trimmed = trimmed != 0;
    out.K = K;
    out.values = Tensor<T>(Shape{DN, L, H, W});
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        float v;
        f.read(reinterpret_cast<char*>(&v), 4);
        out.values[i] = static_cast<T>(v);
    }
    if (!f) throw IoError("load_volume: truncated file " + path);
    return out;
}

// Plain 2-d float map persisted through the same container.
template <class T>
void dump_map(const Tensor<T>& map2d, const std::string& path) {
    AnomalyCostVolume<T> wrap;
    wrap.values = map2d.reshaped(Shape{1, 1, map2d.dim(0), map2d.dim(1)});
    dump_volume(wrap, path);
}

template <class T>
Tensor<T> load_map(const std::string& path) {
    AnomalyCostVolume<T> wrap = load_volume<T>(path);
    return wrap.values.reshaped(Shape{wrap.values.dim(2), wrap.values.dim(3)});
}

}  // namespace costfilter
