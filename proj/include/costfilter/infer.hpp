#pragma once
// Inference-side post-processing: lambda-fusion with a baseline map, top-k
// image scoring, per-category min-max normalization, and the scores.csv
// schema shared with the evaluation tooling.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "costfilter/errors.hpp"
#include "costfilter/tensor.hpp"

namespace costfilter {

// fused = lambda * M + (1 - lambda) * baseline, elementwise. The endpoints
// are exact passthroughs (no arithmetic applied) so they stay bit-identical.
template <class T>
Tensor<T> fuse_maps(const Tensor<T>& M, const Tensor<T>& baseline, double lambda) {
    if (lambda < 0 || lambda > 1) throw ConfigError("fuse_maps: lambda must be in [0,1]");
    if (lambda == 1.0) return M;
    if (lambda == 0.0) return baseline;
    Tensor<T> b = baseline;
    if (b.shape() != M.shape()) {
        if (M.ndim() != 2 || b.ndim() != 2)
            throw ShapeError("fuse_maps: shape mismatch on non-2d maps");
        b = resize_bilinear_2d(baseline, M.dim(0), M.dim(1));
    }
    Tensor<T> out(M.shape());
    T lam = static_cast<T>(lambda);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = lam * M[i] + (T(1) - lam) * b[i];
    return out;
}

// Bilinear resample of a 2-d map (align_corners=false convention).
template <class T>
Tensor<T> resize_bilinear_2d(const Tensor<T>& src, std::size_t H, std::size_t W) {
    if (src.ndim() != 2) throw ShapeError("resize_bilinear_2d: expect 2-d input");
    std::size_t h = src.dim(0), w = src.dim(1);
    Tensor<T> out(Shape{H, W});
    double sy = static_cast<double>(h) / H, sx = static_cast<double>(w) / W;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double fy = (y + 0.5) * sy - 0.5, fx = (x + 0.5) * sx - 0.5;
            fy = std::max(0.0, std::min(fy, static_cast<double>(h - 1)));
            fx = std::max(0.0, std::min(fx, static_cast<double>(w - 1)));
            std::size_t y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
            std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            double ty = fy - y0, tx = fx - x0;
            double v = (1 - ty) * ((1 - tx) * src(y0, x0) + tx * src(y0, x1)) +
                       ty * ((1 - tx) * src(y1, x0) + tx * src(y1, x1));
            out(y, x) = static_cast<T>(v);
        }
    return out;
}

// Mean of the top_k largest map values; with fewer pixels than top_k the
// whole map is averaged.
template <class T>
double image_score(const Tensor<T>& anomaly_map, std::size_t top_k = 250) {
    if (anomaly_map.size() == 0) throw ConfigError("image_score: empty map");
    std::size_t k = std::min(top_k, anomaly_map.size());
    std::vector<T> v(anomaly_map.vec());
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(),
                     std::greater<T>());
    double sum = 0;
    for (std::size_t i = 0; i < k; ++i) sum += static_cast<double>(v[i]);
    return sum / static_cast<double>(k);
}

struct NormalizationResult {
    double lo = 0, hi = 0;
    bool degenerate = false;  // max == min: everything mapped to 0
};

// Min-max normalization over the pooled pixel values of one category's maps,
// in place. Monotone, so every ranking metric is unchanged.
template <class T>
NormalizationResult normalize_per_category(std::vector<Tensor<T>>& maps) {
    if (maps.empty()) throw ConfigError("normalize_per_category: empty set");
    NormalizationResult r;
    r.lo = static_cast<double>(maps[0][0]);
    r.hi = r.lo;
    for (auto& m : maps)
        for (std::size_t i = 0; i < m.size(); ++i) {
            double v = m[i];
            r.lo = std::min(r.lo, v);
            r.hi = std::max(r.hi, v);
        }
    if (r.hi == r.lo) {
        r.degenerate = true;
        for (auto& m : maps) m.fill(T(0));
        return r;
    }
    double inv = 1.0 / (r.hi - r.lo);
    for (auto& m : maps)
        for (std::size_t i = 0; i < m.size(); ++i)
            m[i] = static_cast<T>((m[i] - r.lo) * inv);
    return r;
}

// ---- scores.csv -------------------------------------------------------------

struct ScoreRow {
    std::string image_id;
    std::string category;
    double raw_score = 0;
    double fused_score = 0;
    double normalized_score = 0;
    int label = -1;  // -1 = unknown
};

inline void write_scores_csv(const std::vector<ScoreRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("write_scores_csv: cannot open " + path);
    f << "image_id,category,raw_score,fused_score,normalized_score,label\n";
    f.precision(17);
    for (auto& r : rows)
        f << r.image_id << "," << r.category << "," << r.raw_score << "," << r.fused_score
          << "," << r.normalized_score << "," << r.label << "\n";
    if (!f) throw IoError("write_scores_csv: write failed for " + path);
}

inline std::vector<ScoreRow> read_scores_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("read_scores_csv: cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("read_scores_csv: empty file " + path);
    std::vector<ScoreRow> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tok;
        ScoreRow r;
        auto next = [&]() {
            if (!std::getline(ss, tok, ',')) throw IoError("read_scores_csv: short row: " + line);
            return tok;
        };
        r.image_id = next();
        r.category = next();
        r.raw_score = std::stod(next());
        r.fused_score = std::stod(next());
        r.normalized_score = std::stod(next());
        r.label = std::stoi(next());
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace costfilter
