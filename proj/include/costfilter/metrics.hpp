#pragma once
// Ranking metrics (AUROC, AP, F1max), region-aware AUPRO, and KDE curve
// export for score-distribution plots.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <queue>
#include <string>
#include <vector>

#include "costfilter/errors.hpp"
#include "costfilter/tensor.hpp"

namespace costfilter {

struct EvalResult {
    double i_auroc = 0, i_ap = 0, i_f1max = 0;
    double p_auroc = 0, p_ap = 0, p_f1max = 0;
    double p_aupro = 0;
};

namespace metrics {

// Mann-Whitney AUROC: P(random positive outranks random negative), ties 1/2.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw MetricError("auroc: bad inputs");
    std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    // average ranks over ties
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
        i = j + 1;
    }
    double pos_rank_sum = 0;
    std::size_t npos = 0;
    for (std::size_t k = 0; k < n; ++k)
        if (labels[k]) {
            pos_rank_sum += rank[k];
            ++npos;
        }
    std::size_t nneg = n - npos;
    if (npos == 0 || nneg == 0) throw MetricError("auroc: needs both classes");
    double u = pos_rank_sum - static_cast<double>(npos) * (npos + 1) / 2.0;
    return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

// Step-wise average precision over the descending ranked list.
inline double average_precision(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
    std::size_t n = scores.size();
    if (n == 0 || labels.size() != n) throw MetricError("average_precision: bad inputs");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](auto a, auto b) { return scores[a] > scores[b]; });
    std::size_t total_pos = 0;
    for (int l : labels) total_pos += l ? 1 : 0;
    if (total_pos == 0) throw MetricError("average_precision: no positives");
    double ap = 0;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < n; ++k)
        if (labels[idx[k]]) {
            ++tp;
            double precision = static_cast<double>(tp) / static_cast<double>(k + 1);
            ap += precision / static_cast<double>(total_pos);
        }
    return ap;
}

// Max F1 over thresholds taken at the distinct score values (score >= t
// predicts positive).
inline double f1max(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::size_t n = scores.size();
    if (n == 0 || labels.size() != n) throw MetricError("f1max: bad inputs");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    std::size_t total_pos = 0;
    for (int l : labels) total_pos += l ? 1 : 0;
    if (total_pos == 0) throw MetricError("f1max: no positives");
    double best = 0;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (labels[idx[k]]) ++tp;
        // threshold after including this point; skip mid-tie cuts
        if (k + 1 < n && scores[idx[k + 1]] == scores[idx[k]]) continue;
        std::size_t pred_pos = k + 1;
        double precision = static_cast<double>(tp) / static_cast<double>(pred_pos);
        double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
        if (precision + recall > 0) best = std::max(best, 2 * precision * recall / (precision + recall));
    }
    return best;
}

// 8-connected component labelling; 0 = background, regions numbered from 1.
template <class T>
std::vector<int> connected_components(const Tensor<T>& mask, int& num_regions) {
    std::size_t H = mask.dim(0), W = mask.dim(1);
    std::vector<int> label(H * W, 0);
    num_regions = 0;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            if (mask(y, x) == T(0) || label[y * W + x] != 0) continue;
            ++num_regions;
            std::queue<std::pair<std::size_t, std::size_t>> q;
            q.push({y, x});
            label[y * W + x] = num_regions;
            while (!q.empty()) {
                auto [cy, cx] = q.front();
                q.pop();
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        std::ptrdiff_t ny = static_cast<std::ptrdiff_t>(cy) + dy;
                        std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(cx) + dx;
                        if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(H) ||
                            nx >= static_cast<std::ptrdiff_t>(W))
                            continue;
                        std::size_t ni = static_cast<std::size_t>(ny) * W +
                                         static_cast<std::size_t>(nx);
                        if (mask(static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)) !=
                                T(0) &&
                            label[ni] == 0) {
                            label[ni] = num_regions;
                            q.push({static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)});
                        }
                    }
            }
        }
    return label;
}

// Area under the per-region-overlap vs FPR curve, integrated up to fpr_limit
// and normalized by it. Exact sweep over the distinct score values.
template <class T>
double aupro(const std::vector<Tensor<T>>& anomaly_maps, const std::vector<Tensor<T>>& gt_masks,
             double fpr_limit = 0.3) {
    if (anomaly_maps.size() != gt_masks.size() || anomaly_maps.empty())
        throw MetricError("aupro: bad inputs");

    struct Pixel {
        double score;
        int region;  // global region id, or -1 for a negative pixel
    };
    std::vector<Pixel> pixels;
    std::vector<std::size_t> region_sizes;
    std::size_t total_neg = 0;

    for (std::size_t m = 0; m < anomaly_maps.size(); ++m) {
        const auto& map = anomaly_maps[m];
        const auto& mask = gt_masks[m];
        if (map.shape() != mask.shape()) throw MetricError("aupro: map/mask shape mismatch");
        int nr = 0;
        auto labels = connected_components(mask, nr);
        int base = static_cast<int>(region_sizes.size());
        region_sizes.resize(region_sizes.size() + static_cast<std::size_t>(nr), 0);
        std::size_t HW = map.size();
        for (std::size_t i = 0; i < HW; ++i) {
            int r = labels[i];
            if (r > 0) {
                ++region_sizes[static_cast<std::size_t>(base + r - 1)];
                pixels.push_back({static_cast<double>(map[i]), base + r - 1});
            } else {
                pixels.push_back({static_cast<double>(map[i]), -1});
                ++total_neg;
            }
        }
    }
    if (region_sizes.empty()) throw MetricError("aupro: no anomalous regions");
    if (total_neg == 0) throw MetricError("aupro: no negative pixels");

    std::sort(pixels.begin(), pixels.end(),
              [](const Pixel& a, const Pixel& b) { return a.score > b.score; });

    std::vector<std::size_t> region_tp(region_sizes.size(), 0);
    std::size_t fp = 0;
    std::size_t R = region_sizes.size();

    // Curve points (fpr, mean per-region overlap) at the distinct thresholds,
    // descending. The minimum threshold (everything predicted positive) is
    // uninformative and omitted; the curve is then extended flat to the cap,
    // so a constant prediction scores 0 while a perfect one reaches 1.
    std::vector<std::pair<double, double>> curve;
    curve.emplace_back(0.0, 0.0);
    std::size_t i = 0;
    while (i < pixels.size()) {
        double t = pixels[i].score;
        while (i < pixels.size() && pixels[i].score == t) {
            if (pixels[i].region >= 0)
                ++region_tp[static_cast<std::size_t>(pixels[i].region)];
            else
                ++fp;
            ++i;
        }
        if (i == pixels.size()) break;  // minimum-threshold point dropped
        double pro = 0;
        for (std::size_t r = 0; r < R; ++r)
            pro += static_cast<double>(region_tp[r]) / static_cast<double>(region_sizes[r]);
        pro /= static_cast<double>(R);
        double fpr = static_cast<double>(fp) / static_cast<double>(total_neg);
        curve.emplace_back(fpr, pro);
    }
    curve.emplace_back(1.0, curve.back().second);  // flat extension

    // integrate to the cap, interpolating the final partial segment
    double area = 0;
    for (std::size_t k = 1; k < curve.size(); ++k) {
        auto [x0, y0] = curve[k - 1];
        auto [x1, y1] = curve[k];
        if (x0 >= fpr_limit) break;
        double xe = std::min(x1, fpr_limit);
        double ye = y1;
        if (x1 > fpr_limit && x1 > x0)
            ye = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
        area += 0.5 * (y0 + ye) * (xe - x0);
    }
    return area / fpr_limit;
}

// Gaussian KDE curve per class over a shared 512-point grid; Scott's rule
// bandwidth. Classes with fewer than 2 points are skipped.
struct KdeCurve {
    int label = 0;
    std::vector<double> grid;
    std::vector<double> density;
};

inline std::vector<KdeCurve> kde_export(const std::vector<double>& scores,
                                        const std::vector<int>& labels,
                                        std::size_t grid_points = 512) {
    if (scores.size() != labels.size() || scores.empty())
        throw MetricError("kde_export: bad inputs");
    double lo = *std::min_element(scores.begin(), scores.end());
    double hi = *std::max_element(scores.begin(), scores.end());
    if (hi == lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    double pad = 0.1 * (hi - lo);
    lo -= pad;
    hi += pad;

    std::vector<int> classes;
    for (int l : labels)
        if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
    std::sort(classes.begin(), classes.end());

    std::vector<KdeCurve> out;
    for (int cls : classes) {
        std::vector<double> pts;
        for (std::size_t i = 0; i < scores.size(); ++i)
            if (labels[i] == cls) pts.push_back(scores[i]);
        if (pts.size() < 2) continue;  // diagnostic: too few points for a KDE
        double mean = std::accumulate(pts.begin(), pts.end(), 0.0) / pts.size();
        double var = 0;
        for (double p : pts) var += (p - mean) * (p - mean);
        var /= static_cast<double>(pts.size() - 1);
        double sd = std::sqrt(std::max(var, 1e-12));
        double bw = sd * std::pow(static_cast<double>(pts.size()), -0.2);  // Scott's rule
        bw = std::max(bw, 1e-6);

        KdeCurve curve;
        curve.label = cls;
        for (std::size_t g = 0; g < grid_points; ++g) {
            double x = lo + (hi - lo) * static_cast<double>(g) /
                                static_cast<double>(grid_points - 1);
            double dens = 0;
            for (double p : pts) {
                double z = (x - p) / bw;
                dens += std::exp(-0.5 * z * z);
            }
            dens /= static_cast<double>(pts.size()) * bw * std::sqrt(2.0 * M_PI);
            curve.grid.push_back(x);
            curve.density.push_back(dens);
        }
        out.push_back(std::move(curve));
    }
    return out;
}

}  // namespace metrics
}  // namespace costfilter
