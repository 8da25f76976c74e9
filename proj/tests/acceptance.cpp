// Acceptance gate: one pass/fail line per criterion, non-zero exit on any
// failure. Each criterion is self-contained and uses independent loop oracles
// rather than the library's own vectorized paths.

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "costfilter/costfilter.hpp"

using namespace costfilter;
namespace ca = costfilter::ag;

namespace {

int g_failures = 0;

void report(int number, const std::string& name, const std::function<void()>& body) {
    std::string detail;
    bool ok = true;
    try {
        body();
    } catch (const std::exception& e) {
        ok = false;
        detail = e.what();
    }
    std::cout << "criterion " << number << " (" << name << "): " << (ok ? "PASS" : "FAIL");
    if (!ok) {
        std::cout << " -- " << detail;
        ++g_failures;
    }
    std::cout << std::endl;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

// ---- shared oracles ---------------------------------------------------------

template <class T>
MultiLayerFeatures<T> random_features(std::size_t L, std::size_t C, std::size_t H, std::size_t W,
                                      std::uint64_t seed) {
    MultiLayerFeatures<T> f;
    for (std::size_t l = 0; l < L; ++l)
        f.layers.push_back(Tensor<T>::randn(Shape{C, H, W}, seed + l));
    return f;
}

double cosine_oracle(const Tensor<double>& a, const Tensor<double>& b, std::size_t i,
                     std::size_t j) {
    std::size_t C = a.dim(0), D = a.dim(1) * a.dim(2);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t c = 0; c < C; ++c) {
        double va = a[c * D + i], vb = b[c * D + j];
        dot += va * vb;
        na += va * va;
        nb += vb * vb;
    }
    return dot / ((std::sqrt(na) + kNormEpsilon) * (std::sqrt(nb) + kNormEpsilon));
}

// plain-loop RCSA forward (no guidance): channel attention via the shared MLP
// over max/avg pooled stats, then spatial attention, each with the residual.
Tensor<double> rcsa_oracle(const RcsaBlock<double>& blk, const Tensor<double>& x) {
    std::size_t B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const Tensor<double>& w1 = blk.ca_fc1.weight.value();
    const Tensor<double>& b1 = blk.ca_fc1.bias.value();
    const Tensor<double>& w2 = blk.ca_fc2.weight.value();
    const Tensor<double>& b2 = blk.ca_fc2.bias.value();
    std::size_t hid = w1.dim(0);
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    auto lrelu = [](double v) { return v > 0 ? v : 0.01 * v; };

    std::size_t DHW = D * H * W;
    Tensor<double> x_ca(x.shape());
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> mp(C, -1e300), ap(C, 0.0);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < DHW; ++i) {
                double v = x[(b * C + c) * DHW + i];
                mp[c] = std::max(mp[c], v);
                ap[c] += v / static_cast<double>(DHW);
            }
        auto mlp = [&](const std::vector<double>& in) {
            std::vector<double> h(hid), out(C);
            for (std::size_t k = 0; k < hid; ++k) {
                double a = b1[k];
                for (std::size_t c = 0; c < C; ++c) a += w1[k * C + c] * in[c];
                h[k] = lrelu(a);
            }
            for (std::size_t c = 0; c < C; ++c) {
                double a = b2[c];
                for (std::size_t k = 0; k < hid; ++k) a += w2[c * hid + k] * h[k];
                out[c] = a;
            }
            return out;
        };
        auto m1 = mlp(mp), m2 = mlp(ap);
        for (std::size_t c = 0; c < C; ++c) {
            double w = sig(m1[c] + m2[c]);
            for (std::size_t i = 0; i < DHW; ++i) {
                std::size_t o = (b * C + c) * DHW + i;
                x_ca[o] = x[o] * w + x[o];
            }
        }
    }

    const Tensor<double>& sw = blk.sa_conv.weight.value();
    double sb = blk.sa_conv.bias.value()[0];
    std::size_t k = sw.dim(3);
    std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
    Tensor<double> out(x.shape());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) {
                    double acc = sb;
                    for (std::size_t s = 0; s < 2; ++s)
                        for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
                            for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                                std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
                                std::ptrdiff_t xs = static_cast<std::ptrdiff_t>(xx) + dx;
                                if (yy < 0 || xs < 0 || yy >= static_cast<std::ptrdiff_t>(H) ||
                                    xs >= static_cast<std::ptrdiff_t>(W))
                                    continue;
                                double mean = 0, mx = -1e300;
                                for (std::size_t c = 0; c < C; ++c) {
                                    double v = x_ca[((b * C + c) * D + d) * H * W +
                                                    static_cast<std::size_t>(yy) * W +
                                                    static_cast<std::size_t>(xs)];
                                    mean += v / static_cast<double>(C);
                                    mx = std::max(mx, v);
                                }
                                double stat = s == 0 ? mean : mx;
                                acc += stat * sw[(s * k + static_cast<std::size_t>(dy + r)) * k +
                                                 static_cast<std::size_t>(dx + r)];
                            }
                    double w = sig(acc);
                    for (std::size_t c = 0; c < C; ++c) {
                        std::size_t o = ((b * C + c) * D + d) * H * W + y * W + xx;
                        out[o] = x_ca[o] * w + x_ca[o];
                    }
                }
    return out;
}

ca::Var<double> probs_from(const ca::Var<double>& raw, std::size_t B, std::size_t H,
                           std::size_t W) {
    auto five = ca::reshape(raw, Shape{B, 2, 1, H, W});
    return ca::reshape(ca::softmax2_channels(five), Shape{B, 2, H, W});
}

double fd_check(Tensor<double> x0,
                const std::function<ca::Var<double>(const ca::Var<double>&)>& f,
                double h = 1e-5) {
    auto xv = ca::Var<double>::param(x0);
    auto loss = f(xv);
    loss.backward();
    Tensor<double> analytic = xv.grad();
    double max_rel = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        Tensor<double> xp = x0, xm = x0;
        xp[i] += h;
        xm[i] -= h;
        double fd = (f(ca::Var<double>::constant(xp)).scalar() -
                     f(ca::Var<double>::constant(xm)).scalar()) /
                    (2 * h);
        double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
        max_rel = std::max(max_rel, std::abs(fd - analytic[i]) / denom);
    }
    return max_rel;
}

double auroc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
    double num = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (!(y[i] == 1 && y[j] == 0)) continue;
            ++pairs;
            if (s[i] > s[j]) num += 1;
            else if (s[i] == s[j]) num += 0.5;
        }
    return num / static_cast<double>(pairs);
}

double f1_oracle(const std::vector<double>& s, const std::vector<int>& y) {
    std::set<double> thresholds(s.begin(), s.end());
    double best = 0;
    for (double t : thresholds) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            bool pred = s[i] >= t;
            if (pred && y[i]) ++tp;
            else if (pred) ++fp;
            else if (y[i]) ++fn;
        }
        if (tp == 0) continue;
        double p = static_cast<double>(tp) / (tp + fp);
        double r = static_cast<double>(tp) / (tp + fn);
        best = std::max(best, 2 * p * r / (p + r));
    }
    return best;
}

double ap_oracle(const std::vector<double>& s, const std::vector<int>& y) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s[a] > s[b]; });
    std::size_t npos = 0;
    for (int v : y) npos += v;
    double ap = 0, tp = 0;
    for (std::size_t k = 0; k < idx.size(); ++k)
        if (y[idx[k]]) {
            tp += 1;
            ap += (tp / (k + 1)) / npos;
        }
    return ap;
}

// dense threshold-sweep AUPRO oracle; minimum-threshold point dropped and the
// curve extended flat, matching the library convention
double aupro_oracle(const Tensor<double>& map, const Tensor<double>& mask, double cap) {
    int nr = 0;
    auto labels = metrics::connected_components(mask, nr);
    std::vector<std::size_t> sizes(nr, 0);
    std::size_t neg = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (labels[i] > 0) ++sizes[labels[i] - 1];
        else ++neg;
    std::set<double, std::greater<double>> thresholds(map.vec().begin(), map.vec().end());
    std::vector<std::pair<double, double>> curve = {{0.0, 0.0}};
    std::size_t count = 0;
    for (double t : thresholds) {
        if (++count == thresholds.size()) break;
        std::vector<std::size_t> tp(nr, 0);
        std::size_t fp = 0;
        for (std::size_t i = 0; i < map.size(); ++i) {
            if (map[i] < t) continue;
            if (labels[i] > 0) ++tp[labels[i] - 1];
            else ++fp;
        }
        double pro = 0;
        for (int r = 0; r < nr; ++r) pro += static_cast<double>(tp[r]) / sizes[r];
        curve.emplace_back(static_cast<double>(fp) / neg, pro / nr);
    }
    curve.emplace_back(1.0, curve.back().second);
    double area = 0;
    for (std::size_t k = 1; k < curve.size(); ++k) {
        auto [x0, y0] = curve[k - 1];
        auto [x1, y1] = curve[k];
        if (x0 >= cap) break;
        double xe = std::min(x1, cap);
        double ye = y1;
        if (x1 > cap && x1 > x0) ye = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
        area += 0.5 * (y0 + ye) * (xe - x0);
    }
    return area / cap;
}

// ---- smoke fixture ----------------------------------------------------------

Tensor<float> flat_image(float r, float g, float b, std::uint64_t seed) {
    auto img = Tensor<float>::rand_uniform(Shape{3, 64, 64}, seed, -0.04f, 0.04f);
    std::size_t HW = 64 * 64;
    for (std::size_t i = 0; i < HW; ++i) {
        img[i] += r;
        img[HW + i] += g;
        img[2 * HW + i] += b;
    }
    for (auto& v : img.vec()) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

RunConfig smoke_config(std::uint64_t seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.filter.seed = seed;
    cfg.encoder = "patchify";
    cfg.grid_h = cfg.grid_w = 8;
    cfg.layer_indices = {0, 1};
    cfg.num_templates = 2;
    cfg.template_mode = TemplateMode::Embedding;
    cfg.filter.base_channels = 8;
    cfg.filter.num_scales = 2;
    cfg.batch_size = 8;
    cfg.initial_lr = 2e-3;
    cfg.synth.anomaly_probability = 0.5;
    return cfg;
}

struct SmokeFixture {
    RunConfig cfg;
    std::vector<NormalPoolEntry<float>> pool;                // 16 normals x 2 categories
    std::map<std::size_t, TemplatePool<float>> tpools;
    std::vector<TrainingSample<float>> held_out;             // 16 normal + 32 anomalous
};

SmokeFixture make_smoke(std::uint64_t seed) {
    SmokeFixture fx;
    fx.cfg = smoke_config(seed);
    float bases[2][3] = {{0.25f, 0.6f, 0.3f}, {0.6f, 0.3f, 0.65f}};
    std::vector<Tensor<float>> spare;  // held-out normals per category
    for (std::size_t cat = 0; cat < 2; ++cat) {
        auto& b = bases[cat];
        fx.tpools[cat].category = "cat" + std::to_string(cat);
        for (int k = 0; k < 16; ++k) {
            NormalPoolEntry<float> e{flat_image(b[0], b[1], b[2], seed + 50 * cat + k), cat,
                                     "c" + std::to_string(cat) + "_" + std::to_string(k)};
            fx.tpools[cat].normal_images[e.id] = e.image;
            fx.tpools[cat].reconstructions[k % 3] = e.image;  // stand-ins for ablations
            fx.pool.push_back(std::move(e));
        }
        for (int k = 0; k < 24; ++k)
            spare.push_back(flat_image(b[0], b[1], b[2], seed + 1000 + 50 * cat + k));
    }
    SynthParams always = fx.cfg.synth;
    always.anomaly_probability = 1.0;
    for (std::size_t cat = 0; cat < 2; ++cat) {
        for (int k = 0; k < 8; ++k) {  // held-out normals
            TrainingSample<float> s;
            s.image = spare[24 * cat + k];
            s.mask = Tensor<float>(Shape{64, 64}, 0.0f);
            s.label = cat;
            fx.held_out.push_back(std::move(s));
        }
        for (int k = 0; k < 16; ++k) {  // held-out synthesized anomalies
            const Tensor<float>& base = spare[24 * cat + 8 + k];
            const Tensor<float>& tex = spare[24 * (1 - cat) + 8 + k];  // foreign texture
            auto s = synthesize(base, tex, always, seed + 5000 + 100 * cat + k, cat);
            require(s.is_anomalous, "smoke: synthesis degraded to normal");
            fx.held_out.push_back(std::move(s));
        }
    }
    return fx;
}

struct SmokeResult {
    double first_loss = 0, final_loss = 0;
    double image_auroc = 0, pixel_auroc = 0;
    std::size_t steps = 0;
    std::vector<Tensor<float>> weights;
    std::vector<double> scores;
};

SmokeResult run_smoke(std::uint64_t seed, std::size_t max_steps) {
    SmokeFixture fx = make_smoke(seed);
    Trainer<float> tr(fx.cfg, fx.pool, fx.tpools);
    auto samples = build_epoch(fx.pool, fx.cfg.synth, seed + 17,
                               max_steps * static_cast<std::size_t>(fx.cfg.batch_size));
    SmokeResult res;
    double recent = 0;
    std::size_t recent_n = 0;
    for (std::size_t step = 0; step < max_steps; ++step) {
        std::uint64_t ts = tr.template_seed(0, step);
        std::vector<PreparedSample<float>> batch;
        for (int i = 0; i < fx.cfg.batch_size; ++i)
            batch.push_back(tr.prepare(samples[step * fx.cfg.batch_size + i],
                                       ts + 2 * static_cast<std::uint64_t>(i)));
        auto rec = tr.training_step(batch);
        double lv = static_cast<double>(rec.loss.total);
        if (step == 0) res.first_loss = lv;
        if (step + 5 >= max_steps) {
            recent += lv;
            ++recent_n;
        }
        ++res.steps;
    }
    res.final_loss = recent / static_cast<double>(recent_n);

    std::vector<double> iscores;
    std::vector<int> ilabels;
    std::vector<double> pscores;
    std::vector<int> plabels;
    for (std::size_t k = 0; k < fx.held_out.size(); ++k) {
        const auto& s = fx.held_out[k];
        auto out = tr.infer_image(s.image, s.label, seed + 9000 + 3 * k);
        iscores.push_back(out.score);
        ilabels.push_back(s.is_anomalous ? 1 : 0);
        res.scores.push_back(out.score);
        for (std::size_t i = 0; i < out.pixel_map.size(); ++i) {
            pscores.push_back(static_cast<double>(out.pixel_map[i]));
            plabels.push_back(s.mask[i] != 0 ? 1 : 0);
        }
    }
    res.image_auroc = metrics::auroc(iscores, ilabels);
    res.pixel_auroc = metrics::auroc(pscores, plabels);
    for (auto& [n, v] : tr.net().params().items()) res.weights.push_back(v.value());
    return res;
}

}  // namespace

int main() {
    SmokeResult smoke_a, smoke_b;

    report(1, "similarity volume equals nested-loop cosine oracle", [] {
        auto t0 = std::chrono::steady_clock::now();
        for (auto [N, L, C, H] : std::vector<std::array<std::size_t, 4>>{
                 {1, 1, 2, 2}, {2, 2, 4, 3}, {2, 3, 8, 4}, {3, 4, 16, 6}}) {
            auto f_S = random_features<double>(L, C, H, H, 100 * N + L);
            std::vector<MultiLayerFeatures<double>> f_T;
            for (std::size_t n = 0; n < N; ++n)
                f_T.push_back(random_features<double>(L, C, H, H, 500 * N + 7 * n));
            auto V = similarity_volume(f_S, f_T);
            double max_err = 0;
            for (std::size_t j = 0; j < H * H; ++j)
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t l = 0; l < L; ++l)
                        for (std::size_t i = 0; i < H * H; ++i) {
                            double o = cosine_oracle(f_S.layers[l], f_T[n].layers[l], i, j);
                            max_err = std::max(max_err, std::abs(o - V.values(j, n, l, i)));
                        }
            require(max_err < 1e-6, "oracle mismatch " + std::to_string(max_err));
        }
        auto dt = std::chrono::duration_cast<std::chrono::seconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
        require(dt < 10, "too slow: " + std::to_string(dt) + "s");
    });

    report(2, "cost range in [0,2] and exact self-template zero map", [] {
        auto f_S = random_features<double>(2, 8, 5, 5, 21);
        auto V = similarity_volume(f_S, {f_S, random_features<double>(2, 8, 5, 5, 22)});
        auto C = cost_volume_from_similarity(V);
        for (std::size_t i = 0; i < C.values.size(); ++i)
            require(C.values[i] >= -1e-12 && C.values[i] <= 2.0 + 1e-12, "cost out of range");
        auto self = cost_volume_from_similarity(similarity_volume(f_S, {f_S}));
        auto M = initial_anomaly_map(self);
        for (std::size_t i = 0; i < M.values.size(); ++i)
            require(M.values[i] == 0.0, "self-template map not exactly zero");
    });

    report(3, "trim keeps the exact global minimum for 100 random volumes", [] {
        std::mt19937_64 rng(5);
        for (int trial = 0; trial < 100; ++trial) {
            std::size_t D = 9, N = 2, L = 2;
            AnomalyCostVolume<double> C;
            C.D = D;
            C.N = N;
            C.values = Tensor<double>::rand_uniform(Shape{D * N, L, 3, 3}, rng(), 0.0, 2.0);
            for (std::size_t K : {std::size_t{1}, std::size_t{4}, D * N}) {
                auto Ct = trim_topk(C, K);
                std::size_t inner = L * 9;
                for (std::size_t p = 0; p < inner; ++p) {
                    double gmin = C.values[p];
                    for (std::size_t m = 1; m < D * N; ++m)
                        gmin = std::min(gmin, C.values[m * inner + p]);
                    require(Ct.values[p] == gmin, "trimmed min differs from global min");
                }
            }
        }
    });

    report(4, "RCSA zero map, residual bound, and loop-oracle equality", [] {
        nn::ParamStore<double> ps;
        nn::SeedSequence seeds(5);
        RcsaBlock<double> blk(ps, seeds, "blk", 8, 4, 7);

        Tensor<double> zero(Shape{2, 8, 2, 4, 4}, 0.0);
        auto yz = blk.forward(ca::Var<double>::constant(zero), {});
        for (std::size_t i = 0; i < yz.value().size(); ++i)
            require(yz.value()[i] == 0.0, "zero input did not map to zero");

        auto x = Tensor<double>::randn(Shape{2, 8, 2, 4, 4}, 7);
        auto y = blk.forward(ca::Var<double>::constant(x), {});
        for (std::size_t i = 0; i < x.size(); ++i) {
            double a = std::abs(x[i]), b = std::abs(y.value()[i]);
            require(b >= a - 1e-12 && b <= 4 * a + 1e-12, "residual bound violated");
        }
        Tensor<double> oracle = rcsa_oracle(blk, x);
        require(max_abs_diff(y.value(), oracle) < 1e-6, "loop-oracle mismatch");
    });

    report(5, "loss gradients match central finite differences", [] {
        auto t0 = std::chrono::steady_clock::now();
        std::size_t B = 2, H = 8, W = 8;
        auto raw = Tensor<double>::randn(Shape{B, 2, H, W}, 3);
        auto mask = Tensor<double>::rand_uniform(Shape{B, H, W}, 4);
        for (auto& v : mask.vec()) v = v > 0.6 ? 1.0 : 0.0;
        auto logits_t = Tensor<double>::randn(Shape{B, 2}, 15);
        std::vector<std::size_t> labels = {0, 1};
        LossConfig lcfg;

        require(fd_check(raw, [&](auto v) {
                    return losses::focal_loss(probs_from(v, B, H, W), mask, {2.5, 0.7});
                }) < 1e-3, "focal gradient");
        require(fd_check(raw, [&](auto v) {
                    return losses::soft_iou_loss(
                        ca::slice_channel(probs_from(v, B, H, W), 1), mask);
                }) < 1e-3, "soft-IoU gradient");
        require(fd_check(raw, [&](auto v) {
                    return losses::ssim_loss(ca::slice_channel(probs_from(v, B, H, W), 1), mask);
                }) < 1e-3, "SSIM gradient");
        require(fd_check(logits_t, [&](auto v) { return losses::ce_loss(v, labels); }) < 1e-3,
                "CE gradient");
        auto logits = ca::Var<double>::constant(logits_t);
        require(fd_check(raw, [&](auto v) {
                    return total_loss(probs_from(v, B, H, W), mask, logits, labels, lcfg).total;
                }) < 1e-3, "composite gradient");
        auto dt = std::chrono::duration_cast<std::chrono::seconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
        require(dt < 60, "too slow: " + std::to_string(dt) + "s");
    });

    report(6, "gamma modulation reported exactly by the training step", [] {
        // rule exactness on crafted logits
        Tensor<double> l3(Shape{3});
        l3[0] = 0.2;
        l3[1] = 1.7;
        l3[2] = -0.4;
        require(losses::effective_gamma(3.0, l3, 1) == 3.0 - 1.0 / (1.0 + std::exp(-1.7)),
                "correct-argmax rule");
        Tensor<double> l2(Shape{2});
        l2[0] = 2.0;
        l2[1] = -1.0;
        require(losses::effective_gamma(3.0, l2, 1) == 3.0, "wrong-argmax rule");
        Tensor<double> l1(Shape{1});
        l1[0] = 10.0;
        require(losses::effective_gamma(0.5, l1, 0) == 0.0, "clamp at zero");

        // instrumented step: reported gammas equal the rule applied to the
        // pre-update class logits of the same forward
        SmokeFixture fx = make_smoke(41);
        Trainer<float> tr(fx.cfg, fx.pool, fx.tpools);
        auto samples = build_epoch(fx.pool, fx.cfg.synth, 43, 8);
        std::vector<PreparedSample<float>> batch;
        for (std::size_t i = 0; i < 8; ++i)
            batch.push_back(tr.prepare(samples[i], tr.template_seed(0, 0) + 2 * i));
        auto out = tr.forward_batch(batch);  // deterministic pre-step forward
        std::vector<std::size_t> labels;
        for (auto& p : batch) labels.push_back(p.label);
        auto expected = losses::effective_gammas(static_cast<float>(fx.cfg.loss.gamma0),
                                                 out.class_logits.value(), labels);
        auto rec = tr.training_step(batch);
        require(rec.gammas.size() == expected.size(), "gamma count");
        for (std::size_t i = 0; i < expected.size(); ++i)
            require(rec.gammas[i] == expected[i], "reported gamma differs");
    });

    report(7, "output head channel sums within 1e-6 over 1000 forwards", [] {
        FilterConfig cfg;
        cfg.base_channels = 4;
        cfg.num_scales = 2;
        cfg.K = 6;
        cfg.num_classes = 2;
        cfg.guidance_channels = 2;
        cfg.seed = 11;
        FilterNet<double> net(cfg, 6, 2, 3, 2);
        for (std::uint64_t seed = 0; seed < 1000; ++seed) {
            auto vol = Tensor<double>::randn(Shape{1, 6, 2, 6, 6}, 3 * seed + 1);
            std::vector<ca::Var<double>> fl = {
                ca::Var<double>::constant(Tensor<double>::randn(Shape{1, 3, 1, 6, 6}, 3 * seed + 2)),
                ca::Var<double>::constant(
                    Tensor<double>::randn(Shape{1, 3, 1, 6, 6}, 7000 + seed))};
            auto mb =
                ca::Var<double>::constant(Tensor<double>::randn(Shape{1, 1, 2, 6, 6}, 3 * seed + 3));
            auto out = net.forward(ca::Var<double>::constant(vol), fl, mb);
            for (std::size_t i = 0; i < 36; ++i) {
                double s = out.score_map.value()[i] + out.score_map.value()[36 + i];
                require(std::abs(s - 1.0) < 1e-6, "channel sum off at forward " +
                                                      std::to_string(seed));
            }
        }
    });

    report(8, "fusion endpoints bit-exact; single-hot top-250 score", [] {
        auto M = Tensor<float>::rand_uniform(Shape{32, 32}, 61);
        auto Bm = Tensor<float>::rand_uniform(Shape{32, 32}, 62);
        require(fuse_maps(M, Bm, 1.0) == M, "lambda=1 not a bit-exact passthrough");
        require(fuse_maps(M, Bm, 0.0) == Bm, "lambda=0 not a bit-exact passthrough");

        Tensor<float> hot(Shape{64, 64}, 0.0f);
        hot(17, 23) = 1.0f;
        require(image_score(hot, 250) == 1.0 / 250.0, "single-hot score not exactly 1/250");
    });

    report(9, "metric oracles and monotone invariance", [] {
        std::size_t checked = 0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            std::mt19937_64 rng(seed);
            std::uniform_real_distribution<double> uni(0, 1);
            std::vector<double> s(100);
            std::vector<int> y(100);
            for (std::size_t i = 0; i < 100; ++i) {
                s[i] = std::round(uni(rng) * 20) / 20.0;  // quantized: forces ties
                y[i] = rng() % 3 == 0 ? 1 : 0;
            }
            if (std::count(y.begin(), y.end(), 1) == 0 ||
                std::count(y.begin(), y.end(), 0) == 0)
                continue;
            require(metrics::auroc(s, y) == auroc_oracle(s, y), "auroc oracle (exact)");
            require(std::abs(metrics::average_precision(s, y) - ap_oracle(s, y)) < 1e-12,
                    "ap oracle");
            require(std::abs(metrics::f1max(s, y) - f1_oracle(s, y)) < 1e-12, "f1max oracle");
            ++checked;
        }
        require(checked >= 15, "too few valid random instances");

        Tensor<double> mask(Shape{16, 16}, 0.0);
        for (std::size_t y = 2; y < 6; ++y)
            for (std::size_t x = 2; x < 6; ++x) mask(y, x) = 1;
        for (std::size_t y = 11; y < 13; ++y)
            for (std::size_t x = 11; x < 13; ++x) mask(y, x) = 1;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            auto map = Tensor<double>::rand_uniform(Shape{16, 16}, 300 + seed);
            for (std::size_t i = 0; i < map.size(); ++i)
                if (mask[i] != 0) map[i] = 0.5 + 0.5 * map[i];
            require(std::abs(metrics::aupro<double>({map}, {mask}, 0.3) -
                             aupro_oracle(map, mask, 0.3)) < 1e-6,
                    "aupro dense-sweep oracle");
        }

        std::mt19937_64 rng(7);
        std::uniform_real_distribution<double> uni(0, 1);
        std::vector<double> s(80), st(80);
        std::vector<int> y(80);
        for (std::size_t i = 0; i < 80; ++i) {
            s[i] = uni(rng);
            st[i] = std::exp(3.0 * s[i]) + 1.0;
            y[i] = rng() % 2;
        }
        require(std::abs(metrics::auroc(s, y) - metrics::auroc(st, y)) < 1e-12,
                "auroc invariance");
        require(std::abs(metrics::average_precision(s, y) -
                         metrics::average_precision(st, y)) < 1e-12,
                "ap invariance");
        require(std::abs(metrics::f1max(s, y) - metrics::f1max(st, y)) < 1e-12,
                "f1max invariance");
        Tensor<double> m2(Shape{10, 10}, 0.0);
        for (std::size_t i = 22; i < 26; ++i) m2[i] = 1;
        auto map2 = Tensor<double>::rand_uniform(Shape{10, 10}, 9);
        Tensor<double> map2t(map2.shape());
        for (std::size_t i = 0; i < map2.size(); ++i) map2t[i] = std::atan(5 * map2[i]);
        require(std::abs(metrics::aupro<double>({map2}, {m2}) -
                         metrics::aupro<double>({map2t}, {m2})) < 1e-9,
                "aupro invariance");
    });

    report(10, "end-to-end smoke: loss halves, held-out AUROC >= 0.90", [&smoke_a] {
        auto t0 = std::chrono::steady_clock::now();
        smoke_a = run_smoke(97, 150);
        auto dt = std::chrono::duration_cast<std::chrono::seconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
        require(smoke_a.steps <= 200, "step budget exceeded");
        require(smoke_a.final_loss < 0.5 * smoke_a.first_loss,
                "loss reduction " + std::to_string(smoke_a.final_loss) + " vs first " +
                    std::to_string(smoke_a.first_loss));
        require(smoke_a.image_auroc >= 0.90,
                "image AUROC " + std::to_string(smoke_a.image_auroc));
        require(smoke_a.pixel_auroc >= 0.90,
                "pixel AUROC " + std::to_string(smoke_a.pixel_auroc));
        require(dt < 900, "wall clock " + std::to_string(dt) + "s");
    });

    report(11, "every ablation row trains one step; depth variant well-formed", [] {
        auto one_step = [](RunConfig cfg) {
            SmokeFixture fx = make_smoke(73);
            fx.cfg = cfg;
            Trainer<float> tr(fx.cfg, fx.pool, fx.tpools);
            auto samples = build_epoch(fx.pool, fx.cfg.synth, 75, 8);
            std::vector<PreparedSample<float>> batch;
            for (std::size_t i = 0; i < 8; ++i)
                batch.push_back(tr.prepare(samples[i], tr.template_seed(0, 0) + 2 * i));
            auto rec = tr.training_step(batch);
            require(std::isfinite(static_cast<double>(rec.loss.total)), "non-finite loss");
            return tr.forward_batch(batch);
        };

        RunConfig base = smoke_config(73);
        one_step(base);  // channel mapping (row baseline)

        RunConfig depth = base;
        depth.filter.dn_mapping = DnMapping::Depth;
        auto out = one_step(depth);
        const auto& sm = out.score_map.value();
        require(sm.shape() == Shape{8, 2, 8, 8}, "depth variant score map shape");
        require(sm.all_finite(), "depth variant non-finite scores");
        for (std::size_t b = 0; b < 8; ++b)
            for (std::size_t i = 0; i < 64; ++i) {
                double s = sm[(b * 2) * 64 + i] + sm[(b * 2 + 1) * 64 + i];
                require(std::abs(s - 1.0) < 1e-5, "depth variant channel sum");
            }

        RunConfig recon = base;
        recon.template_mode = TemplateMode::Reconstruction;
        one_step(recon);
        RunConfig hybrid = base;
        hybrid.template_mode = TemplateMode::Hybrid;
        one_step(hybrid);

        RunConfig no_sg = base;
        no_sg.filter.guidance_sg = false;
        one_step(no_sg);
        RunConfig no_mg = base;
        no_mg.filter.guidance_mg = false;
        one_step(no_mg);

        RunConfig no_struct = base;
        no_struct.loss.use_structural = false;
        one_step(no_struct);
        RunConfig no_ce = base;
        no_ce.loss.use_ce = false;
        one_step(no_ce);
        RunConfig no_focal = base;
        no_focal.loss.use_focal = false;
        one_step(no_focal);
    });

    report(12, "determinism: repeated smoke run is bit-identical", [&smoke_a, &smoke_b] {
        smoke_b = run_smoke(97, 150);
        require(smoke_a.weights.size() == smoke_b.weights.size(), "weight tensor count");
        for (std::size_t i = 0; i < smoke_a.weights.size(); ++i)
            require(smoke_a.weights[i] == smoke_b.weights[i], "weights differ");
        require(smoke_a.scores.size() == smoke_b.scores.size(), "score count");
        for (std::size_t i = 0; i < smoke_a.scores.size(); ++i)
            require(smoke_a.scores[i] == smoke_b.scores[i], "scores differ");
    });

    if (g_failures) {
        std::cout << g_failures << " criterion(s) failed" << std::endl;
        return 1;
    }
    std::cout << "all criteria passed" << std::endl;
    return 0;
}
