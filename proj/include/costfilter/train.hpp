#pragma once
// Training loop: synthesize samples, extract features, build and trim the
// cost volume, run the filter network, and optimize the composite loss with
// Adam + plateau LR schedule. Checkpoints every epoch plus a best-loss copy;
// resume restores weights, optimizer moments, and the schedule bit-exactly.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "costfilter/checkpoint.hpp"
#include "costfilter/config.hpp"
#include "costfilter/costvol.hpp"
#include "costfilter/encoders.hpp"
#include "costfilter/filternet.hpp"
#include "costfilter/infer.hpp"
#include "costfilter/losses.hpp"
#include "costfilter/optim.hpp"
#include "costfilter/synth.hpp"

namespace costfilter {

// A grid cell is anomalous when any covered pixel is (coarse supervision for
// the feature-grid score map).
template <class T>
Tensor<T> downsample_mask_any(const Tensor<T>& mask, std::size_t gh, std::size_t gw) {
    std::size_t H = mask.dim(0), W = mask.dim(1);
    Tensor<T> out(Shape{gh, gw}, T(0));
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            if (mask(y, x) != T(0)) {
                std::size_t gy = std::min(gh - 1, y * gh / H);
                std::size_t gx = std::min(gw - 1, x * gw / W);
                out(gy, gx) = T(1);
            }
    return out;
}

template <class T>
std::unique_ptr<FeatureEncoder<T>> make_encoder(const RunConfig& cfg) {
    if (cfg.encoder == "identity") return std::make_unique<IdentityEncoder<T>>();
    if (cfg.encoder == "patchify")
        return std::make_unique<PatchifyEncoder<T>>(cfg.grid_h, cfg.grid_w);
    if (cfg.encoder == "randconv")
        return std::make_unique<RandomConvEncoder<T>>(cfg.randconv_channels, cfg.randconv_stages,
                                                      cfg.seed);
    throw ConfigError("unknown encoder: " + cfg.encoder);
}

template <class T>
struct PreparedSample {
    Tensor<T> volume;              // network layout (C_in, depth, H', W')
    MultiLayerFeatures<T> feats;   // f_S
    Tensor<T> m_bar;               // (1, L, H', W')
    Tensor<T> mask_grid;           // (H', W')
    std::size_t label = 0;
    bool is_anomalous = false;
    TemplateMode template_source = TemplateMode::Embedding;
};

template <class T>
struct StepRecord {
    LossBreakdown<T> loss;
    double grad_norm = 0;
    TemplateMode template_source = TemplateMode::Embedding;
    std::vector<T> gammas;  // per-sample effective focal gamma
};

struct TrainReport {
    std::vector<double> step_losses;
    std::vector<double> epoch_mean_losses;
    std::string last_checkpoint;
    std::string best_checkpoint;
    std::uint64_t global_step = 0;
};

template <class T>
struct InferenceOutput {
    Tensor<T> grid_map;   // (H', W') anomaly probability at feature resolution
    Tensor<T> pixel_map;  // bilinearly upsampled to the image size
    double score = 0;     // top-k mean of pixel_map
};

template <class T>
class Trainer {
public:
    Trainer(RunConfig cfg, std::vector<NormalPoolEntry<T>> pool,
            std::map<std::size_t, TemplatePool<T>> template_pools)
        : cfg_(std::move(cfg)), pool_(std::move(pool)),
          template_pools_(std::move(template_pools)),
          scheduler_(cfg_.plateau_factor, cfg_.plateau_patience, cfg_.plateau_rel_threshold) {
        if (pool_.empty()) throw ConfigError("Trainer: empty normal pool");
        encoder_ = make_encoder<T>(cfg_);
        std::size_t num_classes = 0;
        for (auto& e : pool_) num_classes = std::max(num_classes, e.label + 1);
        cfg_.filter.num_classes = std::max<std::size_t>(1, num_classes);

        // probe feature geometry with the first pool image
        MultiLayerFeatures<T> probe =
            extract_features(pool_[0].image, *encoder_, cfg_.layer_indices);
        feat_c_ = probe.channels();
        grid_h_ = probe.height();
        grid_w_ = probe.width();
        std::size_t D = grid_h_ * grid_w_;
        K_ = cfg_.effective_trim_k(D, cfg_.num_templates);
        L_ = probe.num_layers();

        cfg_.filter.K = K_;
        std::size_t in_c = cfg_.filter.dn_mapping == DnMapping::Channel ? K_ : L_;
        std::size_t in_d = cfg_.filter.dn_mapping == DnMapping::Channel ? L_ : K_;
        net_ = std::make_unique<FilterNet<T>>(cfg_.filter, in_c, in_d, feat_c_, L_);
        adam_ = Adam<T>(net_->params(),
                        {cfg_.initial_lr, 0.9, 0.999, 1e-8, cfg_.grad_clip_norm});
    }

    const RunConfig& config() const { return cfg_; }
    FilterNet<T>& net() { return *net_; }
    Adam<T>& optimizer() { return adam_; }
    std::size_t grid_h() const { return grid_h_; }
    std::size_t grid_w() const { return grid_w_; }

    // Builds the per-sample network inputs. The template seed's parity picks
    // the hybrid source, so alternation per step is the caller's seed choice.
    PreparedSample<T> prepare(const TrainingSample<T>& s, std::uint64_t template_seed) const {
        PreparedSample<T> out;
        out.label = s.label;
        out.is_anomalous = s.is_anomalous;
        out.feats = extract_features(s.image, *encoder_, cfg_.layer_indices);

        auto pit = template_pools_.find(s.label);
        if (pit == template_pools_.end())
            throw ConfigError("Trainer: no template pool for label " + std::to_string(s.label));
        TemplateSet<T> ts = sample_templates(cfg_.template_mode, s.base_id, pit->second,
                                             cfg_.num_templates, template_seed);
        out.template_source = ts.mode;

        std::vector<MultiLayerFeatures<T>> f_T;
        for (auto& t : ts.templates)
            f_T.push_back(extract_features(t.image, *encoder_, cfg_.layer_indices));

        SimilarityVolume<T> V = similarity_volume(out.feats, f_T);
        AnomalyCostVolume<T> C = cost_volume_from_similarity(V);
        if (K_ < C.channels()) C = trim_topk(C, K_);
        out.m_bar = initial_anomaly_map(C).values.reshaped(Shape{1, L_, grid_h_, grid_w_});
        out.volume = network_volume_layout(C, cfg_.filter.dn_mapping);
        out.mask_grid = downsample_mask_any(s.mask, grid_h_, grid_w_);
        return out;
    }

    // Forward a prepared batch; shared by the training step and inference.
    FilterOutput<T> forward_batch(const std::vector<PreparedSample<T>>& batch) const {
        std::size_t B = batch.size();
        const Shape& vs = batch[0].volume.shape();
        Tensor<T> vols(Shape{B, vs[0], vs[1], vs[2], vs[3]});
        Tensor<T> mbar(Shape{B, 1, L_, grid_h_, grid_w_});
        std::vector<Tensor<T>> flayers(L_, Tensor<T>(Shape{B, feat_c_, 1, grid_h_, grid_w_}));
        for (std::size_t b = 0; b < B; ++b) {
            const auto& p = batch[b];
            if (p.volume.shape() != vs) throw ShapeError("forward_batch: ragged volumes");
            std::copy_n(p.volume.data(), p.volume.size(), vols.data() + b * p.volume.size());
            std::copy_n(p.m_bar.data(), p.m_bar.size(), mbar.data() + b * p.m_bar.size());
            for (std::size_t l = 0; l < L_; ++l)
                std::copy_n(p.feats.layers[l].data(), p.feats.layers[l].size(),
                            flayers[l].data() + b * p.feats.layers[l].size());
        }
        std::vector<ag::Var<T>> fvars;
        for (auto& f : flayers) fvars.push_back(ag::Var<T>::constant(f));
        return net_->forward(ag::Var<T>::constant(vols), fvars, ag::Var<T>::constant(mbar));
    }

    StepRecord<T> training_step(const std::vector<PreparedSample<T>>& batch) {
        if (batch.empty()) throw ConfigError("training_step: empty batch");
        FilterOutput<T> out = forward_batch(batch);

        std::size_t B = batch.size();
        Tensor<T> masks(Shape{B, grid_h_, grid_w_});
        std::vector<std::size_t> labels(B);
        for (std::size_t b = 0; b < B; ++b) {
            std::copy_n(batch[b].mask_grid.data(), grid_h_ * grid_w_,
                        masks.data() + b * grid_h_ * grid_w_);
            labels[b] = batch[b].label;
        }

        TotalLoss<T> tl = total_loss(out.score_map, masks, out.class_logits, labels, cfg_.loss);
        if (!std::isfinite(static_cast<double>(tl.breakdown.total)))
            throw NumericError("training_step: non-finite loss");

        net_->params().zero_grad();
        tl.total.backward();
        StepRecord<T> rec;
        rec.loss = tl.breakdown;
        rec.grad_norm = adam_.grad_norm();
        rec.template_source = batch[0].template_source;
        rec.gammas = losses::effective_gammas(static_cast<T>(cfg_.loss.gamma0),
                                              out.class_logits.value(), labels);
        if (!std::isfinite(rec.grad_norm)) throw NumericError("training_step: non-finite gradient");
        adam_.step();
        return rec;
    }

    // Deterministic per-(epoch, step) template seed; the low bit carries the
    // step parity so hybrid mode alternates sources R,E,R,E,...
    std::uint64_t template_seed(std::uint64_t epoch, std::uint64_t step) const {
        std::uint64_t z = cfg_.seed + 0x9e3779b97f4a7c15ull * (epoch * 131071 + step + 1);
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        return (z & ~1ull) | (step & 1ull);
    }

    TrainReport run(const std::string& resume_from = "") {
        namespace fs = std::filesystem;
        fs::create_directories(cfg_.output_dir);
        fs::create_directories(fs::path(cfg_.output_dir) / "ckpt");

        std::uint32_t start_epoch = 0;
        if (!resume_from.empty()) restore(resume_from, start_epoch);

        {
            std::ofstream echo(fs::path(cfg_.output_dir) / "config.echo");
            echo << config_echo_;
        }
        std::ofstream log(fs::path(cfg_.output_dir) / "log.jsonl", std::ios::app);

        TrainReport report;
        report.global_step = global_step_;
        std::string last_good;
        double best_epoch_loss = scheduler_.best();

        for (std::uint32_t epoch = start_epoch; epoch < static_cast<std::uint32_t>(cfg_.epochs);
             ++epoch) {
            auto samples = build_epoch(pool_, cfg_.synth, cfg_.seed + 1000003ull * epoch);
            double loss_sum = 0;
            std::size_t steps_this_epoch = 0;

            for (std::size_t off = 0; off < samples.size();
                 off += static_cast<std::size_t>(cfg_.batch_size)) {
                if (cfg_.max_steps > 0 &&
                    global_step_ >= static_cast<std::uint64_t>(cfg_.max_steps))
                    break;
                std::size_t end =
                    std::min(samples.size(), off + static_cast<std::size_t>(cfg_.batch_size));
                std::vector<PreparedSample<T>> batch;
                std::uint64_t tseed = template_seed(epoch, global_step_);
                for (std::size_t i = off; i < end; ++i)
                    batch.push_back(prepare(samples[i], tseed + 2 * (i - off)));
                StepRecord<T> rec;
                try {
                    rec = training_step(batch);
                } catch (const NumericError& e) {
                    throw NumericError(std::string(e.what()) + "; last good checkpoint: " +
                                       (last_good.empty() ? "<none>" : last_good));
                }
                double lv = static_cast<double>(rec.loss.total);
                loss_sum += lv;
                ++steps_this_epoch;
                ++global_step_;
                report.step_losses.push_back(lv);
                log << "{\"type\":\"step\",\"epoch\":" << epoch << ",\"step\":" << global_step_
                    << ",\"loss\":" << lv << ",\"focal\":" << rec.loss.focal
                    << ",\"ce\":" << rec.loss.ce << ",\"soft_iou\":" << rec.loss.soft_iou
                    << ",\"ssim\":" << rec.loss.ssim << ",\"grad_norm\":" << rec.grad_norm
                    << ",\"templates\":\"" << to_string(rec.template_source) << "\"}\n";
            }
            if (steps_this_epoch == 0) break;  // step cap hit before this epoch

            double mean_loss = loss_sum / static_cast<double>(steps_this_epoch);
            report.epoch_mean_losses.push_back(mean_loss);
            double new_lr = scheduler_.observe(mean_loss, adam_.lr());
            adam_.set_lr(new_lr);
            log << "{\"type\":\"epoch\",\"epoch\":" << epoch << ",\"mean_loss\":" << mean_loss
                << ",\"lr\":" << new_lr << "}\n";
            log.flush();

            std::ostringstream name;
            name << "epoch_" << std::setw(3) << std::setfill('0') << epoch;
            std::string path = (fs::path(cfg_.output_dir) / "ckpt" / name.str()).string();
            save(path, epoch + 1);
            last_good = path;
            report.last_checkpoint = path;
            if (best_epoch_loss < 0 || mean_loss < best_epoch_loss) {
                best_epoch_loss = mean_loss;
                report.best_checkpoint =
                    (fs::path(cfg_.output_dir) / "ckpt" / "best").string();
                save(report.best_checkpoint, epoch + 1);
            }
            if (cfg_.max_steps > 0 && global_step_ >= static_cast<std::uint64_t>(cfg_.max_steps))
                break;
        }
        report.global_step = global_step_;
        return report;
    }

    void save(const std::string& path, std::uint32_t next_epoch) {
        Checkpoint<T> c;
        c.config_echo = config_echo_;
        c.epoch = next_epoch;
        c.global_step = global_step_;
        c.lr = adam_.lr();
        c.scheduler_best = scheduler_.best();
        c.scheduler_bad_epochs = scheduler_.bad_epochs();
        c.rng_state = std::to_string(next_epoch);  // all randomness derives from (seed, epoch, step)
        capture_params(c, net_->params());
        c.adam_m = adam_.moment1();
        c.adam_v = adam_.moment2();
        c.adam_steps = adam_.steps();
        save_checkpoint(c, path);
    }

    void restore(const std::string& path, std::uint32_t& start_epoch) {
        Checkpoint<T> c = load_checkpoint<T>(path);
        restore_params(c, net_->params());
        adam_.moment1() = c.adam_m;
        adam_.moment2() = c.adam_v;
        adam_.set_steps(c.adam_steps);
        adam_.set_lr(c.lr);
        scheduler_.restore(c.scheduler_best, c.scheduler_bad_epochs);
        global_step_ = c.global_step;
        start_epoch = c.epoch;
    }

    void set_config_echo(std::string echo) { config_echo_ = std::move(echo); }

    // Single-image inference: grid map, upsampled pixel map, top-k score.
    InferenceOutput<T> infer_image(const Tensor<T>& image, std::size_t label,
                                   std::uint64_t template_seed) const {
        TrainingSample<T> s;
        s.image = image;
        s.mask = Tensor<T>(Shape{image.dim(1), image.dim(2)}, T(0));
        s.label = label;
        PreparedSample<T> p = prepare(s, template_seed);
        FilterOutput<T> out = forward_batch({p});
        InferenceOutput<T> r;
        r.grid_map = Tensor<T>(Shape{grid_h_, grid_w_});
        const Tensor<T>& sm = out.score_map.value();  // (1,2,H',W')
        std::copy_n(sm.data() + grid_h_ * grid_w_, grid_h_ * grid_w_, r.grid_map.data());
        r.pixel_map = resize_bilinear_2d(r.grid_map, image.dim(1), image.dim(2));
        r.score = image_score(r.pixel_map, cfg_.image_score_topk);
        return r;
    }

private:
    RunConfig cfg_;
    std::vector<NormalPoolEntry<T>> pool_;
    std::map<std::size_t, TemplatePool<T>> template_pools_;
    std::unique_ptr<FeatureEncoder<T>> encoder_;
    std::unique_ptr<FilterNet<T>> net_;
    Adam<T> adam_;
    PlateauScheduler scheduler_;
    std::string config_echo_;
    std::uint64_t global_step_ = 0;
    std::size_t feat_c_ = 0, grid_h_ = 0, grid_w_ = 0, K_ = 0, L_ = 0;
};

}  // namespace costfilter
