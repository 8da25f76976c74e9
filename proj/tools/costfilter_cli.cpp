// costfilter-ad: train / infer / evaluate / plot-kde / synth-preview /
// dump-volume over the costfilter library.
//
// Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "costfilter/costfilter.hpp"

namespace fs = std::filesystem;
using namespace costfilter;
using Scalar = float;

namespace {

struct LoadedConfig {
    RunConfig cfg;
    std::string echo;
};

LoadedConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    ConfigMap cm = ConfigMap::parse_file(path);
    for (auto& o : overrides) cm.apply_override(o);
    LoadedConfig out;
    out.cfg = RunConfig::from_map(cm);
    out.echo = cm.echo();
    return out;
}

struct Pools {
    std::vector<NormalPoolEntry<Scalar>> pool;
    std::map<std::size_t, TemplatePool<Scalar>> tpools;
    std::vector<std::string> category_names;  // label -> name
};

// Normal training images become both the synthesis pool and the embedding
// template pool. Reconstruction templates, when a frozen reconstruction model
// has produced them offline, live in <root>/<category>/templates/step_<t>.*.
Pools build_pools(const RunConfig& cfg, const DatasetIndex& idx) {
    Pools out;
    for (std::size_t label = 0; label < idx.categories.size(); ++label) {
        const auto& cat = idx.categories[label];
        out.category_names.push_back(cat.name);
        TemplatePool<Scalar>& tp = out.tpools[label];
        tp.category = cat.name;
        for (auto& path : cat.train_images) {
            std::string id = cat.name + "/" + fs::path(path).stem().string();
            auto img = load_image<Scalar>(path, cfg.image_size, cfg.image_size);
            tp.normal_images[id] = img;
            out.pool.push_back({std::move(img), label, id});
        }
        fs::path tdir = fs::path(cfg.dataset_root) / cat.name / "templates";
        if (fs::is_directory(tdir))
            for (auto& e : fs::directory_iterator(tdir)) {
                std::string stem = e.path().stem().string();
                if (stem.rfind("step_", 0) != 0) continue;
                int t = std::stoi(stem.substr(5));
                tp.reconstructions[t] =
                    load_image<Scalar>(e.path().string(), cfg.image_size, cfg.image_size);
            }
    }
    if (out.pool.empty()) throw ConfigError("dataset has no training images under " +
                                            cfg.dataset_root);
    return out;
}

std::string entry_id(const TestEntry& e) {
    return e.defect + "_" + fs::path(e.image_path).stem().string();
}

int cmd_train(const LoadedConfig& lc, const std::string& resume) {
    auto idx = scan_dataset(lc.cfg.dataset_root);
    for (auto& w : idx.warnings) std::cerr << "warning: " << w << "\n";
    Pools pools = build_pools(lc.cfg, idx);
    Trainer<Scalar> tr(lc.cfg, pools.pool, pools.tpools);
    tr.set_config_echo(lc.echo);
    auto report = tr.run(resume);
    std::cerr << "trained " << report.global_step << " steps";
    if (!report.epoch_mean_losses.empty())
        std::cerr << ", final epoch mean loss " << report.epoch_mean_losses.back();
    std::cerr << "\nlast checkpoint: " << report.last_checkpoint << "\n";
    return 0;
}

int cmd_infer(const LoadedConfig& lc, const std::string& checkpoint,
              const std::string& baseline_dir, bool heatmaps) {
    auto idx = scan_dataset(lc.cfg.dataset_root);
    Pools pools = build_pools(lc.cfg, idx);
    Trainer<Scalar> tr(lc.cfg, pools.pool, pools.tpools);
    std::uint32_t epoch = 0;
    tr.restore(checkpoint, epoch);

    fs::path out_root = lc.cfg.output_dir;
    fs::create_directories(out_root / "maps");
    std::vector<ScoreRow> rows;

    for (std::size_t label = 0; label < idx.categories.size(); ++label) {
        const auto& cat = idx.categories[label];
        fs::create_directories(out_root / "maps" / cat.name);
        std::vector<Tensor<Scalar>> fused_maps;
        std::vector<ScoreRow> cat_rows;

        for (std::size_t k = 0; k < cat.test_entries.size(); ++k) {
            const auto& e = cat.test_entries[k];
            auto img = load_image<Scalar>(e.image_path, lc.cfg.image_size, lc.cfg.image_size);
            auto res = tr.infer_image(img, label, lc.cfg.seed + 7919 * k);

            Tensor<Scalar> fused = res.pixel_map;
            if (!baseline_dir.empty()) {
                fs::path bp = fs::path(baseline_dir) / cat.name / (entry_id(e) + ".cfm");
                if (!fs::exists(bp)) throw IoError("missing baseline map: " + bp.string());
                auto base = load_map<Scalar>(bp.string());
                fused = fuse_maps(res.pixel_map, base, lc.cfg.lambda_fusion);
            }
            ScoreRow row;
            row.image_id = entry_id(e);
            row.category = cat.name;
            row.raw_score = res.score;
            row.fused_score = image_score(fused, lc.cfg.image_score_topk);
            row.label = e.is_anomalous ? 1 : 0;
            cat_rows.push_back(row);
            fused_maps.push_back(std::move(fused));
        }
        if (fused_maps.empty()) continue;

        auto norm = normalize_per_category(fused_maps);
        if (norm.degenerate)
            std::cerr << "warning: degenerate score range in category " << cat.name << "\n";
        for (std::size_t k = 0; k < fused_maps.size(); ++k) {
            cat_rows[k].normalized_score =
                image_score(fused_maps[k], lc.cfg.image_score_topk);
            fs::path mp = out_root / "maps" / cat.name / (cat_rows[k].image_id + ".cfm");
            dump_map(fused_maps[k], mp.string());
            if (heatmaps)
                write_pnm(fused_maps[k],
                          (out_root / "maps" / cat.name / (cat_rows[k].image_id + ".pgm"))
                              .string());
            rows.push_back(cat_rows[k]);
        }
    }
    write_scores_csv(rows, (out_root / "scores.csv").string());
    std::cerr << "wrote " << rows.size() << " rows to " << (out_root / "scores.csv").string()
              << "\n";
    return 0;
}

int cmd_evaluate(const LoadedConfig& lc, const std::string& scores_path,
                 const std::string& maps_dir) {
    auto rows = read_scores_csv(scores_path);
    if (rows.empty()) throw ConfigError("no rows in " + scores_path);
    auto idx = scan_dataset(lc.cfg.dataset_root);

    std::vector<std::string> cats;
    for (auto& r : rows)
        if (std::find(cats.begin(), cats.end(), r.category) == cats.end())
            cats.push_back(r.category);

    std::ostringstream csv;
    csv << "category,i_auroc,i_ap,i_f1max,p_auroc,p_ap,p_f1max,p_aupro\n";
    std::cout << std::left << std::setw(14) << "category" << std::right;
    for (const char* h : {"I-AUROC", "I-AP", "I-F1max", "P-AUROC", "P-AP", "P-F1max", "AUPRO"})
        std::cout << std::setw(10) << h;
    std::cout << "\n";

    EvalResult mean;
    std::size_t counted = 0;
    for (auto& cname : cats) {
        std::vector<double> iscores;
        std::vector<int> ilabels;
        std::vector<double> pscores;
        std::vector<int> plabels;
        std::vector<Tensor<double>> maps, masks;
        const auto& cat = idx.category(cname);

        for (auto& e : cat.test_entries) {
            std::string id = entry_id(e);
            auto rit = std::find_if(rows.begin(), rows.end(), [&](const ScoreRow& r) {
                return r.category == cname && r.image_id == id;
            });
            if (rit == rows.end()) continue;
            iscores.push_back(rit->normalized_score);
            ilabels.push_back(e.is_anomalous ? 1 : 0);

            fs::path mp = fs::path(maps_dir) / cname / (id + ".cfm");
            if (!fs::exists(mp)) continue;
            auto map = load_map<double>(mp.string());
            Tensor<double> mask(map.shape(), 0.0);
            if (e.is_anomalous) {
                if (e.mask_path.empty()) continue;  // flagged at scan time
                auto m = load_mask<double>(e.mask_path, map.dim(0), map.dim(1));
                mask = m;
            }
            for (std::size_t i = 0; i < map.size(); ++i) {
                pscores.push_back(map[i]);
                plabels.push_back(mask[i] != 0 ? 1 : 0);
            }
            if (e.is_anomalous) {
                maps.push_back(map);
                masks.push_back(mask);
            }
        }
        EvalResult r;
        r.i_auroc = metrics::auroc(iscores, ilabels);
        r.i_ap = metrics::average_precision(iscores, ilabels);
        r.i_f1max = metrics::f1max(iscores, ilabels);
        r.p_auroc = metrics::auroc(pscores, plabels);
        r.p_ap = metrics::average_precision(pscores, plabels);
        r.p_f1max = metrics::f1max(pscores, plabels);
        r.p_aupro = metrics::aupro(maps, masks);

        mean.i_auroc += r.i_auroc;
        mean.i_ap += r.i_ap;
        mean.i_f1max += r.i_f1max;
        mean.p_auroc += r.p_auroc;
        mean.p_ap += r.p_ap;
        mean.p_f1max += r.p_f1max;
        mean.p_aupro += r.p_aupro;
        ++counted;

        auto emit = [&](const std::string& name, const EvalResult& v) {
            std::cout << std::left << std::setw(14) << name << std::right << std::fixed
                      << std::setprecision(4);
            for (double x : {v.i_auroc, v.i_ap, v.i_f1max, v.p_auroc, v.p_ap, v.p_f1max,
                             v.p_aupro})
                std::cout << std::setw(10) << x;
            std::cout << "\n";
            csv << name << "," << v.i_auroc << "," << v.i_ap << "," << v.i_f1max << ","
                << v.p_auroc << "," << v.p_ap << "," << v.p_f1max << "," << v.p_aupro << "\n";
        };
        emit(cname, r);
    }
    if (counted == 0) throw ConfigError("no evaluable categories");
    mean.i_auroc /= counted;
    mean.i_ap /= counted;
    mean.i_f1max /= counted;
    mean.p_auroc /= counted;
    mean.p_ap /= counted;
    mean.p_f1max /= counted;
    mean.p_aupro /= counted;
    std::cout << std::left << std::setw(14) << "mean" << std::right << std::fixed
              << std::setprecision(4);
    for (double x : {mean.i_auroc, mean.i_ap, mean.i_f1max, mean.p_auroc, mean.p_ap,
                     mean.p_f1max, mean.p_aupro})
        std::cout << std::setw(10) << x;
    std::cout << "\n";
    csv << "mean," << mean.i_auroc << "," << mean.i_ap << "," << mean.i_f1max << ","
        << mean.p_auroc << "," << mean.p_ap << "," << mean.p_f1max << "," << mean.p_aupro
        << "\n";

    fs::create_directories(lc.cfg.output_dir);
    std::ofstream out(fs::path(lc.cfg.output_dir) / "results.csv");
    out << csv.str();
    return 0;
}

int cmd_plot_kde(const LoadedConfig& lc, const std::string& scores_path, bool use_normalized) {
    auto rows = read_scores_csv(scores_path);
    std::vector<double> scores;
    std::vector<int> labels;
    for (auto& r : rows) {
        if (r.label < 0) continue;
        scores.push_back(use_normalized ? r.normalized_score : r.fused_score);
        labels.push_back(r.label);
    }
    if (scores.empty()) throw ConfigError("no labelled rows in " + scores_path);
    auto curves = metrics::kde_export(scores, labels);
    if (curves.empty()) throw ConfigError("not enough points per class for a KDE");

    fs::create_directories(lc.cfg.output_dir);
    fs::path csv_path = fs::path(lc.cfg.output_dir) / "kde.csv";
    std::ofstream f(csv_path);
    f << "score";
    for (auto& c : curves) f << ",density_label_" << c.label;
    f << "\n";
    for (std::size_t g = 0; g < curves[0].grid.size(); ++g) {
        f << curves[0].grid[g];
        for (auto& c : curves) f << "," << c.density[g];
        f << "\n";
    }

    // simple raster plot: one row band per class, density as brightness
    std::size_t H = 128, W = curves[0].grid.size();
    Tensor<double> plot(Shape{H, W}, 1.0);
    double dmax = 0;
    for (auto& c : curves)
        for (double d : c.density) dmax = std::max(dmax, d);
    for (std::size_t ci = 0; ci < curves.size(); ++ci)
        for (std::size_t x = 0; x < W; ++x) {
            double v = curves[ci].density[x] / (dmax > 0 ? dmax : 1.0);
            std::size_t y = H - 1 - static_cast<std::size_t>(v * (H - 1));
            plot(y, x) = ci == 0 ? 0.0 : 0.5;
        }
    write_pnm(plot, (fs::path(lc.cfg.output_dir) / "kde.pgm").string());
    std::cerr << "wrote " << csv_path.string() << "\n";
    return 0;
}

int cmd_synth_preview(const LoadedConfig& lc, int count) {
    auto idx = scan_dataset(lc.cfg.dataset_root);
    Pools pools = build_pools(lc.cfg, idx);
    auto samples = build_epoch(pools.pool, lc.cfg.synth, lc.cfg.seed,
                               static_cast<std::size_t>(count));
    fs::path out = fs::path(lc.cfg.output_dir) / "synth";
    fs::create_directories(out);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::ostringstream n;
        n << std::setw(3) << std::setfill('0') << i;
        write_pnm(samples[i].image, (out / (n.str() + "_image.ppm")).string());
        write_pnm(samples[i].mask, (out / (n.str() + "_mask.pgm")).string());
    }
    std::cerr << "wrote " << samples.size() << " samples to " << out.string() << "\n";
    return 0;
}

int cmd_dump_volume(const LoadedConfig& lc, const std::string& image_path,
                    const std::string& category, std::string out_path) {
    auto idx = scan_dataset(lc.cfg.dataset_root);
    Pools pools = build_pools(lc.cfg, idx);
    std::size_t label = 0;
    while (label < pools.category_names.size() && pools.category_names[label] != category)
        ++label;
    if (label == pools.category_names.size())
        throw ConfigError("unknown category: " + category);

    auto img = load_image<Scalar>(image_path, lc.cfg.image_size, lc.cfg.image_size);
    auto enc = make_encoder<Scalar>(lc.cfg);
    auto f_S = extract_features(img, *enc, lc.cfg.layer_indices);
    auto ts = sample_templates(lc.cfg.template_mode, fs::path(image_path).stem().string(),
                               pools.tpools.at(label), lc.cfg.num_templates, lc.cfg.seed);
    std::vector<MultiLayerFeatures<Scalar>> f_T;
    for (auto& t : ts.templates)
        f_T.push_back(extract_features(t.image, *enc, lc.cfg.layer_indices));
    auto C = cost_volume_from_similarity(similarity_volume(f_S, f_T));
    std::size_t K = lc.cfg.effective_trim_k(f_S.height() * f_S.width(), lc.cfg.num_templates);
    if (K < C.channels()) C = trim_topk(C, K);

    if (out_path.empty()) {
        const char* cache = std::getenv("COSTVOL_AD_CACHE");
        fs::path dir = cache ? fs::path(cache) : fs::path(lc.cfg.output_dir);
        fs::create_directories(dir);
        out_path = (dir / (fs::path(image_path).stem().string() + ".cfadvol")).string();
    }
    dump_volume(C, out_path);
    std::cerr << "wrote " << out_path << " (" << C.channels() << "x" << C.L() << "x"
              << C.grid_h() << "x" << C.grid_w() << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cost-volume filtering for unsupervised anomaly detection"};
    app.require_subcommand(1);

    std::string config_path, resume, checkpoint, baseline_dir, scores_path, maps_dir;
    std::string image_path, category, out_path;
    std::vector<std::string> overrides;
    bool heatmaps = false, use_normalized = true;
    int count = 8;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "config file")->required();
        sub->add_option("--override", overrides, "dotted key=value overrides");
    };

    auto* train = app.add_subcommand("train", "train the filter network");
    add_common(train);
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* infer = app.add_subcommand("infer", "run inference over the test split");
    add_common(infer);
    infer->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    infer->add_option("--baseline-dir", baseline_dir, "baseline map dir for fusion");
    infer->add_flag("--heatmaps", heatmaps, "also write 8-bit heatmaps");

    auto* evaluate = app.add_subcommand("evaluate", "compute the metric table");
    add_common(evaluate);
    evaluate->add_option("--scores", scores_path, "scores.csv path");
    evaluate->add_option("--maps", maps_dir, "maps directory");

    auto* kde = app.add_subcommand("plot-kde", "export score KDE curves");
    add_common(kde);
    kde->add_option("--scores", scores_path, "scores.csv path");
    kde->add_flag("!--raw", use_normalized, "use fused instead of normalized scores");

    auto* synth = app.add_subcommand("synth-preview", "write synthesized samples");
    add_common(synth);
    synth->add_option("--count", count, "number of samples");

    auto* dump = app.add_subcommand("dump-volume", "write a cost volume to disk");
    add_common(dump);
    dump->add_option("--image", image_path, "input image")->required();
    dump->add_option("--category", category, "dataset category")->required();
    dump->add_option("--out", out_path, "output path");

    CLI11_PARSE(app, argc, argv);

    try {
        LoadedConfig lc = load_config(config_path, overrides);
        fs::create_directories(lc.cfg.output_dir);
        {
            std::ofstream echo(fs::path(lc.cfg.output_dir) / "config.echo");
            echo << lc.echo;
        }
        if (scores_path.empty())
            scores_path = (fs::path(lc.cfg.output_dir) / "scores.csv").string();
        if (maps_dir.empty()) maps_dir = (fs::path(lc.cfg.output_dir) / "maps").string();

        if (train->parsed()) return cmd_train(lc, resume);
        if (infer->parsed()) return cmd_infer(lc, checkpoint, baseline_dir, heatmaps);
        if (evaluate->parsed()) return cmd_evaluate(lc, scores_path, maps_dir);
        if (kde->parsed()) return cmd_plot_kde(lc, scores_path, use_normalized);
        if (synth->parsed()) return cmd_synth_preview(lc, count);
        if (dump->parsed()) return cmd_dump_volume(lc, image_path, category, out_path);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
