#pragma once
// Flat text run configuration: `key = value` lines grouped under [section]
// headers, addressed as dotted keys (section.key). Overrides apply after the
// file parse; unknown keys are errors at validation time.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "costfilter/encoders.hpp"
#include "costfilter/errors.hpp"
#include "costfilter/filternet.hpp"
#include "costfilter/losses.hpp"
#include "costfilter/synth.hpp"

namespace costfilter {

class ConfigMap {
public:
    static ConfigMap parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file: " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        return parse_text(ss.str());
    }

    static ConfigMap parse_text(const std::string& text) {
        ConfigMap cm;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = trim(line);
            if (s.empty() || s[0] == '#') continue;
            if (s.front() == '[' && s.back() == ']') {
                section = trim(s.substr(1, s.size() - 2));
                continue;
            }
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
            std::string key = trim(s.substr(0, eq));
            std::string val = trim(s.substr(eq + 1));
            if (!section.empty()) key = section + "." + key;
            cm.values_[key] = val;
        }
        return cm;
    }

    void set(const std::string& dotted_key, const std::string& value) {
        values_[dotted_key] = value;
    }

    // dotted "a.b=c" override strings
    void apply_override(const std::string& kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
        set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& def) const {
        consumed_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? def : it->second;
    }

    double get_double(const std::string& key, double def) const {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        try {
            return std::stod(it->second);
        } catch (...) {
            throw ConfigError("config key " + key + ": not a number: " + it->second);
        }
    }

    long long get_int(const std::string& key, long long def) const {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        try {
            return std::stoll(it->second);
        } catch (...) {
            throw ConfigError("config key " + key + ": not an integer: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool def) const {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        std::string v = it->second;
        std::transform(v.begin(), v.end(), v.begin(), ::tolower);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw ConfigError("config key " + key + ": not a boolean: " + it->second);
    }

    void check_all_consumed() const {
        for (auto& [k, v] : values_)
            if (!consumed_.count(k)) throw ConfigError("unknown config key: " + k);
    }

    std::string echo() const {
        // regroup dotted keys into sections for a round-trippable echo
        std::map<std::string, std::map<std::string, std::string>> sections;
        for (auto& [k, v] : values_) {
            auto dot = k.rfind('.');
            if (dot == std::string::npos)
                sections[""][k] = v;
            else
                sections[k.substr(0, dot)][k.substr(dot + 1)] = v;
        }
        std::ostringstream out;
        for (auto& [sec, kv] : sections) {
            if (!sec.empty()) out << "[" << sec << "]\n";
            for (auto& [k, v] : kv) out << k << " = " << v << "\n";
            out << "\n";
        }
        return out.str();
    }

    const std::map<std::string, std::string>& raw() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> consumed_;
};

struct RunConfig {
    // trainer
    int epochs = 40;
    int batch_size = 8;
    double initial_lr = 1e-3;
    int plateau_patience = 3;
    double plateau_factor = 0.5;
    double plateau_rel_threshold = 1e-3;
    double grad_clip_norm = 5.0;
    std::uint64_t seed = 1;
    bool deterministic = true;
    int max_steps = 0;  // 0 = no cap; smoke runs cap the step count

    // pipeline
    TemplateMode template_mode = TemplateMode::Embedding;
    std::size_t num_templates = 3;  // N
    std::vector<int> layer_indices = {0, 1, 2, 3};
    std::size_t trim_k = 0;  // 0 = default rule: DN when N==1 else D
    std::string encoder = "patchify";
    std::size_t grid_h = 16, grid_w = 16;
    std::size_t randconv_channels = 8, randconv_stages = 3;

    double lambda_fusion = 1.0;
    std::size_t image_score_topk = 250;

    FilterConfig filter;
    LossConfig loss;
    SynthParams synth;

    std::string dataset_root;
    std::size_t image_size = 256;
    std::string output_dir = "runs/default";

    std::size_t num_layers() const { return layer_indices.size(); }

    std::size_t effective_trim_k(std::size_t D, std::size_t N) const {
        if (trim_k > 0) return std::min(trim_k, D * N);
        return N == 1 ? D * N : D;
    }

    static RunConfig from_map(const ConfigMap& cm) {
        RunConfig c;
        c.epochs = static_cast<int>(cm.get_int("trainer.epochs", c.epochs));
        c.batch_size = static_cast<int>(cm.get_int("trainer.batch_size", c.batch_size));
        c.initial_lr = cm.get_double("trainer.initial_lr", c.initial_lr);
        c.plateau_patience = static_cast<int>(cm.get_int("trainer.plateau_patience", c.plateau_patience));
        c.plateau_factor = cm.get_double("trainer.plateau_factor", c.plateau_factor);
        c.plateau_rel_threshold =
            cm.get_double("trainer.plateau_rel_threshold", c.plateau_rel_threshold);
        c.grad_clip_norm = cm.get_double("trainer.grad_clip_norm", c.grad_clip_norm);
        c.seed = static_cast<std::uint64_t>(cm.get_int("trainer.seed", static_cast<long long>(c.seed)));
        c.deterministic = cm.get_bool("trainer.deterministic", c.deterministic);
        c.max_steps = static_cast<int>(cm.get_int("trainer.max_steps", c.max_steps));

        std::string mode = cm.get_string("templates.mode", "embedding");
        if (mode == "reconstruction") c.template_mode = TemplateMode::Reconstruction;
        else if (mode == "embedding") c.template_mode = TemplateMode::Embedding;
        else if (mode == "hybrid") c.template_mode = TemplateMode::Hybrid;
        else throw ConfigError("templates.mode must be reconstruction|embedding|hybrid");
        c.num_templates = static_cast<std::size_t>(cm.get_int("templates.count", 3));

        std::string layers = cm.get_string("encoder.layer_indices", "0,1,2,3");
        c.layer_indices.clear();
        std::istringstream ls(layers);
        std::string tok;
        while (std::getline(ls, tok, ',')) c.layer_indices.push_back(std::stoi(tok));
        if (c.layer_indices.empty()) throw ConfigError("encoder.layer_indices is empty");
        c.encoder = cm.get_string("encoder.name", c.encoder);
        c.grid_h = static_cast<std::size_t>(cm.get_int("encoder.grid_h", 16));
        c.grid_w = static_cast<std::size_t>(cm.get_int("encoder.grid_w", 16));
        c.randconv_channels = static_cast<std::size_t>(cm.get_int("encoder.randconv_channels", 8));
        c.randconv_stages = static_cast<std::size_t>(cm.get_int("encoder.randconv_stages", 3));

        c.trim_k = static_cast<std::size_t>(cm.get_int("volume.trim_k", 0));
        c.lambda_fusion = cm.get_double("infer.lambda", 1.0);
        c.image_score_topk = static_cast<std::size_t>(cm.get_int("infer.image_score_topk", 250));

        c.filter.base_channels = static_cast<std::size_t>(cm.get_int("filter.base_channels", 32));
        c.filter.num_scales = static_cast<std::size_t>(cm.get_int("filter.num_scales", 4));
        c.filter.guidance_sg = cm.get_bool("filter.guidance_sg", true);
        c.filter.guidance_mg = cm.get_bool("filter.guidance_mg", true);
        std::string dn = cm.get_string("filter.dn_mapping", "channel");
        if (dn == "channel") c.filter.dn_mapping = DnMapping::Channel;
        else if (dn == "depth") c.filter.dn_mapping = DnMapping::Depth;
        else throw ConfigError("filter.dn_mapping must be channel|depth");
        c.filter.num_classes = static_cast<std::size_t>(cm.get_int("filter.num_classes", 1));
        c.filter.guidance_channels =
            static_cast<std::size_t>(cm.get_int("filter.guidance_channels", 4));
        c.filter.seed = static_cast<std::uint64_t>(cm.get_int("filter.seed", 1));

        c.loss.alpha = cm.get_double("loss.alpha", 0.1);
        c.loss.gamma0 = cm.get_double("loss.gamma0", 3.0);
        c.loss.use_focal = cm.get_bool("loss.use_focal", true);
        c.loss.use_ce = cm.get_bool("loss.use_ce", true);
        c.loss.use_structural = cm.get_bool("loss.use_structural", true);

        c.synth.anomaly_probability = cm.get_double("synth.anomaly_probability", 0.5);
        c.synth.min_area = cm.get_double("synth.min_area", 0.01);
        c.synth.max_area = cm.get_double("synth.max_area", 0.2);
        c.synth.min_opacity = cm.get_double("synth.min_opacity", 0.4);
        c.synth.max_opacity = cm.get_double("synth.max_opacity", 1.0);

        c.dataset_root = cm.get_string("data.root", "");
        c.image_size = static_cast<std::size_t>(cm.get_int("data.image_size", 256));
        c.output_dir = cm.get_string("run.output_dir", c.output_dir);

        if (c.epochs < 1) throw ConfigError("trainer.epochs must be >= 1");
        if (c.batch_size < 1) throw ConfigError("trainer.batch_size must be >= 1");
        if (c.lambda_fusion < 0 || c.lambda_fusion > 1)
            throw ConfigError("infer.lambda must be in [0,1]");
        cm.check_all_consumed();
        return c;
    }
};

}  // namespace costfilter
