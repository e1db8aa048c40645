#include "vcpseg/config.hpp"

#include "vcpseg/errors.hpp"

#include <fstream>
#include <set>

namespace vcpseg {

using nlohmann::json;

DtpPlacement RunOptions::placement() const {
    if (dtp_placement == "pre") return DtpPlacement::kPre;
    if (dtp_placement == "post") return DtpPlacement::kPost;
    throw ConfigError("flags.dtp_placement must be \"pre\" or \"post\"");
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("unknown config key \"" + (scope.empty() ? "" : scope + ".") +
                              it.key() + "\"");
}

template <typename T>
void take(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig parse_config_json(const json& j) {
    RunConfig cfg;
    reject_unknown(j, {"backbone", "dataset", "train", "loss", "metrics", "flags", "synth",
                       "out_dir"},
                   "");

    if (j.contains("backbone")) {
        const json& b = j.at("backbone");
        reject_unknown(b, {"kind", "path", "merges", "seed", "toy"}, "backbone");
        take(b, "kind", cfg.backbone_kind);
        take(b, "path", cfg.backbone_path);
        take(b, "merges", cfg.merges_path);
        take(b, "seed", cfg.backbone_seed);
        if (cfg.backbone_kind != "toy" && cfg.backbone_kind != "pretrained")
            throw ConfigError("backbone.kind must be \"toy\" or \"pretrained\"");
        if (cfg.backbone_kind == "pretrained" && cfg.backbone_path.empty())
            throw ConfigError("backbone.path is required for backbone.kind = \"pretrained\"");
        if (b.contains("toy")) {
            const json& t = b.at("toy");
            reject_unknown(t,
                           {"text_layers", "text_width", "text_heads", "image_layers",
                            "image_width", "image_heads", "joint_dim", "patch_size"},
                           "backbone.toy");
            take(t, "text_layers", cfg.toy_text_layers);
            take(t, "text_width", cfg.toy_text_width);
            take(t, "text_heads", cfg.toy_text_heads);
            take(t, "image_layers", cfg.toy_image_layers);
            take(t, "image_width", cfg.toy_image_width);
            take(t, "image_heads", cfg.toy_image_heads);
            take(t, "joint_dim", cfg.toy_joint_dim);
            take(t, "patch_size", cfg.toy_patch_size);
        }
    }

    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        reject_unknown(d, {"train_root", "eval_root"}, "dataset");
        take(d, "train_root", cfg.train_root);
        take(d, "eval_root", cfg.eval_root);
    }

    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t,
                       {"learning_rate", "epochs", "batch_size", "seed", "alpha", "r", "n",
                        "heads", "tap_layers", "image_size", "template", "state_pair",
                        "weight_decay", "grad_clip", "lr_schedule", "cache_features"},
                       "train");
        take(t, "learning_rate", cfg.opts.learning_rate);
        take(t, "epochs", cfg.opts.epochs);
        take(t, "batch_size", cfg.opts.batch_size);
        take(t, "seed", cfg.opts.seed);
        take(t, "alpha", cfg.opts.alpha);
        take(t, "r", cfg.opts.category_width);
        take(t, "n", cfg.opts.deep_width);
        take(t, "heads", cfg.opts.attn_heads);
        take(t, "tap_layers", cfg.opts.tap_layers);
        take(t, "image_size", cfg.opts.image_size);
        take(t, "template", cfg.opts.template_text);
        if (t.contains("state_pair")) {
            const auto pair = t.at("state_pair").get<std::vector<std::string>>();
            if (pair.size() != 2) throw ConfigError("train.state_pair must hold two words");
            cfg.opts.normal_word = pair[0];
            cfg.opts.abnormal_word = pair[1];
        }
        take(t, "weight_decay", cfg.opts.weight_decay);
        take(t, "grad_clip", cfg.opts.grad_clip);
        take(t, "lr_schedule", cfg.opts.lr_schedule);
        take(t, "cache_features", cfg.opts.cache_features);
        if (cfg.opts.alpha < 0.0 || cfg.opts.alpha > 1.0)
            throw ConfigError("train.alpha must lie in [0, 1]");
        if (cfg.opts.lr_schedule != "constant" && cfg.opts.lr_schedule != "cosine")
            throw ConfigError("train.lr_schedule must be \"constant\" or \"cosine\"");
    }

    if (j.contains("loss")) {
        const json& l = j.at("loss");
        reject_unknown(l, {"focal_gamma", "dice_smooth"}, "loss");
        take(l, "focal_gamma", cfg.opts.focal_gamma);
        take(l, "dice_smooth", cfg.opts.dice_smooth);
    }

    if (j.contains("metrics")) {
        const json& m = j.at("metrics");
        reject_unknown(m, {"pro_fpr_limit", "pro_steps"}, "metrics");
        take(m, "pro_fpr_limit", cfg.opts.pro_fpr_limit);
        take(m, "pro_steps", cfg.opts.pro_steps);
    }

    if (j.contains("flags")) {
        const json& f = j.at("flags");
        reject_unknown(f, {"dtp_placement", "attention_scaling", "share_heads", "visual_adapter"},
                       "flags");
        take(f, "dtp_placement", cfg.opts.dtp_placement);
        take(f, "attention_scaling", cfg.opts.attention_scaling);
        take(f, "share_heads", cfg.opts.share_heads);
        take(f, "visual_adapter", cfg.opts.visual_adapter);
        cfg.opts.placement();  // validate
    }

    if (j.contains("synth")) {
        const json& s = j.at("synth");
        reject_unknown(s,
                       {"seed", "count", "test_count", "image_size", "product", "defect_shapes",
                        "min_area_fraction", "max_area_fraction"},
                       "synth");
        take(s, "seed", cfg.synth.seed);
        take(s, "count", cfg.synth.count);
        take(s, "test_count", cfg.synth.test_count);
        take(s, "image_size", cfg.synth.image_size);
        take(s, "product", cfg.synth.product);
        take(s, "defect_shapes", cfg.synth.defect_shapes);
        take(s, "min_area_fraction", cfg.synth.min_area_fraction);
        take(s, "max_area_fraction", cfg.synth.max_area_fraction);
    }

    take(j, "out_dir", cfg.out_dir);
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return parse_config_json(j);
}

json config_to_json(const RunConfig& cfg) {
    json j;
    j["backbone"] = {{"kind", cfg.backbone_kind},
                     {"path", cfg.backbone_path},
                     {"merges", cfg.merges_path},
                     {"seed", cfg.backbone_seed},
                     {"toy",
                      {{"text_layers", cfg.toy_text_layers},
                       {"text_width", cfg.toy_text_width},
                       {"text_heads", cfg.toy_text_heads},
                       {"image_layers", cfg.toy_image_layers},
                       {"image_width", cfg.toy_image_width},
                       {"image_heads", cfg.toy_image_heads},
                       {"joint_dim", cfg.toy_joint_dim},
                       {"patch_size", cfg.toy_patch_size}}}};
    j["dataset"] = {{"train_root", cfg.train_root}, {"eval_root", cfg.eval_root}};
    j["train"] = {{"learning_rate", cfg.opts.learning_rate},
                  {"epochs", cfg.opts.epochs},
                  {"batch_size", cfg.opts.batch_size},
                  {"seed", cfg.opts.seed},
                  {"alpha", cfg.opts.alpha},
                  {"r", cfg.opts.category_width},
                  {"n", cfg.opts.deep_width},
                  {"heads", cfg.opts.attn_heads},
                  {"tap_layers", cfg.opts.tap_layers},
                  {"image_size", cfg.opts.image_size},
                  {"template", cfg.opts.template_text},
                  {"state_pair", std::vector<std::string>{cfg.opts.normal_word,
                                                          cfg.opts.abnormal_word}},
                  {"weight_decay", cfg.opts.weight_decay},
                  {"grad_clip", cfg.opts.grad_clip},
                  {"lr_schedule", cfg.opts.lr_schedule},
                  {"cache_features", cfg.opts.cache_features}};
    j["loss"] = {{"focal_gamma", cfg.opts.focal_gamma}, {"dice_smooth", cfg.opts.dice_smooth}};
    j["metrics"] = {{"pro_fpr_limit", cfg.opts.pro_fpr_limit}, {"pro_steps", cfg.opts.pro_steps}};
    j["flags"] = {{"dtp_placement", cfg.opts.dtp_placement},
                  {"attention_scaling", cfg.opts.attention_scaling},
                  {"share_heads", cfg.opts.share_heads},
                  {"visual_adapter", cfg.opts.visual_adapter}};
    j["synth"] = {{"seed", cfg.synth.seed},
                  {"count", cfg.synth.count},
                  {"test_count", cfg.synth.test_count},
                  {"image_size", cfg.synth.image_size},
                  {"product", cfg.synth.product},
                  {"defect_shapes", cfg.synth.defect_shapes},
                  {"min_area_fraction", cfg.synth.min_area_fraction},
                  {"max_area_fraction", cfg.synth.max_area_fraction}};
    j["out_dir"] = cfg.out_dir;
    return j;
}

}  // namespace vcpseg
