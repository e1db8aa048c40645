#pragma once

#include "vcpseg/backbone.hpp"
#include "vcpseg/data.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace vcpseg {

// Everything a run needs beyond the backbone weights. Defaults are the
// reference full-scale settings; desk-scale runs override them in the config
// file.
struct RunOptions {
    double learning_rate = 4e-5;
    int epochs = 10;
    int batch_size = 32;
    std::uint64_t seed = 0;
    double alpha = 0.75;
    int category_width = 2;  // r
    int deep_width = 1;      // n
    int attn_heads = 8;      // M
    std::vector<int> tap_layers{6, 12, 18, 24};
    int image_size = 518;
    std::string template_text = "a photo of a [state]";
    std::string normal_word = "good";
    std::string abnormal_word = "damaged";

    // flags
    std::string dtp_placement = "pre";  // "pre" | "post"
    bool attention_scaling = false;
    bool share_heads = false;
    bool visual_adapter = false;

    // loss
    double focal_gamma = 2.0;
    double dice_smooth = 1.0;

    // metrics
    double pro_fpr_limit = 0.3;
    int pro_steps = 200;

    // optional training extras, all off by default
    double weight_decay = 0.0;
    double grad_clip = 0.0;
    std::string lr_schedule = "constant";
    bool cache_features = true;

    DtpPlacement placement() const;
};

struct RunConfig {
    // backbone selection
    std::string backbone_kind = "toy";  // "toy" | "pretrained"
    std::string backbone_path;          // archive path for "pretrained"
    std::string merges_path;            // BPE merge table for "pretrained"
    std::uint64_t backbone_seed = 0;
    int toy_text_layers = 4;
    int toy_text_width = 64;
    int toy_text_heads = 4;
    int toy_image_layers = 4;
    int toy_image_width = 64;
    int toy_image_heads = 4;
    int toy_joint_dim = 64;
    int toy_patch_size = 16;

    std::string train_root;
    std::string eval_root;
    std::string out_dir = "out";

    RunOptions opts;
    SynthConfig synth;
};

// Strict parse: unknown keys anywhere are a ConfigError naming the key path.
RunConfig parse_config_json(const nlohmann::json& j);
RunConfig parse_config_file(const std::string& path);
nlohmann::json config_to_json(const RunConfig& cfg);

}  // namespace vcpseg
