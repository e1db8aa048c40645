#pragma once

#include "vcpseg/backbone.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace vcpseg {

struct Sample {
    std::string image_path;
    std::string mask_path;  // empty => all-normal
    std::string product;
    std::string split;        // "train" | "test"
    std::string defect_type;  // directory name, "good" => normal
    bool anomalous = false;
};

struct PreprocessSpec {
    int target_h = 518;
    int target_w = 518;
    std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
    std::array<double, 3> stddev{0.26862954, 0.26130258, 0.27577711};
    double mask_threshold = 0.5;
};

// Walks <root>/<product>/<split>/<defect_type>/<image> with masks at
// <root>/<product>/ground_truth/<defect_type>/<stem>_mask.png. Ordering is
// lexicographic and deterministic. An anomalous image without a mask file is
// a DataError naming the path.
std::vector<Sample> scan_dataset(const std::string& root);

// Image: bilinear resize + per-channel standardization (grayscale inputs are
// replicated to three channels). Mask: nearest-neighbor resize, then
// threshold to {0, 1}. A missing mask loads as all zeros.
std::pair<ImageTensor, Eigen::VectorXd> load_sample(const Sample& sample,
                                                    const PreprocessSpec& spec);

struct SynthConfig {
    std::uint64_t seed = 0;
    int count = 8;       // images per split
    int test_count = -1; // defaults to count
    int image_size = 64;
    std::string product = "widget";
    std::vector<std::string> defect_shapes{"rect", "ellipse"};
    double min_area_fraction = 0.01;
    double max_area_fraction = 0.10;
};

// Deterministic textured corpus following the scan_dataset layout; half of
// each split is defect-free. Returns the generated sample count.
int synth_generate(const SynthConfig& cfg, const std::string& root);

// 8-bit output helpers (display only; raw values live in the map archives).
void write_gray_png(const std::string& path, const Eigen::MatrixXd& values);
void write_heatmap_png(const std::string& path, const Eigen::MatrixXd& values);

}  // namespace vcpseg
