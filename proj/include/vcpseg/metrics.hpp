#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace vcpseg::metrics {

// One evaluated image: flat score map, binary mask, product tag and the
// image-level score (max of the fused map).
struct ScoredSample {
    Eigen::VectorXd scores;           // hw
    std::vector<std::uint8_t> mask;   // hw, 0/1
    int h = 0, w = 0;
    std::string product;
    double image_score = 0.0;

    bool anomalous() const;
};

// Flat-vector primitives -----------------------------------------------------

// Mann-Whitney AUROC with 0.5 tie credit. Throws UndefinedMetric when labels
// are single-class.
double auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

// Step-wise AP over a descending-score sweep, ties grouped per threshold.
double average_precision(const std::vector<double>& scores,
                         const std::vector<std::uint8_t>& labels);

// Pixel-level metrics pooled over all samples --------------------------------

double pixel_auroc(const std::vector<ScoredSample>& samples);
double pixel_ap(const std::vector<ScoredSample>& samples);

// Per-region overlap integrated over the pooled FPR range (0, fpr_limit],
// normalized by fpr_limit. Ground-truth components use 8-connectivity. Every
// distinct score is a threshold; pools above steps*1000 distinct values are
// subsampled evenly by rank to bound the sweep.
double pro(const std::vector<ScoredSample>& samples, double fpr_limit = 0.3, int steps = 200);

// Image-level AUROC/AP over image_score; an image is anomalous when its mask
// has any positive pixel.
std::pair<double, double> image_metrics(const std::vector<ScoredSample>& samples);

// 8-connectivity component labeling; returns labels (0 = background,
// 1..n_components) and the component count.
std::pair<std::vector<int>, int> connected_components(const std::vector<std::uint8_t>& mask,
                                                      int h, int w);

// Report ----------------------------------------------------------------------

struct ProductMetrics {
    std::string product;
    double auroc = 0, pro = 0, ap = 0;          // fractions in [0, 1]
    double image_auroc = 0, image_ap = 0;
    bool has_pixel = false, has_image = false;
};

struct EvalReport {
    std::vector<ProductMetrics> rows;
    ProductMetrics mean;  // arithmetic mean over products with defined values

    std::string render_table() const;  // aligned text, percentages to one decimal
    std::string render_csv() const;    // product, auroc, pro, ap, image_auroc, image_ap
};

EvalReport build_report(const std::vector<ProductMetrics>& rows);

}  // namespace vcpseg::metrics
