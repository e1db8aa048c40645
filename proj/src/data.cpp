#include "vcpseg/data.hpp"

#include "vcpseg/errors.hpp"
#include "vcpseg/util.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace vcpseg {

namespace fs = std::filesystem;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::vector<std::string> sorted_entries(const fs::path& dir, bool dirs_only) {
    std::vector<std::string> names;
    if (!fs::exists(dir)) return names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (dirs_only && !e.is_directory()) continue;
        if (!dirs_only && !e.is_regular_file()) continue;
        names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

bool is_image_file(const std::string& name) {
    const auto dot = name.rfind('.');
    if (dot == std::string::npos) return false;
    std::string ext = name.substr(dot + 1);
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    return ext == "png" || ext == "jpg" || ext == "jpeg" || ext == "bmp" || ext == "tif" ||
           ext == "tiff";
}

}  // namespace

std::vector<Sample> scan_dataset(const std::string& root) {
    if (!fs::exists(root)) throw DataError("dataset root does not exist: " + root);
    std::vector<Sample> samples;
    for (const auto& product : sorted_entries(root, true)) {
        const fs::path pdir = fs::path(root) / product;
        for (const auto& split : {std::string("train"), std::string("test")}) {
            const fs::path sdir = pdir / split;
            if (!fs::exists(sdir)) continue;
            for (const auto& defect : sorted_entries(sdir, true)) {
                for (const auto& img : sorted_entries(sdir / defect, false)) {
                    if (!is_image_file(img)) continue;
                    Sample s;
                    s.image_path = (sdir / defect / img).string();
                    s.product = product;
                    s.split = split;
                    s.defect_type = defect;
                    s.anomalous = (defect != "good");
                    if (s.anomalous) {
                        const std::string stem = fs::path(img).stem().string();
                        const fs::path mask =
                            pdir / "ground_truth" / defect / (stem + "_mask.png");
                        if (!fs::exists(mask))
                            throw DataError("anomalous image lacks a mask: " + s.image_path +
                                            " (expected " + mask.string() + ")");
                        s.mask_path = mask.string();
                    }
                    samples.push_back(std::move(s));
                }
            }
        }
    }
    return samples;
}

std::pair<ImageTensor, VectorXd> load_sample(const Sample& sample, const PreprocessSpec& spec) {
    cv::Mat img = cv::imread(sample.image_path, cv::IMREAD_COLOR);
    if (img.empty()) throw DataError("unreadable image: " + sample.image_path);
    cv::Mat resized;
    cv::resize(img, resized, cv::Size(spec.target_w, spec.target_h), 0, 0, cv::INTER_LINEAR);

    ImageTensor out;
    out.h = spec.target_h;
    out.w = spec.target_w;
    out.px.resize(static_cast<long>(out.h) * out.w, 3);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            const cv::Vec3b bgr = resized.at<cv::Vec3b>(y, x);
            const long row = static_cast<long>(y) * out.w + x;
            // BGR -> RGB, scale to [0,1], standardize
            for (int c = 0; c < 3; ++c)
                out.px(row, c) =
                    (bgr[2 - c] / 255.0 - spec.mean[static_cast<std::size_t>(c)]) /
                    spec.stddev[static_cast<std::size_t>(c)];
        }

    VectorXd mask = VectorXd::Zero(static_cast<long>(out.h) * out.w);
    if (!sample.mask_path.empty()) {
        cv::Mat m = cv::imread(sample.mask_path, cv::IMREAD_GRAYSCALE);
        if (m.empty()) throw DataError("unreadable mask: " + sample.mask_path);
        cv::Mat mr;
        cv::resize(m, mr, cv::Size(spec.target_w, spec.target_h), 0, 0, cv::INTER_NEAREST);
        const double thresh = spec.mask_threshold * 255.0;
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x)
                mask(static_cast<long>(y) * out.w + x) = mr.at<std::uint8_t>(y, x) > thresh ? 1.0 : 0.0;
    }
    return {std::move(out), std::move(mask)};
}

namespace {

// Smooth random background texture from a few low-frequency waves.
cv::Mat textured_background(Rng& rng, int size) {
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::array<std::array<Wave, 3>, 3> waves;
    for (auto& ch : waves)
        for (auto& w : ch)
            w = {rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.0, 2.0 * M_PI),
                 rng.uniform(8.0, 22.0)};
    std::array<double, 3> base{rng.uniform(90.0, 150.0), rng.uniform(90.0, 150.0),
                               rng.uniform(90.0, 150.0)};

    cv::Mat img(size, size, CV_8UC3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            cv::Vec3b px;
            for (int c = 0; c < 3; ++c) {
                double v = base[static_cast<std::size_t>(c)];
                for (const auto& w : waves[static_cast<std::size_t>(c)])
                    v += w.amp * std::sin(2.0 * M_PI * (w.fx * x + w.fy * y) / size + w.phase);
                px[2 - c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
            }
            img.at<cv::Vec3b>(y, x) = px;
        }
    return img;
}

struct Defect {
    cv::Mat mask;  // 8U, 255 inside
};

Defect place_defect(Rng& rng, int size, const std::string& shape, double min_frac,
                    double max_frac) {
    Defect d;
    d.mask = cv::Mat::zeros(size, size, CV_8UC1);
    const double target = rng.uniform(min_frac, max_frac) * size * size;
    if (shape == "ellipse") {
        // area = pi * a * b
        const double ratio = rng.uniform(0.5, 2.0);
        double a = std::sqrt(target * ratio / M_PI);
        double b = a / ratio;
        a = std::max(a, 2.0);
        b = std::max(b, 2.0);
        const int cx = static_cast<int>(rng.uniform(a + 1, size - a - 1));
        const int cy = static_cast<int>(rng.uniform(b + 1, size - b - 1));
        cv::ellipse(d.mask, cv::Point(cx, cy), cv::Size(static_cast<int>(a), static_cast<int>(b)),
                    0.0, 0.0, 360.0, cv::Scalar(255), cv::FILLED);
    } else {
        const double ratio = rng.uniform(0.5, 2.0);
        int rw = std::max(2, static_cast<int>(std::sqrt(target * ratio)));
        int rh = std::max(2, static_cast<int>(target / rw));
        rw = std::min(rw, size - 2);
        rh = std::min(rh, size - 2);
        const int x0 = static_cast<int>(rng.uniform_int(1, size - rw - 1));
        const int y0 = static_cast<int>(rng.uniform_int(1, size - rh - 1));
        cv::rectangle(d.mask, cv::Rect(x0, y0, rw, rh), cv::Scalar(255), cv::FILLED);
    }
    return d;
}

void burn_defect(cv::Mat& img, const cv::Mat& mask, Rng& rng) {
    // strong offset toward white or black, alternating hue tint
    const bool bright = rng.uniform() < 0.5;
    const cv::Vec3d tint(rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0));
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) {
            if (!mask.at<std::uint8_t>(y, x)) continue;
            cv::Vec3b& px = img.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) {
                const double v = bright ? 255.0 * tint[c] : 255.0 * (1.0 - tint[c]);
                px[c] = static_cast<std::uint8_t>(std::clamp(0.15 * px[c] + 0.85 * v, 0.0, 255.0));
            }
        }
}

}  // namespace

int synth_generate(const SynthConfig& cfg, const std::string& root) {
    if (cfg.count < 0 || cfg.image_size < 8) throw ConfigError("synth: bad count or image size");
    Rng rng(cfg.seed);
    const int test_count = cfg.test_count >= 0 ? cfg.test_count : cfg.count;

    const fs::path pdir = fs::path(root) / cfg.product;
    int written = 0;
    // image stems are unique across splits so ground-truth masks never collide
    auto emit_split = [&](const std::string& split, int count, int first_index) {
        for (int k = 0; k < count; ++k) {
            const int i = first_index + k;
            const bool defective = (k % 2) == 1;  // half normal, half defective
            cv::Mat img = textured_background(rng, cfg.image_size);
            char name[32];
            std::snprintf(name, sizeof(name), "%03d.png", i);
            if (!defective) {
                const fs::path dir = pdir / split / "good";
                fs::create_directories(dir);
                cv::imwrite((dir / name).string(), img);
            } else {
                const std::string shape =
                    cfg.defect_shapes[static_cast<std::size_t>(rng.uniform_int(
                        0, static_cast<std::int64_t>(cfg.defect_shapes.size()) - 1))];
                Defect d = place_defect(rng, cfg.image_size, shape, cfg.min_area_fraction,
                                        cfg.max_area_fraction);
                burn_defect(img, d.mask, rng);
                const fs::path dir = pdir / split / "defect";
                const fs::path gtd = pdir / "ground_truth" / "defect";
                fs::create_directories(dir);
                fs::create_directories(gtd);
                cv::imwrite((dir / name).string(), img);
                char mname[40];
                std::snprintf(mname, sizeof(mname), "%03d_mask.png", i);
                cv::imwrite((gtd / mname).string(), d.mask);
            }
            ++written;
        }
    };
    emit_split("train", cfg.count, 0);
    emit_split("test", test_count, cfg.count);
    return written;
}

void write_gray_png(const std::string& path, const MatrixXd& values) {
    const double lo = values.minCoeff(), hi = values.maxCoeff();
    const double span = (hi > lo) ? (hi - lo) : 1.0;
    cv::Mat img(static_cast<int>(values.rows()), static_cast<int>(values.cols()), CV_8UC1);
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x)
            img.at<std::uint8_t>(y, x) =
                static_cast<std::uint8_t>(std::lround(255.0 * (values(y, x) - lo) / span));
    if (!cv::imwrite(path, img)) throw DataError("cannot write " + path);
}

void write_heatmap_png(const std::string& path, const MatrixXd& values) {
    const double lo = values.minCoeff(), hi = values.maxCoeff();
    const double span = (hi > lo) ? (hi - lo) : 1.0;
    cv::Mat gray(static_cast<int>(values.rows()), static_cast<int>(values.cols()), CV_8UC1);
    for (int y = 0; y < gray.rows; ++y)
        for (int x = 0; x < gray.cols; ++x)
            gray.at<std::uint8_t>(y, x) =
                static_cast<std::uint8_t>(std::lround(255.0 * (values(y, x) - lo) / span));
    cv::Mat color;
    cv::applyColorMap(gray, color, cv::COLORMAP_JET);
    if (!cv::imwrite(path, color)) throw DataError("cannot write " + path);
}

}  // namespace vcpseg
